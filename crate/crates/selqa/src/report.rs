//! Report assembly: nominal metrics, efficiency benchmarking, token
//! traces, and deterministic CSV/SVG emission.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::step_predict;
use crate::selective::SweepRow;
use crate::tensor::{softmax_slice, Tensor};
use crate::uq::{predict, ConvertedModel};

/// Nominal (full-coverage) accuracy of one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NominalRow {
    pub method: String,
    pub accuracy: f64,
    /// Exact-match rate for extractive tasks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
    /// Mean token F1 for extractive tasks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_f1: Option<f64>,
}

/// One efficiency row: parameter count and wall time relative to the
/// baseline method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub method: String,
    pub parameters: usize,
    pub relative_time: f64,
    pub median_seconds: f64,
    pub conversion_seconds: f64,
}

/// Everything a run report carries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<String>,
    pub nominal: Vec<NominalRow>,
    pub sweep: Vec<SweepRow>,
    pub efficiency: Vec<EfficiencyRow>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

/// Median wall time of `repetitions` timed prediction sweeps over the
/// batch, after two untimed warm-ups. Runs strictly sequentially.
fn timed_sweep(model: &ConvertedModel, batch: &[Tensor], master_seed: u64) -> Result<f64> {
    let start = Instant::now();
    for (i, x) in batch.iter().enumerate() {
        let _ = predict(model, x, master_seed, i as u64)?;
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Benchmarks inference cost per converted model against the first
/// baseline-variant entry. Parameter counts are exact; times are medians
/// over at least five repetitions, after two warm-up sweeps.
/// Repetitions are interleaved round-robin across models so external
/// stalls hit every model alike and cancel out of the ratios.
pub fn efficiency_bench(
    models: &[(String, &ConvertedModel)],
    batch: &[Tensor],
    repetitions: usize,
    master_seed: u64,
) -> Result<Vec<EfficiencyRow>> {
    if repetitions < 5 {
        return Err(Error::InvalidSpec("efficiency bench needs >= 5 repetitions".into()));
    }
    if batch.is_empty() {
        return Err(Error::InvalidSpec("efficiency bench needs a non-empty batch".into()));
    }
    let baseline_index = models
        .iter()
        .position(|(_, m)| matches!(m.method, crate::uq::UqMethod::Baseline))
        .ok_or_else(|| Error::InvalidSpec("efficiency bench needs a baseline model".into()))?;

    let mut times: Vec<Vec<f64>> = vec![Vec::with_capacity(repetitions); models.len()];
    for rep in 0..repetitions + 2 {
        for (mi, (_, model)) in models.iter().enumerate() {
            let elapsed = timed_sweep(model, batch, master_seed)?;
            if rep >= 2 {
                times[mi].push(elapsed);
            }
        }
    }
    let medians: Vec<f64> = times
        .iter_mut()
        .map(|t| {
            t.sort_by(|a, b| a.partial_cmp(b).unwrap());
            t[t.len() / 2]
        })
        .collect();
    let base_median = medians[baseline_index];

    Ok(models
        .iter()
        .enumerate()
        .map(|(mi, (name, model))| EfficiencyRow {
            method: name.clone(),
            parameters: model.count_params(),
            relative_time: if mi == baseline_index {
                1.0
            } else {
                medians[mi] / base_median
            },
            median_seconds: medians[mi],
            conversion_seconds: model.manifest.conversion_seconds,
        })
        .collect())
}

/// One candidate in a token trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub token: u32,
    pub probability: f64,
    pub sigma: f64,
}

/// Per-step trace record: the greedy prefix so far, the top-k candidates
/// by probability (each with its own per-class sigma component) and the
/// vocabulary-sum step uncertainty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenTraceRecord {
    pub step: usize,
    pub prefix: Vec<u32>,
    pub candidates: Vec<CandidateRecord>,
    pub sigma_t: f64,
}

/// Greedy-decodes `steps` tokens, recording the top-k candidates and
/// step uncertainty at every position.
pub fn token_trace(
    model: &ConvertedModel,
    prompt: &[u32],
    steps: usize,
    k: usize,
    vocab_size: usize,
    master_seed: u64,
    example_id: u64,
) -> Result<Vec<TokenTraceRecord>> {
    if k > vocab_size {
        return Err(Error::InvalidSpec(format!(
            "top-k {k} exceeds vocab size {vocab_size}"
        )));
    }
    if prompt.len() < 2 {
        return Err(Error::InvalidSpec("trace needs a prompt of at least two tokens".into()));
    }
    let mut prefix = prompt.to_vec();
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        let (a, b) = (prefix[prefix.len() - 2], prefix[prefix.len() - 1]);
        let out = step_predict(model, a, b, vocab_size, master_seed, example_id, 0, step as u64)?;
        let probs = softmax_slice(out.output.mu.row_slice(0));
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|x, y| {
            probs[*y]
                .partial_cmp(&probs[*x])
                .unwrap()
                .then(x.cmp(y))
        });
        let candidates: Vec<CandidateRecord> = order
            .iter()
            .take(k)
            .map(|&t| CandidateRecord {
                token: t as u32,
                probability: probs[t],
                sigma: out.output.sigma_vec.data()[t],
            })
            .collect();
        let next = out.output.predicted as u32;
        records.push(TokenTraceRecord {
            step,
            prefix: prefix.clone(),
            candidates,
            sigma_t: out.sigma_t,
        });
        prefix.push(next);
    }
    Ok(records)
}

fn fmt_float(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn fmt_opt(v: &Option<f64>) -> String {
    match v {
        Some(v) => fmt_float(*v),
        None => String::new(),
    }
}

/// Sweep table in the selective-accuracy layout: percentile, coverage,
/// one accuracy column per method. Empty cells mark levels where a
/// method answered nothing.
pub fn sweep_csv(methods: &[String], rows: &[SweepRow]) -> String {
    let mut out = String::from("percentile,coverage");
    for m in methods {
        out.push(',');
        out.push_str(m);
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{}", row.percentile, fmt_float(row.coverage)));
        for acc in &row.accuracy {
            out.push(',');
            out.push_str(&fmt_opt(acc));
        }
        out.push('\n');
    }
    out
}

/// Parses a sweep CSV back into rows; the emit/parse pair must
/// round-trip exactly.
pub fn parse_sweep_csv(text: &str) -> Result<(Vec<String>, Vec<SweepRow>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidSpec("empty sweep csv".into()))?;
    let mut cols = header.split(',');
    if cols.next() != Some("percentile") || cols.next() != Some("coverage") {
        return Err(Error::InvalidSpec("sweep csv header mismatch".into()));
    }
    let methods: Vec<String> = cols.map(str::to_string).collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let percentile: f64 = parts
            .next()
            .ok_or_else(|| Error::InvalidSpec("short sweep row".into()))?
            .parse()
            .map_err(|_| Error::InvalidSpec("bad percentile".into()))?;
        let coverage: f64 = parts
            .next()
            .ok_or_else(|| Error::InvalidSpec("short sweep row".into()))?
            .parse()
            .map_err(|_| Error::InvalidSpec("bad coverage".into()))?;
        let accuracy: Vec<Option<f64>> = parts
            .map(|cell| {
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse().map(Some).map_err(|_| Error::InvalidSpec("bad accuracy".into()))
                }
            })
            .collect::<Result<_>>()?;
        rows.push(SweepRow {
            percentile,
            coverage,
            accuracy,
        });
    }
    Ok((methods, rows))
}

/// Efficiency table in the benchmark layout.
pub fn efficiency_csv(rows: &[EfficiencyRow]) -> String {
    let mut out = String::from("method,parameters,relative_time,median_seconds,conversion_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method,
            r.parameters,
            fmt_float(r.relative_time),
            fmt_float(r.median_seconds),
            fmt_float(r.conversion_seconds),
        ));
    }
    out
}

const SVG_WIDTH: f64 = 640.0;
const SVG_HEIGHT: f64 = 420.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn svg_header(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" ",
            "font-size=\"14\">{title}</text>\n"
        ),
        w = SVG_WIDTH,
        h = SVG_HEIGHT,
        tx = SVG_WIDTH / 2.0,
        title = title,
    )
}

fn svg_axes(x_label: &str, y_label: &str) -> String {
    let x0 = MARGIN;
    let y0 = SVG_HEIGHT - MARGIN;
    let x1 = SVG_WIDTH - MARGIN;
    let y1 = MARGIN;
    format!(
        concat!(
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n",
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n",
            "<text x=\"{xm}\" y=\"{yb}\" text-anchor=\"middle\" font-family=\"sans-serif\" ",
            "font-size=\"12\">{xl}</text>\n",
            "<text x=\"14\" y=\"{ym}\" text-anchor=\"middle\" font-family=\"sans-serif\" ",
            "font-size=\"12\" transform=\"rotate(-90 14 {ym})\">{yl}</text>\n"
        ),
        x0 = x0,
        y0 = y0,
        x1 = x1,
        y1 = y1,
        xm = (x0 + x1) / 2.0,
        yb = SVG_HEIGHT - 12.0,
        xl = x_label,
        ym = (y0 + y1) / 2.0,
        yl = y_label,
    )
}

fn to_px(x: f64, x_min: f64, x_max: f64, y: f64) -> (f64, f64) {
    let px = MARGIN + (x - x_min) / (x_max - x_min).max(1e-12) * (SVG_WIDTH - 2.0 * MARGIN);
    let py = (SVG_HEIGHT - MARGIN) - y.clamp(0.0, 1.0) * (SVG_HEIGHT - 2.0 * MARGIN);
    (px, py)
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let coords: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect();
    format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
        coords.join(" ")
    )
}

fn legend(names: &[String]) -> String {
    let mut out = String::new();
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        out.push_str(&format!(
            concat!(
                "<rect x=\"{x}\" y=\"{ry}\" width=\"10\" height=\"10\" fill=\"{c}\"/>\n",
                "<text x=\"{tx}\" y=\"{ty}\" font-family=\"sans-serif\" font-size=\"11\">{n}</text>\n"
            ),
            x = SVG_WIDTH - MARGIN - 110.0,
            ry = y,
            c = color,
            tx = SVG_WIDTH - MARGIN - 96.0,
            ty = y + 9.0,
            n = name,
        ));
    }
    out
}

/// Accuracy-versus-percentile plot, one polyline per method.
pub fn accuracy_svg(methods: &[String], rows: &[SweepRow]) -> String {
    let mut out = svg_header("Selective accuracy by confidence percentile");
    out.push_str(&svg_axes("confidence percentile", "selective accuracy"));
    for (mi, name) in methods.iter().enumerate() {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.accuracy[mi].map(|a| to_px(r.percentile, 0.0, 100.0, a)))
            .collect();
        if !points.is_empty() {
            out.push_str(&polyline(&points, PALETTE[mi % PALETTE.len()]));
        }
        let _ = name;
    }
    out.push_str(&legend(methods));
    out.push_str("</svg>\n");
    out
}

/// Risk-coverage plot, one polyline per method.
pub fn risk_coverage_svg(methods: &[String], curves: &[Vec<(f64, f64)>]) -> String {
    let mut out = svg_header("Risk vs coverage");
    out.push_str(&svg_axes("coverage", "risk"));
    for (mi, curve) in curves.iter().enumerate() {
        let points: Vec<(f64, f64)> = curve
            .iter()
            .map(|(cov, risk)| to_px(*cov, 0.0, 1.0, *risk))
            .collect();
        if !points.is_empty() {
            out.push_str(&polyline(&points, PALETTE[mi % PALETTE.len()]));
        }
    }
    out.push_str(&legend(methods));
    out.push_str("</svg>\n");
    out
}

/// Writes the report artifacts: sweep CSV, efficiency CSV, the accuracy
/// plot and the risk-coverage plot. Byte-deterministic for a given
/// report.
pub fn emit_outputs(
    dir: &Path,
    report: &EvalReport,
    risk_curves: &[Vec<(f64, f64)>],
) -> Result<Vec<std::path::PathBuf>> {
    if report.methods.is_empty() {
        return Err(Error::InvalidSpec("report has no methods".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let write = |name: &str, content: &str| -> Result<std::path::PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    };
    Ok(vec![
        write("sweep.csv", &sweep_csv(&report.methods, &report.sweep))?,
        write("efficiency.csv", &efficiency_csv(&report.efficiency))?,
        write("accuracy_vs_percentile.svg", &accuracy_svg(&report.methods, &report.sweep))?,
        write("risk_coverage.svg", &risk_coverage_svg(&report.methods, risk_curves))?,
        write("report.json", &format!("{}\n", serde_json::to_string_pretty(report)?))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, ParamStore};
    use crate::uq::{convert, UqMethod};

    fn chain_model(vocab: usize, margin: f64) -> ConvertedModel {
        let spec = ModelSpec::new(2 * vocab, vec![], vec![vocab]).unwrap();
        let mut params = ParamStore::new();
        let mut w = Tensor::zeros(2 * vocab, vocab);
        for b in 0..vocab {
            w.set(vocab + b, (b + 1) % vocab, margin);
        }
        params.insert("head0.weight", w).unwrap();
        params.insert("head0.bias", Tensor::zeros(1, vocab)).unwrap();
        convert(&spec, &params, UqMethod::Baseline, 0).unwrap()
    }

    #[test]
    fn deterministic_chain_trace_has_certain_steps() {
        // Hard-margin table model: top-1 probability 1 within 1e-9 and
        // zero step uncertainty without dropout.
        let model = chain_model(8, 1000.0);
        let trace = token_trace(&model, &[0, 1], 4, 3, 8, 7, 0).unwrap();
        for rec in &trace {
            assert!((rec.candidates[0].probability - 1.0).abs() < 1e-9);
            assert_eq!(rec.sigma_t, 0.0);
        }
        assert_eq!(trace.len(), 4);
    }

    #[test]
    fn full_vocab_candidates_sum_to_one() {
        let model = chain_model(8, 3.0);
        let trace = token_trace(&model, &[2, 3], 2, 8, 8, 7, 0).unwrap();
        for rec in &trace {
            let sum: f64 = rec.candidates.iter().map(|c| c.probability).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            // Sorted descending.
            for w in rec.candidates.windows(2) {
                assert!(w[0].probability >= w[1].probability);
            }
        }
    }

    #[test]
    fn top_k_exceeding_vocab_rejected() {
        let model = chain_model(8, 3.0);
        assert!(token_trace(&model, &[0, 1], 2, 9, 8, 7, 0).is_err());
    }

    #[test]
    fn sweep_csv_round_trips() {
        let methods = vec!["baseline".to_string(), "mve".to_string()];
        let rows = vec![
            SweepRow {
                percentile: 0.0,
                coverage: 1.0,
                accuracy: vec![Some(0.75), Some(0.8)],
            },
            SweepRow {
                percentile: 99.9,
                coverage: 0.001,
                accuracy: vec![None, Some(1.0)],
            },
        ];
        let text = sweep_csv(&methods, &rows);
        let (m2, r2) = parse_sweep_csv(&text).unwrap();
        assert_eq!(m2, methods);
        assert_eq!(r2.len(), rows.len());
        for (a, b) in rows.iter().zip(&r2) {
            assert_eq!(a.percentile, b.percentile);
            assert_eq!(a.coverage, b.coverage);
            assert_eq!(a.accuracy, b.accuracy);
        }
        assert_eq!(text.lines().count(), rows.len() + 1);
    }

    #[test]
    fn svg_emission_is_deterministic() {
        let methods = vec!["a".to_string(), "b".to_string()];
        let rows = vec![SweepRow {
            percentile: 50.0,
            coverage: 0.5,
            accuracy: vec![Some(0.9), Some(0.7)],
        }];
        assert_eq!(accuracy_svg(&methods, &rows), accuracy_svg(&methods, &rows));
        let curves = vec![vec![(0.5, 0.1), (1.0, 0.2)]];
        assert_eq!(
            risk_coverage_svg(&methods, &curves),
            risk_coverage_svg(&methods, &curves)
        );
    }

    #[test]
    fn empty_method_set_rejected() {
        let report = EvalReport {
            methods: vec![],
            nominal: vec![],
            sweep: vec![],
            efficiency: vec![],
            seeds: vec![],
            config_hash: String::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_outputs(dir.path(), &report, &[]).is_err());
    }
}
