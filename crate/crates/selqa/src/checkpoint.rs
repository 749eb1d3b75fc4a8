//! Checkpoint persistence: a JSON manifest plus sidecar blobs of
//! little-endian 64-bit floats in manifest order. Loads verify blob
//! hashes and are bit-exact round trips.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamStore};
use crate::tasks::hex_string;
use crate::tensor::Tensor;
use crate::uq::{CalibrationStats, ConversionManifest, ConvertedModel, UqMethod};

/// One tensor's placement inside a blob. Offsets are in bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// One parameter file: ensemble members get one each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobManifest {
    pub file: String,
    pub sha256: String,
    pub params: Vec<ParamEntry>,
}

/// The checkpoint manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec: ModelSpec,
    pub method: UqMethod,
    pub seed: u64,
    pub conversion: ConversionManifest,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationStats>,
    pub blobs: Vec<BlobManifest>,
}

fn store_to_blob(store: &ParamStore) -> (Vec<u8>, Vec<ParamEntry>) {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for p in store.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            offset: bytes.len(),
        });
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (bytes, entries)
}

fn blob_to_store(bytes: &[u8], entries: &[ParamEntry], file: &str) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for e in entries {
        let len = e.rows * e.cols * 8;
        let end = e.offset + len;
        if end > bytes.len() {
            return Err(Error::ChecksumMismatch {
                path: file.to_string(),
                expected: format!("{} bytes for {}", end, e.name),
                got: format!("{} bytes", bytes.len()),
            });
        }
        let mut data = Vec::with_capacity(e.rows * e.cols);
        for chunk in bytes[e.offset..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let tensor = Tensor::new(e.rows, e.cols, data)?;
        store.insert(e.name.clone(), tensor)?;
    }
    Ok(store)
}

fn write_blob(dir: &Path, file: &str, bytes: &[u8]) -> Result<String> {
    let path = dir.join(file);
    std::fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(hex_string(&Sha256::digest(bytes)))
}

/// Saves a converted model under `dir`: `manifest.json` plus `params.bin`
/// or one `member_XX.bin` per ensemble member.
pub fn save_checkpoint(dir: &Path, model: &ConvertedModel, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut blobs = Vec::new();
    if model.members.is_empty() {
        let (bytes, params) = store_to_blob(&model.params);
        let sha256 = write_blob(dir, "params.bin", &bytes)?;
        blobs.push(BlobManifest {
            file: "params.bin".into(),
            sha256,
            params,
        });
    } else {
        for (i, member) in model.members.iter().enumerate() {
            let file = format!("member_{i:02}.bin");
            let (bytes, params) = store_to_blob(member);
            let sha256 = write_blob(dir, &file, &bytes)?;
            blobs.push(BlobManifest {
                file,
                sha256,
                params,
            });
        }
    }
    let manifest = CheckpointManifest {
        spec: model.spec.clone(),
        method: model.method,
        seed,
        conversion: model.manifest.clone(),
        calibration: model.calibration.clone(),
        blobs,
    };
    let path = dir.join("manifest.json");
    let json = format!("{}\n", serde_json::to_string_pretty(&manifest)?);
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Loads and verifies a checkpoint. Every blob's hash must match its
/// manifest entry.
pub fn load_checkpoint(dir: &Path) -> Result<(ConvertedModel, u64)> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    manifest.spec.validate()?;

    let mut stores = Vec::new();
    for blob in &manifest.blobs {
        let path = dir.join(&blob.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let digest = hex_string(&Sha256::digest(&bytes));
        if digest != blob.sha256 {
            return Err(Error::ChecksumMismatch {
                path: path.display().to_string(),
                expected: blob.sha256.clone(),
                got: digest,
            });
        }
        stores.push(blob_to_store(&bytes, &blob.params, &blob.file)?);
    }

    let (params, members) = if matches!(manifest.method, UqMethod::Ensemble { .. }) {
        (ParamStore::new(), stores)
    } else {
        let mut it = stores.into_iter();
        (
            it.next()
                .ok_or_else(|| Error::MissingArtifact(format!("{}: no blobs", dir.display())))?,
            Vec::new(),
        )
    };
    Ok((
        ConvertedModel {
            spec: manifest.spec,
            method: manifest.method,
            params,
            members,
            calibration: manifest.calibration,
            manifest: manifest.conversion,
        },
        manifest.seed,
    ))
}

/// Directory for one method's checkpoint inside a run.
pub fn checkpoint_dir(train_dir: &Path, method_name: &str) -> PathBuf {
    train_dir.join(format!("model_{method_name}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, LayerSpec, ModelSpec};
    use crate::rng::RngStream;
    use crate::uq::convert;

    fn spec() -> ModelSpec {
        ModelSpec::new(
            3,
            vec![LayerSpec::Linear { inputs: 3, outputs: 4 }, LayerSpec::Relu],
            vec![2],
        )
        .unwrap()
    }

    #[test]
    fn baseline_round_trip_is_bit_exact() {
        let s = spec();
        let base = init_params(&s, 5).unwrap();
        let model = convert(&s, &base, UqMethod::Baseline, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, 5).unwrap();
        let (loaded, seed) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(seed, 5);
        let x = Tensor::row(&[0.1, -0.8, 0.4]);
        let mut rng = RngStream::new(0, 0);
        let a = crate::model::model_forward(&model.params, &model.spec, &x, false, &mut rng).unwrap();
        let b = crate::model::model_forward(&loaded.params, &loaded.spec, &x, false, &mut rng).unwrap();
        assert_eq!(a[0].data(), b[0].data());
    }

    #[test]
    fn corrupted_blob_byte_rejected() {
        let s = spec();
        let base = init_params(&s, 6).unwrap();
        let model = convert(&s, &base, UqMethod::Baseline, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, 6).unwrap();
        let blob = dir.path().join("params.bin");
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[3] ^= 0xff;
        std::fs::write(&blob, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn truncated_blob_rejected() {
        let s = spec();
        let base = init_params(&s, 8).unwrap();
        let model = convert(&s, &base, UqMethod::Baseline, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, 8).unwrap();
        let blob = dir.path().join("params.bin");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn ensemble_checkpoint_verifies_every_member() {
        let s = spec();
        let base = init_params(&s, 7).unwrap();
        let model = convert(&s, &base, UqMethod::Ensemble { members: 3 }, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, 7).unwrap();
        let (loaded, _) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.members.len(), 3);
        for (a, b) in model.members.iter().zip(&loaded.members) {
            for (pa, pb) in a.iter().zip(b.iter()) {
                assert_eq!(pa.value.data(), pb.value.data());
            }
        }
        // Corrupt one member: load must fail.
        let blob = dir.path().join("member_01.bin");
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&blob, bytes).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn calibration_stats_persist() {
        let s = spec();
        let base = init_params(&s, 9).unwrap();
        let mut model = convert(&s, &base, UqMethod::Composed { passes: 5, rate: 0.2 }, 9).unwrap();
        model.calibration = Some(CalibrationStats {
            aleatoric_mean: 1.0,
            aleatoric_std: 0.5,
            epistemic_mean: 2.0,
            epistemic_std: 0.25,
        });
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, 9).unwrap();
        let (loaded, _) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.calibration, model.calibration);
    }
}
