//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Forward operations are recorded on a tape; `backward` walks the tape in
//! reverse and accumulates gradients. The op set is the minimum a
//! feed-forward classifier with reparameterized logit sampling needs:
//! matrix products, bias broadcast, ReLU, elementwise arithmetic against
//! constants and other nodes, exp with a clamp, softmax rows and fused
//! softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{softmax_slice, Tensor, PROB_FLOOR};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// a (m x n) * b (n x k)
    MatMul(Var, Var),
    /// a + row-broadcast bias
    AddBias(Var, Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// elementwise product of two nodes
    Mul(Var, Var),
    /// elementwise product with a constant tensor (dropout masks, noise)
    MulConst(Var, Tensor),
    Scale(Var, f64),
    /// exp(x) clamped to [lo, hi]; gradient is gated off where clamped
    ExpClamp(Var, f64, f64),
    /// row-wise softmax
    SoftmaxRows(Var),
    /// -ln p[label] per row of a probability matrix, output is rows x 1
    NegLogRows(Var, Vec<usize>),
    /// fused stable softmax + cross-entropy per row, output is rows x 1
    SoftmaxXentRows(Var, Vec<usize>),
    /// elementwise mean of same-shaped nodes
    MeanVars(Vec<Var>),
    /// mean of all elements, output 1 x 1
    MeanAll(Var),
    /// sum of all elements, output 1 x 1
    SumAll(Var),
    Transpose(Var),
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

/// Records a forward computation and differentiates it in reverse.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let (r, c) = value.shape();
        self.nodes.push(Node {
            value,
            grad: Tensor::zeros(r, c),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row_broadcast(self.value(bias))?;
        Ok(self.push(value, Op::AddBias(a, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn mul_const(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let value = self.value(a).hadamard(mask)?;
        Ok(self.push(value, Op::MulConst(a, mask.clone())))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    /// `exp` clamped to `[lo, hi]`; where the clamp binds, the local
    /// derivative is zero.
    pub fn exp_clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.exp().clamp(lo, hi));
        self.push(value, Op::ExpClamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = Tensor::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            let p = softmax_slice(src.row_slice(r));
            for (c, v) in p.iter().enumerate() {
                out.set(r, c, *v);
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// `-ln max(p[label], floor)` per row; input must hold probabilities.
    pub fn neg_log_rows(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let src = self.value(p);
        self.check_labels(src, labels)?;
        let mut out = Tensor::zeros(src.rows(), 1);
        for (r, &label) in labels.iter().enumerate() {
            out.set(r, 0, -(src.get(r, label).max(PROB_FLOOR)).ln());
        }
        Ok(self.push(out, Op::NegLogRows(p, labels.to_vec())))
    }

    /// Stable fused softmax + cross-entropy per row of a logit matrix.
    pub fn softmax_xent_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let src = self.value(logits);
        self.check_labels(src, labels)?;
        let mut out = Tensor::zeros(src.rows(), 1);
        for (r, &label) in labels.iter().enumerate() {
            let row = src.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.set(r, 0, lse - row[label]);
        }
        Ok(self.push(out, Op::SoftmaxXentRows(logits, labels.to_vec())))
    }

    /// Elementwise mean of same-shaped nodes.
    pub fn mean_vars(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::InvalidSpec("mean_vars over no nodes".into()));
        }
        let shape = self.value(vars[0]).shape();
        let mut acc = Tensor::zeros(shape.0, shape.1);
        for v in vars {
            acc = acc.add(self.value(*v))?;
        }
        let value = acc.scale(1.0 / vars.len() as f64);
        Ok(self.push(value, Op::MeanVars(vars.to_vec())))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let value = Tensor::filled(1, 1, self.value(a).mean());
        self.push(value, Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::filled(1, 1, self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    fn check_labels(&self, src: &Tensor, labels: &[usize]) -> Result<()> {
        if labels.len() != src.rows() {
            return Err(Error::shape(
                "labels",
                format!("{} rows", src.rows()),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= src.cols()) {
            return Err(Error::InvalidSpec(format!(
                "label {bad} out of range for {} classes",
                src.cols()
            )));
        }
        Ok(())
    }

    /// Runs reverse accumulation from a scalar loss node. Every node's
    /// gradient is filled; leaves that did not contribute keep zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::shape(
                "backward",
                "scalar 1x1 loss".to_string(),
                format!("{}x{}", shape.0, shape.1),
            ));
        }
        for node in &mut self.nodes {
            let (r, c) = node.grad.shape();
            node.grad = Tensor::zeros(r, c);
        }
        self.nodes[loss.0].grad = Tensor::filled(1, 1, 1.0);

        for i in (0..self.nodes.len()).rev() {
            // Parents always precede children on the tape.
            let (parents, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let grad = node.grad.clone();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&parents[a.0].value, &parents[b.0].value);
                    let ga = grad.matmul(&bv.transpose())?;
                    let gb = av.transpose().matmul(&grad)?;
                    if a.0 == b.0 {
                        let g = ga.add(&gb)?;
                        accumulate(&mut parents[a.0].grad, &g)?;
                    } else {
                        accumulate(&mut parents[a.0].grad, &ga)?;
                        accumulate(&mut parents[b.0].grad, &gb)?;
                    }
                }
                Op::AddBias(a, bias) => {
                    accumulate(&mut parents[a.0].grad, &grad)?;
                    let mut col_sums = Tensor::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        for c in 0..grad.cols() {
                            col_sums.set(0, c, col_sums.get(0, c) + grad.get(r, c));
                        }
                    }
                    accumulate(&mut parents[bias.0].grad, &col_sums)?;
                }
                Op::Relu(a) => {
                    let gated = parents[a.0]
                        .value
                        .zip_with(&grad, |x, g| if x > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut parents[a.0].grad, &gated)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut parents[a.0].grad, &grad)?;
                    accumulate(&mut parents[b.0].grad, &grad)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut parents[a.0].grad, &grad)?;
                    let neg = grad.scale(-1.0);
                    accumulate(&mut parents[b.0].grad, &neg)?;
                }
                Op::Mul(a, b) => {
                    let ga = parents[b.0].value.hadamard(&grad)?;
                    let gb = parents[a.0].value.hadamard(&grad)?;
                    if a.0 == b.0 {
                        let g = ga.add(&gb)?;
                        accumulate(&mut parents[a.0].grad, &g)?;
                    } else {
                        accumulate(&mut parents[a.0].grad, &ga)?;
                        accumulate(&mut parents[b.0].grad, &gb)?;
                    }
                }
                Op::MulConst(a, mask) => {
                    let g = grad.hadamard(mask)?;
                    accumulate(&mut parents[a.0].grad, &g)?;
                }
                Op::Scale(a, c) => {
                    let g = grad.scale(*c);
                    accumulate(&mut parents[a.0].grad, &g)?;
                }
                Op::ExpClamp(a, lo, hi) => {
                    // d/dx exp(x) = exp(x) = the clamped output where the
                    // clamp is inactive, zero where it binds.
                    let g = node.value.zip_with(&grad, |y, g| {
                        if y > *lo && y < *hi {
                            y * g
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut parents[a.0].grad, &g)?;
                }
                Op::SoftmaxRows(a) => {
                    // Jacobian-vector product per row: p * (g - <g, p>).
                    let p = &node.value;
                    let mut g_in = Tensor::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let dot: f64 = (0..p.cols()).map(|c| grad.get(r, c) * p.get(r, c)).sum();
                        for c in 0..p.cols() {
                            g_in.set(r, c, p.get(r, c) * (grad.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut parents[a.0].grad, &g_in)?;
                }
                Op::NegLogRows(p, labels) => {
                    let pv = &parents[p.0].value;
                    let mut g_in = Tensor::zeros(pv.rows(), pv.cols());
                    for (r, &label) in labels.iter().enumerate() {
                        let val = pv.get(r, label);
                        if val > PROB_FLOOR {
                            g_in.set(r, label, -grad.get(r, 0) / val);
                        }
                    }
                    accumulate(&mut parents[p.0].grad, &g_in)?;
                }
                Op::SoftmaxXentRows(logits, labels) => {
                    let lv = &parents[logits.0].value;
                    let mut g_in = Tensor::zeros(lv.rows(), lv.cols());
                    for (r, &label) in labels.iter().enumerate() {
                        let p = softmax_slice(lv.row_slice(r));
                        let g = grad.get(r, 0);
                        for c in 0..lv.cols() {
                            let indicator = if c == label { 1.0 } else { 0.0 };
                            g_in.set(r, c, g * (p[c] - indicator));
                        }
                    }
                    accumulate(&mut parents[logits.0].grad, &g_in)?;
                }
                Op::MeanVars(vars) => {
                    let g = grad.scale(1.0 / vars.len() as f64);
                    for v in vars {
                        accumulate(&mut parents[v.0].grad, &g)?;
                    }
                }
                Op::MeanAll(a) => {
                    let n = parents[a.0].value.len() as f64;
                    let g = Tensor::filled(
                        parents[a.0].value.rows(),
                        parents[a.0].value.cols(),
                        grad.get(0, 0) / n,
                    );
                    accumulate(&mut parents[a.0].grad, &g)?;
                }
                Op::SumAll(a) => {
                    let g = Tensor::filled(
                        parents[a.0].value.rows(),
                        parents[a.0].value.cols(),
                        grad.get(0, 0),
                    );
                    accumulate(&mut parents[a.0].grad, &g)?;
                }
                Op::Transpose(a) => {
                    let g = grad.transpose();
                    accumulate(&mut parents[a.0].grad, &g)?;
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn accumulate(grad: &mut Tensor, delta: &Tensor) -> Result<()> {
    *grad = grad.add(delta)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_identity_parameter_is_one() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::filled(1, 1, 3.5));
        let loss = tape.sum_all(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).get(0, 0), 1.0);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_param() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::row(&[1.0, -2.0, 0.5]));
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::row(&[1.0, 2.0]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut tape = Tape::new();
        let used = tape.leaf(Tensor::filled(1, 1, 2.0));
        let unused = tape.leaf(Tensor::filled(1, 1, 7.0));
        let loss = tape.sum_all(used);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).get(0, 0), 0.0);
    }

    #[test]
    fn softmax_xent_matches_composed_ops() {
        let logits = Tensor::row(&[0.3, -1.2, 2.0]);
        let mut t1 = Tape::new();
        let l1 = t1.leaf(logits.clone());
        let fused = t1.softmax_xent_rows(l1, &[2]).unwrap();
        let loss1 = t1.mean_all(fused);
        t1.backward(loss1).unwrap();

        let mut t2 = Tape::new();
        let l2 = t2.leaf(logits);
        let p = t2.softmax_rows(l2);
        let nl = t2.neg_log_rows(p, &[2]).unwrap();
        let loss2 = t2.mean_all(nl);
        t2.backward(loss2).unwrap();

        assert!((t1.value(loss1).get(0, 0) - t2.value(loss2).get(0, 0)).abs() < 1e-12);
        for (a, b) in t1.grad(l1).data().iter().zip(t2.grad(l2).data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    /// Central finite differences against the analytic gradient for a small
    /// composite expression exercising most ops.
    #[test]
    fn finite_difference_check_on_composite_graph() {
        let base = vec![0.4, -0.3, 0.9, 0.1, -0.8, 0.25];
        let mask = Tensor::new(1, 3, vec![2.0, 0.0, 1.0]).unwrap();

        let eval = |vals: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let w = tape.leaf(Tensor::new(2, 3, vals.to_vec()).unwrap());
            let x = tape.leaf(Tensor::row(&[1.2, -0.7]));
            let b = tape.leaf(Tensor::row(&[0.05, -0.02, 0.1]));
            let h = tape.matmul(x, w).unwrap();
            let h = tape.add_bias(h, b).unwrap();
            let h = tape.relu(h);
            let h = tape.mul_const(h, &mask).unwrap();
            let e = tape.exp_clamp(h, 1e-6, 1e3);
            let s = tape.softmax_rows(e);
            let nl = tape.neg_log_rows(s, &[0]).unwrap();
            let loss = tape.mean_all(nl);
            tape.backward(loss).unwrap();
            (tape.value(loss).get(0, 0), Some(tape.grad(w).data().to_vec()))
        };

        let (_, grads) = eval(&base);
        let grads = grads.unwrap();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let denom = fd.abs().max(grads[i].abs()).max(1e-8);
            assert!(
                (fd - grads[i]).abs() / denom < 1e-5,
                "param {i}: fd {fd} vs analytic {}",
                grads[i]
            );
        }
    }
}
