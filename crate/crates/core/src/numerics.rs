//! Dense linear algebra, activations, Adam updates and a finite-difference
//! gradient checker. Everything is `f64` and deterministic for a fixed seed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in parameter block '{0}'")]
    NonFiniteGradient(String),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::ShapeMismatch(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn add_bias(&self, bias: &[f64]) -> Result<Matrix, NumericsError> {
        if bias.len() != self.cols {
            return Err(NumericsError::ShapeMismatch(format!(
                "add_bias: {} cols vs bias len {}",
                self.cols,
                bias.len()
            )));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for j in 0..out.cols {
                out.data[i * out.cols + j] += bias[j];
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn elementwise_mul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NumericsError::ShapeMismatch("elementwise_mul".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh_vec(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v.tanh();
    }
}

pub fn sigmoid_vec(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = sigmoid(v);
    }
}

/// Max-shifted softmax over one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// y += W x  (W is rows x cols row-major, x has cols entries, y has rows entries)
pub fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        y[i] += acc;
    }
}

/// x_grad += W^T y  (backprop through y = W x)
pub fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, y: &[f64], x_grad: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(x_grad.len(), cols);
    for i in 0..rows {
        let yi = y[i];
        if yi == 0.0 {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (g, a) in x_grad.iter_mut().zip(row) {
            *g += yi * a;
        }
    }
}

/// w_grad += y ⊗ x  (outer product accumulation for dW of y = W x)
pub fn outer_acc(w_grad: &mut [f64], rows: usize, cols: usize, y: &[f64], x: &[f64]) {
    debug_assert_eq!(w_grad.len(), rows * cols);
    for i in 0..rows {
        let yi = y[i];
        if yi == 0.0 {
            continue;
        }
        let row = &mut w_grad[i * cols..(i + 1) * cols];
        for (g, b) in row.iter_mut().zip(x) {
            *g += yi * b;
        }
    }
}

/// One named parameter block inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All trainable parameters as one flat vector with a block registry.
/// Gradients live in a parallel flat vector with identical layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub blocks: Vec<BlockInfo>,
    pub data: Vec<f64>,
}

pub type BlockId = usize;

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { blocks: Vec::new(), data: Vec::new() }
    }

    pub fn add_block(&mut self, name: &str, rows: usize, cols: usize) -> BlockId {
        let offset = self.data.len();
        self.data.resize(offset + rows * cols, 0.0);
        self.blocks.push(BlockInfo { name: name.to_string(), offset, rows, cols });
        self.blocks.len() - 1
    }

    pub fn block(&self, id: BlockId) -> &[f64] {
        let b = &self.blocks[id];
        &self.data[b.offset..b.offset + b.len()]
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut [f64] {
        let b = self.blocks[id].clone();
        &mut self.data[b.offset..b.offset + b.len()]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    /// Slice a block out of an external flat vector with this set's layout.
    pub fn block_of<'a>(&self, data: &'a [f64], id: BlockId) -> &'a [f64] {
        let b = &self.blocks[id];
        &data[b.offset..b.offset + b.len()]
    }

    pub fn block_of_mut<'a>(&self, data: &'a mut [f64], id: BlockId) -> &'a mut [f64] {
        let b = &self.blocks[id];
        &mut data[b.offset..b.offset + b.len()]
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam accumulators for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }
}

/// Bias-corrected Adam update in place. Gradients are validated per block so a
/// blown-up block can be named in the error.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[f64],
    state: &mut AdamState,
) -> Result<(), NumericsError> {
    if grads.len() != params.data.len() {
        return Err(NumericsError::ShapeMismatch(format!(
            "adam_step: {} grads vs {} params",
            grads.len(),
            params.data.len()
        )));
    }
    for b in &params.blocks {
        if grads[b.offset..b.offset + b.len()].iter().any(|g| !g.is_finite()) {
            return Err(NumericsError::NonFiniteGradient(b.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for i in 0..params.data.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.data[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Per-block result of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckBlock {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<GradCheckBlock>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compare analytic gradients against central finite differences, per block.
/// `loss_fn` must be deterministic; it is evaluated at perturbed copies of
/// `params`. Step size is relative: h = 1e-5 * max(1, |p|).
pub fn gradient_check(
    loss_fn: &mut dyn FnMut(&ParamSet) -> f64,
    params: &ParamSet,
    analytic: &[f64],
) -> GradCheckReport {
    assert_eq!(analytic.len(), params.data.len());
    let mut work = params.clone();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    let mut overall = 0.0f64;
    for b in &params.blocks {
        let mut max_rel = 0.0f64;
        let mut worst = 0;
        for k in 0..b.len() {
            let i = b.offset + k;
            let p = params.data[i];
            let h = 1e-5 * p.abs().max(1.0);
            work.data[i] = p + h;
            let lp = loss_fn(&work);
            work.data[i] = p - h;
            let lm = loss_fn(&work);
            work.data[i] = p;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[i];
            // the floor keeps finite-difference noise on near-zero gradients
            // from registering as relative error
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = k;
            }
        }
        overall = overall.max(max_rel);
        blocks.push(GradCheckBlock { name: b.name.clone(), max_rel_err: max_rel, worst_index: worst });
    }
    GradCheckReport { blocks, max_rel_err: overall }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0, 0.0]);
        for v in &p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let logits = [1.5, -2.0, 0.3, 7.1];
        let p1 = softmax(&logits);
        let shifted: Vec<f64> = logits.iter().map(|v| v + 100.0).collect();
        let p2 = softmax(&shifted);
        let sum: f64 = p1.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-9);
            assert!(*a > 0.0);
        }
    }

    #[test]
    fn tanh_saturates_without_nan() {
        let mut out = [0.0; 2];
        tanh_vec(&[1e6, -1e6], &mut out);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[1], -1.0);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let id = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(a.matmul(&id).unwrap(), a);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = ParamSet::new();
        p.add_block("w", 2, 2);
        p.data = vec![1.0, 2.0, 3.0, 4.0];
        let before = p.data.clone();
        let mut st = AdamState::new(4, 0.01);
        adam_step(&mut p, &[0.0; 4], &mut st).unwrap();
        assert_eq!(p.data, before);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // With constant gradient g, bias correction makes m_hat = g, v_hat = g^2,
        // so step 1 moves each param by -lr * g/(|g|+eps) ≈ -lr*sign(g).
        let mut p = ParamSet::new();
        p.add_block("w", 1, 3);
        p.data = vec![0.0, 0.0, 0.0];
        let mut st = AdamState::new(3, 0.01);
        adam_step(&mut p, &[2.0, -0.5, 1e-3], &mut st).unwrap();
        for (v, g) in p.data.iter().zip([2.0f64, -0.5, 1e-3]) {
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_deterministic() {
        let run = || {
            let mut p = ParamSet::new();
            p.add_block("w", 1, 2);
            p.data = vec![0.3, -0.7];
            let mut st = AdamState::new(2, 0.05);
            adam_step(&mut p, &[0.1, 0.2], &mut st).unwrap();
            adam_step(&mut p, &[-0.3, 0.05], &mut st).unwrap();
            p.data
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_names_bad_block() {
        let mut p = ParamSet::new();
        p.add_block("good", 1, 1);
        p.add_block("bad", 1, 1);
        let mut st = AdamState::new(2, 0.01);
        let err = adam_step(&mut p, &[0.0, f64::NAN], &mut st).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn gradcheck_quadratic() {
        let mut p = ParamSet::new();
        p.add_block("x", 1, 3);
        p.data = vec![0.5, -1.2, 2.0];
        let analytic: Vec<f64> = p.data.iter().map(|v| 2.0 * v).collect();
        let mut loss = |ps: &ParamSet| ps.data.iter().map(|v| v * v).sum::<f64>();
        let report = gradient_check(&mut loss, &p, &analytic);
        assert!(report.max_rel_err < 1e-7, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gradcheck_flags_corrupted_gradient() {
        let mut p = ParamSet::new();
        p.add_block("x", 1, 2);
        p.data = vec![1.0, -1.0];
        let mut analytic: Vec<f64> = p.data.iter().map(|v| 2.0 * v).collect();
        analytic[1] += 0.5;
        let mut loss = |ps: &ParamSet| ps.data.iter().map(|v| v * v).sum::<f64>();
        let report = gradient_check(&mut loss, &p, &analytic);
        assert!(!report.passes(1e-4));
    }
}
