// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f64` tensors and the handful of kernels the rest of the
//! crate is built from: matrix products, masked softmax, LayerNorm with an
//! exposed scale, and a bias-corrected Adam update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major tensor of 64-bit floats.
///
/// The product of `shape` always equals `data.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking the element count and that every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite entry {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Build without the finiteness scan. Callers must guarantee the length matches.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 })
    }

    /// 1-D tensor wrapping `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the storage. Used by the optimizer, which owns its parameters.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix whose last axis is the column axis.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Element of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// The `i`-th sub-tensor along the leading axis (e.g. one head of a stacked weight).
    pub fn slab(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor::from_parts(
            self.shape[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        )
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_parts(vec![c, r], out)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

/// `c = a · b` for `a: [m×k]`, `b: [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: [{m}x{k}] x [{k2}x{n}]"
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `c = alpha·op(a)·op(b) + beta·c` on raw row-major slices, where `op` optionally
/// transposes. `a` is `[m×k]` after `op`, `b` is `[k×n]` after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index dgemm touches; strides describe
    // the row-major (or transposed) layout of exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row-wise softmax with max-subtraction. With `causal`, entry `(i, j)` for
/// `j > i` is forced to exactly zero.
pub fn softmax_rows(x: &Tensor, causal: bool) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let limit = if causal { (i + 1).min(c) } else { c };
        softmax_into(&row[..limit], &mut out[i * c..i * c + limit]);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `log Σ exp(x)` computed stably.
pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// LayerNorm of a single vector. Returns the output and the scale
/// `1/sqrt(var(x) + eps)` so that callers can freeze it later.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, f64)> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::Shape(format!(
            "layer_norm lengths differ: x {}, gamma {}, beta {}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    let scale = layer_norm_into(x.data(), gamma.data(), beta.data(), eps, None, &mut out);
    Ok((Tensor::from_parts(x.shape().to_vec(), out), scale))
}

/// Slice LayerNorm. When `frozen_scale` is given it replaces the computed scale;
/// the mean is always recomputed, so the map stays affine in `x`.
pub(crate) fn layer_norm_into(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    frozen_scale: Option<f64>,
    out: &mut [f64],
) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let scale = match frozen_scale {
        Some(s) => s,
        None => {
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            1.0 / (var + eps).sqrt()
        }
    };
    for i in 0..x.len() {
        out[i] = gamma[i] * (x[i] - mean) * scale + beta[i];
    }
    scale
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn new(like: &Tensor) -> Self {
        Self {
            m: Tensor::zeros(like.shape()),
            v: Tensor::zeros(like.shape()),
            t: 0,
        }
    }

    /// Zero the moments of the given flat indices (used when a parameter slice is
    /// reinitialized mid-training). The step counter is shared and left alone.
    pub fn reset_indices(&mut self, idx: impl IntoIterator<Item = usize>) {
        for i in idx {
            self.m.data[i] = 0.0;
            self.v.data[i] = 0.0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, applied in place to `param`.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, hp: &AdamHyper) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() || param.shape() != state.v.shape() {
        return Err(Error::Shape(format!(
            "adam: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let p = param.data_mut();
    let g = grad.data();
    let m = &mut state.m.data;
    let v = &mut state.v.data;
    for i in 0..p.len() {
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        Tensor::from_fn(&[m, n], |ix| (0..k).map(|r| a.at(ix[0], r) * b.at(r, ix[1])).sum())
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 3], &mut rng);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[8, 8], &mut rng);
        let b = random(&[8, 8], &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_gemm_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[6, 5], &mut rng);
        let mut c = vec![0.0; 24];
        gemm(4, 5, 6, a.data(), false, b.data(), true, &mut c, 0.0);
        let expect = naive(&a, &b.transpose());
        assert!(Tensor::new(vec![4, 6], c).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let x = Tensor::from_rows(&[vec![3.0; 4], vec![1000.0, 0.0, -1000.0, 0.0]]).unwrap();
        let s = softmax_rows(&x, false);
        for v in s.row(0) {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!((s.at(1, 0) - 1.0).abs() < 1e-12);
        assert!(s.at(1, 1) < 1e-300 || s.at(1, 1) == 0.0);
        assert!(s.all_finite());
    }

    #[test]
    fn causal_mask_zeroes_upper_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = softmax_rows(&random(&[4, 4], &mut rng), true);
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_eq!(s.at(i, j), 0.0);
            }
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let x = Tensor::vector(vec![2.5; 6]);
        let (y, _) = layer_norm(&x, &Tensor::vector(vec![1.0; 6]), &Tensor::zeros(&[6]), 1e-5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_normalizes_and_scale_reproduces() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[16], &mut rng);
        let ones = Tensor::vector(vec![1.0; 16]);
        let (y, scale) = layer_norm(&x, &ones, &Tensor::zeros(&[16]), 1e-12).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 16.0;
        let ms: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((ms - 1.0).abs() < 1e-9);
        // recompute from the definition with the returned scale
        let xm: f64 = x.data().iter().sum::<f64>() / 16.0;
        for (yi, xi) in y.data().iter().zip(x.data()) {
            assert!((yi - (xi - xm) * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = Tensor::vector(vec![1.0, 1.0]);
        assert!(layer_norm(&x, &g, &g, 0.0).is_err());
    }

    #[test]
    fn adam_zero_grad_is_fixed_point() {
        let mut p = Tensor::vector(vec![0.3, -1.2]);
        let before = p.clone();
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&p);
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut st, &AdamHyper::default()).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.t, 10);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e-3] {
            let mut p = Tensor::vector(vec![1.0]);
            let mut st = AdamState::new(&p);
            let hp = AdamHyper { lr: 0.01, ..AdamHyper::default() };
            adam_step(&mut p, &Tensor::vector(vec![g]), &mut st, &hp).unwrap();
            let moved = p.data()[0] - 1.0;
            assert!((moved + 0.01 * f64::signum(g)).abs() < 1e-6 * 0.01 / g.abs().min(1.0) + 1e-9);
        }
    }

    #[test]
    fn adam_minimizes_square_like_scalar_recursion() {
        let hp = AdamHyper { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        // independent scalar recursion
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=1000 {
            let g = 2.0 * p;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            p -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        let mut param = Tensor::vector(vec![1.0]);
        let mut st = AdamState::new(&param);
        for _ in 0..1000 {
            let g = Tensor::vector(vec![2.0 * param.data()[0]]);
            adam_step(&mut param, &g, &mut st, &hp).unwrap();
        }
        assert!(param.data()[0].abs() < 0.05);
        assert!((param.data()[0] - p).abs() < 1e-12);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &Tensor::zeros(&[3]), &mut st, &AdamHyper::default()).is_err());
    }

    #[test]
    fn tensor_rejects_bad_length_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn matmul_associative(seed in 0u64..1000, m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            let c = random(&[n, p], &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
        }

        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e6f64..1e6, 1..12), causal in any::<bool>()) {
            let n = row.len();
            let x = Tensor::new(vec![n, n], row.iter().cycle().take(n * n).copied().collect()).unwrap();
            let s = softmax_rows(&x, causal);
            prop_assert!(s.all_finite());
            for i in 0..n {
                prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn adam_zero_grad_never_moves(vals in proptest::collection::vec(-10f64..10.0, 1..8), steps in 1usize..20) {
            let mut p = Tensor::vector(vals.clone());
            let mut st = AdamState::new(&p);
            let g = Tensor::zeros(&[vals.len()]);
            for _ in 0..steps {
                adam_step(&mut p, &g, &mut st, &AdamHyper::default()).unwrap();
            }
            prop_assert_eq!(p.data(), &vals[..]);
        }
    }
}
