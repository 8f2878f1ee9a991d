// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoder over one activation site.
//!
//! `f(z) = ReLU((z - b_dec) · W_enc + b_enc)` and `ẑ = f · W_dec + b_dec`, so
//! every input splits exactly as `z = Σ f_i d_i + b_dec + ε(z)`, where `d_i` is
//! row `i` of `W_dec` and `ε` is whatever the dictionary misses.

mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Site};
use crate::numerics::{dot, gemm, norm2, Tensor};

pub use train::{
    lr_factor, resample_dead, train, FeatureActivity, ResampleOutcome, StepStats, TrainConfig, TrainStats,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SaeParams {
    /// `[d_in × d_sae]`; column `i` is the encoder direction of feature `i`.
    pub w_enc: Tensor,
    pub b_enc: Tensor,
    /// `[d_sae × d_in]`; row `i` is the unit-norm feature direction `d_i`.
    pub w_dec: Tensor,
    pub b_dec: Tensor,
    pub site: Option<Site>,
    /// Subtract `b_dec` from the input before encoding.
    pub pre_bias: bool,
}

#[derive(Serialize, Deserialize)]
struct SaeMeta {
    d_in: usize,
    d_sae: usize,
    pre_bias: bool,
}

/// Reconstruction and sparsity terms of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Batch mean of `‖ẑ - z‖²`.
    pub mse: f64,
    /// Batch mean of `Σ_i f_i`.
    pub l1: f64,
    pub total: f64,
}

/// Gradients of the total loss with respect to every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub w_enc: Tensor,
    pub b_enc: Tensor,
    pub w_dec: Tensor,
    pub b_dec: Tensor,
}

/// Forward intermediates for a batch.
pub(crate) struct Pass {
    /// `[n × d_sae]` pre-activations.
    pub pre: Vec<f64>,
    /// `[n × d_sae]` activations.
    pub f: Vec<f64>,
    /// `[n × d_in]` reconstruction minus input.
    pub err: Vec<f64>,
    /// Active feature ids per row.
    pub active: Vec<Vec<u32>>,
}

/// Above this fraction of active entries the backward pass uses dense products.
const DENSE_THRESHOLD: f64 = 0.05;

impl SaeParams {
    pub fn d_in(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn d_sae(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn new(w_enc: Tensor, b_enc: Tensor, w_dec: Tensor, b_dec: Tensor, site: Option<Site>) -> Result<Self> {
        let s = Self {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            site,
            pre_bias: true,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (d_in, d_sae) = (self.d_in(), self.d_sae());
        let ok = self.w_enc.shape().len() == 2
            && self.w_dec.shape() == [d_sae, d_in]
            && self.b_enc.shape() == [d_sae]
            && self.b_dec.shape() == [d_in];
        if !ok {
            return Err(Error::Shape(format!(
                "inconsistent SAE tensors: W_enc {:?}, b_enc {:?}, W_dec {:?}, b_dec {:?}",
                self.w_enc.shape(),
                self.b_enc.shape(),
                self.w_dec.shape(),
                self.b_dec.shape()
            )));
        }
        Ok(())
    }

    /// Random unit decoder rows, encoder tied to the decoder transpose, zero biases.
    pub fn init(d_in: usize, d_sae: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w_dec = Tensor::from_fn(&[d_sae, d_in], |_| rng.gen_range(-1.0..1.0));
        normalize_rows(&mut w_dec);
        Self {
            w_enc: w_dec.transpose(),
            b_enc: Tensor::zeros(&[d_sae]),
            w_dec,
            b_dec: Tensor::zeros(&[d_in]),
            site: None,
            pre_bias: true,
        }
    }

    pub fn with_site(mut self, site: Site) -> Self {
        self.site = Some(site);
        self
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.d_in() {
            return Err(Error::Shape(format!("input of length {}, SAE d_in is {}", z.len(), self.d_in())));
        }
        Ok(())
    }

    pub fn check_feature(&self, i: usize) -> Result<()> {
        if i >= self.d_sae() {
            return Err(Error::OutOfRange(format!("feature {i} >= d_sae {}", self.d_sae())));
        }
        Ok(())
    }

    /// Encoder direction `w_i` (column `i` of `W_enc`).
    pub fn encoder_column(&self, i: usize) -> Vec<f64> {
        let n = self.d_sae();
        (0..self.d_in()).map(|r| self.w_enc.data()[r * n + i]).collect()
    }

    pub fn decoder_row(&self, i: usize) -> &[f64] {
        self.w_dec.row(i)
    }

    /// Constant part of feature `i`'s pre-activation: `b_enc_i - w_i · b_dec`
    /// (just `b_enc_i` without the pre-bias).
    pub fn feature_bias(&self, i: usize) -> f64 {
        if self.pre_bias {
            self.b_enc.data()[i] - dot(&self.encoder_column(i), self.b_dec.data())
        } else {
            self.b_enc.data()[i]
        }
    }

    pub fn pre_activation(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let x = self.centered(z);
        let mut pre = self.b_enc.data().to_vec();
        gemm(1, self.d_in(), self.d_sae(), &x, false, self.w_enc.data(), false, &mut pre, 1.0);
        Ok(pre)
    }

    pub fn encode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut f = self.pre_activation(z)?;
        f.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(f)
    }

    pub fn decode(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.d_sae() {
            return Err(Error::Shape(format!("code of length {}, SAE d_sae is {}", f.len(), self.d_sae())));
        }
        let mut out = self.b_dec.data().to_vec();
        for (i, &fi) in f.iter().enumerate() {
            if fi != 0.0 {
                crate::numerics::axpy(fi, self.w_dec.row(i), &mut out);
            }
        }
        Ok(out)
    }

    /// `ε(z) = z - decode(encode(z))`.
    pub fn error_term(&self, z: &[f64]) -> Result<Vec<f64>> {
        let recon = self.decode(&self.encode(z)?)?;
        Ok(z.iter().zip(&recon).map(|(a, b)| a - b).collect())
    }

    /// Activations for every row of `z: [n × d_in]`.
    pub fn encode_batch(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.d_in() {
            return Err(Error::Shape(format!("batch width {}, SAE d_in is {}", z.cols(), self.d_in())));
        }
        let n = z.rows();
        let mut f = self.pre_batch(z);
        f.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(Tensor::from_parts(vec![n, self.d_sae()], f))
    }

    fn centered(&self, z: &[f64]) -> Vec<f64> {
        if self.pre_bias {
            z.iter().zip(self.b_dec.data()).map(|(a, b)| a - b).collect()
        } else {
            z.to_vec()
        }
    }

    fn centered_batch(&self, z: &Tensor) -> Vec<f64> {
        if !self.pre_bias {
            return z.data().to_vec();
        }
        let b = self.b_dec.data();
        z.data()
            .chunks_exact(self.d_in())
            .flat_map(|row| row.iter().zip(b).map(|(x, bb)| x - bb))
            .collect()
    }

    fn pre_batch(&self, z: &Tensor) -> Vec<f64> {
        let (n, d, m) = (z.rows(), self.d_in(), self.d_sae());
        let x = self.centered_batch(z);
        let mut pre = Vec::with_capacity(n * m);
        for _ in 0..n {
            pre.extend_from_slice(self.b_enc.data());
        }
        gemm(n, d, m, &x, false, self.w_enc.data(), false, &mut pre, 1.0);
        pre
    }

    pub(crate) fn pass(&self, z: &Tensor) -> Pass {
        let (n, d, m) = (z.rows(), self.d_in(), self.d_sae());
        let pre = self.pre_batch(z);
        let mut f = pre.clone();
        let mut active = Vec::with_capacity(n);
        for row in f.chunks_exact_mut(m) {
            let mut act = Vec::new();
            for (i, v) in row.iter_mut().enumerate() {
                if *v > 0.0 {
                    act.push(i as u32);
                } else {
                    *v = 0.0;
                }
            }
            active.push(act);
        }
        let mut err = Vec::with_capacity(n * d);
        for (b, act) in active.iter().enumerate() {
            let mut recon = self.b_dec.data().to_vec();
            for &i in act {
                crate::numerics::axpy(f[b * m + i as usize], self.w_dec.row(i as usize), &mut recon);
            }
            err.extend(recon.iter().zip(z.row(b)).map(|(r, x)| r - x));
        }
        Pass { pre, f, err, active }
    }

    pub fn loss(&self, z: &Tensor, l1_coeff: f64) -> Result<LossParts> {
        if z.cols() != self.d_in() {
            return Err(Error::Shape(format!("batch width {}, SAE d_in is {}", z.cols(), self.d_in())));
        }
        Ok(loss_from_pass(&self.pass(z), z.rows(), l1_coeff))
    }

    /// Loss and analytic gradients. Picks dense or sparse products by activation density.
    pub fn loss_and_grads(&self, z: &Tensor, l1_coeff: f64) -> Result<(LossParts, Grads)> {
        self.loss_and_grads_with(z, l1_coeff, None)
    }

    /// As [`Self::loss_and_grads`], forcing the dense (`Some(true)`) or sparse path.
    pub fn loss_and_grads_with(&self, z: &Tensor, l1_coeff: f64, dense: Option<bool>) -> Result<(LossParts, Grads)> {
        self.train_pass(z, l1_coeff, dense).map(|(p, g, _)| (p, g))
    }

    pub(crate) fn train_pass(&self, z: &Tensor, l1_coeff: f64, dense: Option<bool>) -> Result<(LossParts, Grads, Pass)> {
        if z.cols() != self.d_in() || z.rows() == 0 {
            return Err(Error::Shape(format!(
                "batch of {:?} for SAE with d_in {}",
                z.shape(),
                self.d_in()
            )));
        }
        let pass = self.pass(z);
        let n = z.rows();
        let parts = loss_from_pass(&pass, n, l1_coeff);
        let nnz: usize = pass.active.iter().map(Vec::len).sum();
        let dense = dense.unwrap_or(nnz as f64 > DENSE_THRESHOLD * (n * self.d_sae()) as f64);
        let grads = if dense {
            self.grads_dense(z, &pass, l1_coeff)
        } else {
            self.grads_sparse(z, &pass, l1_coeff)
        };
        Ok((parts, grads, pass))
    }

    fn grads_dense(&self, z: &Tensor, pass: &Pass, l1: f64) -> Grads {
        let (n, d, m) = (z.rows(), self.d_in(), self.d_sae());
        let scale = 2.0 / n as f64;
        let g: Vec<f64> = pass.err.iter().map(|e| e * scale).collect();
        let mut w_dec = vec![0.0; m * d];
        gemm(m, n, d, &pass.f, true, &g, false, &mut w_dec, 0.0);
        let mut df = vec![l1 / n as f64; n * m];
        gemm(n, d, m, &g, false, self.w_dec.data(), true, &mut df, 1.0);
        for (p, pre) in df.iter_mut().zip(&pass.pre) {
            if *pre <= 0.0 {
                *p = 0.0;
            }
        }
        let x = self.centered_batch(z);
        let mut w_enc = vec![0.0; d * m];
        gemm(d, n, m, &x, true, &df, false, &mut w_enc, 0.0);
        let mut b_enc = vec![0.0; m];
        for row in df.chunks_exact(m) {
            crate::numerics::axpy(1.0, row, &mut b_enc);
        }
        let mut b_dec = vec![0.0; d];
        for row in g.chunks_exact(d) {
            crate::numerics::axpy(1.0, row, &mut b_dec);
        }
        self.finish_grads(w_enc, b_enc, w_dec, b_dec)
    }

    fn grads_sparse(&self, z: &Tensor, pass: &Pass, l1: f64) -> Grads {
        let (n, d, m) = (z.rows(), self.d_in(), self.d_sae());
        let scale = 2.0 / n as f64;
        let l1n = l1 / n as f64;
        let mut w_dec = vec![0.0; m * d];
        // accumulated as [d_sae × d_in] and transposed once at the end
        let mut w_enc_t = vec![0.0; m * d];
        let mut b_enc = vec![0.0; m];
        let mut b_dec = vec![0.0; d];
        let x = self.centered_batch(z);
        let mut g = vec![0.0; d];
        for b in 0..n {
            for (gi, e) in g.iter_mut().zip(&pass.err[b * d..(b + 1) * d]) {
                *gi = e * scale;
            }
            crate::numerics::axpy(1.0, &g, &mut b_dec);
            let xb = &x[b * d..(b + 1) * d];
            for &i in &pass.active[b] {
                let i = i as usize;
                let fi = pass.f[b * m + i];
                crate::numerics::axpy(fi, &g, &mut w_dec[i * d..(i + 1) * d]);
                let p = dot(&g, self.w_dec.row(i)) + l1n;
                crate::numerics::axpy(p, xb, &mut w_enc_t[i * d..(i + 1) * d]);
                b_enc[i] += p;
            }
        }
        let mut w_enc = vec![0.0; d * m];
        for i in 0..m {
            for r in 0..d {
                w_enc[r * m + i] = w_enc_t[i * d + r];
            }
        }
        self.finish_grads(w_enc, b_enc, w_dec, b_dec)
    }

    fn finish_grads(&self, w_enc: Vec<f64>, b_enc: Vec<f64>, w_dec: Vec<f64>, mut b_dec: Vec<f64>) -> Grads {
        let (d, m) = (self.d_in(), self.d_sae());
        if self.pre_bias {
            // pre = (z - b_dec) W_enc + b_enc, so b_dec also receives -W_enc · ∂pre
            let mut through_enc = vec![0.0; d];
            gemm(d, m, 1, self.w_enc.data(), false, &b_enc, false, &mut through_enc, 0.0);
            crate::numerics::axpy(-1.0, &through_enc, &mut b_dec);
        }
        Grads {
            w_enc: Tensor::from_parts(vec![d, m], w_enc),
            b_enc: Tensor::from_parts(vec![m], b_enc),
            w_dec: Tensor::from_parts(vec![m, d], w_dec),
            b_dec: Tensor::from_parts(vec![d], b_dec),
        }
    }

    /// Rescale every decoder row to unit norm (zero rows are left alone).
    pub fn normalize_decoder(&mut self) {
        normalize_rows(&mut self.w_dec);
    }

    /// Fails when the SAE cannot read activations at its site in this model.
    pub fn check_attach(&self, cfg: &ModelConfig) -> Result<()> {
        let site = self
            .site
            .ok_or_else(|| Error::InvalidArgument("SAE has no site descriptor".into()))?;
        site.check(cfg)?;
        if site.dim(cfg) != self.d_in() {
            return Err(Error::Shape(format!(
                "SAE d_in {} does not match width {} of {site}",
                self.d_in(),
                site.dim(cfg)
            )));
        }
        Ok(())
    }
}

fn loss_from_pass(pass: &Pass, n: usize, l1_coeff: f64) -> LossParts {
    let mse = pass.err.iter().map(|e| e * e).sum::<f64>() / n as f64;
    let l1 = pass.f.iter().sum::<f64>() / n as f64;
    LossParts {
        mse,
        l1,
        total: mse + l1_coeff * l1,
    }
}

fn normalize_rows(t: &mut Tensor) {
    for i in 0..t.rows() {
        let row = t.row_mut(i);
        let n = norm2(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Write an SAE with the model container format (tensors `W_enc`, `b_enc`, `W_dec`, `b_dec`).
pub fn save_sae(sae: &SaeParams, path: &Path) -> Result<()> {
    sae.validate()?;
    let meta = serde_json::to_value(SaeMeta {
        d_in: sae.d_in(),
        d_sae: sae.d_sae(),
        pre_bias: sae.pre_bias,
    })?;
    container::save(
        path,
        "sae",
        meta,
        sae.site.map(|s| s.to_string()),
        &[
            ("W_enc".into(), &sae.w_enc),
            ("b_enc".into(), &sae.b_enc),
            ("W_dec".into(), &sae.w_dec),
            ("b_dec".into(), &sae.b_dec),
        ],
    )
}

pub fn load_sae(path: &Path) -> Result<SaeParams> {
    let mut c = container::load(path, "sae")?;
    let meta: SaeMeta =
        serde_json::from_value(c.config.clone()).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let site = c.site.as_deref().map(str::parse).transpose()?;
    let sae = SaeParams {
        w_enc: c.take("W_enc")?,
        b_enc: c.take("b_enc")?,
        w_dec: c.take("W_dec")?,
        b_dec: c.take("b_dec")?,
        site,
        pre_bias: meta.pre_bias,
    };
    c.finish()?;
    sae.validate().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if (sae.d_in(), sae.d_sae()) != (meta.d_in, meta.d_sae) {
        return Err(Error::Format(format!("{}: tensor shapes disagree with header", path.display())));
    }
    Ok(sae)
}
