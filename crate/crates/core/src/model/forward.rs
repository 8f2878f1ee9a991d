// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hooked forward pass and activation splicing.

use serde::{Deserialize, Serialize};

use super::{Hook, Site, Weights};
use crate::error::{Error, Result};
use crate::numerics::{gemm, layer_norm_into, softmax_into, Tensor};

/// Activations recorded for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// `[seq × d_model]`
    pub resid_pre: Tensor,
    /// LayerNorm scale `1/sqrt(var + eps)` at the attention input, per position.
    pub ln1_scale: Vec<f64>,
    /// Per head, `[seq × d_head]`.
    pub q: Vec<Tensor>,
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Per head, `[seq × seq]`, row = destination, column = source.
    pub pattern: Vec<Tensor>,
    /// Per head, `[seq × d_head]`; `z_h = A_h · v_h`.
    pub z: Vec<Tensor>,
    /// `[seq × d_model]`, the per-head `z` concatenated.
    pub z_cat: Tensor,
    pub attn_out: Tensor,
    pub resid_mid: Tensor,
    /// Empty for attention-only models.
    pub ln2_scale: Vec<f64>,
    /// Zero for attention-only models.
    pub mlp_out: Tensor,
    pub resid_post: Tensor,
}

/// Everything captured during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HookedTrace {
    pub tokens: Vec<u32>,
    /// Token-embedding part of the initial residual, `[seq × d_model]`.
    pub embed: Tensor,
    /// Positional-embedding part of the initial residual.
    pub pos: Tensor,
    pub layers: Vec<LayerTrace>,
    /// Final LayerNorm scale per position (empty for truncated runs).
    pub final_scale: Vec<f64>,
    /// `[seq × vocab]` (zero columns for truncated runs).
    pub logits: Tensor,
}

impl HookedTrace {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerTrace> {
        self.layers.get(layer).ok_or_else(|| {
            Error::OutOfRange(format!("layer {layer} not in trace of {} layers", self.layers.len()))
        })
    }

    /// The recorded activation at `site`, `[seq × d_model]`.
    pub fn site(&self, site: Site) -> Result<&Tensor> {
        let l = self.layer(site.layer)?;
        Ok(match site.hook {
            Hook::ResidPre => &l.resid_pre,
            Hook::ZCat => &l.z_cat,
            Hook::AttnOut => &l.attn_out,
            Hook::ResidMid => &l.resid_mid,
            Hook::MlpOut => &l.mlp_out,
            Hook::ResidPost => &l.resid_post,
        })
    }

    pub fn logits_at(&self, pos: usize) -> &[f64] {
        self.logits.row(pos)
    }

    pub fn check_position(&self, pos: usize) -> Result<()> {
        if pos >= self.seq_len() {
            return Err(Error::OutOfRange(format!(
                "position {pos} in a sequence of length {}",
                self.seq_len()
            )));
        }
        Ok(())
    }
}

/// Replace the activation at `site` for the listed positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub site: Site,
    pub positions: Vec<usize>,
    /// `[positions.len() × d_model]`
    pub values: Tensor,
}

impl Override {
    /// Override every position with a full `[seq × d_model]` tensor.
    pub fn all_positions(site: Site, values: Tensor) -> Self {
        Self {
            site,
            positions: (0..values.rows()).collect(),
            values,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeFlags {
    pub patterns: bool,
    pub ln_scales: bool,
}

impl FreezeFlags {
    pub const NONE: FreezeFlags = FreezeFlags {
        patterns: false,
        ln_scales: false,
    };
    pub const ALL: FreezeFlags = FreezeFlags {
        patterns: true,
        ln_scales: true,
    };
}

/// A set of overrides plus optional freezing against a clean trace.
#[derive(Clone, Debug, Default)]
pub struct Splice<'a> {
    pub overrides: Vec<Override>,
    pub freeze: FreezeFlags,
    pub clean: Option<&'a HookedTrace>,
}

pub fn forward(weights: &Weights, tokens: &[u32]) -> Result<HookedTrace> {
    run(weights, tokens, &Splice::default(), None)
}

/// Forward pass that stops after block `last_layer`, skipping the unembedding.
pub fn forward_until(weights: &Weights, tokens: &[u32], last_layer: usize) -> Result<HookedTrace> {
    if last_layer >= weights.config.n_layers {
        return Err(Error::OutOfRange(format!(
            "layer {last_layer} in a {}-layer model",
            weights.config.n_layers
        )));
    }
    run(weights, tokens, &Splice::default(), Some(last_layer))
}

/// Forward pass with activations replaced at chosen sites. With freezing, the
/// attention patterns and LayerNorm scales come from `splice.clean`, which makes
/// the logits an affine function of any override.
pub fn forward_spliced(weights: &Weights, tokens: &[u32], splice: &Splice<'_>) -> Result<HookedTrace> {
    run(weights, tokens, splice, None)
}

fn check_tokens(weights: &Weights, tokens: &[u32]) -> Result<()> {
    let cfg = &weights.config;
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::OutOfRange(format!(
            "sequence of length {} exceeds max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    if let Some(t) = tokens.iter().find(|t| **t as usize >= cfg.vocab) {
        return Err(Error::OutOfRange(format!("token id {t} >= vocab {}", cfg.vocab)));
    }
    Ok(())
}

fn check_splice(weights: &Weights, seq: usize, splice: &Splice<'_>) -> Result<()> {
    let cfg = &weights.config;
    for o in &splice.overrides {
        o.site.check(cfg)?;
        if let Some(p) = o.positions.iter().find(|p| **p >= seq) {
            return Err(Error::OutOfRange(format!("override position {p} in sequence of length {seq}")));
        }
        if o.values.shape() != [o.positions.len(), cfg.d_model] {
            return Err(Error::Shape(format!(
                "override at {} expects [{} x {}], got {:?}",
                o.site,
                o.positions.len(),
                cfg.d_model,
                o.values.shape()
            )));
        }
    }
    if splice.freeze != FreezeFlags::NONE {
        let clean = splice
            .clean
            .ok_or_else(|| Error::InvalidArgument("freezing requested without a clean trace".into()))?;
        if clean.seq_len() != seq || clean.layers.len() != cfg.n_layers || clean.final_scale.len() != seq {
            return Err(Error::Shape("clean trace does not match this run".into()));
        }
    }
    Ok(())
}

fn apply(splice: &Splice<'_>, site: Site, x: &mut Tensor) {
    for o in splice.overrides.iter().filter(|o| o.site == site) {
        for (i, &p) in o.positions.iter().enumerate() {
            x.row_mut(p).copy_from_slice(o.values.row(i));
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// `x · W + b` for `x: [n × k]`, `W: [k × m]` given as a raw slice.
fn affine(x: &Tensor, w: &[f64], b: &[f64]) -> Tensor {
    let (n, k, m) = (x.rows(), x.cols(), b.len());
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    gemm(n, k, m, x.data(), false, w, false, &mut out, 1.0);
    Tensor::from_parts(vec![n, m], out)
}

fn layer_norm_rows(
    x: &Tensor,
    ln: &super::LayerNormWeights,
    eps: f64,
    frozen: Option<&[f64]>,
) -> (Tensor, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; n * d];
    let mut scales = Vec::with_capacity(n);
    for i in 0..n {
        let s = layer_norm_into(
            x.row(i),
            ln.gamma.data(),
            ln.beta.data(),
            eps,
            frozen.map(|f| f[i]),
            &mut out[i * d..(i + 1) * d],
        );
        scales.push(s);
    }
    (Tensor::from_parts(vec![n, d], out), scales)
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn run(weights: &Weights, tokens: &[u32], splice: &Splice<'_>, stop: Option<usize>) -> Result<HookedTrace> {
    check_tokens(weights, tokens)?;
    let seq = tokens.len();
    check_splice(weights, seq, splice)?;
    let cfg = &weights.config;
    let (d, dh, nh) = (cfg.d_model, cfg.d_head, cfg.n_heads);
    let frozen = |flag: bool| if flag { splice.clean } else { None };
    let clean_ln = frozen(splice.freeze.ln_scales);
    let clean_pat = frozen(splice.freeze.patterns);

    let mut embed = Vec::with_capacity(seq * d);
    for &t in tokens {
        embed.extend_from_slice(weights.w_e.row(t as usize));
    }
    let embed = Tensor::from_parts(vec![seq, d], embed);
    let pos = Tensor::from_parts(vec![seq, d], weights.w_pos.data()[..seq * d].to_vec());
    let mut resid = add(&embed, &pos);

    let n_run = stop.map_or(cfg.n_layers, |l| l + 1);
    let mut layers = Vec::with_capacity(n_run);
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for (l, lw) in weights.layers.iter().enumerate().take(n_run) {
        let mut resid_pre = resid;
        apply(splice, Site::new(l, Hook::ResidPre), &mut resid_pre);

        let (x1, ln1_scale) = layer_norm_rows(
            &resid_pre,
            &lw.ln1,
            cfg.eps,
            clean_ln.map(|c| c.layers[l].ln1_scale.as_slice()),
        );

        let mut q = Vec::with_capacity(nh);
        let mut k = Vec::with_capacity(nh);
        let mut v = Vec::with_capacity(nh);
        let mut pattern = Vec::with_capacity(nh);
        let mut z = Vec::with_capacity(nh);
        let mut z_cat = Tensor::zeros(&[seq, d]);
        for h in 0..nh {
            let (wr, br) = (h * d * dh..(h + 1) * d * dh, h * dh..(h + 1) * dh);
            let qh = affine(&x1, &lw.w_q.data()[wr.clone()], &lw.b_q.data()[br.clone()]);
            let kh = affine(&x1, &lw.w_k.data()[wr.clone()], &lw.b_k.data()[br.clone()]);
            let vh = affine(&x1, &lw.w_v.data()[wr], &lw.b_v.data()[br]);
            let a = match clean_pat {
                Some(c) => c.layers[l].pattern[h].clone(),
                None => {
                    let mut scores = vec![0.0; seq * seq];
                    gemm(seq, dh, seq, qh.data(), false, kh.data(), true, &mut scores, 0.0);
                    let mut a = vec![0.0; seq * seq];
                    for i in 0..seq {
                        let row = &mut scores[i * seq..i * seq + i + 1];
                        row.iter_mut().for_each(|s| *s *= inv_sqrt);
                        softmax_into(row, &mut a[i * seq..i * seq + i + 1]);
                    }
                    Tensor::from_parts(vec![seq, seq], a)
                }
            };
            let mut zh = vec![0.0; seq * dh];
            gemm(seq, seq, dh, a.data(), false, vh.data(), false, &mut zh, 0.0);
            for i in 0..seq {
                z_cat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(&zh[i * dh..(i + 1) * dh]);
            }
            q.push(qh);
            k.push(kh);
            v.push(vh);
            pattern.push(a);
            z.push(Tensor::from_parts(vec![seq, dh], zh));
        }
        let zsite = Site::new(l, Hook::ZCat);
        if splice.overrides.iter().any(|o| o.site == zsite) {
            apply(splice, zsite, &mut z_cat);
            for (h, zh) in z.iter_mut().enumerate() {
                for i in 0..seq {
                    zh.row_mut(i).copy_from_slice(&z_cat.row(i)[h * dh..(h + 1) * dh]);
                }
            }
        }

        let mut attn_out = affine(&z_cat, lw.w_o.data(), lw.b_o.data());
        apply(splice, Site::new(l, Hook::AttnOut), &mut attn_out);
        let mut resid_mid = add(&resid_pre, &attn_out);
        apply(splice, Site::new(l, Hook::ResidMid), &mut resid_mid);

        let (mut mlp_out, ln2_scale) = match &lw.mlp {
            Some(m) => {
                let (x2, s) = layer_norm_rows(
                    &resid_mid,
                    &m.ln,
                    cfg.eps,
                    clean_ln.map(|c| c.layers[l].ln2_scale.as_slice()),
                );
                let mut hidden = affine(&x2, m.w_in.data(), m.b_in.data());
                hidden.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
                (affine(&hidden, m.w_out.data(), m.b_out.data()), s)
            }
            None => (Tensor::zeros(&[seq, d]), Vec::new()),
        };
        apply(splice, Site::new(l, Hook::MlpOut), &mut mlp_out);
        let mut resid_post = add(&resid_mid, &mlp_out);
        apply(splice, Site::new(l, Hook::ResidPost), &mut resid_post);
        resid = resid_post.clone();

        layers.push(LayerTrace {
            resid_pre,
            ln1_scale,
            q,
            k,
            v,
            pattern,
            z,
            z_cat,
            attn_out,
            resid_mid,
            ln2_scale,
            mlp_out,
            resid_post,
        });
    }

    let (final_scale, logits) = if stop.is_some() {
        (Vec::new(), Tensor::zeros(&[seq, 0]))
    } else {
        let (xf, s) = layer_norm_rows(
            &resid,
            &weights.ln_final,
            cfg.eps,
            clean_ln.map(|c| c.final_scale.as_slice()),
        );
        (s, affine(&xf, weights.w_u.data(), weights.b_u.data()))
    };
    if !logits.all_finite() {
        return Err(Error::InvalidArgument("forward pass produced non-finite logits".into()));
    }

    Ok(HookedTrace {
        tokens: tokens.to_vec(),
        embed,
        pos,
        layers,
        final_scale,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_random_model, ModelConfig};
    use crate::numerics::matmul;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(d_mlp: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp,
            vocab: 11,
            max_seq: 9,
            eps: 1e-5,
        }
    }

    #[test]
    fn single_token_patterns_are_one() {
        let w = build_random_model(&cfg(16), 1).unwrap();
        let t = forward(&w, &[3]).unwrap();
        for l in &t.layers {
            for a in &l.pattern {
                assert_eq!(a.data(), &[1.0]);
            }
        }
    }

    #[test]
    fn trace_identities() {
        let w = build_random_model(&cfg(16), 2).unwrap();
        let t = forward(&w, &[1, 4, 4, 9, 0, 2, 7]).unwrap();
        let seq = t.seq_len();
        let mut running = add(&t.embed, &t.pos);
        for l in &t.layers {
            assert!(l.resid_pre.max_abs_diff(&running) < 1e-8);
            let sum = add(&add(&l.resid_pre, &l.attn_out), &l.mlp_out);
            assert!(l.resid_post.max_abs_diff(&sum) < 1e-9);
            for h in 0..2 {
                let a = &l.pattern[h];
                for i in 0..seq {
                    assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(a.row(i)[i + 1..].iter().all(|v| *v == 0.0));
                }
                let zh = matmul(a, &l.v[h]).unwrap();
                assert!(zh.max_abs_diff(&l.z[h]) < 1e-9);
                for i in 0..seq {
                    assert_eq!(&l.z_cat.row(i)[h * 4..(h + 1) * 4], l.z[h].row(i));
                }
            }
            running = add(&add(&running, &l.attn_out), &l.mlp_out);
        }
    }

    #[test]
    fn logits_are_unembedded_final_ln() {
        let w = build_random_model(&cfg(16), 3).unwrap();
        let t = forward(&w, &[5, 6, 7]).unwrap();
        let last = &t.layers.last().unwrap().resid_post;
        let (xf, _) = layer_norm_rows(last, &w.ln_final, 1e-5, None);
        let expect = affine(&xf, w.w_u.data(), w.b_u.data());
        assert!(expect.max_abs_diff(&t.logits) < 1e-12);
    }

    #[test]
    fn noop_splice_is_bit_identical() {
        let w = build_random_model(&cfg(16), 4).unwrap();
        let toks = [1, 2, 3, 4, 5];
        let clean = forward(&w, &toks).unwrap();
        let splice = Splice {
            overrides: vec![Override::all_positions(Site::z(1), clean.layers[1].z_cat.clone())],
            ..Splice::default()
        };
        let again = forward_spliced(&w, &toks, &splice).unwrap();
        assert_eq!(again.logits, clean.logits);
    }

    #[test]
    fn zero_attn_out_is_layer_ablation() {
        let w = build_random_model(&cfg(0), 5).unwrap();
        let toks = [1, 2, 3];
        let splice = Splice {
            overrides: vec![Override::all_positions(
                Site::new(2, Hook::AttnOut),
                Tensor::zeros(&[3, 8]),
            )],
            ..Splice::default()
        };
        let t = forward_spliced(&w, &toks, &splice).unwrap();
        assert!(t.layers[2].attn_out.data().iter().all(|v| *v == 0.0));
        assert_eq!(t.layers[2].resid_post, t.layers[2].resid_pre);
    }

    #[test]
    fn frozen_splice_is_affine() {
        let w = build_random_model(&cfg(0), 6).unwrap();
        let toks = [3, 1, 4, 1, 5, 9];
        let clean = forward(&w, &toks).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let run_with = |vals: &Tensor| {
            let splice = Splice {
                overrides: vec![Override::all_positions(Site::z(0), vals.clone())],
                freeze: FreezeFlags::ALL,
                clean: Some(&clean),
            };
            forward_spliced(&w, &toks, &splice).unwrap().logits
        };
        let mut r = || Tensor::from_fn(&[6, 8], |_| rng.gen_range(-2.0..2.0));
        let (v1, v2) = (r(), r());
        let alpha = 0.3;
        let mix = Tensor::from_parts(
            vec![6, 8],
            v1.data().iter().zip(v2.data()).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect(),
        );
        let (l1, l2, lm) = (run_with(&v1), run_with(&v2), run_with(&mix));
        for i in 0..lm.len() {
            let expect = alpha * l1.data()[i] + (1.0 - alpha) * l2.data()[i];
            assert!((lm.data()[i] - expect).abs() <= 1e-6 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn errors() {
        let w = build_random_model(&cfg(0), 7).unwrap();
        assert!(matches!(forward(&w, &[11]), Err(Error::OutOfRange(_))));
        assert!(matches!(forward(&w, &[0; 10]), Err(Error::OutOfRange(_))));
        let bad = Splice {
            overrides: vec![Override::all_positions(Site::z(5), Tensor::zeros(&[2, 8]))],
            ..Splice::default()
        };
        assert!(forward_spliced(&w, &[0, 1], &bad).is_err());
        let bad_shape = Splice {
            overrides: vec![Override::all_positions(Site::z(0), Tensor::zeros(&[2, 7]))],
            ..Splice::default()
        };
        assert!(matches!(forward_spliced(&w, &[0, 1], &bad_shape), Err(Error::Shape(_))));
        let no_clean = Splice {
            freeze: FreezeFlags::ALL,
            ..Splice::default()
        };
        assert!(forward_spliced(&w, &[0, 1], &no_clean).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn frozen_logits_linear_in_override(seed in 0u64..500, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let w = build_random_model(&cfg(0), seed).unwrap();
            let toks = [1, 0, 2, 3];
            let clean = forward(&w, &toks).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x = Tensor::from_fn(&[4, 8], |_| rng.gen_range(-1.0..1.0));
            let y = Tensor::from_fn(&[4, 8], |_| rng.gen_range(-1.0..1.0));
            let go = |v: Tensor| {
                let splice = Splice {
                    overrides: vec![Override::all_positions(Site::new(1, Hook::ResidPre), v)],
                    freeze: FreezeFlags::ALL,
                    clean: Some(&clean),
                };
                forward_spliced(&w, &toks, &splice).unwrap().logits
            };
            let zero = go(Tensor::zeros(&[4, 8]));
            let lin = |t: &Tensor| Tensor::from_parts(t.shape().to_vec(), t.data().iter().zip(zero.data()).map(|(p, z)| p - z).collect());
            let fx = lin(&go(x.clone()));
            let fy = lin(&go(y.clone()));
            let comb = Tensor::from_parts(vec![4, 8], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect());
            let fc = lin(&go(comb));
            for i in 0..fc.len() {
                let expect = a * fx.data()[i] + b * fy.data()[i];
                prop_assert!((fc.data()[i] - expect).abs() <= 1e-6 * expect.abs().max(1.0));
            }
        }
    }
}
