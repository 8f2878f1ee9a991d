// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-built transformers with known circuits, plus random models for tests.
//!
//! The constructed models use centered one-hot channels (`e_t - 1/n`) so every
//! residual vector has zero mean and LayerNorm reduces to a rescaling, which the
//! LayerNorm gains undo. Attention scores of a matching query/key pair come out
//! at roughly `sharpness`, so larger values give harder attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerNormWeights, LayerWeights, MlpWeights, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Widest residual stream a fixture may request.
const MAX_FIXTURE_D_MODEL: usize = 1024;
/// Unembedding gain on the output channel.
const LOGIT_GAIN: f64 = 8.0;
const EPS: f64 = 1e-5;

/// Where each channel lives in the residual stream of [`build_induction_model`],
/// and which heads implement the circuit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InductionLayout {
    pub vocab: usize,
    pub max_seq: usize,
    pub d_head: usize,
    pub tok: usize,
    pub pos: usize,
    /// Written by the layer-0 previous-token head.
    pub prev: usize,
    /// Read by the unembedding.
    pub out: usize,
    /// `(layer, head)` of the previous-token head.
    pub prev_token_head: (usize, usize),
    /// `(layer, head)` of the induction head.
    pub induction_head: (usize, usize),
    /// Layer-1 head that attends to the current position and suppresses its token.
    pub self_head: (usize, usize),
    /// Layer-1 previous-token head that mildly boosts the previous token.
    pub echo_head: (usize, usize),
    /// Layer-1 head with all-zero weights.
    pub dead_head: (usize, usize),
}

impl InductionLayout {
    pub fn new(vocab: usize, max_seq: usize) -> Self {
        let d_head = max_seq.max(vocab + 1);
        Self {
            vocab,
            max_seq,
            d_head,
            tok: 0,
            pos: vocab,
            prev: vocab + max_seq,
            out: 2 * vocab + max_seq,
            prev_token_head: (0, 0),
            induction_head: (1, 1),
            self_head: (1, 0),
            echo_head: (1, 2),
            dead_head: (1, 3),
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 4 * self.d_head,
            d_head: self.d_head,
            d_mlp: 0,
            vocab: self.vocab,
            max_seq: self.max_seq,
            eps: EPS,
        }
    }
}

/// Channel layout of [`build_long_prefix_model`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LongPrefixLayout {
    pub vocab: usize,
    pub max_seq: usize,
    pub d_head: usize,
    pub tok: usize,
    pub pos: usize,
    pub prev: usize,
    pub prev2: usize,
    pub out: usize,
    /// `(layer, head)` of the head that needs a two-token prefix match.
    pub detector_head: (usize, usize),
}

impl LongPrefixLayout {
    pub fn new(vocab: usize, max_seq: usize) -> Self {
        let d_head = (max_seq + 3).max(2 * vocab + 1);
        Self {
            vocab,
            max_seq,
            d_head,
            tok: 0,
            pos: vocab,
            prev: vocab + max_seq,
            prev2: 2 * vocab + max_seq,
            out: 3 * vocab + max_seq,
            detector_head: (1, 0),
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 3,
            d_model: 3 * self.d_head,
            d_head: self.d_head,
            d_mlp: 0,
            vocab: self.vocab,
            max_seq: self.max_seq,
            eps: EPS,
        }
    }
}

fn check_fixture_args(vocab: usize, max_seq: usize, sharpness: f64, d_model: usize) -> Result<()> {
    if !(sharpness > 0.0) || !sharpness.is_finite() {
        return Err(Error::InvalidArgument(format!("sharpness must be > 0, got {sharpness}")));
    }
    if vocab < 3 || max_seq < 2 {
        return Err(Error::InvalidArgument(format!(
            "need vocab >= 3 and max_seq >= 2, got {vocab} and {max_seq}"
        )));
    }
    if d_model > MAX_FIXTURE_D_MODEL {
        return Err(Error::InvalidArgument(format!(
            "vocab {vocab} and max_seq {max_seq} need d_model {d_model}, above the fixture budget of {MAX_FIXTURE_D_MODEL}"
        )));
    }
    Ok(())
}

/// Mutable view used while wiring a constructed model.
struct Wiring<'a> {
    w: &'a mut Weights,
}

impl Wiring<'_> {
    fn set(t: &mut Tensor, idx: usize, v: f64) {
        t.data_mut()[idx] = v;
    }

    fn q(&mut self, l: usize, h: usize, from: usize, to: usize, v: f64) {
        let (d, dh) = (self.w.config.d_model, self.w.config.d_head);
        Self::set(&mut self.w.layers[l].w_q, h * d * dh + from * dh + to, v);
    }

    fn k(&mut self, l: usize, h: usize, from: usize, to: usize, v: f64) {
        let (d, dh) = (self.w.config.d_model, self.w.config.d_head);
        Self::set(&mut self.w.layers[l].w_k, h * d * dh + from * dh + to, v);
    }

    fn v(&mut self, l: usize, h: usize, from: usize, to: usize, v: f64) {
        let (d, dh) = (self.w.config.d_model, self.w.config.d_head);
        Self::set(&mut self.w.layers[l].w_v, h * d * dh + from * dh + to, v);
    }

    fn bq(&mut self, l: usize, h: usize, dim: usize, v: f64) {
        let dh = self.w.config.d_head;
        Self::set(&mut self.w.layers[l].b_q, h * dh + dim, v);
    }

    fn o(&mut self, l: usize, h: usize, dim: usize, to: usize, v: f64) {
        let (d, dh) = (self.w.config.d_model, self.w.config.d_head);
        Self::set(&mut self.w.layers[l].w_o, (h * dh + dim) * d + to, v);
    }

    /// Query at position `p` matches key at position `p - lag`.
    fn positional(&mut self, l: usize, h: usize, pos: usize, max_seq: usize, lag: usize, a: f64) {
        for p in 0..max_seq {
            self.q(l, h, pos + p, p, a);
            if p + lag < max_seq {
                self.k(l, h, pos + p, p + lag, a);
            }
        }
    }

    /// Every query scores `weight · sharpness` against position 0 through dimension `dim`.
    fn fallback(&mut self, l: usize, h: usize, pos: usize, dim: usize, a: f64, weight: f64) {
        self.bq(l, h, dim, a);
        self.k(l, h, pos, dim, weight * a);
    }

    /// Value copies the `n`-wide block at `from` into head dims `0..n`.
    fn copy_value(&mut self, l: usize, h: usize, from: usize, n: usize, sign: f64) {
        for t in 0..n {
            self.v(l, h, from + t, t, sign);
        }
    }

    fn write_out(&mut self, l: usize, h: usize, to: usize, n: usize, gain: f64) {
        for t in 0..n {
            self.o(l, h, t, to + t, gain);
        }
    }
}

fn centered_one_hots(rows: usize, d_model: usize, offset: usize, n: usize) -> Tensor {
    Tensor::from_fn(&[rows, d_model], |ix| {
        let (r, c) = (ix[0], ix[1]);
        if c < offset || c >= offset + n {
            0.0
        } else if c - offset == r {
            1.0 - 1.0 / n as f64
        } else {
            -1.0 / n as f64
        }
    })
}

/// LayerNorm gain that undoes the normalization for zero-mean inputs of the given squared norm.
fn ln_gain(sq_norm: f64, d_model: usize) -> f64 {
    (sq_norm / d_model as f64 + EPS).sqrt()
}

/// Two-layer attention-only model with a previous-token head in layer 0 and an
/// induction head in layer 1 (see [`InductionLayout`]).
///
/// Layer 1 also holds a self-attending head that writes `-0.3` of the current
/// token, a previous-token head that writes `+0.3` of the previous token, and an
/// all-zero head. The induction head's value reads `TOK - PREV`, so position 0
/// (where the previous-token channel holds the token itself) carries a null
/// value and serves as the no-match attention sink.
pub fn build_induction_model(vocab: usize, max_seq: usize, sharpness: f64) -> Result<Weights> {
    let lay = InductionLayout::new(vocab, max_seq);
    let cfg = lay.config();
    check_fixture_args(vocab, max_seq, sharpness, cfg.d_model)?;
    let (v, t, dh, d) = (vocab, max_seq, lay.d_head, cfg.d_model);
    let a = sharpness.sqrt() * (dh as f64).powf(0.25);
    let one_hot = |n: usize| 1.0 - 1.0 / n as f64;

    let mut w = Weights::zeros(&cfg);
    w.w_e = centered_one_hots(v, d, lay.tok, v);
    w.w_pos = centered_one_hots(t, d, lay.pos, t);

    let base = one_hot(v) + one_hot(t);
    w.layers[0].ln1 = LayerNormWeights::new(d, ln_gain(base, d));
    w.layers[1].ln1 = LayerNormWeights::new(d, ln_gain(base + one_hot(v), d));
    w.ln_final = LayerNormWeights::new(d, ln_gain(base + one_hot(v) + 1.5, d));

    let mut wire = Wiring { w: &mut w };
    // layer 0, head 0: previous-token head writing into PREV
    wire.positional(0, 0, lay.pos, t, 1, a);
    wire.copy_value(0, 0, lay.tok, v, 1.0);
    wire.write_out(0, 0, lay.prev, v, 1.0);

    // layer 1, head 0: attend to self, suppress the current token
    wire.positional(1, 0, lay.pos, t, 0, a);
    wire.copy_value(1, 0, lay.tok, v, 1.0);
    wire.write_out(1, 0, lay.out, v, -0.3);

    // layer 1, head 1: induction. Query = current token, key = PREV - TOK.
    let (l, h) = lay.induction_head;
    for tok in 0..v {
        wire.q(l, h, lay.tok + tok, tok, a);
        wire.k(l, h, lay.prev + tok, tok, a);
        wire.k(l, h, lay.tok + tok, tok, -a);
    }
    wire.fallback(l, h, lay.pos, dh - 1, a, 0.5);
    wire.copy_value(l, h, lay.tok, v, 1.0);
    wire.copy_value(l, h, lay.prev, v, -1.0);
    wire.write_out(l, h, lay.out, v, 1.0);

    // layer 1, head 2: previous-token head echoing the previous token
    wire.positional(1, 2, lay.pos, t, 1, a);
    wire.copy_value(1, 2, lay.tok, v, 1.0);
    wire.write_out(1, 2, lay.out, v, 0.3);

    for tok in 0..v {
        w.w_u.data_mut()[(lay.out + tok) * v + tok] = LOGIT_GAIN;
    }
    w.validate()?;
    Ok(w)
}

/// Two-layer model whose layer-1 detector head only attends to a source when the
/// two tokens before it match the two tokens ending at the query. A single-token
/// match loses to a fallback on position 0.
///
/// Keys read `PREV - TOK` and `PREV2 - PREV`; both vanish at position 0, where
/// every channel holds the first token, so the sink never matches spuriously.
pub fn build_long_prefix_model(vocab: usize, max_seq: usize, sharpness: f64) -> Result<Weights> {
    let lay = LongPrefixLayout::new(vocab, max_seq);
    let cfg = lay.config();
    check_fixture_args(vocab, max_seq, sharpness, cfg.d_model)?;
    let (v, t, dh, d) = (vocab, max_seq, lay.d_head, cfg.d_model);
    let a = sharpness.sqrt() * (dh as f64).powf(0.25);
    let one_hot = |n: usize| 1.0 - 1.0 / n as f64;

    let mut w = Weights::zeros(&cfg);
    w.w_e = centered_one_hots(v, d, lay.tok, v);
    w.w_pos = centered_one_hots(t, d, lay.pos, t);
    let base = one_hot(v) + one_hot(t);
    w.layers[0].ln1 = LayerNormWeights::new(d, ln_gain(base, d));
    w.layers[1].ln1 = LayerNormWeights::new(d, ln_gain(base + 2.0 * one_hot(v), d));
    w.ln_final = LayerNormWeights::new(d, ln_gain(base + 3.0 * one_hot(v), d));

    let mut wire = Wiring { w: &mut w };
    wire.positional(0, 0, lay.pos, t, 1, a);
    wire.copy_value(0, 0, lay.tok, v, 1.0);
    wire.write_out(0, 0, lay.prev, v, 1.0);

    wire.positional(0, 1, lay.pos, t, 2, a);
    wire.fallback(0, 1, lay.pos, dh - 1, a, 0.5);
    wire.copy_value(0, 1, lay.tok, v, 1.0);
    wire.write_out(0, 1, lay.prev2, v, 1.0);

    let (l, h) = lay.detector_head;
    for tok in 0..v {
        wire.q(l, h, lay.tok + tok, tok, a);
        wire.k(l, h, lay.prev + tok, tok, a);
        wire.k(l, h, lay.tok + tok, tok, -a);
        wire.q(l, h, lay.prev + tok, v + tok, a);
        wire.k(l, h, lay.prev2 + tok, v + tok, a);
        wire.k(l, h, lay.prev + tok, v + tok, -a);
    }
    wire.fallback(l, h, lay.pos, dh - 1, a, 1.5);
    wire.copy_value(l, h, lay.tok, v, 1.0);
    wire.write_out(l, h, lay.out, v, 1.0);

    for tok in 0..v {
        w.w_u.data_mut()[(lay.out + tok) * v + tok] = LOGIT_GAIN;
    }
    w.validate()?;
    Ok(w)
}

/// Model with small random weights, for exercising the algebra on generic inputs.
pub fn build_random_model(cfg: &ModelConfig, seed: u64) -> Result<Weights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |shape: &[usize], scale: f64| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0) * scale);
    let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
    let s = 1.0 / (d as f64).sqrt();
    let ln = |rand: &mut dyn FnMut(&[usize], f64) -> Tensor| LayerNormWeights {
        gamma: Tensor::vector(rand(&[d], 0.2).data().iter().map(|v| 1.0 + v).collect()),
        beta: rand(&[d], 0.1),
    };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let ln1 = ln(&mut rand);
        let mlp = if cfg.d_mlp > 0 {
            Some(MlpWeights {
                ln: ln(&mut rand),
                w_in: rand(&[d, cfg.d_mlp], s),
                b_in: rand(&[cfg.d_mlp], 0.1),
                w_out: rand(&[cfg.d_mlp, d], 1.0 / (cfg.d_mlp as f64).sqrt()),
                b_out: rand(&[d], 0.1),
            })
        } else {
            None
        };
        layers.push(LayerWeights {
            ln1,
            w_q: rand(&[h, d, dh], 2.0 * s),
            w_k: rand(&[h, d, dh], 2.0 * s),
            w_v: rand(&[h, d, dh], s),
            b_q: rand(&[h, dh], 0.1),
            b_k: rand(&[h, dh], 0.1),
            b_v: rand(&[h, dh], 0.1),
            w_o: rand(&[d, d], s),
            b_o: rand(&[d], 0.1),
            mlp,
        });
    }
    let w = Weights {
        config: cfg.clone(),
        w_e: rand(&[cfg.vocab, d], 1.0),
        w_pos: rand(&[cfg.max_seq, d], 0.5),
        layers,
        ln_final: ln(&mut rand),
        w_u: rand(&[d, cfg.vocab], s),
        b_u: rand(&[cfg.vocab], 0.1),
    };
    w.validate()?;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;

    fn argmax(x: &[f64]) -> usize {
        let mut best = 0;
        for (i, v) in x.iter().enumerate() {
            if *v > x[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn induction_on_abca() {
        let w = build_induction_model(31, 16, 10.0).unwrap();
        let lay = InductionLayout::new(31, 16);
        let (a, b, c) = (0, 1, 2);
        let t = forward(&w, &[a, b, c, a]).unwrap();
        let (l, h) = lay.induction_head;
        assert!(t.layers[l].pattern[h].at(3, 1) >= 0.9, "{}", t.layers[l].pattern[h].at(3, 1));
        let (l0, h0) = lay.prev_token_head;
        assert!(t.layers[l0].pattern[h0].at(3, 2) >= 0.99);
        assert_eq!(argmax(t.logits_at(3)), b as usize);
    }

    #[test]
    fn repeated_sequence_predictions() {
        let w = build_induction_model(31, 16, 10.0).unwrap();
        let first: Vec<u32> = vec![4, 17, 9, 30, 2, 11, 25, 7];
        let toks: Vec<u32> = first.iter().chain(&first).copied().collect();
        let t = forward(&w, &toks).unwrap();
        for q in 8..15 {
            assert_eq!(argmax(t.logits_at(q)) as u32, toks[q + 1], "position {q}");
        }
    }

    #[test]
    fn no_repeat_falls_back_to_position_zero() {
        let w = build_induction_model(31, 16, 10.0).unwrap();
        let toks: Vec<u32> = (0..16).collect();
        let t = forward(&w, &toks).unwrap();
        let a = &t.layers[1].pattern[1];
        for q in 1..16 {
            assert!(a.at(q, 0) > 0.8, "q={q}: {}", a.at(q, 0));
        }
        // sink carries no value
        assert!(t.layers[1].z[1].row(15).iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn ln_is_near_identity() {
        let w = build_induction_model(31, 16, 10.0).unwrap();
        let t = forward(&w, &[3, 5, 3, 5]).unwrap();
        for l in &t.layers {
            for s in &l.ln1_scale {
                let g = w.layers[0].ln1.gamma.data()[0];
                assert!((s * g - 1.0).abs() < 0.5);
            }
        }
    }

    #[test]
    fn long_prefix_detector() {
        let w = build_long_prefix_model(31, 16, 10.0).unwrap();
        let lay = LongPrefixLayout::new(31, 16);
        let (l, h) = lay.detector_head;
        // A B C x y A B: query at last B, target is C at position 2
        let toks = [0, 1, 2, 20, 21, 0, 1];
        let t = forward(&w, &toks).unwrap();
        assert!(t.layers[l].pattern[h].at(6, 2) > 0.9);
        // X B C x y A B: single-token match only
        let toks = [9, 1, 2, 20, 21, 0, 1];
        let t = forward(&w, &toks).unwrap();
        assert!(t.layers[l].pattern[h].at(6, 2) < 0.1);
    }

    #[test]
    fn fixture_argument_errors() {
        assert!(build_induction_model(31, 16, 0.0).is_err());
        assert!(build_induction_model(2, 16, 1.0).is_err());
        assert!(build_induction_model(300, 16, 1.0).is_err());
        assert!(build_long_prefix_model(31, 1, 1.0).is_err());
    }
}
