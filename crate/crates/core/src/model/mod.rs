// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small pre-LN decoder-only transformer that records every activation the
//! attribution code needs, and can re-run with spliced-in activations under
//! frozen attention patterns and LayerNorm scales.

mod fixture;
mod forward;
mod tokenizer;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use fixture::{
    build_induction_model, build_long_prefix_model, build_random_model, InductionLayout, LongPrefixLayout,
};
pub use forward::{forward, forward_spliced, forward_until, FreezeFlags, HookedTrace, LayerTrace, Override, Splice};
pub use tokenizer::Tokenizer;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    /// Hidden width of the MLP; zero for an attention-only model.
    pub d_mlp: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::InvalidArgument(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn attn_only(&self) -> bool {
        self.d_mlp == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormWeights {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormWeights {
    pub fn new(d: usize, gamma: f64) -> Self {
        Self {
            gamma: Tensor::vector(vec![gamma; d]),
            beta: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub ln: LayerNormWeights,
    /// `[d_model × d_mlp]`
    pub w_in: Tensor,
    pub b_in: Tensor,
    /// `[d_mlp × d_model]`
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// One transformer block. Matrices act on row vectors (`x · W`).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1: LayerNormWeights,
    /// `[n_heads × d_model × d_head]`
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `[n_heads × d_head]`
    pub b_q: Tensor,
    pub b_k: Tensor,
    pub b_v: Tensor,
    /// `[d_model × d_model]`, applied to `z_cat`; rows `h·d_head..(h+1)·d_head` belong to head `h`.
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub mlp: Option<MlpWeights>,
}

impl LayerWeights {
    pub(crate) fn zeros(cfg: &ModelConfig) -> Self {
        let (h, d, dh) = (cfg.n_heads, cfg.d_model, cfg.d_head);
        let mlp = (cfg.d_mlp > 0).then(|| MlpWeights {
            ln: LayerNormWeights::new(d, 1.0),
            w_in: Tensor::zeros(&[d, cfg.d_mlp]),
            b_in: Tensor::zeros(&[cfg.d_mlp]),
            w_out: Tensor::zeros(&[cfg.d_mlp, d]),
            b_out: Tensor::zeros(&[d]),
        });
        Self {
            ln1: LayerNormWeights::new(d, 1.0),
            w_q: Tensor::zeros(&[h, d, dh]),
            w_k: Tensor::zeros(&[h, d, dh]),
            w_v: Tensor::zeros(&[h, d, dh]),
            b_q: Tensor::zeros(&[h, dh]),
            b_k: Tensor::zeros(&[h, dh]),
            b_v: Tensor::zeros(&[h, dh]),
            w_o: Tensor::zeros(&[d, d]),
            b_o: Tensor::zeros(&[d]),
            mlp,
        }
    }

    /// `W_V` of one head as a `[d_model × d_head]` matrix.
    pub fn w_v_head(&self, head: usize) -> Tensor {
        self.w_v.slab(head)
    }

    pub fn w_q_head(&self, head: usize) -> Tensor {
        self.w_q.slab(head)
    }

    pub fn w_k_head(&self, head: usize) -> Tensor {
        self.w_k.slab(head)
    }

    /// The `[d_head × d_model]` block of `W_O` that reads head `head`'s slice of `z_cat`.
    pub fn w_o_head(&self, head: usize, d_head: usize) -> Tensor {
        let d = self.w_o.cols();
        let rows = &self.w_o.data()[head * d_head * d..(head + 1) * d_head * d];
        Tensor::from_parts(vec![d_head, d], rows.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    /// `[vocab × d_model]`
    pub w_e: Tensor,
    /// `[max_seq × d_model]`
    pub w_pos: Tensor,
    pub layers: Vec<LayerWeights>,
    pub ln_final: LayerNormWeights,
    /// `[d_model × vocab]`
    pub w_u: Tensor,
    pub b_u: Tensor,
}

impl Weights {
    pub(crate) fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            config: cfg.clone(),
            w_e: Tensor::zeros(&[cfg.vocab, cfg.d_model]),
            w_pos: Tensor::zeros(&[cfg.max_seq, cfg.d_model]),
            layers: (0..cfg.n_layers).map(|_| LayerWeights::zeros(cfg)).collect(),
            ln_final: LayerNormWeights::new(cfg.d_model, 1.0),
            w_u: Tensor::zeros(&[cfg.d_model, cfg.vocab]),
            b_u: Tensor::zeros(&[cfg.vocab]),
        }
    }

    /// Check every tensor against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, h, dh) = (c.d_model, c.n_heads, c.d_head);
        let mut checks: Vec<(String, &Tensor, Vec<usize>)> = vec![
            ("W_E".into(), &self.w_e, vec![c.vocab, d]),
            ("W_pos".into(), &self.w_pos, vec![c.max_seq, d]),
            ("ln_final.w".into(), &self.ln_final.gamma, vec![d]),
            ("ln_final.b".into(), &self.ln_final.beta, vec![d]),
            ("W_U".into(), &self.w_u, vec![d, c.vocab]),
            ("b_U".into(), &self.b_u, vec![c.vocab]),
        ];
        if self.layers.len() != c.n_layers {
            return Err(Error::Shape(format!(
                "config has {} layers, weights have {}",
                c.n_layers,
                self.layers.len()
            )));
        }
        for (l, lw) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("blocks.{l}.{n}");
            checks.extend([
                (p("ln1.w"), &lw.ln1.gamma, vec![d]),
                (p("ln1.b"), &lw.ln1.beta, vec![d]),
                (p("attn.W_Q"), &lw.w_q, vec![h, d, dh]),
                (p("attn.W_K"), &lw.w_k, vec![h, d, dh]),
                (p("attn.W_V"), &lw.w_v, vec![h, d, dh]),
                (p("attn.b_Q"), &lw.b_q, vec![h, dh]),
                (p("attn.b_K"), &lw.b_k, vec![h, dh]),
                (p("attn.b_V"), &lw.b_v, vec![h, dh]),
                (p("attn.W_O"), &lw.w_o, vec![d, d]),
                (p("attn.b_O"), &lw.b_o, vec![d]),
            ]);
            match (&lw.mlp, c.d_mlp) {
                (None, 0) => {}
                (Some(m), dm) if dm > 0 => checks.extend([
                    (p("ln2.w"), &m.ln.gamma, vec![d]),
                    (p("ln2.b"), &m.ln.beta, vec![d]),
                    (p("mlp.W_in"), &m.w_in, vec![d, dm]),
                    (p("mlp.b_in"), &m.b_in, vec![dm]),
                    (p("mlp.W_out"), &m.w_out, vec![dm, d]),
                    (p("mlp.b_out"), &m.b_out, vec![d]),
                ]),
                _ => return Err(Error::Shape(format!("layer {l}: MLP presence disagrees with d_mlp"))),
            }
        }
        for (name, t, shape) in checks {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub(crate) fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("W_E".to_string(), &self.w_e),
            ("W_pos".to_string(), &self.w_pos),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("blocks.{l}.{n}");
            out.extend([
                (p("ln1.w"), &lw.ln1.gamma),
                (p("ln1.b"), &lw.ln1.beta),
                (p("attn.W_Q"), &lw.w_q),
                (p("attn.W_K"), &lw.w_k),
                (p("attn.W_V"), &lw.w_v),
                (p("attn.b_Q"), &lw.b_q),
                (p("attn.b_K"), &lw.b_k),
                (p("attn.b_V"), &lw.b_v),
                (p("attn.W_O"), &lw.w_o),
                (p("attn.b_O"), &lw.b_o),
            ]);
            if let Some(m) = &lw.mlp {
                out.extend([
                    (p("ln2.w"), &m.ln.gamma),
                    (p("ln2.b"), &m.ln.beta),
                    (p("mlp.W_in"), &m.w_in),
                    (p("mlp.b_in"), &m.b_in),
                    (p("mlp.W_out"), &m.w_out),
                    (p("mlp.b_out"), &m.b_out),
                ]);
            }
        }
        out.extend([
            ("ln_final.w".to_string(), &self.ln_final.gamma),
            ("ln_final.b".to_string(), &self.ln_final.beta),
            ("W_U".to_string(), &self.w_u),
            ("b_U".to_string(), &self.b_u),
        ]);
        out
    }
}

/// Write weights as a JSON manifest at `path` plus a sibling `.bin` blob.
pub fn save_weights(weights: &Weights, path: &Path) -> Result<()> {
    weights.validate()?;
    let config = serde_json::to_value(&weights.config)?;
    container::save(path, "model", config, None, &weights.named_tensors())
}

pub fn load_weights(path: &Path) -> Result<Weights> {
    let mut c: Container = container::load(path, "model")?;
    let config: ModelConfig = serde_json::from_value(c.config.clone())?;
    config.validate()?;
    let mut w = Weights::zeros(&config);
    w.w_e = c.take("W_E")?;
    w.w_pos = c.take("W_pos")?;
    for (l, lw) in w.layers.iter_mut().enumerate() {
        let p = |n: &str| format!("blocks.{l}.{n}");
        lw.ln1.gamma = c.take(&p("ln1.w"))?;
        lw.ln1.beta = c.take(&p("ln1.b"))?;
        lw.w_q = c.take(&p("attn.W_Q"))?;
        lw.w_k = c.take(&p("attn.W_K"))?;
        lw.w_v = c.take(&p("attn.W_V"))?;
        lw.b_q = c.take(&p("attn.b_Q"))?;
        lw.b_k = c.take(&p("attn.b_K"))?;
        lw.b_v = c.take(&p("attn.b_V"))?;
        lw.w_o = c.take(&p("attn.W_O"))?;
        lw.b_o = c.take(&p("attn.b_O"))?;
        if let Some(m) = lw.mlp.as_mut() {
            m.ln.gamma = c.take(&p("ln2.w"))?;
            m.ln.beta = c.take(&p("ln2.b"))?;
            m.w_in = c.take(&p("mlp.W_in"))?;
            m.b_in = c.take(&p("mlp.b_in"))?;
            m.w_out = c.take(&p("mlp.W_out"))?;
            m.b_out = c.take(&p("mlp.b_out"))?;
        }
    }
    w.ln_final.gamma = c.take("ln_final.w")?;
    w.ln_final.beta = c.take("ln_final.b")?;
    w.w_u = c.take("W_U")?;
    w.b_u = c.take("b_U")?;
    c.finish()?;
    w.validate().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(w)
}

/// Named activation points inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Hook {
    ResidPre,
    /// Concatenated per-head `z`, before `W_O`.
    ZCat,
    AttnOut,
    ResidMid,
    MlpOut,
    ResidPost,
}

/// An activation site: a hook at a given layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub layer: usize,
    pub hook: Hook,
}

impl Site {
    pub fn new(layer: usize, hook: Hook) -> Self {
        Self { layer, hook }
    }

    pub fn z(layer: usize) -> Self {
        Self::new(layer, Hook::ZCat)
    }

    pub fn resid_pre(layer: usize) -> Self {
        Self::new(layer, Hook::ResidPre)
    }

    /// Width of the activation at this site (every site is `d_model` wide).
    pub fn dim(&self, cfg: &ModelConfig) -> usize {
        cfg.d_model
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers {
            return Err(Error::OutOfRange(format!(
                "site {self} but the model has {} layers",
                cfg.n_layers
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = self.layer;
        match self.hook {
            Hook::ResidPre => write!(f, "blocks.{l}.hook_resid_pre"),
            Hook::ZCat => write!(f, "blocks.{l}.attn.hook_z"),
            Hook::AttnOut => write!(f, "blocks.{l}.hook_attn_out"),
            Hook::ResidMid => write!(f, "blocks.{l}.hook_resid_mid"),
            Hook::MlpOut => write!(f, "blocks.{l}.hook_mlp_out"),
            Hook::ResidPost => write!(f, "blocks.{l}.hook_resid_post"),
        }
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognized site '{s}'"));
        let rest = s.strip_prefix("blocks.").ok_or_else(bad)?;
        let (layer, hook) = rest.split_once('.').ok_or_else(bad)?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        let hook = match hook {
            "hook_resid_pre" => Hook::ResidPre,
            "attn.hook_z" => Hook::ZCat,
            "hook_attn_out" => Hook::AttnOut,
            "hook_resid_mid" => Hook::ResidMid,
            "hook_mlp_out" => Hook::MlpOut,
            "hook_resid_post" => Hook::ResidPost,
            _ => return Err(bad()),
        };
        Ok(Site { layer, hook })
    }
}

impl Serialize for Site {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Site {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_strings_round_trip() {
        for hook in [
            Hook::ResidPre,
            Hook::ZCat,
            Hook::AttnOut,
            Hook::ResidMid,
            Hook::MlpOut,
            Hook::ResidPost,
        ] {
            let s = Site::new(3, hook);
            assert_eq!(s.to_string().parse::<Site>().unwrap(), s);
        }
        assert_eq!(Site::z(1).to_string(), "blocks.1.attn.hook_z");
        assert!("blocks.x.attn.hook_z".parse::<Site>().is_err());
        assert!("layers.1.attn.hook_z".parse::<Site>().is_err());
    }

    #[test]
    fn config_rejects_inconsistent_dims() {
        let mut cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 0,
            vocab: 5,
            max_seq: 4,
            eps: 1e-5,
        };
        assert!(cfg.validate().is_ok());
        cfg.d_head = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 12,
            vocab: 7,
            max_seq: 6,
            eps: 1e-5,
        };
        let w = build_random_model(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_weights(&w, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back, w);
        for ((_, a), (_, b)) in w.named_tensors().iter().zip(back.named_tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }
}
