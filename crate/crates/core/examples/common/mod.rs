// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared setup: the induction fixture and a quickly trained layer-1 SAE.

#![allow(dead_code)]

use std::path::Path;

use attn_sae::corpus::{gen_random_repeated, ActivationBuffer, ModelSource, TokenDataset};
use attn_sae::model::{build_induction_model, Site, Weights};
use attn_sae::sae::{load_sae, train, SaeParams, TrainConfig};

pub const VOCAB: usize = 26;
pub const SEQ: usize = 16;

pub fn fixture() -> Weights {
    build_induction_model(VOCAB, SEQ, 10.0).expect("fixture builds")
}

pub fn eval_data(n: usize) -> TokenDataset {
    gen_random_repeated(n, SEQ, VOCAB, 8).expect("dataset")
}

/// Loads `out/sae.json` when `train_sae` has been run, otherwise trains a
/// small SAE (a few seconds in release mode).
pub fn layer1_sae(w: &Weights) -> SaeParams {
    let saved = Path::new("out/sae.json");
    if let Ok(sae) = load_sae(saved) {
        if sae.check_attach(&w.config).is_ok() {
            return sae;
        }
    }
    let data = gen_random_repeated(25_000, SEQ, VOCAB, 1).expect("dataset");
    let cfg = TrainConfig {
        total_steps: 1500,
        resample_every: 500,
        resample_until: 1000,
        ..TrainConfig::default()
    };
    let site = Site::z(1);
    let src = ModelSource::new(w, &data, site).expect("source");
    let mut buf = ActivationBuffer::new(src, 16_384, cfg.seed).expect("buffer");
    train(&mut buf, Some(site), &cfg).expect("training").0
}
