// SPDX-License-Identifier: MIT OR Apache-2.0

//! Train a small SAE on layer-1 attention outputs and save it.
//!
//! `cargo run --release --example train_sae -- [out_dir]`

use std::path::PathBuf;

use attn_sae::corpus::{gen_random_repeated, ActivationBuffer, ModelSource};
use attn_sae::metrics::evaluate;
use attn_sae::model::{build_induction_model, Site};
use attn_sae::sae::{save_sae, train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out".into()));
    let w = build_induction_model(26, 16, 10.0)?;
    let data = gen_random_repeated(25_000, 16, 26, 1)?;
    let site = Site::z(1);
    let cfg = TrainConfig {
        total_steps: 1500,
        resample_every: 500,
        resample_until: 1000,
        ..TrainConfig::default()
    };
    let mut buf = ActivationBuffer::new(ModelSource::new(&w, &data, site)?, 16_384, cfg.seed)?;
    let (sae, stats) = train(&mut buf, Some(site), &cfg)?;
    println!("{} steps, {} rows, {} resample events", stats.steps_run, stats.rows_seen, stats.resamples.len());

    let report = evaluate(&w, &sae, &gen_random_repeated(200, 16, 26, 2)?)?;
    println!("L0 {:.2}, loss recovered {:.3}, dead {}/{}", report.l0, report.loss_recovered, report.n_dead, report.n_features);

    std::fs::create_dir_all(&out)?;
    save_sae(&sae, &out.join("sae.json"))?;
    println!("saved {}", out.join("sae.json").display());
    Ok(())
}
