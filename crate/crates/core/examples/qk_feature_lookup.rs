// SPDX-License-Identifier: MIT OR Apache-2.0

//! Score attention-feature and residual-feature pairs through an OV→QK path.
//!
//! Needs three layers: an attention SAE at layer 0, the OV head at layer 1 and
//! the QK head at layer 2, whose residual input carries the second SAE.

use attn_sae::attribution::{qk_feature_lookup, PathScales};
use attn_sae::model::{build_random_model, ModelConfig, Site};
use attn_sae::sae::SaeParams;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig {
        n_layers: 3,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_mlp: 0,
        vocab: 20,
        max_seq: 12,
        eps: 1e-5,
    };
    let w = build_random_model(&cfg, 4)?;
    let attn = SaeParams::init(16, 32, 1).with_site(Site::z(0));
    let resid = SaeParams::init(16, 32, 2).with_site(Site::resid_pre(2));
    let scales = PathScales { ov_source: 1.0, query: 1.0, key: 1.0 };
    let table = qk_feature_lookup(&w, &attn, &resid, (1, 0), (2, 1), scales)?;

    let mut pairs: Vec<(usize, usize, f64)> =
        (0..32).flat_map(|i| (0..32).map(move |j| (i, j))).map(|(i, j)| (i, j, table.row(i)[j])).collect();
    pairs.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()));
    println!("strongest attention-feature / residual-feature pairs:");
    for (i, j, s) in pairs.iter().take(5) {
        println!("  attn {i:>2} x resid {j:>2}: {s:+.4}");
    }
    Ok(())
}
