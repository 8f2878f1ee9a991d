// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight-based attribution of SAE features to attention heads.

mod common;

use attn_sae::attribution::{head_attribution, top_features_for_head};
use attn_sae::metrics::SparseActivations;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = common::fixture();
    let sae = common::layer1_sae(&w);
    let n_heads = w.config.n_heads;
    let live: Vec<bool> = SparseActivations::collect(&w, &sae, &common::eval_data(200))?
        .fire_counts()
        .iter()
        .map(|c| *c > 0)
        .collect();

    for head in 0..n_heads {
        let top = top_features_for_head(&sae, head, n_heads, 3, Some(&live))?;
        let shown: Vec<String> = top.iter().map(|(i, h)| format!("{i} ({h:.2})")).collect();
        println!("head {head}: {}", shown.join(", "));
    }
    if let Some(&(i, _)) = top_features_for_head(&sae, 1, n_heads, 1, Some(&live))?.first() {
        let h = head_attribution(&sae, i, n_heads)?;
        println!("feature {i} decoder mass per head: {h:.3?}");
    }
    Ok(())
}
