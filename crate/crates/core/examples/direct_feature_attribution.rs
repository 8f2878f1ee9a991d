// SPDX-License-Identifier: MIT OR Apache-2.0

//! Split one feature activation into per-head and per-source-position parts.

mod common;

use attn_sae::attribution::{dfa_by_head, dfa_by_source, direct_logit_effect};
use attn_sae::model::{forward, Site};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = common::fixture();
    let sae = common::layer1_sae(&w);
    let tokens = [5, 11, 2, 20, 7, 5, 11, 2, 20, 7];
    let tr = forward(&w, &tokens)?;
    let dest = 6;
    let f = sae.encode(tr.site(Site::z(1))?.row(dest))?;
    let (feature, act) = f.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    println!("strongest feature at position {dest}: {feature} = {act:.4} (bias {:.4})", sae.feature_bias(feature));

    for (name, b) in [("head", dfa_by_head(&sae, feature, &tr, dest)?), ("source", dfa_by_source(&sae, feature, &tr, dest)?)] {
        println!("by {name}: total {:.4}, of which remainder {:.4}", b.sum(), b.remainder);
        for e in b.contributions.iter().filter(|e| e.value.abs() > 1e-3) {
            println!("  {:<10} {:+.4}", e.key, e.value);
        }
    }
    let logits = direct_logit_effect(&w, &sae, feature, 3)?;
    println!("boosts {:?}", logits.top);
    Ok(())
}
