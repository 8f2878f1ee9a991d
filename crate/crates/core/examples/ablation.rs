// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal checks: ablate SAE terms, ablate whole heads, patch activations.

mod common;

use attn_sae::analysis::{
    ablate_sae_terms, dominance_over_median, head_ablation_sweep, patch_site, zero_ablate_feature, Metric, Terms,
};
use attn_sae::model::{forward, Site};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = common::fixture();
    let sae = common::layer1_sae(&w);

    let sweep = head_ablation_sweep(&w, 1, &common::eval_data(200))?;
    for r in &sweep {
        println!("{:?}: loss {:.4} -> {:.4}", r.target, r.clean, r.ablated);
    }
    if let Some((top, ratio)) = dominance_over_median(&sweep) {
        println!("head {top} matters {ratio:.0}x more than the median head");
    }

    // A B C D A: the model should predict B next.
    let tokens = [3, 17, 9, 4, 3];
    let metric = Metric::LogitDiff { position: 4, a: 17, b: 9 };
    let f = sae.encode(forward(&w, &tokens)?.site(Site::z(1))?.row(4))?;
    let feature = f.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let r = zero_ablate_feature(&w, &sae, feature, &tokens, &metric)?;
    println!("zeroing feature {feature}: {} {:.3} -> {:.3}", r.metric, r.clean, r.ablated);
    let r = ablate_sae_terms(&w, &sae, &Terms { features: vec![], bias: false, error: true }, &tokens, &metric)?;
    println!("dropping the SAE error term: {:.3} -> {:.3}", r.clean, r.ablated);

    // Patch in layer-1 outputs from a run where the earlier occurrence differs.
    let corrupt = [3, 12, 9, 4, 3];
    let r = patch_site(&w, &tokens, &corrupt, Site::z(1), &[4], &metric)?;
    println!("patching z at position 4 from the corrupt run: {:.3} -> {:.3}", r.clean, r.ablated);
    Ok(())
}
