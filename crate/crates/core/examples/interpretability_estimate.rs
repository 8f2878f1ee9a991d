// SPDX-License-Identifier: MIT OR Apache-2.0

//! Turn human feature judgments into an interpretable fraction with an exact
//! Clopper-Pearson interval.

use attn_sae::metrics::{clopper_pearson, summarize_annotations, FeatureAnnotation, Verdict};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let verdicts = [Verdict::Interpretable; 20].into_iter().chain([Verdict::Not; 10]).chain([Verdict::Dead; 4]);
    let annotations: Vec<FeatureAnnotation> = verdicts
        .enumerate()
        .map(|(feature_id, verdict)| FeatureAnnotation { feature_id, verdict, note: String::new() })
        .collect();
    let s = summarize_annotations(&annotations, 0.05)?;
    println!(
        "{} interpretable, {} not, {} dead: {:.3} with 95% interval [{:.3}, {:.3}]",
        s.interpretable, s.not_interpretable, s.dead, s.fraction, s.interval.0, s.interval.1
    );
    for x in [0, 1, 15, 29, 30] {
        let (lo, hi) = clopper_pearson(x, 30, 0.05)?;
        println!("  {x:>2}/30 -> [{lo:.3}, {hi:.3}]");
    }
    Ok(())
}
