// SPDX-License-Identifier: MIT OR Apache-2.0

//! Find induction features with two heuristics: decoder mass on the induction
//! head, then a behavioural pass rate on repeated sequences.

mod common;

use attn_sae::analysis::{induction_candidates, induction_pass_rate, Outcome};
use attn_sae::metrics::SparseActivations;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = common::fixture();
    let sae = common::layer1_sae(&w);
    let data = common::eval_data(400);
    let live: Vec<bool> = SparseActivations::collect(&w, &sae, &data)?.fire_counts().iter().map(|c| *c > 0).collect();

    let candidates = induction_candidates(&sae, 1, w.config.n_heads, 0.6, Some(&live))?;
    println!("{} live features put at least 60% of their decoder norm on head 1", candidates.len());
    let mut results = Vec::new();
    for &i in &candidates {
        results.push(induction_pass_rate(&w, &sae, i, &data, 200, 0.0, i as u64)?);
    }
    let (pass, rest): (Vec<_>, Vec<_>) = results.into_iter().partition(|r| r.outcome == Outcome::Pass);
    for r in pass.iter().take(5).chain(rest.iter().take(5)) {
        let rate = r.rate.map_or("n/a".to_string(), |x| format!("{x:.2}"));
        println!("  feature {:>3} predicts {:>2}: rate {rate}, {:?}", r.feature, r.token, r.outcome);
    }
    println!("{} of {} pass", pass.len(), candidates.len());
    Ok(())
}
