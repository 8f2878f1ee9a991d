// SPDX-License-Identifier: MIT OR Apache-2.0

//! Build feature dashboards and write them as JSON.

mod common;

use attn_sae::metrics::{dashboard_from, SparseActivations};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = common::fixture();
    let sae = common::layer1_sae(&w);
    let data = common::eval_data(300);
    let acts = SparseActivations::collect(&w, &sae, &data)?;
    let counts = acts.fire_counts();
    let mut busiest: Vec<usize> = (0..counts.len()).collect();
    busiest.sort_by_key(|&i| std::cmp::Reverse(counts[i]));

    let dir = std::path::Path::new("out/dashboards");
    std::fs::create_dir_all(dir)?;
    for &i in busiest.iter().take(3) {
        let rec = dashboard_from(&w, &sae, i, &data, &acts, 20)?;
        println!("feature {i}: fires on {:.1}% of positions, top token {:?}", 100.0 * rec.frequency, rec.top_logits.first().map(|t| t.0));
        if let Some(ex) = rec.top_examples.first() {
            println!("  strongest: {:.3} at position {} of {:?}", ex.activation, ex.position, ex.tokens);
        }
        std::fs::write(dir.join(format!("feature_{i}.json")), serde_json::to_vec_pretty(&rec)?)?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}
