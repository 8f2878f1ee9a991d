// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run the hand-built induction model and inspect its hooked activations.

use attn_sae::model::{build_induction_model, forward, InductionLayout, Site};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (vocab, max_seq) = (26, 16);
    let w = build_induction_model(vocab, max_seq, 10.0)?;
    let lay = InductionLayout::new(vocab, max_seq);
    // A B C D A B C D: the second half is predictable by induction.
    let tokens = [3, 17, 9, 4, 3, 17, 9, 4];
    let tr = forward(&w, &tokens)?;

    let (l, h) = lay.induction_head;
    println!("induction head {l}.{h} attention from each position:");
    for (q, tok) in tokens.iter().enumerate() {
        let row = tr.layers[l].pattern[h].row(q);
        let (src, p) = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        println!("  pos {q} (token {:>2}) -> pos {src} with weight {p:.3}", tok);
    }
    let z = tr.site(Site::z(1))?;
    println!("z_cat at layer 1: {} x {}", z.rows(), z.cols());
    for pos in 4..tokens.len() {
        let logits = tr.logits_at(pos);
        let best = logits.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        println!("  pos {pos}: predicts {best}");
    }
    Ok(())
}
