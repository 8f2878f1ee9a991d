// SPDX-License-Identifier: MIT OR Apache-2.0

//! Induction score against prefix length, and the effect of corrupting the
//! long prefix on a head that depends on it.

use attn_sae::analysis::{induction_score, prefix_sweep};
use attn_sae::corpus::{corrupt_dataset, gen_prefix_induction};
use attn_sae::model::{build_induction_model, build_long_prefix_model, InductionLayout, LongPrefixLayout};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (vocab, seq) = (26, 16);
    let w = build_induction_model(vocab, seq, 10.0)?;
    let (l, h) = InductionLayout::new(vocab, seq).induction_head;
    for p in prefix_sweep(&w, l, h, &[1, 2, 3, 4], 100, seq, 0)? {
        println!("prefix {}: induction score {:.3}", p.prefix_len, p.score);
    }

    let lp = build_long_prefix_model(vocab, seq, 10.0)?;
    let (dl, dh) = LongPrefixLayout::new(vocab, seq).detector_head;
    let clean = gen_prefix_induction(200, 3, seq, vocab, 1)?;
    let corrupt = corrupt_dataset(&clean, 2)?;
    println!(
        "long-prefix detector: {:.3} clean, {:.3} corrupted",
        induction_score(&lp, dl, dh, &clean)?,
        induction_score(&lp, dl, dh, &corrupt)?
    );
    println!(
        "one-token induction head: {:.3} clean, {:.3} corrupted",
        induction_score(&w, l, h, &clean)?,
        induction_score(&w, l, h, &corrupt)?
    );
    Ok(())
}
