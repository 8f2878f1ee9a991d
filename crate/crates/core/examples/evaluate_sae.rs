// SPDX-License-Identifier: MIT OR Apache-2.0

//! Splice an SAE into the forward pass and report L0 and loss recovered.

mod common;

use attn_sae::metrics::{loss_recovered, splice_eval};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = common::fixture();
    let sae = common::layer1_sae(&w);
    let s = splice_eval(&w, &sae, &common::eval_data(300))?;
    println!("rows {}, predicted tokens {}", s.rows, s.tokens_evaluated);
    println!("CE clean {:.4}, spliced {:.4}, zero-ablated {:.4}", s.ce_clean, s.ce_spliced, s.ce_zero);
    println!("L0 {:.2}", s.l0);
    println!("loss recovered {:.3}", loss_recovered(s.ce_clean, s.ce_spliced, s.ce_zero)?);
    let dead = s.fire_counts.iter().filter(|c| **c == 0).count();
    println!("{dead} of {} features never fired", s.fire_counts.len());
    Ok(())
}
