// SPDX-License-Identifier: MIT OR Apache-2.0

//! Compare a feature against a hand-written proxy: specificity per activation
//! bin and the contexts it misses.

mod common;

use attn_sae::analysis::{induction_candidates, proxy_report, Proxy};
use attn_sae::attribution::direct_logit_effect;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = common::fixture();
    let sae = common::layer1_sae(&w);
    let data = common::eval_data(400);
    let feature = *induction_candidates(&sae, 1, w.config.n_heads, 0.6, None)?.first().ok_or("no candidate")?;
    let target = direct_logit_effect(&w, &sae, feature, 1)?.argmax();
    let proxy = Proxy::Induction { target };

    let r = proxy_report(&w, &sae, feature, &proxy, &data, 10)?;
    println!("feature {feature}, proxy {proxy:?}");
    println!("{} firings: {} proxy-true, {} proxy-false", r.firings, r.tp, r.fp);
    for b in &r.bins {
        if b.tp + b.fp > 0 {
            println!("  [{:.3}, {:.3}) specificity {:.2} over {} firings", b.lo, b.hi, b.specificity().unwrap_or(0.0), b.tp + b.fp);
        }
    }
    println!("{} of {} proxy-true positions missed", r.false_negatives.len(), r.proxy_true);
    for f in r.false_negatives.iter().take(3) {
        println!("  seq {} pos {}: {:?}", f.seq, f.position, f.context);
    }
    Ok(())
}
