// SPDX-License-Identifier: MIT OR Apache-2.0

//! Expand a feature activation recursively through earlier layers.

mod common;

use attn_sae::attribution::{RdfaContext, RdfaNode};
use attn_sae::model::{forward, Site};

fn show(node: &RdfaNode, depth: usize, root: f64) {
    println!("{}{:<28} {:+.4} ({:.0}%)", "  ".repeat(depth), node.label, node.value, 100.0 * node.value / root);
    let mut kids: Vec<&RdfaNode> = node.children.iter().filter(|c| c.value.abs() > 0.02 * root.abs()).collect();
    kids.sort_by(|a, b| b.value.abs().total_cmp(&a.value.abs()));
    for c in kids {
        show(c, depth + 1, root);
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = common::fixture();
    let sae = common::layer1_sae(&w);
    let tokens = [5, 11, 2, 20, 7, 5, 11, 2, 20, 7];
    let tr = forward(&w, &tokens)?;
    let dest = 7;
    let f = sae.encode(tr.site(Site::z(1))?.row(dest))?;
    let feature = f.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;

    let ctx = RdfaContext::new(&w, &tr)?.with_sae(&sae)?;
    let mut root = ctx.root(1, dest, feature)?;
    ctx.expand_tree(&mut root, 3)?;
    show(&root, 0, root.value);
    println!("largest child-sum error: {:.1e}", root.max_child_sum_error());
    Ok(())
}
