// SPDX-License-Identifier: MIT OR Apache-2.0

//! Save and reload model weights, SAEs and datasets.

use attn_sae::corpus::gen_random_repeated;
use attn_sae::model::{build_induction_model, load_weights, save_weights, Site};
use attn_sae::sae::{load_sae, save_sae, SaeParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("attn-sae-formats");
    std::fs::create_dir_all(&dir)?;

    let w = build_induction_model(26, 16, 10.0)?;
    save_weights(&w, &dir.join("model.json"))?;
    let back = load_weights(&dir.join("model.json"))?;
    println!("weights round trip exact: {}", back == w);

    let sae = SaeParams::init(4 * w.config.d_head, 64, 0).with_site(Site::z(1));
    save_sae(&sae, &dir.join("sae.json"))?;
    println!("SAE round trip exact: {}", load_sae(&dir.join("sae.json"))? == sae);

    let ds = gen_random_repeated(4, 16, 26, 0)?;
    std::fs::write(dir.join("data.json"), serde_json::to_vec(&ds)?)?;
    for entry in std::fs::read_dir(&dir)? {
        let e = entry?;
        println!("  {} ({} bytes)", e.file_name().to_string_lossy(), e.metadata()?.len());
    }
    Ok(())
}
