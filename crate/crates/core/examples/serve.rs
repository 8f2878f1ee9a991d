// SPDX-License-Identifier: MIT OR Apache-2.0

//! Serve the explorer API for the fixture model and a layer-1 SAE.
//!
//! `cargo run --release --example serve -- [port]`, then for example
//! `curl -d '{"tokens":[3,17,9,4,3]}' localhost:8080/api/run`.

mod common;

use attn_sae::interface::server::{serve, Bundle};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let port = std::env::args().nth(1).map(|p| p.parse()).transpose()?.unwrap_or(8080);
    let w = common::fixture();
    let sae = common::layer1_sae(&w);
    let bundle = Bundle::new(w, vec![sae], common::eval_data(200))?;
    serve(bundle, "127.0.0.1", port).await?;
    Ok(())
}
