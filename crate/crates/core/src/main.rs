// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    std::process::exit(attn_sae::interface::run_cli(std::env::args_os()));
}
