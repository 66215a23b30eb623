//! Parameter counts of the four paper-scale variants (24 blocks, hidden
//! 1024, state 512, coarse mode) and of the toy preset.
//!
//! ```bash
//! cargo run --example count_parameters
//! ```

use ssmtok::blocks::BlockVariant;
use ssmtok::model::{count_params, ModelConfig};

fn main() {
    println!("paper-scale preset:");
    for variant in [
        BlockVariant::PrefixSimba,
        BlockVariant::CrossTransformer,
        BlockVariant::PrefixMamba,
        BlockVariant::CrossSimba,
    ] {
        let cfg = ModelConfig::paper(variant);
        let count = count_params(&cfg);
        println!("  {variant:<18} {:>12} ({:.1}M)", count, count as f64 / 1e6);
    }
    println!("\ntoy preset (delay mode, K = 4):");
    for variant in BlockVariant::all() {
        let cfg = ModelConfig::toy(variant);
        let count = count_params(&cfg);
        println!("  {variant:<18} {:>12} ({:.2}M)", count, count as f64 / 1e6);
    }
}
