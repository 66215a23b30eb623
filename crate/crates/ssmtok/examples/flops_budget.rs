//! Training-cost estimates from the 6 · params · tokens heuristic.
//!
//! ```bash
//! cargo run --example flops_budget
//! ```

use ssmtok::train::flops_estimate;

fn main() {
    let cases = [
        ("300M reference, 1500 frames × batch 64 × 1e6 steps", 3e8, 1500.0, 64.0, 1e6),
        ("281M model, 2580 frames × batch 128 × 1e5 steps", 2.81e8, 2580.0, 128.0, 1e5),
        ("toy bench, 1M params, 24 frames × batch 4 × 2e3 steps", 1e6, 24.0, 4.0, 2e3),
    ];
    for (label, params, frames, batch, steps) in cases {
        let flops = flops_estimate(params, frames, batch, steps);
        println!("{label:<55} {flops:.3e} FLOPs");
    }
}
