//! The delay and flatten interleavings of an RVQ token grid, and the
//! coarse/fine split.
//!
//! ```bash
//! cargo run --example token_patterns
//! ```

use ssmtok::rvq::{
    delay_apply, delay_invert, flatten_apply, recombine, split_coarse_fine, TokenGrid,
};

fn main() -> ssmtok::Result<()> {
    let grid = TokenGrid::new(3, 5, 10, (0..15).map(|i| i % 10).collect())?;
    println!("grid (K = {}, T = {}):", grid.k_layers(), grid.t_frames());
    for k in 0..grid.k_layers() {
        println!("  layer {k}: {:?}", grid.layer(k));
    }

    let delayed = delay_apply(&grid);
    println!(
        "\ndelay pattern, width K + T − 1 = {} (PAD = {}):",
        delayed.width(),
        delayed.pad_id()
    );
    for k in 0..delayed.k_layers() {
        let row: Vec<String> = (0..delayed.width())
            .map(|c| {
                let t = delayed.get(k, c);
                if t == delayed.pad_id() {
                    " .".into()
                } else {
                    format!("{t:>2}")
                }
            })
            .collect();
        println!("  layer {k}: [{}]", row.join(" "));
    }
    assert_eq!(delay_invert(&delayed)?, grid);
    println!("  roundtrip: delay_invert(delay_apply(g)) == g");

    let flat = flatten_apply(&grid);
    println!("\nflatten pattern, length K·T = {}: {flat:?}", flat.len());

    let (coarse, fine) = split_coarse_fine(&grid)?;
    println!("\ncoarse row: {coarse:?}");
    println!("fine part:  {} layers × {} frames", fine.k_layers(), fine.t_frames());
    assert_eq!(recombine(&coarse, &fine)?, grid);
    println!("recombine(split(g)) == g");
    Ok(())
}
