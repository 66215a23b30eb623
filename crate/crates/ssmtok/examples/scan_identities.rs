//! The three scan routes agree: sequential recurrence, chunked associative
//! evaluation, and (for time-invariant systems) the pre-computed convolution
//! kernel.
//!
//! ```bash
//! cargo run --release --example scan_identities
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmtok::ssm::{
    discretize, lti_conv, lti_kernel, scan_chunked, scan_sequential, selective_scan,
    SsmCoreParams,
};
use ssmtok::Real;

fn main() -> ssmtok::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    // LTI duality: y = K̄ ∗ x equals the recurrence.
    let n = 4;
    let t = 32;
    let a_log: Vec<Real> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<Real> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c: Vec<Real> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let system = discretize(&a_log, &[0.3], &b)?.with_readout(c)?;
    let x: Vec<Real> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y_scan = scan_sequential(&system, &x);
    let kernel = lti_kernel(&system, t)?;
    let y_conv = lti_conv(&kernel, &x);
    let max_dev = y_scan
        .iter()
        .zip(&y_conv)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, Real::max);
    println!("LTI duality       max |scan − conv| = {max_dev:.3e}");

    // Selective scan vs chunked evaluation, several chunk sizes.
    let params = SsmCoreParams::random(&mut rng, 8, 6, 2);
    let x: Vec<Real> = (0..t * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let reference = selective_scan(&params, &x, t)?;
    for chunk in [1usize, 2, 3, 7, t] {
        let y = scan_chunked(&params, &x, t, chunk)?;
        let max_dev = y
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max);
        println!("chunk = {chunk:>2}        max |chunked − sequential| = {max_dev:.3e}");
    }
    println!("kernel head: {:?}", &kernel[..4.min(kernel.len())]);
    Ok(())
}
