//! Finite-difference gradient checks of every block variant at toy widths.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssmtok::blocks::{Block, BlockDims, BlockVariant};
use ssmtok::tensor::{gradcheck, ops, Tensor};

fn main() -> ssmtok::Result<()> {
    // A linear random readout keeps every parameter's gradient well above
    // the finite-difference noise floor.
    let dims = BlockDims {
        hidden: 8,
        ssm_inner: 16,
        state_dim: 4,
        ssm_heads: 2,
        conv_width: 4,
        attn_heads: 2,
        ff_inner: 16,
        dropout: 0.0,
        init_std: 0.25,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for variant in BlockVariant::all() {
        let block = Block::init(&mut rng, variant, &dims)?;
        let x = Tensor::randn_param(&mut rng, &[1, 5, dims.hidden], 1.0);
        let readout = Tensor::randn_param(&mut rng, &[1, 5, dims.hidden], 1.0);
        readout.set_requires_grad(false);
        let memory = Tensor::randn_param(&mut rng, &[1, 3, dims.hidden], 1.0);
        let mut params = Vec::new();
        block.named_params(&mut params, "");
        // Check at a lively decay point: Δ ≈ softplus(0) ≈ 0.69 keeps the
        // state-decay gradients well above the finite-difference noise.
        for (name, t) in &params {
            if name.ends_with("delta_bias") {
                t.set_data(vec![0.0; t.numel()])?;
            }
        }
        let mut tensors: Vec<Tensor> = params.into_iter().map(|(_, t)| t).collect();
        tensors.push(x.clone());
        let uses_memory = variant.uses_memory();
        let report = gradcheck::check(
            &tensors,
            move |tape| {
                let mem = uses_memory.then_some(&memory);
                let y = block.forward(tape, &x, mem, None).map_err(|e| match e {
                    ssmtok::Error::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                let w = ops::mul(tape, &y, &readout)?;
                ops::sum_all(tape, &w)
            },
            1e-5,
        )?;
        println!(
            "{variant:<18}  {} parameter tensors, max rel err {:.3e}",
            report.rel_errors.len(),
            report.max_rel_error()
        );
    }
    Ok(())
}
