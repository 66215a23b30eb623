//! Classifier-free guidance at work: train a small conditional model, then
//! sample at several guidance scales and compare the unigram KL to each
//! class's analytic marginal.
//!
//! ```bash
//! cargo run --release --example sample_with_guidance
//! ```

use ssmtok::blocks::BlockVariant;
use ssmtok::corpus::{SynthCorpus, SynthCorpusConfig};
use ssmtok::eval::{eval_kl, KL_SMOOTHING};
use ssmtok::model::{generate, Model, ModelConfig, SamplingConfig, TokenMode};
use ssmtok::train::{train_loop, TrainConfig, TrainState};

fn main() -> ssmtok::Result<()> {
    let corpus_cfg = SynthCorpusConfig {
        classes: 2,
        vocab: 32,
        k_layers: 1,
        t_frames: 16,
        train_size: 1024,
        val_size: 64,
        seed: 3,
        ..SynthCorpusConfig::toy()
    };
    let corpus = SynthCorpus::new(corpus_cfg)?;
    let (train_set, val_set) = corpus.generate();

    let model_cfg = ModelConfig {
        mode: TokenMode::Coarse,
        k_layers: 1,
        n_blocks: 2,
        hidden: 64,
        vocab: 32,
        state_dim: 16,
        cond_classes: 2,
        cond_width: 32,
        dropout: 0.0,
        ssm_headdim: 16,
        max_len: 64,
        ..ModelConfig::toy(BlockVariant::PrefixSimba)
    };
    let mut rng = ssmtok::stream_rng(1, "example-init", 0);
    let model = Model::init(model_cfg, &mut rng)?;
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        grad_accum: 1,
        max_steps: 400,
        warmup_steps: 40,
        eval_every: 200,
        seed: 1,
        ..TrainConfig::default()
    };
    let state = TrainState::new(&model.params(), cfg.seed);
    let out = train_loop(&model, &train_set, &val_set, &cfg, state, None)?;
    println!(
        "trained 400 steps, final val loss {:.4}",
        out.metrics.last().unwrap().val_loss
    );

    for scale in [0.0, 1.0, 3.0] {
        let mut kls = Vec::new();
        for class in 0..2usize {
            let mut samples = Vec::new();
            for i in 0..8 {
                let sampling = SamplingConfig {
                    top_k: 32,
                    temperature: 1.0,
                    guidance_scale: scale,
                    seed: 100 + i,
                };
                let grid = generate(&model, Some(class), 16, &sampling)?;
                samples.extend_from_slice(grid.layer(0));
            }
            kls.push(eval_kl(&samples, corpus.stationary(class), KL_SMOOTHING)?);
        }
        println!(
            "guidance s = {scale}: unigram KL per class = [{:.4}, {:.4}]",
            kls[0], kls[1]
        );
    }
    Ok(())
}
