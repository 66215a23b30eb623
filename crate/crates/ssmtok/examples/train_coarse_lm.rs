//! Train a small coarse-mode Prefix SiMBA on the synthetic Markov corpus and
//! watch the validation loss approach the analytic entropy rate.
//!
//! ```bash
//! cargo run --release --example train_coarse_lm
//! ```

use ssmtok::blocks::BlockVariant;
use ssmtok::corpus::{SynthCorpus, SynthCorpusConfig};
use ssmtok::model::{Model, ModelConfig, TokenMode};
use ssmtok::train::{train_loop, TrainConfig, TrainState};

fn main() -> ssmtok::Result<()> {
    let corpus_cfg = SynthCorpusConfig {
        classes: 4,
        vocab: 64,
        k_layers: 1,
        t_frames: 16,
        train_size: 1024,
        val_size: 64,
        seed: 0,
        ..SynthCorpusConfig::toy()
    };
    let corpus = SynthCorpus::new(corpus_cfg)?;
    let (train_set, val_set) = corpus.generate();
    let rate = corpus.entropy_rate(0);
    println!("analytic entropy rate: {rate:.4} nats");

    let model_cfg = ModelConfig {
        mode: TokenMode::Coarse,
        k_layers: 1,
        n_blocks: 2,
        hidden: 64,
        state_dim: 16,
        cond_classes: 4,
        cond_width: 32,
        dropout: 0.0,
        ssm_headdim: 16,
        max_len: 64,
        ..ModelConfig::toy(BlockVariant::PrefixSimba)
    };
    let mut rng = ssmtok::stream_rng(0, "example-init", 0);
    let model = Model::init(model_cfg, &mut rng)?;

    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        grad_accum: 1,
        max_steps: 300,
        warmup_steps: 30,
        eval_every: 50,
        seed: 0,
        ..TrainConfig::default()
    };
    let state = TrainState::new(&model.params(), cfg.seed);
    let outcome = train_loop(&model, &train_set, &val_set, &cfg, state, None)?;
    println!("step      lr        train     val       (val − rate)");
    for row in &outcome.metrics {
        println!(
            "{:>4}  {:.2e}  {:.4}   {:.4}   {:+.4}",
            row.step,
            row.lr,
            row.train_loss,
            row.val_loss,
            row.val_loss - rate
        );
    }
    Ok(())
}
