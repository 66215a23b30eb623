use ssmtok::blocks::BlockVariant;
use ssmtok::corpus::{SynthCorpus, SynthCorpusConfig};
use ssmtok::model::{Model, ModelConfig, TokenMode};
use ssmtok::train::{train_loop, TrainConfig, TrainState};
use rand::SeedableRng;

fn main() -> ssmtok::Result<()> {
    let corpus_cfg = SynthCorpusConfig {
        classes: 1, vocab: 64, k_layers: 1, t_frames: 24,
        train_size: 4096, val_size: 128, seed: 77,
        ..SynthCorpusConfig::toy()
    };
    let corpus = SynthCorpus::new(corpus_cfg)?;
    let (train_set, val_set) = corpus.generate();
    let rate = corpus.entropy_rate(0);
    println!("rate {rate:.4}, target {:.4}", rate + 0.05);
    let cfg = ModelConfig {
        mode: TokenMode::Coarse, k_layers: 1, n_blocks: 4, hidden: 128, vocab: 64,
        state_dim: 32, cond_classes: 1, cond_width: 32, dropout: 0.0,
        ssm_headdim: 16, max_len: 128,
        ..ModelConfig::toy(BlockVariant::PrefixSimba)
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let model = Model::init(cfg, &mut rng)?;
    let tc = TrainConfig {
        lr: 1e-3, batch_size: 8, grad_accum: 1, warmup_steps: 100,
        horizon: 2000, max_steps: 2000, eval_every: 200, seed: 7,
        ..TrainConfig::default()
    };
    let state = TrainState::new(&model.params(), tc.seed);
    let out = train_loop(&model, &train_set, &val_set, &tc, state, None)?;
    for row in &out.metrics {
        println!("step {:>5}  train {:.4}  val {:.4}  gap {:+.4}", row.step, row.train_loss, row.val_loss, row.val_loss - rate);
    }
    Ok(())
}
