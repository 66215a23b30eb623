//! Coarse-to-fine two-stage generation.
//!
//! Stage 1 is any coarse-mode LM satisfying the generate contract; stage 2 is
//! a [`Refiner`] mapping (coarse row, condition) to the K−1 fine layers. The
//! stage-2 model is trained once and reused under any stage-1 model.
//!
//! The default refiner is a strictly per-position classifier: a coarse-token
//! embedding plus a projected pooled condition vector feed a small residual
//! feed-forward network with one output head per fine layer. No sequence
//! mixing happens inside it, so perturbing coarse position t can only change
//! fine outputs at position t.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{FeedForward, Linear, Norm};
use crate::model::{self, Model, SamplingConfig, TokenMode};
use crate::rvq::{self, TokenGrid};
use crate::tensor::{ops, Tape, Tensor};
use crate::train::{self, lr_at, masked_cross_entropy_heads, TrainConfig, TrainState};
use crate::{Error, Real, Result};

/// How the refiner decodes its per-position distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum RefineDecode {
    /// Deterministic per-position argmax (the default).
    Argmax,
    /// Temperature sampling with a seed.
    Sample { temperature: Real, seed: u64 },
}

impl Default for RefineDecode {
    fn default() -> Self {
        RefineDecode::Argmax
    }
}

/// Stage-2 contract: given a length-T coarse row and a condition, produce
/// the (K−1) × T fine layers with valid token ids.
pub trait Refiner {
    fn fine_layers(&self) -> usize;
    fn vocab(&self) -> u32;
    fn refine(
        &self,
        coarse: &[u32],
        class: Option<usize>,
        decode: RefineDecode,
    ) -> Result<TokenGrid>;
}

fn default_refiner_hidden() -> usize {
    64
}
fn default_refiner_layers() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinerConfig {
    /// Total codebook layers K; the refiner predicts layers 1..K.
    pub k_layers: usize,
    pub vocab: u32,
    pub cond_classes: usize,
    pub cond_width: usize,
    #[serde(default = "default_refiner_hidden")]
    pub hidden: usize,
    #[serde(default = "default_refiner_layers")]
    pub n_layers: usize,
    #[serde(default)]
    pub dropout: Real,
    #[serde(default = "crate::model::default_init_std_pub")]
    pub init_std: Real,
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_layers < 2 {
            return Err(Error::config("refiner needs k_layers >= 2"));
        }
        if self.vocab == 0 || self.hidden == 0 || self.cond_classes == 0 || self.cond_width == 0 {
            return Err(Error::config("refiner dimensions must be positive"));
        }
        Ok(())
    }

    pub fn null_class(&self) -> u32 {
        self.cond_classes as u32
    }
}

/// Per-position classifier refiner.
pub struct ClassifierRefiner {
    pub config: RefinerConfig,
    pub embed: Tensor,
    /// (cond_classes + 1) × cond_width pooled condition vectors; last row is
    /// the null condition.
    pub cond_table: Tensor,
    pub cond_proj: Linear,
    pub blocks: Vec<(Norm, FeedForward)>,
    pub final_norm: Norm,
    pub heads: Vec<Linear>,
}

impl ClassifierRefiner {
    pub fn init(config: RefinerConfig, rng: &mut ChaCha8Rng) -> Result<ClassifierRefiner> {
        config.validate()?;
        let rows = rvq::table_rows(config.vocab);
        let embed = Tensor::randn_param(rng, &[rows, config.hidden], config.init_std);
        let cond_table = Tensor::randn_param(
            rng,
            &[config.cond_classes + 1, config.cond_width],
            config.init_std,
        );
        let cond_proj = Linear::init(rng, config.cond_width, config.hidden, true, config.init_std);
        let blocks = (0..config.n_layers)
            .map(|_| {
                (
                    Norm::init(config.hidden),
                    FeedForward::init(rng, config.hidden, 2 * config.hidden, config.dropout, config.init_std),
                )
            })
            .collect();
        let final_norm = Norm::init(config.hidden);
        let heads = (0..config.k_layers - 1)
            .map(|_| Linear::init(rng, config.hidden, config.vocab as usize, true, config.init_std))
            .collect();
        Ok(ClassifierRefiner {
            config,
            embed,
            cond_table,
            cond_proj,
            blocks,
            final_norm,
            heads,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("embed".to_string(), self.embed.clone()),
            ("cond.table".to_string(), self.cond_table.clone()),
        ];
        self.cond_proj.named_params(&mut out, "cond.proj");
        for (i, (norm, ff)) in self.blocks.iter().enumerate() {
            norm.named_params(&mut out, &format!("block{i}.norm"));
            ff.named_params(&mut out, &format!("block{i}"));
        }
        self.final_norm.named_params(&mut out, "final_norm");
        for (k, h) in self.heads.iter().enumerate() {
            h.named_params(&mut out, &format!("head.{k}"));
        }
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn class_id(&self, class: Option<usize>) -> Result<u32> {
        match class {
            Some(c) if c >= self.config.cond_classes => Err(Error::contract(format!(
                "condition class {c} out of range [0, {})",
                self.config.cond_classes
            ))),
            Some(c) => Ok(c as u32),
            None => Ok(self.config.null_class()),
        }
    }

    /// Per-fine-layer logits, each (B, T, vocab). Strictly per-position.
    pub fn forward(
        &self,
        tape: &Tape,
        coarse: &[Vec<u32>],
        classes: &[Option<usize>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Tensor>> {
        let batch = coarse.len();
        if batch == 0 || classes.len() != batch {
            return Err(Error::contract("batch and classes must be nonempty and equal"));
        }
        let t_len = coarse[0].len();
        if t_len == 0 {
            return Err(Error::contract("refiner input must have length >= 1"));
        }
        let mut ids = Vec::with_capacity(batch * t_len);
        for row in coarse {
            if row.len() != t_len {
                return Err(Error::contract("ragged refiner batch"));
            }
            ids.extend_from_slice(row);
        }
        let emb = ops::embedding(tape, &self.embed, &ids, &[batch, t_len])?;
        // Pooled condition, broadcast per position through a repeated lookup.
        let mut cond_ids = Vec::with_capacity(batch * t_len);
        for c in classes {
            let id = self.class_id(*c)?;
            cond_ids.extend(std::iter::repeat(id).take(t_len));
        }
        let cond = ops::embedding(tape, &self.cond_table, &cond_ids, &[batch, t_len])?;
        let cond = self.cond_proj.forward(tape, &cond)?;
        let mut x = ops::add(tape, &emb, &cond)?;
        for (norm, ff) in &self.blocks {
            let normed = norm.forward(tape, &x)?;
            let out = ff.forward(tape, &normed, rng.as_deref_mut())?;
            x = ops::add(tape, &x, &out)?;
        }
        let x = self.final_norm.forward(tape, &x)?;
        self.heads
            .iter()
            .map(|h| Ok(h.forward(tape, &x)?))
            .collect()
    }

    pub fn save(&self, path: &std::path::Path, meta: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "kind": "refiner",
            "config": serde_json::to_value(&self.config)?,
            "meta": meta,
        });
        let blobs = self
            .named_params()
            .iter()
            .map(|(name, t)| {
                (
                    format!("param/{name}"),
                    t.shape(),
                    t.to_vec().iter().map(|&v| v as f64).collect(),
                )
            })
            .collect();
        model::write_checkpoint(path, &model::Checkpoint { header, blobs })
    }

    pub fn load(path: &std::path::Path) -> Result<ClassifierRefiner> {
        let ckpt = model::read_checkpoint(path)?;
        let kind = ckpt.header["kind"].as_str().unwrap_or_default();
        if kind != "refiner" {
            return Err(Error::format(format!(
                "checkpoint kind '{kind}' is not a refiner checkpoint"
            )));
        }
        let config: RefinerConfig = serde_json::from_value(ckpt.header["config"].clone())?;
        let mut rng = crate::stream_rng(0, "load-refiner", 0);
        let refiner = ClassifierRefiner::init(config, &mut rng)?;
        for (name, t) in refiner.named_params() {
            let blob_name = format!("param/{name}");
            let (_, shape, data) = ckpt
                .blob(&blob_name)
                .ok_or_else(|| Error::format(format!("missing blob {blob_name}")))?;
            if *shape != t.shape() {
                return Err(Error::format(format!("blob {blob_name} shape mismatch")));
            }
            t.set_data(data.iter().map(|&v| v as Real).collect())
                .map_err(Error::from)?;
        }
        Ok(refiner)
    }
}

impl Refiner for ClassifierRefiner {
    fn fine_layers(&self) -> usize {
        self.config.k_layers - 1
    }

    fn vocab(&self) -> u32 {
        self.config.vocab
    }

    fn refine(
        &self,
        coarse: &[u32],
        class: Option<usize>,
        decode: RefineDecode,
    ) -> Result<TokenGrid> {
        if coarse.is_empty() {
            return Err(Error::contract("cannot refine a length-0 coarse row"));
        }
        let t_len = coarse.len();
        let tape = Tape::inactive();
        let rows = [coarse.to_vec()];
        let logits = self.forward(&tape, &rows, &[class], None)?;
        let vocab = self.config.vocab as usize;
        let mut tokens = Vec::with_capacity(self.fine_layers() * t_len);
        let mut sample_rng = match decode {
            RefineDecode::Sample { seed, .. } => Some(crate::stream_rng(seed, "refine", 0)),
            RefineDecode::Argmax => None,
        };
        for head in &logits {
            let data = head.to_vec();
            for t in 0..t_len {
                let row = &data[t * vocab..(t + 1) * vocab];
                let tok = match decode {
                    RefineDecode::Argmax => argmax(row) as u32,
                    RefineDecode::Sample { temperature, .. } => {
                        let cfg = SamplingConfig {
                            top_k: vocab,
                            temperature,
                            guidance_scale: 1.0,
                            seed: 0,
                        };
                        model::sample_token(row, &cfg, sample_rng.as_mut().expect("rng"))? as u32
                    }
                };
                tokens.push(tok);
            }
        }
        TokenGrid::new(self.fine_layers(), t_len, self.config.vocab, tokens)
    }
}

fn argmax(row: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Train a refiner on full grids: inputs are the coarse rows, targets the
/// fine layers. Returns the per-step loss history.
pub fn train_refiner(
    refiner: &ClassifierRefiner,
    corpus: &[(TokenGrid, u32)],
    cfg: &TrainConfig,
) -> Result<Vec<(usize, Real)>> {
    if corpus.is_empty() {
        return Err(Error::contract("empty refiner corpus"));
    }
    for (grid, _) in corpus {
        if grid.k_layers() != refiner.config.k_layers {
            return Err(Error::contract(format!(
                "grid has {} layers, refiner expects {}",
                grid.k_layers(),
                refiner.config.k_layers
            )));
        }
    }
    let params = refiner.params();
    let mut state = TrainState::new(&params, cfg.seed);
    let per_step = cfg.batch_size * cfg.grad_accum;
    let order_for_epoch = |epoch: usize| -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = crate::stream_rng(cfg.seed, "refiner-shuffle", epoch as u64);
        idx.shuffle(&mut rng);
        idx
    };
    let mut epoch = 0;
    let mut order = order_for_epoch(epoch);
    let mut cursor = 0;
    while state.step < cfg.max_steps {
        for p in &params {
            p.zero_grad();
        }
        let mut step_loss = 0.0;
        for micro in 0..cfg.grad_accum {
            let mut rows = Vec::with_capacity(cfg.batch_size);
            let mut classes = Vec::with_capacity(cfg.batch_size);
            let mut targets: Vec<Vec<u32>> = vec![Vec::new(); refiner.fine_layers()];
            let mut masks: Vec<Vec<bool>> = vec![Vec::new(); refiner.fine_layers()];
            for _ in 0..cfg.batch_size {
                if cursor == corpus.len() {
                    epoch += 1;
                    order = order_for_epoch(epoch);
                    cursor = 0;
                }
                let (grid, class) = &corpus[order[cursor]];
                cursor += 1;
                rows.push(grid.layer(0).to_vec());
                classes.push(Some(*class as usize));
                for k in 0..refiner.fine_layers() {
                    targets[k].extend_from_slice(grid.layer(k + 1));
                    masks[k].extend(std::iter::repeat(true).take(grid.t_frames()));
                }
            }
            let micro_index = (state.step * cfg.grad_accum + micro) as u64;
            let mut drop_rng = crate::stream_rng(cfg.seed, "refiner-dropout", micro_index);
            let tape = Tape::new();
            let logits = refiner.forward(&tape, &rows, &classes, Some(&mut drop_rng))?;
            let loss = masked_cross_entropy_heads(&tape, &logits, &targets, &masks)
                .map_err(Error::from)?;
            step_loss += loss.scalar().map_err(Error::from)?;
            tape.backward(&loss).map_err(Error::from)?;
        }
        for p in &params {
            p.scale_grad(1.0 / cfg.grad_accum as Real);
        }
        let lr_t = lr_at(state.step + 1, cfg);
        train::adamw_step(&params, &mut state, cfg, lr_t)?;
        let loss = step_loss / cfg.grad_accum as Real;
        state.loss_history.push((state.step, loss));
        let _ = per_step;
    }
    Ok(state.loss_history)
}

/// Per-token accuracy of a refiner against ground-truth grids.
pub fn refiner_accuracy(
    refiner: &ClassifierRefiner,
    corpus: &[(TokenGrid, u32)],
) -> Result<Real> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (grid, class) in corpus {
        let fine = refiner.refine(grid.layer(0), Some(*class as usize), RefineDecode::Argmax)?;
        for k in 0..fine.k_layers() {
            for t in 0..fine.t_frames() {
                total += 1;
                if fine.get(k, t) == grid.get(k + 1, t) {
                    correct += 1;
                }
            }
        }
    }
    Ok(correct as Real / total.max(1) as Real)
}

/// Stage 1: sample a length-T coarse row from a coarse-mode LM.
pub fn stage1_generate(
    lm: &Model,
    class: Option<usize>,
    t_frames: usize,
    cfg: &SamplingConfig,
) -> Result<Vec<u32>> {
    if lm.config.mode != TokenMode::Coarse {
        return Err(Error::contract(
            "stage 1 requires a coarse-mode language model",
        ));
    }
    let grid = model::generate(lm, class, t_frames, cfg)?;
    Ok(grid.layer(0).to_vec())
}

/// Stage 2: predict the fine layers for a coarse row.
pub fn stage2_refine(
    refiner: &dyn Refiner,
    coarse: &[u32],
    class: Option<usize>,
    decode: RefineDecode,
) -> Result<TokenGrid> {
    refiner.refine(coarse, class, decode)
}

/// Full pipeline: stage 1 → stage 2 → recombined K-layer grid. Works with
/// any stage-1 model satisfying the generate contract.
pub fn pipeline_generate(
    lm: &Model,
    refiner: &dyn Refiner,
    class: Option<usize>,
    t_frames: usize,
    cfg: &SamplingConfig,
    decode: RefineDecode,
) -> Result<TokenGrid> {
    let coarse = stage1_generate(lm, class, t_frames, cfg)?;
    let fine = stage2_refine(refiner, &coarse, class, decode)?;
    rvq::recombine(&coarse, &fine)
}
