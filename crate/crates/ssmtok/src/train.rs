//! Training: masked cross-entropy, AdamW with decoupled weight decay, the
//! warmup + cosine schedule, gradient accumulation, checkpointing, and FLOPs
//! accounting.
//!
//! One optimizer step consumes `grad_accum` micro-batches of `batch_size`
//! sequences; micro-batch gradients are averaged (not summed), so the
//! learning-rate semantics match a single large batch. All randomness
//! (shuffling, condition dropout, layer dropout) is derived from the run seed
//! and the step index, which makes save → load → resume reproduce an
//! uninterrupted run exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{self, LogitSpan, Model, TokenMode, TokenInput};
use crate::rvq::{self, TokenGrid};
use crate::tensor::{ops, Tape, Tensor, TensorError};
use crate::{Error, Real, Result};

fn default_lr() -> Real {
    1e-4
}
fn default_wd() -> Real {
    2e-2
}
fn default_beta1() -> Real {
    0.9
}
fn default_beta2() -> Real {
    0.999
}
fn default_eps() -> Real {
    1e-8
}
fn default_warmup() -> usize {
    100
}
fn default_batch() -> usize {
    4
}
fn default_accum() -> usize {
    32
}
fn default_eval_every() -> usize {
    100
}

/// Optimisation recipe. Defaults: AdamW lr 1e-4, weight decay 2e-2, betas
/// (0.9, 0.999), 100-step linear warmup into a cosine anneal to 0, batch 4,
/// 32 gradient-accumulation steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: Real,
    #[serde(default = "default_wd")]
    pub weight_decay: Real,
    #[serde(default = "default_beta1")]
    pub beta1: Real,
    #[serde(default = "default_beta2")]
    pub beta2: Real,
    #[serde(default = "default_eps")]
    pub eps: Real,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    /// Cosine horizon; 0 means "anneal to zero at max_steps".
    #[serde(default)]
    pub horizon: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_accum")]
    pub grad_accum: usize,
    pub max_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint cadence in optimizer steps; 0 = only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            warmup_steps: default_warmup(),
            horizon: 0,
            batch_size: default_batch(),
            grad_accum: default_accum(),
            max_steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn cosine_horizon(&self) -> usize {
        if self.horizon == 0 {
            self.max_steps
        } else {
            self.horizon
        }
    }
}

/// Learning rate at an optimizer step: linear warmup 0 → lr over
/// [0, warmup], then cosine from lr to 0 over [warmup, horizon], 0 beyond.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Real {
    let warmup = cfg.warmup_steps;
    let horizon = cfg.cosine_horizon();
    if step <= warmup {
        if warmup == 0 {
            return cfg.lr;
        }
        return cfg.lr * step as Real / warmup as Real;
    }
    if step >= horizon || horizon <= warmup {
        return 0.0;
    }
    let progress = (step - warmup) as Real / (horizon - warmup) as Real;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI as Real * progress).cos())
}

/// Mean negative log-likelihood of `targets` under `logits` over the rows
/// where `mask` is true. `logits` is (..., vocab) with one row per target.
pub fn masked_cross_entropy(
    tape: &Tape,
    logits: &Tensor,
    targets: &[u32],
    mask: &[bool],
) -> crate::tensor::Result<Tensor> {
    let shape = logits.shape();
    let vocab = *shape.last().unwrap();
    let rows = logits.numel() / vocab;
    if targets.len() != rows || mask.len() != rows {
        return Err(TensorError::ShapeMismatch {
            op: "masked_cross_entropy",
            detail: format!(
                "{rows} logit rows vs {} targets / {} mask entries",
                targets.len(),
                mask.len()
            ),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(TensorError::InvalidArgument {
            op: "masked_cross_entropy",
            detail: "zero unmasked positions".into(),
        });
    }
    for (&t, &m) in targets.iter().zip(mask) {
        if m && t as usize >= vocab {
            return Err(TensorError::IndexOutOfRange {
                op: "masked_cross_entropy",
                index: t as usize,
                extent: vocab,
            });
        }
    }
    let mut total = 0.0;
    let mut probs = vec![0.0; rows * vocab];
    {
        let ld = logits.data();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut z = 0.0;
            for (j, &l) in row.iter().enumerate() {
                let e = (l - max).exp();
                probs[r * vocab + j] = e;
                z += e;
            }
            for j in 0..vocab {
                probs[r * vocab + j] /= z;
            }
            let lse = z.ln() + max;
            total += lse - row[targets[r] as usize];
        }
    }
    let loss = total / count as Real;
    let out = Tensor::from_vec(&[1], vec![loss])?;
    if tape.is_active() && logits.requires_grad() {
        out.set_requires_grad(true);
        let (logits, out) = (logits.clone(), out.clone());
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        tape.record("masked_cross_entropy", move || {
            let g = out.grad().map_or(0.0, |g| g[0]);
            let mut dl = vec![0.0; rows * vocab];
            let scale = g / count as Real;
            for r in 0..rows {
                if !mask[r] {
                    continue;
                }
                for j in 0..vocab {
                    let onehot = if j == targets[r] as usize { 1.0 } else { 0.0 };
                    dl[r * vocab + j] = scale * (probs[r * vocab + j] - onehot);
                }
            }
            logits.accumulate_grad(&dl);
        });
    }
    Ok(out)
}

/// Loss over multiple heads: mean of the per-head masked cross-entropies.
pub fn masked_cross_entropy_heads(
    tape: &Tape,
    logits: &[Tensor],
    targets: &[Vec<u32>],
    masks: &[Vec<bool>],
) -> crate::tensor::Result<Tensor> {
    assert_eq!(logits.len(), targets.len());
    assert_eq!(logits.len(), masks.len());
    let mut acc: Option<Tensor> = None;
    for ((l, t), m) in logits.iter().zip(targets).zip(masks) {
        let head_loss = masked_cross_entropy(tape, l, t, m)?;
        acc = Some(match acc {
            None => head_loss,
            Some(prev) => ops::add(tape, &prev, &head_loss)?,
        });
    }
    ops::scale(tape, &acc.expect("at least one head"), 1.0 / logits.len() as Real)
}

/// Optimizer moments plus the step counter and seed.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
    pub seed: u64,
    pub loss_history: Vec<(usize, Real)>,
}

impl TrainState {
    pub fn new(params: &[Tensor], seed: u64) -> TrainState {
        TrainState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            seed,
            loss_history: Vec::new(),
        }
    }
}

/// One AdamW update from the gradients currently accumulated on `params`.
/// Decoupled weight decay: θ ← θ − lr·wd·θ, applied separately from the
/// bias-corrected moment update. Non-finite gradients refuse the step.
pub fn adamw_step(
    params: &[Tensor],
    state: &mut TrainState,
    cfg: &TrainConfig,
    lr_t: Real,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "{} params vs {} moment buffers",
            params.len(),
            state.m.len()
        )));
    }
    // Validate all gradients before touching any parameter.
    let grads: Vec<Vec<Real>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for g in &grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite gradient; step refused"));
        }
    }
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter()
        .zip(&grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let mut data = p.to_vec();
        for i in 0..data.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            // decoupled decay, separate from the moment term
            data[i] -= lr_t * cfg.weight_decay * data[i];
            data[i] -= lr_t * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.set_data(data).map_err(Error::from)?;
    }
    state.step += 1;
    Ok(())
}

/// Per-sequence training item: the model input plus per-head targets/masks.
#[derive(Debug, Clone)]
pub enum ModeInput {
    Coarse(Vec<u32>),
    Delay(Vec<Vec<u32>>),
}

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub class: u32,
    pub input: ModeInput,
    pub targets: Vec<Vec<u32>>,
    pub masks: Vec<Vec<bool>>,
    pub frames: usize,
}

/// Convert raw grids into the mode-specific training representation.
/// Delay mode excludes PAD positions from the loss.
pub fn prepare_items(
    corpus: &[(TokenGrid, u32)],
    mode: TokenMode,
    k_layers: usize,
) -> Result<Vec<TrainItem>> {
    corpus
        .iter()
        .map(|(grid, class)| {
            match mode {
                TokenMode::Coarse => {
                    let row = grid.layer(0).to_vec();
                    Ok(TrainItem {
                        class: *class,
                        targets: vec![row.clone()],
                        masks: vec![vec![true; row.len()]],
                        frames: row.len(),
                        input: ModeInput::Coarse(row),
                    })
                }
                TokenMode::Delay => {
                    if grid.k_layers() != k_layers {
                        return Err(Error::contract(format!(
                            "grid has {} layers, model covers {k_layers}",
                            grid.k_layers()
                        )));
                    }
                    let delayed = rvq::delay_apply(grid);
                    let width = delayed.width();
                    let mut targets = Vec::with_capacity(k_layers);
                    let mut masks = Vec::with_capacity(k_layers);
                    for k in 0..k_layers {
                        let mut t_row = Vec::with_capacity(width);
                        let mut m_row = Vec::with_capacity(width);
                        for col in 0..width {
                            let tok = delayed.get(k, col);
                            let live = delayed.live_rows(col).contains(&k);
                            t_row.push(if live { tok } else { 0 });
                            m_row.push(live);
                        }
                        targets.push(t_row);
                        masks.push(m_row);
                    }
                    Ok(TrainItem {
                        class: *class,
                        targets,
                        masks,
                        frames: grid.t_frames(),
                        input: ModeInput::Delay(delayed.columns()),
                    })
                }
            }
        })
        .collect()
}

/// Forward + loss for a slice of items. `train_rng` enables dropout and is
/// None for evaluation. `cond_drop` masks conditions to null with the given
/// probability (training only).
fn batch_loss(
    model: &Model,
    tape: &Tape,
    items: &[&TrainItem],
    mut train_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    cond_drop: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<Tensor> {
    use rand::Rng;
    let n_heads = items[0].targets.len();
    let classes: Vec<Option<usize>> = match cond_drop {
        Some(rng) => items
            .iter()
            .map(|it| {
                if (rng.gen::<f64>() as Real) < model.config.cond_dropout {
                    None
                } else {
                    Some(it.class as usize)
                }
            })
            .collect(),
        None => items.iter().map(|it| Some(it.class as usize)).collect(),
    };
    let logits = match &items[0].input {
        ModeInput::Coarse(_) => {
            let rows: Vec<Vec<u32>> = items
                .iter()
                .map(|it| match &it.input {
                    ModeInput::Coarse(r) => r.clone(),
                    _ => unreachable!(),
                })
                .collect();
            model.forward(
                tape,
                &TokenInput::Coarse(&rows),
                &classes,
                LogitSpan::FedColumns,
                train_rng.as_deref_mut(),
            )?
        }
        ModeInput::Delay(_) => {
            let seqs: Vec<Vec<Vec<u32>>> = items
                .iter()
                .map(|it| match &it.input {
                    ModeInput::Delay(c) => c.clone(),
                    _ => unreachable!(),
                })
                .collect();
            model.forward(
                tape,
                &TokenInput::Delay(&seqs),
                &classes,
                LogitSpan::FedColumns,
                train_rng.as_deref_mut(),
            )?
        }
    };
    // Concatenate per-head targets/masks across the batch, batch-major like
    // the logits rows.
    let mut targets = vec![Vec::new(); n_heads];
    let mut masks = vec![Vec::new(); n_heads];
    for it in items {
        for k in 0..n_heads {
            targets[k].extend_from_slice(&it.targets[k]);
            masks[k].extend_from_slice(&it.masks[k]);
        }
    }
    Ok(masked_cross_entropy_heads(tape, &logits, &targets, &masks)?)
}

/// Mean validation loss (no dropout, no condition dropout).
pub fn eval_loss(model: &Model, items: &[TrainItem], batch_size: usize) -> Result<Real> {
    if items.is_empty() {
        return Err(Error::contract("empty validation set"));
    }
    let tape = Tape::inactive();
    let mut total = 0.0;
    let mut batches = 0.0;
    for chunk in items.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainItem> = chunk.iter().collect();
        let loss = batch_loss(model, &tape, &refs, None, None)?;
        total += loss.scalar().map_err(Error::from)?;
        batches += 1.0;
    }
    Ok(total / batches)
}

/// One metrics record per evaluation point.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: Real,
    pub train_loss: Real,
    pub val_loss: Real,
    pub wall_ms: u128,
    pub cumulative_flops: f64,
}

/// Append metrics rows as CSV; writes the header only when the file starts
/// empty.
pub fn append_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    use std::io::Write;
    let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if !exists {
        writeln!(f, "step,lr,train_loss,val_loss,wall_ms,cumulative_flops")?;
    }
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.step, r.lr, r.train_loss, r.val_loss, r.wall_ms, r.cumulative_flops
        )?;
    }
    Ok(())
}

/// Outcome of a training run: final state, metrics stream, and a digest of
/// the exact data order consumed (for cross-run comparisons).
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
    pub data_digest: String,
}

/// The training loop.
///
/// Per optimizer step: `grad_accum` micro-batches of `batch_size` sequences
/// are forwarded and backwarded (gradients accumulate on the parameters),
/// gradients are averaged, and one AdamW update with `lr_at` is applied.
/// The corpus cycles with a per-epoch reshuffle when exhausted. Data order,
/// dropout, and condition dropout are all pure functions of (seed, step), so
/// resuming from a checkpoint continues the exact trajectory.
pub fn train_loop(
    model: &Model,
    train_corpus: &[(TokenGrid, u32)],
    val_corpus: &[(TokenGrid, u32)],
    cfg: &TrainConfig,
    mut state: TrainState,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if train_corpus.is_empty() {
        return Err(Error::contract("empty training corpus"));
    }
    let mode = model.config.mode;
    let items = prepare_items(train_corpus, mode, model.config.k_layers)?;
    let val_items = if val_corpus.is_empty() {
        Vec::new()
    } else {
        prepare_items(val_corpus, mode, model.config.k_layers)?
    };
    let params = model.params();
    let n_params = model::count_params(&model.config) as f64;
    let per_step =
        cfg.batch_size * cfg.grad_accum;
    let started = std::time::Instant::now();
    let mut metrics = Vec::new();
    let mut digest = Sha256::new();
    let mut last_val = Real::NAN;

    // Deterministic data order: the global sequence index stream is a pure
    // function of the seed, independent of batching.
    let order_for_epoch = |epoch: usize| -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..items.len()).collect();
        let mut rng = crate::stream_rng(cfg.seed, "shuffle", epoch as u64);
        idx.shuffle(&mut rng);
        idx
    };
    let mut epoch = (state.step * per_step) / items.len();
    let mut order = order_for_epoch(epoch);
    let mut cursor = (state.step * per_step) % items.len();

    while state.step < cfg.max_steps {
        let step_index = state.step; // 0-based; the update is step_index + 1
        let mut step_loss = 0.0;
        model.zero_grads();
        for micro in 0..cfg.grad_accum {
            let mut batch_items: Vec<&TrainItem> = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                if cursor == items.len() {
                    epoch += 1;
                    order = order_for_epoch(epoch);
                    cursor = 0;
                }
                let it = &items[order[cursor]];
                digest.update(it.class.to_le_bytes());
                for t in &it.targets {
                    for &tok in t {
                        digest.update(tok.to_le_bytes());
                    }
                }
                batch_items.push(it);
                cursor += 1;
            }
            let micro_index = (step_index * cfg.grad_accum + micro) as u64;
            let mut drop_rng = crate::stream_rng(cfg.seed, "dropout", micro_index);
            let mut cond_rng = crate::stream_rng(cfg.seed, "cond-drop", micro_index);
            let tape = Tape::new();
            let loss = batch_loss(
                model,
                &tape,
                &batch_items,
                Some(&mut drop_rng),
                Some(&mut cond_rng),
            )?;
            step_loss += loss.scalar().map_err(Error::from)?;
            tape.backward(&loss).map_err(Error::from)?;
        }
        // Average accumulated gradients over the micro-batches.
        for p in &params {
            p.scale_grad(1.0 / cfg.grad_accum as Real);
        }
        let lr_t = lr_at(state.step + 1, cfg);
        adamw_step(&params, &mut state, cfg, lr_t)?;
        let train_loss = step_loss / cfg.grad_accum as Real;
        state.loss_history.push((state.step, train_loss));

        let is_eval = state.step % cfg.eval_every.max(1) == 0 || state.step == cfg.max_steps;
        if is_eval {
            if !val_items.is_empty() {
                last_val = eval_loss(model, &val_items, cfg.batch_size)?;
            }
            metrics.push(MetricsRow {
                step: state.step,
                lr: lr_t,
                train_loss,
                val_loss: last_val,
                wall_ms: started.elapsed().as_millis(),
                cumulative_flops: flops_estimate(
                    n_params,
                    mean_frames(&items),
                    per_step as f64,
                    state.step as f64,
                ),
            });
        }
        if let Some(dir) = checkpoint_dir {
            let due = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
            if due || state.step == cfg.max_steps {
                save_train_checkpoint(dir, model, &state, cfg)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_train_checkpoint(dir, model, &state, cfg)?;
    }
    Ok(TrainOutcome {
        state,
        metrics,
        data_digest: hex::encode(digest.finalize()),
    })
}

fn mean_frames(items: &[TrainItem]) -> f64 {
    items.iter().map(|it| it.frames as f64).sum::<f64>() / items.len() as f64
}

/// Training-cost heuristic: 6 × params × frames-per-sequence × batch × steps.
pub fn flops_estimate(params: f64, frames_per_seq: f64, batch: f64, steps: f64) -> f64 {
    6.0 * params * frames_per_seq * batch * steps
}

/// Write a resumable checkpoint: parameters plus optimizer moments.
pub fn save_train_checkpoint(
    dir: &Path,
    model: &Model,
    state: &TrainState,
    cfg: &TrainConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let named = model.named_params();
    let mut extra = Vec::new();
    for (i, (name, _)) in named.iter().enumerate() {
        extra.push((
            format!("adam_m/{name}"),
            vec![state.m[i].len()],
            state.m[i].iter().map(|&v| v as f64).collect(),
        ));
        extra.push((
            format!("adam_v/{name}"),
            vec![state.v[i].len()],
            state.v[i].iter().map(|&v| v as f64).collect(),
        ));
    }
    let meta = serde_json::json!({
        "step": state.step,
        "seed": state.seed,
        "train": serde_json::to_value(cfg)?,
    });
    let ckpt = model.to_checkpoint("lm", meta, extra)?;
    model::write_checkpoint(&dir.join(format!("step_{:06}.ckpt", state.step)), &ckpt)?;
    model::write_checkpoint(&dir.join("latest.ckpt"), &ckpt)?;
    Ok(())
}

/// Load a training checkpoint back into a fresh model + state.
pub fn load_train_checkpoint(path: &Path) -> Result<(Model, TrainState, TrainConfig)> {
    let ckpt = model::read_checkpoint(path)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let step = ckpt.header["meta"]["step"].as_u64().unwrap_or(0) as usize;
    let seed = ckpt.header["meta"]["seed"].as_u64().unwrap_or(0);
    let cfg: TrainConfig = serde_json::from_value(ckpt.header["meta"]["train"].clone())?;
    let named = model.named_params();
    let mut state = TrainState::new(&model.params(), seed);
    state.step = step;
    for (i, (name, _)) in named.iter().enumerate() {
        let m = ckpt
            .blob(&format!("adam_m/{name}"))
            .ok_or_else(|| Error::format(format!("missing adam_m/{name}")))?;
        let v = ckpt
            .blob(&format!("adam_v/{name}"))
            .ok_or_else(|| Error::format(format!("missing adam_v/{name}")))?;
        state.m[i] = m.2.iter().map(|&x| x as Real).collect();
        state.v[i] = v.2.iter().map(|&x| x as Real).collect();
    }
    Ok((model, state, cfg))
}
