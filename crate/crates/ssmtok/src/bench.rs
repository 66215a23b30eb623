//! Architecture-comparison benchmark on the synthetic Markov corpus.
//!
//! Every variant trains on the identical micro-batch stream (verified by a
//! data-order digest), at a width matched to a common parameter budget, over
//! several seeds. The report carries per-run curves of validation loss,
//! unigram KL against the analytic source marginal, cumulative FLOPs, and
//! wall time, and serialises to CSV and an SVG line chart.

use serde::{Deserialize, Serialize};

use crate::blocks::BlockVariant;
use crate::corpus::{SynthCorpus, SynthCorpusConfig};
use crate::eval::{eval_kl, KL_SMOOTHING};
use crate::model::{self, Model, ModelConfig, SamplingConfig, TokenMode};
use crate::train::{train_loop, TrainConfig, TrainState};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub variants: Vec<BlockVariant>,
    pub budget_steps: usize,
    pub eval_every: usize,
    pub seeds: Vec<u64>,
    /// Common parameter budget; hidden width is adjusted per variant.
    pub target_params: usize,
    /// Sequences generated per KL evaluation point (0 disables KL).
    pub kl_sequences: usize,
    /// KL cadence in steps; must be a multiple of eval_every. 0 means
    /// "final step only".
    #[serde(default)]
    pub kl_every: usize,
    pub corpus: SynthCorpusConfig,
    pub train: TrainConfig,
    /// Width template; `hidden` is replaced by the matched value.
    pub model: ModelConfig,
}

impl BenchConfig {
    /// The toy benchmark: coarse-mode models, ~1M parameters, identical data
    /// order, 2000-step budget.
    pub fn toy() -> BenchConfig {
        let corpus = SynthCorpusConfig {
            classes: 4,
            vocab: 64,
            k_layers: 1,
            t_frames: 24,
            train_size: 4096,
            val_size: 128,
            seed: 0,
            ..SynthCorpusConfig::toy()
        };
        let mut model = ModelConfig::toy(BlockVariant::PrefixSimba);
        model.mode = TokenMode::Coarse;
        model.k_layers = 1;
        model.n_blocks = 4;
        model.state_dim = 32;
        model.ssm_headdim = 16;
        model.cond_classes = corpus.classes;
        model.cond_width = 32;
        model.cond_len = 4;
        model.vocab = corpus.vocab;
        model.dropout = 0.0;
        model.max_len = 64;
        let train = TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            grad_accum: 1,
            warmup_steps: 100,
            horizon: 2000,
            max_steps: 2000,
            eval_every: 100,
            seed: 0,
            ..TrainConfig::default()
        };
        BenchConfig {
            variants: vec![BlockVariant::PrefixSimba, BlockVariant::CrossTransformer],
            budget_steps: 2000,
            eval_every: 100,
            seeds: vec![0, 1, 2],
            target_params: 1_000_000,
            kl_sequences: 4,
            kl_every: 500,
            corpus,
            train,
            model,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchPoint {
    pub step: usize,
    pub val_loss: Real,
    /// Mean per-class unigram KL of generated samples; NaN when disabled.
    pub val_kl: Real,
    pub cumulative_flops: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRun {
    pub variant: BlockVariant,
    pub seed: u64,
    pub hidden: usize,
    pub params: usize,
    pub points: Vec<BenchPoint>,
    pub data_digest: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub config_digest: String,
    pub runs: Vec<BenchRun>,
}

/// Pick the hidden width whose parameter count comes closest to the target,
/// respecting the attention-head and SSM-head divisibility constraints.
pub fn matched_config(
    template: &ModelConfig,
    variant: BlockVariant,
    target_params: usize,
) -> Result<ModelConfig> {
    let mut best: Option<(usize, usize)> = None; // (abs deviation, hidden)
    for hidden in (8..=1024).step_by(4) {
        let mut cfg = template.clone();
        cfg.variant = variant;
        cfg.hidden = hidden;
        if hidden % cfg.heads != 0 || cfg.ssm_inner() % cfg.ssm_headdim != 0 {
            continue;
        }
        let count = model::count_params(&cfg);
        let dev = count.abs_diff(target_params);
        if best.map_or(true, |(d, _)| dev < d) {
            best = Some((dev, hidden));
        }
    }
    let (_, hidden) =
        best.ok_or_else(|| Error::config("no feasible hidden width for the target"))?;
    let mut cfg = template.clone();
    cfg.variant = variant;
    cfg.hidden = hidden;
    cfg.validate()?;
    Ok(cfg)
}

/// Unigram KL of generated coarse samples against the analytic per-class
/// stationary marginal, averaged over classes.
fn generation_kl(
    model_: &Model,
    corpus: &SynthCorpus,
    sequences: usize,
    seed: u64,
    step: usize,
) -> Result<Real> {
    let classes = corpus.config().classes;
    let t_frames = corpus.config().t_frames;
    let mut per_class: Vec<Vec<u32>> = vec![Vec::new(); classes];
    for i in 0..sequences {
        let class = i % classes;
        let cfg = SamplingConfig {
            top_k: model_.config.vocab as usize,
            temperature: 1.0,
            guidance_scale: 1.0,
            seed: crate::stream_rng(seed, "bench-kl-seed", (step * 10_000 + i) as u64)
                .next_u64(),
        };
        let grid = model::generate(model_, Some(class), t_frames, &cfg)?;
        per_class[class].extend_from_slice(grid.layer(0));
    }
    let mut total = 0.0;
    let mut used: Real = 0.0;
    for (class, samples) in per_class.iter().enumerate() {
        if !samples.is_empty() {
            total += eval_kl(samples, corpus.stationary(class), KL_SMOOTHING)?;
            used += 1.0;
        }
    }
    Ok(total / used.max(1.0))
}

use rand::RngCore;

/// Train every (variant, seed) pair on the identical data stream and record
/// the curves.
pub fn bench_run(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::config("bench needs at least one variant and seed"));
    }
    if cfg.budget_steps == 0 || cfg.eval_every == 0 {
        return Err(Error::config("budget_steps and eval_every must be positive"));
    }
    let corpus = SynthCorpus::new(cfg.corpus.clone())?;
    let (train_set, val_set) = corpus.generate();
    let mut runs = Vec::new();
    for variant in &cfg.variants {
        let model_cfg = matched_config(&cfg.model, *variant, cfg.target_params)?;
        let params = model::count_params(&model_cfg);
        for &seed in &cfg.seeds {
            let mut rng = crate::stream_rng(seed, "bench-model-init", variant.name().len() as u64);
            let model_ = Model::init(model_cfg.clone(), &mut rng)?;
            let train_cfg_base = TrainConfig {
                seed,
                horizon: cfg.budget_steps,
                eval_every: cfg.eval_every,
                ..cfg.train.clone()
            };
            let mut state = TrainState::new(&model_.params(), seed);
            let started = std::time::Instant::now();
            let mut points = Vec::new();
            let mut digest = String::new();
            let mut segment_end = cfg.eval_every;
            while state.step < cfg.budget_steps {
                let seg_cfg = TrainConfig {
                    max_steps: segment_end.min(cfg.budget_steps),
                    ..train_cfg_base.clone()
                };
                let out = train_loop(&model_, &train_set, &val_set, &seg_cfg, state, None)?;
                state = out.state;
                digest = out.data_digest.clone();
                let row = out
                    .metrics
                    .last()
                    .ok_or_else(|| Error::contract("training segment emitted no metrics"))?;
                let kl_due = cfg.kl_sequences > 0
                    && (state.step == cfg.budget_steps
                        || (cfg.kl_every > 0 && state.step % cfg.kl_every == 0));
                let val_kl = if kl_due {
                    generation_kl(&model_, &corpus, cfg.kl_sequences, seed, state.step)?
                } else {
                    Real::NAN
                };
                points.push(BenchPoint {
                    step: state.step,
                    val_loss: row.val_loss,
                    val_kl,
                    cumulative_flops: row.cumulative_flops,
                    wall_ms: started.elapsed().as_millis(),
                });
                segment_end += cfg.eval_every;
            }
            runs.push(BenchRun {
                variant: *variant,
                seed,
                hidden: model_cfg.hidden,
                params,
                points,
                data_digest: digest,
            });
        }
    }
    Ok(BenchReport {
        config_digest: crate::manifest::digest_json(&serde_json::to_value(cfg)?),
        runs,
    })
}

/// Seed-averaged validation-loss curve of a variant: (step, mean loss).
pub fn mean_curve(report: &BenchReport, variant: BlockVariant) -> Vec<(usize, Real)> {
    let runs: Vec<&BenchRun> = report
        .runs
        .iter()
        .filter(|r| r.variant == variant)
        .collect();
    if runs.is_empty() {
        return Vec::new();
    }
    let n_points = runs.iter().map(|r| r.points.len()).min().unwrap_or(0);
    (0..n_points)
        .map(|i| {
            let step = runs[0].points[i].step;
            let mean = runs.iter().map(|r| r.points[i].val_loss).sum::<Real>()
                / runs.len() as Real;
            (step, mean)
        })
        .collect()
}

/// First step at which a curve reaches the target loss, if it ever does.
pub fn steps_to_target(curve: &[(usize, Real)], target: Real) -> Option<usize> {
    curve
        .iter()
        .find(|(_, loss)| *loss <= target)
        .map(|(step, _)| *step)
}

/// report.csv: one row per (run, point).
pub fn write_report_csv(path: &std::path::Path, report: &BenchReport) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "variant,seed,hidden,params,step,val_loss,val_kl,cumulative_flops,wall_ms"
    )?;
    for run in &report.runs {
        for p in &run.points {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{}",
                run.variant,
                run.seed,
                run.hidden,
                run.params,
                p.step,
                p.val_loss,
                p.val_kl,
                p.cumulative_flops,
                p.wall_ms
            )?;
        }
    }
    f.flush()?;
    Ok(())
}

const SVG_COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn color_for(variant: BlockVariant) -> &'static str {
    match variant {
        BlockVariant::PrefixMamba => SVG_COLORS[2],
        BlockVariant::PrefixSimba => SVG_COLORS[0],
        BlockVariant::CrossSimba => SVG_COLORS[3],
        BlockVariant::CrossTransformer => SVG_COLORS[1],
    }
}

/// report.svg: validation-loss curves, one line per run, coloured by
/// variant. Deterministic output for a given report.
pub fn write_report_svg(path: &std::path::Path, report: &BenchReport) -> Result<()> {
    let (w, h, ml, mb, mt, mr) = (640.0, 400.0, 60.0, 40.0, 20.0, 20.0);
    let mut min_loss = Real::INFINITY;
    let mut max_loss = Real::NEG_INFINITY;
    let mut max_step = 0usize;
    for run in &report.runs {
        for p in &run.points {
            min_loss = min_loss.min(p.val_loss);
            max_loss = max_loss.max(p.val_loss);
            max_step = max_step.max(p.step);
        }
    }
    if !min_loss.is_finite() || max_step == 0 {
        return Err(Error::contract("nothing to plot"));
    }
    let pad = (max_loss - min_loss).max(1e-6) * 0.05;
    let (lo, hi) = (min_loss - pad, max_loss + pad);
    let x = |step: usize| ml + (step as Real / max_step as Real) * (w - ml - mr);
    let y = |loss: Real| h - mb - ((loss - lo) / (hi - lo)) * (h - mb - mt);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">training steps</text>\n",
        (ml + w - mr) / 2.0,
        h - 8.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">validation loss</text>\n",
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    ));
    svg.push_str(&format!(
        "<text x=\"{ml}\" y=\"{}\" font-size=\"10\">{:.4}</text>\n",
        h - mb + 14.0,
        0.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{max_step}</text>\n",
        w - mr,
        h - mb + 14.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{hi:.4}</text>\n",
        ml - 4.0,
        mt + 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{lo:.4}</text>\n",
        ml - 4.0,
        h - mb
    ));
    for run in &report.runs {
        let pts: Vec<String> = run
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.step), y(p.val_loss)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" opacity=\"0.8\" points=\"{}\"/>\n",
            color_for(run.variant),
            pts.join(" ")
        ));
    }
    let mut seen = Vec::new();
    let mut ly = mt + 14.0;
    for run in &report.runs {
        if !seen.contains(&run.variant) {
            seen.push(run.variant);
            svg.push_str(&format!(
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                w - mr - 170.0,
                ly - 4.0,
                w - mr - 150.0,
                ly - 4.0,
                color_for(run.variant)
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>\n",
                w - mr - 144.0,
                ly,
                run.variant
            ));
            ly += 16.0;
        }
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
