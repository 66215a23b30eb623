//! Thin command-line front end over the library. Every subcommand reads an
//! optional JSON config, applies flag overrides, writes its artifacts into
//! the output directory, and records a manifest sufficient to reproduce the
//! run bit-for-bit.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use ssmtok::bench::{bench_run, write_report_csv, write_report_svg, BenchConfig};
use ssmtok::blocks::BlockVariant;
use ssmtok::corpus::{SynthCorpus, SynthCorpusConfig};
use ssmtok::eval::{eval_kl, eval_perplexity, KL_SMOOTHING};
use ssmtok::manifest::{output_root, RunManifest};
use ssmtok::model::{
    count_params, generate, Model, ModelConfig, SamplingConfig, TokenMode,
};
use ssmtok::rvq;
use ssmtok::train::{
    append_metrics_csv, flops_estimate, load_train_checkpoint, train_loop, TrainConfig, TrainState,
};
use ssmtok::twostage::{
    pipeline_generate, stage2_refine, train_refiner, ClassifierRefiner, RefineDecode,
    RefinerConfig,
};

#[derive(Parser)]
#[command(name = "ssmtok", version, about = "Train and sample state-space token language models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic hierarchical token corpus (train + val splits).
    Synth(SynthArgs),
    /// Train a language model or a refiner.
    Train(TrainArgs),
    /// Sample token grids from a trained language model.
    Generate(GenerateArgs),
    /// Predict the fine layers of an existing coarse grid with a refiner.
    Refine(RefineArgs),
    /// Two-stage generation: coarse LM then refiner.
    Pipeline(PipelineArgs),
    /// Train-efficiency comparison across block variants.
    Bench(BenchArgs),
    /// Evaluate a checkpoint: perplexity on a corpus or unigram KL.
    Eval(EvalArgs),
    /// Training-cost heuristic: 6 · params · frames · batch · steps.
    Flops(FlopsArgs),
    /// Parameter count implied by a model config.
    Params(ParamsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file holding a corpus config; defaults to the toy corpus.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file: {"model": ..., "train": ...} or
    /// {"refiner": ..., "train": ..., "kind": "refiner"}.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shortcut instead of --config: toy-preset model of this variant.
    #[arg(long)]
    variant: Option<String>,
    /// Token mode for the preset path: coarse or delay.
    #[arg(long)]
    mode: Option<String>,
    /// Train a refiner instead of a language model.
    #[arg(long, default_value = "lm")]
    kind: String,
    /// Corpus file written by `synth` (train split).
    #[arg(long)]
    corpus: PathBuf,
    /// Validation corpus file.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Resume from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    accum: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long, default_value_t = 250)]
    top_k: usize,
    #[arg(long, default_value_t = 1.2)]
    temperature: f64,
    #[arg(long, default_value_t = 3.0)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplingArgs {
    fn build(&self) -> SamplingConfig {
        SamplingConfig {
            top_k: self.top_k,
            temperature: self.temperature as ssmtok::Real,
            guidance_scale: self.guidance as ssmtok::Real,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Condition class; omit for the null condition.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    frames: usize,
    /// Number of grids to sample.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Grid file; its coarsest layer is refined.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    class: Option<usize>,
    /// Sample the refiner outputs instead of taking the argmax.
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    refiner: PathBuf,
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Sample the refiner outputs instead of taking the argmax.
    #[arg(long)]
    sample_refiner: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON BenchConfig; defaults to the toy benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated variants, or "all".
    #[arg(long)]
    variants: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// "ppl" (needs --corpus) or "kl" (needs --corpus-config).
    #[arg(long)]
    metric: String,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Synth corpus config for the analytic KL reference.
    #[arg(long)]
    corpus_config: Option<PathBuf>,
    /// Sequences to sample for the KL metric.
    #[arg(long, default_value_t = 64)]
    sequences: usize,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    params: f64,
    #[arg(long)]
    frames: f64,
    #[arg(long)]
    batch: f64,
    #[arg(long)]
    steps: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    variant: String,
    /// "paper" or "toy"; ignored when --config is given.
    #[arg(long, default_value = "paper")]
    preset: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the token mode: coarse or delay.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_mode(s: &str) -> anyhow::Result<TokenMode> {
    match s {
        "coarse" => Ok(TokenMode::Coarse),
        "delay" => Ok(TokenMode::Delay),
        other => bail!("unknown mode '{other}' (expected coarse or delay)"),
    }
}

fn run_dir(out: Option<&Path>, command: &str) -> anyhow::Result<PathBuf> {
    let dir = output_root(out).join(command);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Refine(a) => cmd_refine(a),
        Cmd::Pipeline(a) => cmd_pipeline(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Flops(a) => cmd_flops(a),
        Cmd::Params(a) => cmd_params(a),
    }
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut cfg: SynthCorpusConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthCorpusConfig::toy(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let dir = run_dir(a.out.as_deref(), "synth")?;
    let corpus = SynthCorpus::new(cfg.clone())?;
    let (train, val) = corpus.generate();
    let train_path = dir.join("train.tgc");
    let val_path = dir.join("val.tgc");
    rvq::write_corpus(&train_path, &train)?;
    rvq::write_corpus(&val_path, &val)?;
    let config_json = serde_json::to_value(&cfg)?;
    let manifest = RunManifest::new("synth", std::env::args().skip(1).collect(), cfg.seed, config_json.clone());
    manifest.write(&dir)?;
    let sidecar = serde_json::json!({
        "generator": "synth",
        "config": config_json,
        "config_digest": manifest.config_digest,
        "train_sequences": train.len(),
        "val_sequences": val.len(),
    });
    std::fs::write(dir.join("train.tgc.json"), serde_json::to_string_pretty(&sidecar)?)?;
    std::fs::write(dir.join("val.tgc.json"), serde_json::to_string_pretty(&sidecar)?)?;
    println!(
        "wrote {} train / {} val sequences to {}",
        train.len(),
        val.len(),
        dir.display()
    );
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TrainFile {
    #[serde(default)]
    kind: Option<String>,
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    refiner: Option<RefinerConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let corpus = rvq::read_corpus(&a.corpus)?;
    if corpus.is_empty() {
        bail!("corpus {} is empty", a.corpus.display());
    }
    let val = match &a.val {
        Some(p) => rvq::read_corpus(p)?,
        None => Vec::new(),
    };
    let file: TrainFile = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainFile {
            kind: None,
            model: None,
            refiner: None,
            train: None,
        },
    };
    let kind = file.kind.clone().unwrap_or_else(|| a.kind.clone());
    let mut tcfg = file.train.clone().unwrap_or_default();
    if let Some(steps) = a.steps {
        tcfg.max_steps = steps;
    }
    if let Some(seed) = a.seed {
        tcfg.seed = seed;
    }
    if let Some(lr) = a.lr {
        tcfg.lr = lr as ssmtok::Real;
    }
    if let Some(batch) = a.batch {
        tcfg.batch_size = batch;
    }
    if let Some(accum) = a.accum {
        tcfg.grad_accum = accum;
    }
    let dir = run_dir(a.out.as_deref(), "train")?;
    let (k_layers, vocab) = (corpus[0].0.k_layers(), corpus[0].0.vocab());
    let classes = corpus.iter().map(|(_, c)| *c as usize + 1).max().unwrap_or(1);

    if kind == "refiner" {
        let rcfg = file.refiner.clone().unwrap_or(RefinerConfig {
            k_layers,
            vocab,
            cond_classes: classes,
            cond_width: 32,
            hidden: 64,
            n_layers: 2,
            dropout: 0.0,
            init_std: 0.02,
        });
        let mut rng = ssmtok::stream_rng(tcfg.seed, "refiner-init", 0);
        let refiner = ClassifierRefiner::init(rcfg.clone(), &mut rng)?;
        let history = train_refiner(&refiner, &corpus, &tcfg)?;
        let ckpt = dir.join("refiner.ckpt");
        refiner.save(
            &ckpt,
            serde_json::json!({"steps": tcfg.max_steps, "seed": tcfg.seed}),
        )?;
        let config_json = serde_json::json!({"kind": "refiner", "refiner": rcfg, "train": tcfg});
        RunManifest::new("train", std::env::args().skip(1).collect(), tcfg.seed, config_json)
            .write(&dir)?;
        println!(
            "refiner trained for {} steps (final loss {:.4}); checkpoint at {}",
            tcfg.max_steps,
            history.last().map(|(_, l)| *l).unwrap_or(f64::NAN as ssmtok::Real),
            ckpt.display()
        );
        return Ok(());
    }

    let (model, state) = if let Some(resume) = &a.resume {
        let (model, state, _old_cfg) = load_train_checkpoint(resume)?;
        (model, state)
    } else {
        let mcfg = match (&file.model, &a.variant) {
            (Some(m), _) => m.clone(),
            (None, Some(v)) => {
                let variant: BlockVariant = v.parse()?;
                let mut m = ModelConfig::toy(variant);
                m.mode = match &a.mode {
                    Some(s) => parse_mode(s)?,
                    None if k_layers == 1 => TokenMode::Coarse,
                    None => TokenMode::Delay,
                };
                m.k_layers = k_layers;
                m.vocab = vocab;
                m.cond_classes = classes;
                m
            }
            (None, None) => bail!("either --config with a model or --variant is required"),
        };
        let mut rng = ssmtok::stream_rng(tcfg.seed, "model-init", 0);
        let model = Model::init(mcfg, &mut rng)?;
        let state = TrainState::new(&model.params(), tcfg.seed);
        (model, state)
    };
    let config_json = serde_json::json!({
        "kind": "lm",
        "model": model.config,
        "train": tcfg,
        "resumed_from": a.resume.as_ref().map(|p| p.display().to_string()),
    });
    RunManifest::new("train", std::env::args().skip(1).collect(), tcfg.seed, config_json)
        .write(&dir)?;
    let outcome = train_loop(&model, &corpus, &val, &tcfg, state, Some(&dir))?;
    append_metrics_csv(&dir.join("metrics.csv"), &outcome.metrics)?;
    println!(
        "trained to step {} (data digest {}); checkpoints in {}",
        outcome.state.step,
        &outcome.data_digest[..16],
        dir.display()
    );
    if let Some(row) = outcome.metrics.last() {
        println!(
            "final: train_loss {:.4}, val_loss {:.4}, cumulative FLOPs {:.3e}",
            row.train_loss, row.val_loss, row.cumulative_flops
        );
    }
    Ok(())
}

fn grid_provenance(command: &str, manifest: &RunManifest) -> serde_json::Value {
    serde_json::json!({
        "generator": command,
        "config_digest": manifest.config_digest,
        "seed": manifest.seed,
        "package_version": manifest.package_version,
    })
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let model = Model::load(&a.ckpt)?;
    let sampling = a.sampling.build();
    let dir = run_dir(a.out.as_deref(), "generate")?;
    let config_json = serde_json::json!({
        "ckpt": a.ckpt.display().to_string(),
        "class": a.class,
        "frames": a.frames,
        "count": a.count,
        "sampling": sampling,
    });
    let manifest = RunManifest::new(
        "generate",
        std::env::args().skip(1).collect(),
        sampling.seed,
        config_json,
    );
    manifest.write(&dir)?;
    for i in 0..a.count {
        let cfg = SamplingConfig {
            seed: sampling.seed.wrapping_add(i as u64),
            ..sampling.clone()
        };
        let grid = generate(&model, a.class, a.frames, &cfg)?;
        let path = dir.join(format!("sample_{i:03}.tg"));
        rvq::write_grid(&path, &grid, &grid_provenance("generate", &manifest))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_refine(a: RefineArgs) -> anyhow::Result<()> {
    let refiner = ClassifierRefiner::load(&a.ckpt)?;
    let grid = rvq::read_grid(&a.grid)?;
    let coarse = grid.layer(0);
    let decode = if a.sample {
        RefineDecode::Sample {
            temperature: a.temperature as ssmtok::Real,
            seed: a.seed,
        }
    } else {
        RefineDecode::Argmax
    };
    let fine = stage2_refine(&refiner, coarse, a.class, decode)?;
    let full = rvq::recombine(coarse, &fine)?;
    let dir = run_dir(a.out.as_deref(), "refine")?;
    let config_json = serde_json::json!({
        "ckpt": a.ckpt.display().to_string(),
        "grid": a.grid.display().to_string(),
        "class": a.class,
        "decode": decode,
    });
    let manifest = RunManifest::new("refine", std::env::args().skip(1).collect(), a.seed, config_json);
    manifest.write(&dir)?;
    let path = dir.join("refined.tg");
    rvq::write_grid(&path, &full, &grid_provenance("refine", &manifest))?;
    println!("wrote {} ({} layers × {} frames)", path.display(), full.k_layers(), full.t_frames());
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> anyhow::Result<()> {
    let lm = Model::load(&a.lm)?;
    let refiner = ClassifierRefiner::load(&a.refiner)?;
    let sampling = a.sampling.build();
    let decode = if a.sample_refiner {
        RefineDecode::Sample {
            temperature: 1.0,
            seed: sampling.seed,
        }
    } else {
        RefineDecode::Argmax
    };
    let dir = run_dir(a.out.as_deref(), "pipeline")?;
    let config_json = serde_json::json!({
        "lm": a.lm.display().to_string(),
        "refiner": a.refiner.display().to_string(),
        "class": a.class,
        "frames": a.frames,
        "count": a.count,
        "sampling": sampling,
        "decode": decode,
    });
    let manifest = RunManifest::new(
        "pipeline",
        std::env::args().skip(1).collect(),
        sampling.seed,
        config_json,
    );
    manifest.write(&dir)?;
    for i in 0..a.count {
        let cfg = SamplingConfig {
            seed: sampling.seed.wrapping_add(i as u64),
            ..sampling.clone()
        };
        let grid = pipeline_generate(&lm, &refiner, a.class, a.frames, &cfg, decode)?;
        let path = dir.join(format!("pipeline_{i:03}.tg"));
        rvq::write_grid(&path, &grid, &grid_provenance("pipeline", &manifest))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn parse_variants(s: &str) -> anyhow::Result<Vec<BlockVariant>> {
    if s == "all" {
        return Ok(BlockVariant::all().to_vec());
    }
    s.split(',').map(|v| Ok(v.trim().parse()?)).collect()
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    let mut cfg: BenchConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => BenchConfig::toy(),
    };
    if let Some(v) = &a.variants {
        cfg.variants = parse_variants(v)?;
    }
    if let Some(steps) = a.steps {
        cfg.budget_steps = steps;
        cfg.train.max_steps = steps;
        cfg.train.horizon = steps;
    }
    if let Some(seeds) = &a.seeds {
        cfg.seeds = seeds
            .split(',')
            .map(|s| s.trim().parse::<u64>().context("parsing --seeds"))
            .collect::<anyhow::Result<Vec<u64>>>()?;
    }
    let dir = run_dir(a.out.as_deref(), "bench")?;
    let config_json = serde_json::to_value(&cfg)?;
    RunManifest::new("bench", std::env::args().skip(1).collect(), cfg.corpus.seed, config_json)
        .write(&dir)?;
    let report = bench_run(&cfg)?;
    write_report_csv(&dir.join("report.csv"), &report)?;
    write_report_svg(&dir.join("report.svg"), &report)?;
    for run in &report.runs {
        let last = run.points.last().expect("nonempty curve");
        println!(
            "{:<18} seed {}  hidden {:>4}  params {:>8}  final val_loss {:.4}",
            run.variant.to_string(),
            run.seed,
            run.hidden,
            run.params,
            last.val_loss
        );
    }
    println!("report written to {}", dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let dir = run_dir(a.out.as_deref(), "eval")?;
    let sampling = a.sampling.build();
    match a.metric.as_str() {
        "ppl" => {
            let corpus_path = a
                .corpus
                .as_ref()
                .context("--metric ppl requires --corpus")?;
            let corpus = rvq::read_corpus(corpus_path)?;
            let model = Model::load(&a.ckpt)?;
            let ppl = eval_perplexity(&model, &corpus, 4)?;
            let config_json = serde_json::json!({
                "metric": "ppl",
                "ckpt": a.ckpt.display().to_string(),
                "corpus": corpus_path.display().to_string(),
            });
            RunManifest::new("eval", std::env::args().skip(1).collect(), 0, config_json)
                .write(&dir)?;
            std::fs::write(
                dir.join("eval.json"),
                serde_json::to_string_pretty(&serde_json::json!({"perplexity": ppl}))?,
            )?;
            println!("perplexity: {ppl:.4}");
        }
        "kl" => {
            let cc_path = a
                .corpus_config
                .as_ref()
                .context("--metric kl requires --corpus-config")?;
            let ccfg: SynthCorpusConfig = read_json(cc_path)?;
            let corpus = SynthCorpus::new(ccfg.clone())?;
            let model = Model::load(&a.ckpt)?;
            let classes = ccfg.classes;
            let mut per_class: Vec<Vec<u32>> = vec![Vec::new(); classes];
            for i in 0..a.sequences {
                let class = i % classes;
                let cfg = SamplingConfig {
                    seed: sampling.seed.wrapping_add(i as u64),
                    ..sampling.clone()
                };
                let grid = generate(&model, Some(class), ccfg.t_frames, &cfg)?;
                per_class[class].extend_from_slice(grid.layer(0));
            }
            let mut total = 0.0;
            let mut used = 0usize;
            for (class, samples) in per_class.iter().enumerate() {
                if !samples.is_empty() {
                    total += eval_kl(samples, corpus.stationary(class), KL_SMOOTHING)?;
                    used += 1;
                }
            }
            let kl = total / used.max(1) as ssmtok::Real;
            let config_json = serde_json::json!({
                "metric": "kl",
                "ckpt": a.ckpt.display().to_string(),
                "corpus_config": ccfg,
                "sequences": a.sequences,
                "sampling": sampling,
            });
            RunManifest::new("eval", std::env::args().skip(1).collect(), sampling.seed, config_json)
                .write(&dir)?;
            std::fs::write(
                dir.join("eval.json"),
                serde_json::to_string_pretty(&serde_json::json!({"kl": kl}))?,
            )?;
            println!("unigram KL: {kl:.4}");
        }
        other => bail!("unknown metric '{other}' (expected ppl or kl)"),
    }
    Ok(())
}

fn cmd_flops(a: FlopsArgs) -> anyhow::Result<()> {
    if a.params <= 0.0 || a.frames <= 0.0 || a.batch <= 0.0 || a.steps < 0.0 {
        bail!("params, frames, batch must be positive; steps non-negative");
    }
    let f = flops_estimate(a.params, a.frames, a.batch, a.steps);
    let dir = run_dir(a.out.as_deref(), "flops")?;
    let config_json = serde_json::json!({
        "params": a.params, "frames": a.frames, "batch": a.batch, "steps": a.steps,
        "flops": f,
    });
    RunManifest::new("flops", std::env::args().skip(1).collect(), 0, config_json).write(&dir)?;
    println!("{f:.6e}");
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> anyhow::Result<()> {
    let mut cfg: ModelConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => {
            let variant: BlockVariant = a.variant.parse()?;
            match a.preset.as_str() {
                "paper" => ModelConfig::paper(variant),
                "toy" => ModelConfig::toy(variant),
                other => bail!("unknown preset '{other}' (expected paper or toy)"),
            }
        }
    };
    if let Some(mode) = &a.mode {
        cfg.mode = parse_mode(mode)?;
    }
    let count = count_params(&cfg);
    let dir = run_dir(a.out.as_deref(), "params")?;
    let config_json = serde_json::json!({"model": cfg, "count": count});
    RunManifest::new("params", std::env::args().skip(1).collect(), 0, config_json).write(&dir)?;
    println!("{count} ({:.1}M)", count as f64 / 1e6);
    Ok(())
}
