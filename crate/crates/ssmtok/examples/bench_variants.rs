//! A reduced run of the architecture-comparison benchmark: matched parameter
//! budgets, identical data order, CSV + SVG report.
//!
//! ```bash
//! cargo run --release --example bench_variants
//! ```

use ssmtok::bench::{bench_run, mean_curve, write_report_csv, write_report_svg, BenchConfig};
use ssmtok::blocks::BlockVariant;

fn main() -> ssmtok::Result<()> {
    let mut cfg = BenchConfig::toy();
    cfg.budget_steps = 300;
    cfg.eval_every = 100;
    cfg.seeds = vec![0];
    cfg.kl_sequences = 2;
    cfg.kl_every = 300;
    cfg.corpus.train_size = 1024;
    cfg.corpus.val_size = 64;
    cfg.train.horizon = 300;
    cfg.train.max_steps = 300;

    let report = bench_run(&cfg)?;
    for run in &report.runs {
        println!(
            "{:<18} hidden {:>4} params {:>8}",
            run.variant.to_string(),
            run.hidden,
            run.params
        );
        for p in &run.points {
            println!(
                "    step {:>4}  val_loss {:.4}  val_kl {:>8}  flops {:.2e}",
                p.step,
                p.val_loss,
                if p.val_kl.is_nan() {
                    "-".to_string()
                } else {
                    format!("{:.4}", p.val_kl)
                },
                p.cumulative_flops
            );
        }
    }
    for variant in [BlockVariant::PrefixSimba, BlockVariant::CrossTransformer] {
        let curve = mean_curve(&report, variant);
        if let Some((step, loss)) = curve.last() {
            println!("{variant}: final mean val loss {loss:.4} at step {step}");
        }
    }
    let dir = std::env::temp_dir().join("ssmtok-bench-example");
    std::fs::create_dir_all(&dir)?;
    write_report_csv(&dir.join("report.csv"), &report)?;
    write_report_svg(&dir.join("report.svg"), &report)?;
    println!("report written to {}", dir.display());
    Ok(())
}
