use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use moepipe::{expert_load, load_trace, nanos_to_secs, save_trace, ActivationTrace, Variant};
use moepipe_cli::artifacts::{point_dir, write_point, write_rows, ComparisonRow};
use moepipe_cli::config::{load_config, ExperimentConfig};
use moepipe_cli::runner::{self, PointOutput};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "moepipe",
    version,
    about = "Plan and simulate offloaded MoE inference pipelines"
)]
struct Cli {
    /// Override the workload seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output format for console reports.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Root directory for artifacts.
    #[arg(long, global = true, env = "MOEPIPE_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the batch count and placement, and show the binding condition.
    Plan { config: PathBuf },
    /// Generate or inspect routing traces.
    #[command(subcommand)]
    Trace(TraceCommand),
    /// Simulate every configured variant and write artifacts.
    Run { config: PathBuf },
    /// Simulate every variant at each batch count of `[sweep] n`.
    Sweep { config: PathBuf },
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Write the configured workload trace as JSON.
    Gen {
        config: PathBuf,
        /// Batch count; defaults to the configured or planned one.
        #[arg(long)]
        n: Option<usize>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Summarize a trace file.
    Inspect { trace: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.workload.seed = seed;
    }
    Ok(cfg)
}

fn output_root(cli: &Cli, cfg: &ExperimentConfig, path: &Path) -> PathBuf {
    let base = cli
        .out_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let name = cfg.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map_or("run".into(), |s| s.to_string_lossy().into_owned())
    });
    base.join(name)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Plan { config } => plan(cli, config),
        Command::Trace(TraceCommand::Gen { config, n, output }) => {
            let cfg = load(cli, config)?;
            let n = match n {
                Some(n) => *n,
                None => runner::batch_count(&cfg, Variant::ExpertAware)?,
            };
            let trace = runner::trace(&cfg, n, cfg.workload.seed)?;
            save_trace(&trace, output)?;
            println!(
                "wrote {} ({} steps, {n} batches)",
                output.display(),
                trace.n_steps()
            );
            Ok(())
        }
        Command::Trace(TraceCommand::Inspect { trace }) => inspect(cli, &load_trace(trace)?),
        Command::Run { config } => {
            let cfg = load(cli, config)?;
            let points = runner::run_all(&cfg)?;
            let root = output_root(cli, &cfg, config);
            report(cli, &cfg, &points, &root, false)
        }
        Command::Sweep { config } => {
            let cfg = load(cli, config)?;
            let ns = cfg
                .sweep
                .as_ref()
                .map(|s| s.n.clone())
                .context("config has no [sweep] table")?;
            let points = runner::sweep(&cfg, &ns)?;
            let root = output_root(cli, &cfg, config).join("sweep");
            report(cli, &cfg, &points, &root, true)
        }
    }
}

fn report(
    cli: &Cli,
    cfg: &ExperimentConfig,
    points: &[PointOutput],
    root: &Path,
    sweep: bool,
) -> Result<()> {
    std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    for p in points {
        write_point(&point_dir(root, p, sweep), p, cfg.run.k)?;
    }
    let rows: Vec<ComparisonRow> = points
        .iter()
        .map(|p| ComparisonRow::of(p, cfg.run.k))
        .collect();
    let table = root.join(if sweep { "sweep.csv" } else { "comparison.csv" });
    write_rows(&table, &rows)?;
    match cli.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
        Format::Text => {
            println!(
                "{:<26} {:>4} {:>12} {:>10} {:>8} {:>10}",
                "variant", "n", "tok/s", "makespan", "bubble", "peak GB"
            );
            for r in &rows {
                println!(
                    "{:<26} {:>4} {:>12.2} {:>9.3}s {:>7.1}% {:>10.2}",
                    r.variant.name(),
                    r.n,
                    r.throughput_tok_s,
                    r.makespan_s,
                    r.bubble_fraction * 100.0,
                    r.peak_vram_bytes as f64 / 1e9
                );
            }
            println!("artifacts in {}", root.display());
        }
    }
    Ok(())
}

fn plan(cli: &Cli, config: &Path) -> Result<()> {
    let cfg = load(cli, config)?;
    let variant = cfg.run.variants[0];
    let p = runner::plan(&cfg, variant)?;
    if cli.format == Format::Json {
        println!("{}", serde_json::to_string_pretty(&p)?);
        return Ok(());
    }
    let s = &p.solution;
    let ms = |x| nanos_to_secs(x) * 1e3;
    let mut out = String::new();
    writeln!(
        out,
        "model {}  hardware {}  variant {}",
        cfg.model.name,
        cfg.hardware.name,
        variant.name()
    )?;
    writeln!(
        out,
        "batch size {}  n {}  K {}",
        p.batch_size, p.n_batches, cfg.run.k
    )?;
    writeln!(
        out,
        "binding {} on layer {}{}",
        s.binding.name(),
        s.binding_layer,
        if s.feasible {
            String::new()
        } else {
            format!("  INFEASIBLE, gap {:.3} ms", ms(s.residual_gap))
        }
    )?;
    for t in s.terms.iter().filter(|t| t.layer == s.binding_layer) {
        writeln!(
            out,
            "  {:<26} n * {:>9.3} ms >= {:>9.3} ms   min n {}",
            t.condition.name(),
            ms(t.per_batch),
            ms(t.cover),
            t.min_n().map_or("none".into(), |n| n.to_string())
        )?;
    }
    out.push_str(&p.placement.to_text());
    for w in &p.warnings {
        writeln!(out, "warning: {w}")?;
    }
    print!("{out}");
    Ok(())
}

#[derive(Serialize)]
struct LayerSummary {
    layer: usize,
    mean_active: f64,
    top_experts: Vec<(u16, f64)>,
}

fn inspect(cli: &Cli, t: &ActivationTrace) -> Result<()> {
    let mut layers = Vec::new();
    for layer in 0..t.n_layers() {
        let mut counts = vec![0u64; t.n_experts()];
        let mut active = 0usize;
        for step in 0..t.n_steps() {
            let load = expert_load(t, step, layer)?;
            active += load.distinct_active();
            for (c, x) in counts.iter_mut().zip(&load.counts) {
                *c += x;
            }
        }
        let total = counts.iter().sum::<u64>().max(1) as f64;
        let mut ranked: Vec<(u16, f64)> = counts
            .iter()
            .enumerate()
            .map(|(e, &c)| (e as u16, c as f64 / total))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(3);
        layers.push(LayerSummary {
            layer,
            mean_active: active as f64 / t.n_steps() as f64,
            top_experts: ranked,
        });
    }
    if cli.format == Format::Json {
        println!("{}", serde_json::to_string_pretty(&layers)?);
        return Ok(());
    }
    let g = &t.meta.group;
    println!(
        "{} steps x {} layers x {} batches of {}, {} experts top-{}, skew {:?}, seed {}",
        t.n_steps(),
        t.n_layers(),
        t.n_batches(),
        g.batch_size,
        t.n_experts(),
        t.top_k(),
        t.meta.skew,
        t.meta.seed
    );
    for l in &layers {
        let top: Vec<String> = l
            .top_experts
            .iter()
            .map(|(e, s)| format!("{e}:{:.1}%", s * 100.0))
            .collect();
        println!(
            "layer {:>3}  active {:>5.2}  top {}",
            l.layer,
            l.mean_active,
            top.join(" ")
        );
    }
    Ok(())
}
