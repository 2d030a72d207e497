use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dartspike_core::backtest::{metrics_csv, View};
use dartspike_core::pipeline;
use dartspike_core::synth::{generate, write_fixture};
use dartspike_core::{Mode, RunConfig, SynthSpec};
use log::info;

#[derive(Parser)]
#[command(
    name = "dartspike",
    version,
    about = "DART spike forecasting and impact-aware virtual bid sizing"
)]
struct Cli {
    /// Worker threads for model fitting; all cores when omitted.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: features, fit, calibrate, size, backtest, report.
    Run(RunArgs),
    /// Write a seeded synthetic panel and stack fixture.
    Synth(SynthArgs),
    /// Leakage audit of the configured feature set.
    Audit(StageArgs),
    /// Impact calibration only.
    Calibrate(StageArgs),
    /// Classification metrics on the test split only.
    Metrics(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    stage: StageArgs,
    #[arg(long)]
    mode: Option<Mode>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML generator settings; defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hours: Option<usize>,
}

fn load_config(args: &StageArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.paths.output = std::path::absolute(out).context("resolving --out")?;
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.stage)?;
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    let outcome = pipeline::run(&cfg)?;
    let r = &outcome.report;
    println!(
        "{} execution trades, P&L {:.2}; prediction P&L {:.2}",
        r.execution.len(),
        r.total_pnl(View::Execution),
        r.total_pnl(View::Prediction)
    );
    println!(
        "{} files written to {}",
        outcome.manifest.files.len(),
        outcome.out_dir.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => {
            let s =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SynthSpec>(&s).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(h) = args.hours {
        spec.hours = h;
    }
    let data = generate(&spec)?;
    let files = write_fixture(&data, &args.out)?;
    println!(
        "{} hours x {} zones, {} negative and {} positive spikes; wrote {} files to {}",
        spec.hours,
        spec.zones.len(),
        data.truth.negative_spikes,
        data.truth.positive_spikes,
        files.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_audit(args: StageArgs) -> Result<()> {
    let cfg = load_config(&args)?;
    let inputs = pipeline::load_inputs(&cfg)?;
    let (_, report) = pipeline::audit(&inputs)?;
    write(
        &cfg.paths.output,
        "audit.json",
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    for c in &report.columns {
        println!("{} {}", if c.pass { "pass" } else { "FAIL" }, c.column);
    }
    if !report.pass {
        bail!(
            "leakage audit failed for columns: {}",
            report.failing_columns().join(", ")
        );
    }
    Ok(())
}

fn cmd_calibrate(args: StageArgs) -> Result<()> {
    let cfg = load_config(&args)?;
    let params = pipeline::calibrate(&pipeline::load_inputs(&cfg)?)?;
    write(
        &cfg.paths.output,
        "impact.json",
        (params.to_json() + "\n").as_bytes(),
    )?;
    for (b, kp) in &params.k_e_plus {
        println!("{b}: k_E+ {kp:.6} k_E- {:.6}", params.k_e_minus[b]);
    }
    for (z, k) in &params.k_z {
        println!("{z}: k_z {k:.6}");
    }
    Ok(())
}

fn cmd_metrics(args: StageArgs) -> Result<()> {
    let cfg = load_config(&args)?;
    let rows = pipeline::metrics(&pipeline::load_inputs(&cfg)?)?;
    let bytes = metrics_csv(&rows)?;
    write(&cfg.paths.output, "metrics.csv", &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: --jobs {n}: {e}");
            return ExitCode::from(2);
        }
        info!("using {n} worker threads");
    }
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Metrics(a) => cmd_metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
