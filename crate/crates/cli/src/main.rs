use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use calibeat::harness::{self, ExperimentConfig, SpaceSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "calibeat", version, about = "Calibeating and calibration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides CALIBEAT_OUT_DIR and the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Horizon.
    #[arg(long)]
    t: Option<usize>,
    /// Number of replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Format of what is printed on stdout.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Run one procedure and write its trace and summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// Built-in experiment to use instead of --config.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
    },
    /// Score a forecast file `t,a_1..a_m,c_1..c_m[,b_1..b_N]`.
    Score {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run several procedures on the same streams and rank them.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
    },
    /// Scores of the two forecasters of the rain example.
    Figure1 {
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo check of the beta-binomial lower bound.
    Lowerbound {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50.0)]
        alpha: f64,
    },
    /// List built-in experiments.
    Presets,
}

fn load_config(common: &Common, preset: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, preset) {
        (Some(path), _) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(name)) => ExperimentConfig::preset(name).with_context(|| format!("unknown preset {name:?}"))?,
        (None, None) => bail!("pass --config <path> or --preset <name>"),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.seeds = None;
    }
    if let Some(t) = common.t {
        cfg.t = t;
    }
    if let Some(reps) = common.reps {
        cfg.reps = reps;
        cfg.seeds = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stem(cfg: &ExperimentConfig, fallback: &str) -> String {
    if cfg.name.is_empty() {
        fallback.to_string()
    } else {
        cfg.name.clone()
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn print_rows<T: Serialize>(rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CheckLine<'a> {
    check: &'a str,
    mode: &'a str,
    observed: f64,
    bound: f64,
    stderr: Option<f64>,
    worst_margin: Option<f64>,
    pass: &'a str,
}

fn run(common: &Common, preset: Option<&str>) -> Result<bool> {
    let cfg = load_config(common, preset)?;
    let output = harness::run(&cfg)?;
    let dir = harness::output_dir(common.out.as_deref(), cfg.out.as_deref());
    let written = harness::write_run(&dir, &stem(&cfg, output.summary.procedure.as_str()), &output)?;
    for path in &written {
        eprintln!("wrote {}", path.display());
    }
    match common.format {
        Format::Json => print_json(&output.summary)?,
        Format::Csv => {
            let lines: Vec<CheckLine> = output
                .summary
                .bounds
                .iter()
                .map(|b| CheckLine {
                    check: &b.name,
                    mode: match b.mode {
                        harness::CheckMode::EveryT => "every_t",
                        harness::CheckMode::Mean => "mean",
                        harness::CheckMode::Report => "report",
                    },
                    observed: b.observed,
                    bound: b.bound,
                    stderr: b.stderr,
                    worst_margin: b.worst_margin,
                    pass: match b.pass {
                        Some(true) => "PASS",
                        Some(false) => "FAIL",
                        None => "",
                    },
                })
                .collect();
            print_rows(&lines)?;
        }
    }
    Ok(output.summary.all_pass())
}

fn score(input: &Path, common: &Common) -> Result<bool> {
    let space = match &common.config {
        Some(path) => {
            let spec: SpaceSpec = serde_json::from_str(&std::fs::read_to_string(path)?)
                .with_context(|| format!("{} is not a space spec", path.display()))?;
            Some(spec.build()?)
        }
        None => None,
    };
    let scores = harness::score_file(input, space.as_ref())?;
    match common.format {
        Format::Json => print_json(&scores)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            w.write_record(["t", "B", "K_l2", "K_l1", "R", "R_tilde", "residual"])?;
            w.write_record([
                scores.t.to_string(),
                scores.brier.to_string(),
                scores.k_l2.to_string(),
                scores.k_l1.to_string(),
                scores.refinement.to_string(),
                scores.online_refinement.to_string(),
                scores.residual.to_string(),
            ])?;
            w.flush()?;
        }
    }
    Ok(true)
}

fn compare(common: &Common, preset: Option<&str>) -> Result<bool> {
    let cfg = load_config(common, preset)?;
    let (report, outputs) = harness::compare(&cfg)?;
    let dir = harness::output_dir(common.out.as_deref(), cfg.out.as_deref());
    std::fs::create_dir_all(&dir)?;
    let base = stem(&cfg, "compare");
    let path = dir.join(format!("{base}_ranking.csv"));
    report.write_csv(std::fs::File::create(&path)?)?;
    eprintln!("wrote {}", path.display());
    for (i, out) in outputs.iter().enumerate() {
        harness::write_run(&dir, &format!("{base}_{}_{}", i + 1, out.summary.procedure), out)?;
    }
    match common.format {
        Format::Json => print_json(&report)?,
        Format::Csv => report.write_csv(std::io::stdout().lock())?,
    }
    Ok(report.rows.iter().all(|r| r.pass != Some(false)))
}

fn figure1(common: &Common) -> Result<bool> {
    let rows = harness::figure1(common.t.unwrap_or(10))?;
    match common.format {
        Format::Json => print_json(&rows)?,
        Format::Csv => print_rows(&rows)?,
    }
    Ok(true)
}

fn lowerbound(common: &Common, alpha: f64) -> Result<bool> {
    let report = harness::lower_bound(
        alpha,
        common.t.unwrap_or(1_000),
        common.reps.unwrap_or(10_000),
        common.seed.unwrap_or(0),
        None,
    )?;
    match common.format {
        Format::Json => print_json(&report)?,
        Format::Csv => print_rows(std::slice::from_ref(&report))?,
    }
    Ok(report.pass_gap && report.pass_moments)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common, preset } => run(common, preset.as_deref()),
        Command::Score { input, common } => score(input, common),
        Command::Compare { common, preset } => compare(common, preset.as_deref()),
        Command::Figure1 { common } => figure1(common),
        Command::Lowerbound { common, alpha } => lowerbound(common, *alpha),
        Command::Presets => {
            for name in ExperimentConfig::PRESETS {
                println!("{name}");
            }
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more bound checks failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
