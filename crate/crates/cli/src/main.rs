use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use perfnas::archspec::{derive_space, BoundsPolicy};
use perfnas::costmodel::convention::{render_report, search_conventions};
use perfnas::costmodel::network_cost;
use perfnas::engine::{Engine, ExperimentConfig, JsonlSink, TrialLog};
use perfnas::reference;
use perfnas::report::{self, LogSummary, SeedRef};
use perfnas::{NetworkArch, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Debug, Parser)]
#[command(
    name = "perfnas",
    version,
    about = "Performance-aware neural architecture search"
)]
struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Override the experiment seed (search and resume).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Trial log path.
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-layer and total ops/params of a network file (or a space file's seed).
    Cost { arch: PathBuf },
    /// Speedup and accuracy delta of a model against the seed. Ops accept
    /// K/M/G suffixes.
    Compare {
        seed_ops: String,
        model_ops: String,
        seed_top1: f64,
        model_top1: f64,
    },
    /// Run an experiment, writing the trial log incrementally.
    Search {
        config: PathBuf,
        /// Replace an existing log instead of refusing.
        #[arg(long)]
        force: bool,
    },
    /// Continue an interrupted experiment from its log.
    Resume { config: PathBuf },
    /// List the Pareto frontier of a log, most expensive first.
    Pareto { log_file: Option<PathBuf> },
    /// Scatter data and a delta table of the frontier against the seed.
    Report {
        log_file: Option<PathBuf>,
        /// Use this trial of the log as the seed reference.
        #[arg(long, conflicts_with = "seed_top1")]
        seed_trial: Option<u64>,
        /// Seed accuracy, when the seed is not a trial of the log.
        #[arg(long)]
        seed_top1: Option<f64>,
        /// Seed cost in ops (defaults to the reference seed network).
        #[arg(long, requires = "seed_top1")]
        seed_ops: Option<String>,
        /// Width of the band below the seed accuracy, in percentage points.
        #[arg(long, default_value_t = 1.0)]
        band: f64,
    },
    /// Rank cost conventions against the published reference costs.
    Conventions {
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Derive the default search space around a network file.
    Space {
        arch: PathBuf,
        /// Upper kernel bound for layers after the first.
        #[arg(long, default_value_t = 5)]
        kernel_upper: u64,
        /// Grid step for filter counts.
        #[arg(long, default_value_t = 1)]
        m_step: i64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let csv = cli.format == Format::Csv;
    match &cli.command {
        Command::Cost { arch } => {
            let arch = read_arch(arch)?;
            print!("{}", report::cost_report(&arch, csv)?);
        }
        Command::Compare {
            seed_ops,
            model_ops,
            seed_top1,
            model_top1,
        } => {
            let seed = SeedRef {
                label: "seed".into(),
                ops: parse_ops(seed_ops)?,
                top1: *seed_top1,
            };
            let row = report::delta_row(&seed, "model", parse_ops(model_ops)?, *model_top1, 1.0)?;
            if csv {
                println!("speedup,delta_top1");
                println!("{:.2},{:.2}", row.speedup, row.delta_top1);
            } else {
                println!(
                    "{:.2}x fewer ops, {:+.2} points TOP-1",
                    row.speedup, row.delta_top1
                );
            }
        }
        Command::Search { config, force } => {
            let cfg = load_config(config, cli.seed)?;
            let log_path = log_path(&cli, None)?;
            if !force && log_path.exists() && std::fs::metadata(&log_path)?.len() > 0 {
                bail!(
                    "{} already exists; use `resume` to continue it or --force to replace it",
                    log_path.display()
                );
            }
            let evaluator = cfg.evaluator.build(cfg.max_parallel)?;
            let sink = JsonlSink::create(&log_path)?;
            let mut engine = Engine::new(cfg, evaluator.as_ref())?.with_sink(sink);
            engine.run()?;
            finish(engine.state().log(), &log_path, csv)?;
        }
        Command::Resume { config } => {
            let cfg = load_config(config, cli.seed)?;
            let log_path = log_path(&cli, None)?;
            let (sink, log) = JsonlSink::resume(&log_path)?;
            let evaluator = cfg.evaluator.build(cfg.max_parallel)?;
            let mut engine = Engine::resume(cfg, &log, evaluator.as_ref())?.with_sink(sink);
            engine.run()?;
            finish(engine.state().log(), &log_path, csv)?;
        }
        Command::Pareto { log_file } => {
            let summary = read_summary(&log_path(&cli, log_file.as_deref())?)?;
            print!("{}", summary.render_pareto(csv));
        }
        Command::Report {
            log_file,
            seed_trial,
            seed_top1,
            seed_ops,
            band,
        } => {
            let summary = read_summary(&log_path(&cli, log_file.as_deref())?)?;
            let seed = match (seed_trial, seed_top1) {
                (Some(id), _) => summary.seed_from_trial(*id)?,
                (None, Some(top1)) => SeedRef {
                    label: "seed".into(),
                    ops: match seed_ops {
                        Some(s) => parse_ops(s)?,
                        None => network_cost(&reference::seed_arch())?.total_ops as f64,
                    },
                    top1: *top1,
                },
                (None, None) => bail!("missing seed reference: pass --seed-trial or --seed-top1"),
            };
            let rows = summary.delta_rows(&seed, *band)?;
            if csv {
                print!("{}", summary.scatter_csv());
                println!();
                print!("{}", report::render_delta_csv(&rows));
            } else {
                print!("{}", report::render_delta_text(&rows));
                println!("(* within {band} points of the seed accuracy)");
                println!();
                println!("scatter:");
                print!("{}", summary.scatter_csv());
            }
        }
        Command::Conventions { top } => {
            let scores = search_conventions(&reference::reference_models());
            if csv {
                println!("rank,padding,input_h,input_w,unit1_sh,unit1_sw,unit2_sh,unit2_sw,mean_abs_log_error,spearman,inversions");
                for (i, s) in scores.iter().take(*top).enumerate() {
                    let c = &s.convention;
                    println!(
                        "{},{:?},{},{},{},{},{},{},{:.6},{:.6},{}",
                        i + 1,
                        c.padding,
                        c.input_hw.0,
                        c.input_hw.1,
                        c.unit1_stride.0,
                        c.unit1_stride.1,
                        c.unit2_stride.0,
                        c.unit2_stride.1,
                        s.mean_abs_log_error,
                        s.spearman,
                        s.adjacent_inversions
                    );
                }
            } else {
                print!("{}", render_report(&scores, *top));
            }
        }
        Command::Space {
            arch,
            kernel_upper,
            m_step,
        } => {
            let arch = read_arch(arch)?;
            let policy = BoundsPolicy {
                later_kernel_upper: Some(*kernel_upper),
                m_step: *m_step,
            };
            println!("{}", derive_space(&arch, &policy)?.to_json());
        }
    }
    Ok(())
}

fn finish(log: &TrialLog, path: &Path, csv: bool) -> Result<()> {
    let summary = LogSummary::from_log(log)?;
    if !csv {
        println!(
            "{} trials logged to {}; frontier of {}:",
            summary.trials.len(),
            path.display(),
            summary.frontier.len()
        );
    }
    print!("{}", summary.render_pareto(csv));
    Ok(())
}

fn log_path(cli: &Cli, positional: Option<&Path>) -> Result<PathBuf> {
    positional
        .map(Path::to_path_buf)
        .or_else(|| cli.log.clone())
        .ok_or_else(|| anyhow!("no trial log given: pass a path or --log"))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn read_summary(path: &Path) -> Result<LogSummary> {
    let log = TrialLog::read(path)?;
    LogSummary::from_log(&log).with_context(|| path.display().to_string())
}

/// Reads a network file, or the seed network of a search-space file.
fn read_arch(path: &Path) -> Result<NetworkArch> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| anyhow!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))?;
    let arch = if value.get("domains").is_some() {
        SearchSpace::from_json(&text)
            .map_err(|e| anyhow!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))?
            .seed()
            .clone()
    } else {
        NetworkArch::from_json(&text)
            .map_err(|e| anyhow!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))?
    };
    arch.validate()
        .with_context(|| format!("{}: invalid network", path.display()))?;
    Ok(arch)
}

fn parse_ops(text: &str) -> Result<f64> {
    let t = text.trim();
    let (number, scale) = match t.chars().last() {
        Some('K' | 'k') => (&t[..t.len() - 1], 1e3),
        Some('M' | 'm') => (&t[..t.len() - 1], 1e6),
        Some('G' | 'g') => (&t[..t.len() - 1], 1e9),
        _ => (t, 1.0),
    };
    let value: f64 = number
        .parse()
        .with_context(|| format!("invalid op count {text:?}"))?;
    Ok(value * scale)
}
