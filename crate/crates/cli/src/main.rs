//! `calib`: train synthetic policies, verify the optimality sweep, and
//! audit or score model-response logs.
//!
//! Log verbosity is read from `CALIB_LOG` (`error`, `warn`, `info`, `debug`).

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use calib_core::config::{parse_bins, parse_judge_mode, BinsSetting, ConfigError, RunConfig};
use calib_core::eval::{self, EvalError, EvalOptions, InputFormat, ParseRecord};
use calib_core::judge::JudgeConfig;
use calib_core::metrics::ReportOptions;
use calib_core::report::{self, ReportError};
use calib_core::reward::{clip_confidence, optimal_confidence, RewardSpec};
use calib_core::train::train_with_progress;
use calib_core::Execution;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

mod exit {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const VERIFICATION: u8 = 4;
    pub const DATA: u8 = 5;
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::new(exit::IO, e.to_string()),
            _ => Failure::new(exit::CONFIG, e.to_string()),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io { .. } => Failure::new(exit::IO, e.to_string()),
            ReportError::Metrics(_) => Failure::new(exit::OTHER, e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let code = match e {
            EvalError::Io(_) => exit::IO,
            EvalError::Malformed { .. } | EvalError::Judge { .. } => exit::DATA,
            EvalError::Metrics(_) => exit::OTHER,
        };
        Failure::new(code, e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "calib", version, about = "Confidence calibration experiments and log audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Brute-force check that the expected reward peaks at the clipped true probability.
    VerifyOptimality {
        #[arg(long, default_value_t = 101)]
        p_star_grid: usize,
        #[arg(long, default_value_t = 1001)]
        conf_grid: usize,
        /// Allowed deviation; defaults to one confidence-grid step.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Print only the summary line.
        #[arg(long)]
        quiet: bool,
    },
    /// Train a tabular policy in the synthetic world and write a run directory.
    Train {
        /// Flat TOML config; every key is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Parse, judge and score a JSONL response log.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "single", value_parser = parse_format)]
        format: InputFormat,
        /// `exact` or `f1`.
        #[arg(long, default_value = "f1")]
        judge: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// `auto`, `discrete` or a number of equal-width bins.
        #[arg(long, default_value = "auto")]
        bins: String,
        #[arg(long, default_value_t = 1000)]
        bootstrap_resamples: usize,
        /// Directory for report files; the report goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Parse a plain-text response log and print one JSON record per response.
    Parse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "single", value_parser = parse_format)]
        format: InputFormat,
    },
}

#[derive(Args)]
struct ExecArgs {
    /// Run on the calling thread only. Results are identical either way.
    #[arg(long)]
    sequential: bool,
}

impl ExecArgs {
    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

fn parse_format(s: &str) -> Result<InputFormat, String> {
    s.parse()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CALIB_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::VerifyOptimality {
            p_star_grid,
            conf_grid,
            tolerance,
            quiet,
        } => verify_optimality(p_star_grid, conf_grid, tolerance, quiet),
        Command::Train { config, seed, out, exec } => train(config, seed, out, exec.execution()),
        Command::Eval {
            input,
            format,
            judge,
            threshold,
            bins,
            bootstrap_resamples,
            out,
            exec,
        } => run_eval(EvalArgs {
            input,
            format,
            judge,
            threshold,
            bins,
            bootstrap_resamples,
            out,
            exec: exec.execution(),
        }),
        Command::Parse { input, format } => parse(input, format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn io_failure(what: &str, e: io::Error) -> Failure {
    Failure::new(exit::IO, format!("{what}: {e}"))
}

fn verify_optimality(p_star_grid: usize, conf_grid: usize, tolerance: Option<f64>, quiet: bool) -> Result<(), Failure> {
    if p_star_grid < 2 || conf_grid < 2 {
        return Err(Failure::new(exit::CONFIG, "both grids need at least 2 points"));
    }
    if tolerance.is_some_and(|t| !(t >= 0.0)) {
        return Err(Failure::new(exit::CONFIG, "tolerance must be non-negative"));
    }
    let started = Instant::now();
    let spec = RewardSpec::default();
    let step = 1.0 / (conf_grid - 1) as f64;
    let mut out = io::stdout().lock();
    let mut rows = String::new();
    let mut max_dev: f64 = 0.0;
    let mut worst = 0.0;
    for i in 0..p_star_grid {
        let p_star = i as f64 / (p_star_grid - 1) as f64;
        let other = |e: calib_core::reward::RewardError| Failure::new(exit::OTHER, e.to_string());
        let arg = optimal_confidence(p_star, conf_grid, &spec).map_err(other)?;
        let target = clip_confidence(p_star, &spec).map_err(other)?;
        let dev = (arg - target).abs();
        if dev > max_dev {
            max_dev = dev;
            worst = p_star;
        }
        if !quiet {
            rows.push_str(&format!("{p_star:.4}\t{arg:.6}\t{target:.6}\t{dev:.3e}\n"));
        }
    }
    // relative slack absorbs the rounding in i / (M - 1)
    let limit = tolerance.unwrap_or(step);
    let ok = max_dev <= limit * (1.0 + 1e-9);
    let elapsed = started.elapsed();
    if !quiet {
        let _ = write!(out, "p_star\targmax\tclipped\tdeviation\n{rows}");
    }
    let _ = writeln!(
        out,
        "max deviation {max_dev:e} at p*={worst:.4} (conf grid step {step:e}, tolerance {limit:e}): {}",
        if ok { "PASS" } else { "FAIL" }
    );
    info!("swept {p_star_grid} x {conf_grid} in {:.3}s", elapsed.as_secs_f64());
    if ok {
        Ok(())
    } else {
        Err(Failure::new(
            exit::VERIFICATION,
            format!("deviation {max_dev:.6e} exceeds tolerance {limit:.6e}"),
        ))
    }
}

fn train(config: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>, exec: Execution) -> Result<(), Failure> {
    let mut cfg = match &config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    cfg.out_dir = dir.display().to_string();
    let env = cfg.environment()?;
    let train_config = cfg.train_config()?;
    let mut opts = cfg.report_options();
    opts.exec = exec;

    info!(
        "training {} episodes, seed {}, output {}",
        train_config.ppo.total_episodes,
        cfg.seed,
        dir.display()
    );
    let started = Instant::now();
    let outcome = train_with_progress(env, train_config, exec, |w| {
        info!(
            "episodes {:>7}..{:<7} reward {:+.4} accuracy {:.3} entropy {:.3} eval_ece {}",
            w.episode_start,
            w.episode_end,
            w.mean_reward,
            w.accuracy,
            w.policy_entropy,
            w.eval_ece.map_or_else(|| "undefined".into(), |e| format!("{e:.4}"))
        )
    })
    .map_err(|e| Failure::new(exit::OTHER, e.to_string()))?;
    let rep = report::write_train_run(&dir, &cfg, &outcome, &opts)?;
    info!("finished in {:.1}s", started.elapsed().as_secs_f64());
    println!(
        "held-out ece {} auroc {} (oracle {}) out-of-format {:.4}; initial ece {}",
        fmt_opt(rep.heldout.ece),
        fmt_opt(rep.heldout.auroc),
        fmt_opt(rep.final_policy.oracle_auroc),
        rep.final_policy.out_of_format_rate,
        fmt_opt(rep.initial_policy.ece)
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

struct EvalArgs {
    input: PathBuf,
    format: InputFormat,
    judge: String,
    threshold: f64,
    bins: String,
    bootstrap_resamples: usize,
    out: Option<PathBuf>,
    exec: Execution,
}

fn run_eval(a: EvalArgs) -> Result<(), Failure> {
    let mut problems = Vec::new();
    let mode = parse_judge_mode(&a.judge).map_err(|e| problems.push(e)).ok();
    let binning = match parse_bins(&a.bins) {
        Ok(BinsSetting::Auto) => None,
        Ok(BinsSetting::Fixed(b)) => Some(b),
        Err(e) => {
            problems.push(e);
            None
        }
    };
    let judge = JudgeConfig {
        mode: mode.unwrap_or_default(),
        threshold: a.threshold,
        ..JudgeConfig::default()
    };
    if let Err(e) = judge.validate() {
        problems.push(format!("threshold: {e}"));
    }
    if !problems.is_empty() {
        return Err(Failure::new(exit::CONFIG, problems.join("; ")));
    }
    let mut opts = EvalOptions::new(a.format);
    opts.judge = judge;
    opts.report = ReportOptions {
        binning,
        bootstrap_resamples: a.bootstrap_resamples,
        exec: a.exec,
        ..ReportOptions::default()
    };

    let file = File::open(&a.input).map_err(|e| io_failure(&a.input.display().to_string(), e))?;
    let (rep, rows) = eval::evaluate_jsonl(BufReader::new(file), &opts)?;
    if rep.format_error_count > 0 {
        warn!(
            "{} of {} items are format errors and were excluded from the metrics",
            rep.format_error_count, rep.items
        );
    }
    match &a.out {
        Some(dir) => {
            report::write_eval_run(dir, &rep, &rows)?;
            println!(
                "{} facts, ece {} auroc {}, format errors {}/{}; wrote {}",
                rep.per_fact.n,
                fmt_opt(rep.per_fact.ece),
                fmt_opt(rep.per_fact.auroc),
                rep.format_error_count,
                rep.items,
                dir.display()
            );
        }
        None => print!("{}", report::to_json(&rep)),
    }
    Ok(())
}

fn parse(input: PathBuf, format: InputFormat) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&input).map_err(|e| io_failure(&input.display().to_string(), e))?;
    let records = eval::parse_log(&text, format);
    let mut out = io::stdout().lock();
    let mut errors = 0;
    for r in &records {
        if matches!(r, ParseRecord::FormatError { .. }) {
            errors += 1;
        }
        let line = serde_json::to_string(r).expect("parse records serialize");
        writeln!(out, "{line}").map_err(|e| io_failure("stdout", e))?;
    }
    info!("{} records, {} format errors", records.len(), errors);
    Ok(())
}
