use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use featbank::simstream::write_trace;
use featbank::{validate_config, Strategy, StrategyConfig};
use featbank_bench::report::{write_json, write_rows_csv, write_summary_csv};
use featbank_bench::runner::write_sweep_csv;
use featbank_bench::{load_input, load_scenario, run_jobs, sweep_table, thread_cap, BenchError, Input, Job, RunOptions};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "featbank", version, about = "Run memory bank write strategies over feature streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scenario into a trace file.
    Gen {
        /// Scenario file or bundled name (static, drift, deform, occlude, late-object).
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: String,
    },
    /// Run one strategy and report per-frame rows.
    Run(RunArgs),
    /// Run one strategy at several capacities.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated capacities in frames, at least two.
        #[arg(long, value_delimiter = ',', required = true)]
        capacities: Vec<usize>,
    },
    /// Run several strategies side by side.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated strategies, at least two.
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<Strategy>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Trace file to read.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    input: Option<String>,
    /// Scenario file or bundled name, generated in memory.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, default_value = "adaptive-lfu")]
    strategy: Strategy,
    #[arg(long, default_value_t = 2)]
    capacity_frames: usize,
    #[arg(long, default_value_t = 5)]
    write_interval: usize,
    #[arg(long, default_value_t = 50)]
    topk: usize,
    #[arg(long)]
    pin_first: bool,
    /// Scenario seed (first of `--seeds`) and strategy RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive scenario seeds to run.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Top-k of the in-frame value encoder; 0 disables it.
    #[arg(long, default_value_t = 50)]
    encoder_topk: usize,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Format {
    Csv,
    Json,
}

impl RunArgs {
    fn input(&self) -> Input {
        match (&self.input, &self.scenario) {
            (Some(path), _) => Input::Trace(path.clone()),
            (None, Some(name)) => Input::Scenario(name.clone()),
            (None, None) => unreachable!("clap requires one input"),
        }
    }

    fn config(&self, strategy: Strategy, capacity_frames: usize) -> Result<StrategyConfig, BenchError> {
        let cfg = StrategyConfig {
            strategy,
            capacity_frames,
            write_interval: self.write_interval,
            top_k: self.topk,
            pin_first_frame: self.pin_first,
            rng_seed: self.seed.unwrap_or(0),
            ..StrategyConfig::default()
        };
        validate_config(&cfg).map_err(|e| BenchError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            encoder_topk: self.encoder_topk,
        }
    }
}

fn emit(out: &Option<String>, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), BenchError> {
    let path = out.clone().unwrap_or_else(|| "<stdout>".into());
    let wrap = |source| BenchError::Output { path: path.clone(), source };
    match out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(wrap)?);
            body(&mut w).and_then(|_| w.flush()).map_err(wrap)
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            body(&mut lock).and_then(|_| lock.flush()).map_err(wrap)
        }
    }
}

fn io_err<E: Into<Box<dyn std::error::Error + Send + Sync>>>(e: E) -> io::Error {
    io::Error::other(e)
}

#[derive(Serialize)]
struct SweepJson<'a> {
    table: &'a [featbank_bench::SweepRow],
    reports: &'a [featbank_bench::RunReport],
}

fn execute(command: Command) -> Result<(), BenchError> {
    match command {
        Command::Gen { scenario, seed, out } => {
            let mut s = load_scenario(&scenario)?;
            if let Some(seed) = seed {
                s.rng_seed = seed;
            }
            let seq = featbank::simstream::generate::<f32>(&s)?;
            write_trace(&seq, &out).map_err(|source| BenchError::Trace { path: out.clone(), source })?;
            println!("wrote {out}: {} frames of {}x{}x{}", seq.len(), s.height, s.width, s.c_key);
            Ok(())
        }
        Command::Run(args) => {
            let inputs = load_input(&args.input(), args.seed, args.seeds)?;
            let cfg = args.config(args.strategy, args.capacity_frames)?;
            let jobs: Vec<Job<f32>> = inputs
                .iter()
                .map(|(run, seq)| Job {
                    run: run.clone(),
                    seq,
                    cfg: cfg.clone(),
                })
                .collect();
            let reports = run_jobs(&jobs, args.options(), thread_cap())?;
            report_runs(&args, &reports)
        }
        Command::Compare { run: args, strategies } => {
            if strategies.len() < 2 {
                return Err(BenchError::Usage("compare needs at least two strategies".into()));
            }
            let inputs = load_input(&args.input(), args.seed, args.seeds)?;
            let mut jobs = Vec::new();
            for (run, seq) in &inputs {
                for &strategy in &strategies {
                    jobs.push(Job {
                        run: run.clone(),
                        seq,
                        cfg: args.config(strategy, args.capacity_frames)?,
                    });
                }
            }
            let reports = run_jobs(&jobs, args.options(), thread_cap())?;
            report_runs(&args, &reports)
        }
        Command::Sweep { run: args, capacities } => {
            if capacities.len() < 2 {
                return Err(BenchError::Usage("sweep needs at least two capacities".into()));
            }
            let inputs = load_input(&args.input(), args.seed, args.seeds)?;
            let mut jobs = Vec::new();
            let mut job_caps = Vec::new();
            for (run, seq) in &inputs {
                for &cap in &capacities {
                    jobs.push(Job {
                        run: format!("{run};capacity={cap}"),
                        seq,
                        cfg: args.config(args.strategy, cap)?,
                    });
                    job_caps.push(cap);
                }
            }
            let reports = run_jobs(&jobs, args.options(), thread_cap())?;
            let table = sweep_table(&job_caps, &reports);
            emit(&args.out, |w| match args.format {
                Format::Csv => write_sweep_csv(w, &table).map_err(io_err),
                Format::Json => write_json(
                    w,
                    &SweepJson {
                        table: &table,
                        reports: &reports,
                    },
                )
                .map_err(io_err),
            })
        }
    }
}

fn report_runs(args: &RunArgs, reports: &[featbank_bench::RunReport]) -> Result<(), BenchError> {
    emit(&args.out, |w| match args.format {
        Format::Csv => write_rows_csv(w, reports).map_err(io_err),
        Format::Json => write_json(w, reports).map_err(io_err),
    })?;
    if args.out.is_some() {
        emit(&None, |w| write_summary_csv(w, reports).map_err(io_err))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("featbank: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
