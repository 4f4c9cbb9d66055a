//! `auditor`: command-line driver for the systematic-error pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use auditor_core::evaluation::{aggregate_verdicts, read_verdicts};
use auditor_core::oracle::conformance::{self, Probe};
use auditor_core::oracle::ReplayServer;
use auditor_core::pipeline::{
    default_cache_dir, sweep, Pipeline, PipelineOptions, RunConfig, RunState, Stage, StageStatus,
    SCORES, VERDICTS,
};
use auditor_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Environment variable naming the review UI launcher.
const REVIEW_CMD_ENV: &str = "AUDITOR_REVIEW_CMD";

#[derive(Parser)]
#[command(name = "auditor", version, about = "Find systematic precision errors in segmentation predictions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage for a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a single stage in an existing run directory.
    Stage {
        /// extract, detect, embed, caption, score, evaluate or report.
        name: String,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Re-run the pipeline over a grid of minimum patch sizes and q.
    Sweep {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_delimiter = ',', default_value = "40,60,80")]
        min_sizes: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
        qs: Vec<usize>,
    },
    /// Score detections against ground truth and verdicts.
    Evaluate {
        #[arg(long)]
        run_dir: PathBuf,
        /// Manifest supplying ground-truth maps by image id.
        #[arg(long)]
        gt_manifest: Option<PathBuf>,
    },
    /// Human verdict files.
    Verdicts {
        #[command(subcommand)]
        command: VerdictsCommand,
    },
    /// Write report/report.json and report/index.html.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Launch the review UI for a scored run.
    Review {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Oracle protocol tools.
    Oracle {
        #[command(subcommand)]
        command: OracleCommand,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum VerdictsCommand {
    /// Majority-aggregate verdicts/<evaluator>.jsonl and print the result.
    Aggregate {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        panel: Vec<String>,
        /// Verdicts required before a patch is decided (default: panel size).
        #[arg(long)]
        quorum: Option<usize>,
    },
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Run the protocol conformance suite against a server.
    Check {
        #[arg(long)]
        endpoint: String,
        #[arg(long, default_value_t = 60)]
        timeout: u64,
    },
    /// Serve a fixture directory over the oracle protocol.
    ServeFixture {
        #[arg(long)]
        fixture_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8765)]
        port: u16,
    },
}

fn print_state(state: &RunState) {
    for (stage, rec) in &state.stages {
        let status = match rec.status {
            StageStatus::Done => "done",
            StageStatus::Failed => "failed",
            StageStatus::Pending => "pending",
        };
        println!("{stage:<9} {status:<7} {:>6} ms", rec.wall_ms);
        for n in &rec.notes {
            println!("          {n}");
        }
    }
}

fn options(run_dir: &Path) -> PipelineOptions {
    PipelineOptions {
        cache_dir: Some(default_cache_dir(run_dir)),
        ..Default::default()
    }
}

fn load_base(source: &Source) -> Result<RunConfig> {
    match (&source.config, &source.run_dir) {
        (Some(c), _) => RunConfig::load(c),
        (None, Some(d)) => {
            let path = d.join("config.json");
            if !path.exists() {
                return Err(Error::Config(format!("{} has no config.json", d.display())));
            }
            auditor_core::artifact::read_json(&path)
        }
        (None, None) => Err(Error::Config("give --config or --run-dir".into())),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let opts = options(&cfg.run_dir);
            let pipeline = Pipeline::open(cfg, opts)?;
            let state = pipeline.run_all()?;
            print_state(&state);
            println!("run directory: {}", pipeline.run_dir().display());
        }
        Command::Stage { name, run_dir } => {
            let stage: Stage = name.parse()?;
            let pipeline = Pipeline::resume(&run_dir, options(&run_dir))?;
            print_state(&pipeline.run_stage(stage)?);
        }
        Command::Sweep { source, min_sizes, qs } => {
            let base = load_base(&source)?;
            let cache = default_cache_dir(&base.run_dir);
            let summary = sweep(&base, &min_sizes, &qs, &cache, None)?;
            for e in &summary.entries {
                println!("min_size {:>3}  q {}  -> {}", e.min_patch_size, e.q, e.run_dir.display());
                print!("{}", e.metrics.precision_errors.to_csv());
            }
            println!("summary: {}", base.run_dir.join("sweep/summary.json").display());
        }
        Command::Evaluate { run_dir, gt_manifest } => {
            let opts = PipelineOptions {
                gt_manifest,
                ..options(&run_dir)
            };
            let pipeline = Pipeline::resume(&run_dir, opts)?;
            pipeline.run_stage(Stage::Evaluate)?;
            print!(
                "{}",
                std::fs::read_to_string(run_dir.join("eval/metrics.csv"))
                    .map_err(|e| Error::io(run_dir.join("eval/metrics.csv"), e))?
            );
        }
        Command::Verdicts {
            command: VerdictsCommand::Aggregate { run_dir, panel, quorum },
        } => {
            let records = read_verdicts(&run_dir.join(VERDICTS))?;
            let agg = aggregate_verdicts(&records, &panel, quorum)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&agg).expect("aggregate serializes")
            );
        }
        Command::Report { run_dir } => {
            let pipeline = Pipeline::resume(&run_dir, options(&run_dir))?;
            pipeline.run_stage(Stage::Report)?;
            println!("{}", run_dir.join("report/index.html").display());
        }
        Command::Review { run_dir, port } => review(&run_dir, port)?,
        Command::Oracle { command } => match command {
            OracleCommand::Check { endpoint, timeout } => {
                let report = conformance::check(&endpoint, &Probe::default(), timeout);
                for c in &report.checks {
                    let tag = if c.passed { "PASS" } else { "FAIL" };
                    println!("{tag} {:<26} {}", c.name, c.detail);
                }
                if !report.passed() {
                    return Err(Error::oracle(
                        "conformance",
                        auditor_core::oracle::OracleError::Protocol(format!(
                            "{endpoint} failed {} checks",
                            report.checks.iter().filter(|c| !c.passed).count()
                        )),
                    ));
                }
            }
            OracleCommand::ServeFixture { fixture_dir, host, port } => {
                let server = ReplayServer::start(&fixture_dir, &format!("{host}:{port}"))
                    .map_err(|e| Error::oracle("serve-fixture", e))?;
                println!("serving {} on {}", fixture_dir.display(), server.url());
                server.wait();
            }
        },
    }
    Ok(())
}

fn review(run_dir: &Path, port: u16) -> Result<()> {
    let state = RunState::load(run_dir)?;
    if !state.is_done(run_dir, Stage::Score) || !run_dir.join(SCORES).exists() {
        return Err(Error::StageDependencyMissing {
            stage: "review".into(),
            missing: "score".into(),
        });
    }
    let url = format!("http://127.0.0.1:{port}/");
    match std::env::var(REVIEW_CMD_ENV) {
        Ok(cmd) if !cmd.trim().is_empty() => {
            println!("starting review UI on {url}");
            let status = std::process::Command::new("sh")
                .arg("-c")
                .arg(&cmd)
                .env("AUDITOR_RUN_DIR", run_dir)
                .env("AUDITOR_REVIEW_PORT", port.to_string())
                .status()
                .map_err(|e| Error::Config(format!("cannot start {REVIEW_CMD_ENV}: {e}")))?;
            if !status.success() {
                return Err(Error::Config(format!("review UI exited with {status}")));
            }
        }
        _ => {
            println!("review UI is not bundled with this binary.");
            println!("start it with AUDITOR_RUN_DIR={} AUDITOR_REVIEW_PORT={port},", run_dir.display());
            println!("or set {REVIEW_CMD_ENV} to its launch command; it will be served at {url}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
