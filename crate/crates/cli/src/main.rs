mod config;
mod report;
mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};

use config::RunConfig;
use report::{Provenance, ReportBundle};
use stages::Recorder;

/// Solenoid phases, field-mode checks and overlap decoherence for a
/// charge on a half circle.
#[derive(Debug, Parser)]
#[command(name = "abtroika", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (`key = value` lines, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out` in the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "ABTROIKA_JOBS")]
    jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Line-integral phases, the phase identity and the extra-phase ledger.
    Phases,
    /// Overlap exponent, visibility and the λ and β sweeps.
    Decoherence,
    /// Mode-space integrator, overlap identity and photon-number checks.
    Modes,
    /// Regulated point-charge exponent as the regulator shrinks.
    Divergence,
    /// Every stage.
    All,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Phases => "phases",
            Command::Decoherence => "decoherence",
            Command::Modes => "modes",
            Command::Divergence => "divergence",
            Command::All => "all",
        }
    }

    fn stages(self) -> &'static [&'static str] {
        match self {
            Command::All => &["phases", "decoherence", "modes", "divergence"],
            Command::Phases => &["phases"],
            Command::Decoherence => &["decoherence"],
            Command::Modes => &["modes"],
            Command::Divergence => &["divergence"],
        }
    }
}

enum Failure {
    Usage(anyhow::Error),
    Stage(&'static str, anyhow::Error),
}

fn setup(cli: &Cli) -> Result<(RunConfig, PathBuf), Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage(anyhow::anyhow!("missing --config <path>")))?;
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(Failure::Usage)?;
    let config = RunConfig::parse(&text)
        .with_context(|| format!("config {}", path.display()))
        .map_err(Failure::Usage)?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::Usage(anyhow::anyhow!("--jobs must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("thread pool")
            .map_err(Failure::Usage)?;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&config.out));
    fs::create_dir_all(&out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(Failure::Usage)?;
    Ok((config, out))
}

fn run(cli: &Cli) -> Result<ReportBundle, Failure> {
    let (config, out) = setup(cli)?;
    let mut bundle = ReportBundle::default();
    let mut seconds = BTreeMap::new();
    for &stage in cli.command.stages() {
        let start = Instant::now();
        let mut rec = Recorder {
            bundle: &mut bundle,
            config: &config,
            stage,
        };
        let result = match stage {
            "phases" => stages::phases(&mut rec).map_err(anyhow::Error::from),
            "decoherence" => stages::decoherence(&mut rec, &out),
            "modes" => stages::modes(&mut rec).map_err(anyhow::Error::from),
            _ => stages::divergence(&mut rec, &out),
        };
        result.map_err(|e| Failure::Stage(stage, e))?;
        seconds.insert(stage.to_string(), start.elapsed().as_secs_f64());
    }
    bundle.provenance = Some(Provenance {
        tool: "abtroika".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: cli.command.name().into(),
        config: config.echo(),
        stage_seconds: seconds,
    });
    let json = report::to_json(&bundle).map_err(|e| Failure::Stage("report", e.into()))?;
    fs::write(out.join("report.json"), json)
        .with_context(|| format!("cannot write report in {}", out.display()))
        .map_err(|e| Failure::Stage("report", e))?;
    Ok(bundle)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(bundle) => {
            for (name, c) in &bundle.checks {
                let verdict = match (c.enabled, c.pass) {
                    (false, _) => "skip",
                    (true, true) => "pass",
                    (true, false) => "FAIL",
                };
                println!("{verdict} {:<22} {:<12} {:.6e} (limit {:.3e})", name, c.stage, c.value, c.tolerance);
            }
            let failures = bundle.failures();
            if failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                for (name, c) in failures {
                    eprintln!("check {name} failed in stage {}", c.stage);
                }
                ExitCode::from(1)
            }
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(stage, e)) => {
            eprintln!("stage {stage} failed: {e:#}");
            ExitCode::from(1)
        }
    }
}
