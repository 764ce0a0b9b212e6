//! `fastcar` command-line tool.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use fastcar::harness::{self, Outcome, RunConfig};

#[derive(Parser)]
#[command(
    name = "fastcar",
    version,
    about = "Attention-gated MLP replay for autoregressive video decoding"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML); defaults apply to anything left out
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `out_dir`)
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    /// Root for relative output directories
    #[arg(long, env = "FASTCAR_OUT", global = true)]
    out_root: Option<PathBuf>,

    /// Override a config key, e.g. `--set model.d=32` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Fixed replay threshold (`inf` disables replay)
    #[arg(long, global = true, allow_hyphen_values = true)]
    tau: Option<f64>,

    /// Calibrate the threshold for this replay ratio
    #[arg(long, global = true)]
    target_ratio: Option<f64>,

    #[arg(long, value_enum, global = true)]
    mode: Option<Mode>,

    /// Sink size of the sparse attention mask (needs --local)
    #[arg(long, global = true, requires = "local")]
    sink: Option<usize>,

    /// Local window of the sparse attention mask
    #[arg(long, global = true)]
    local: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Consistent,
    Inconsistent,
}

#[derive(Subcommand)]
enum Command {
    /// Decode one video and write trace, scores, replay stats and FLOPs
    Generate,
    /// Search the threshold that hits `policy.target_ratio`
    Calibrate,
    /// Check core invariants and the similarity bounds
    Verify,
    /// Median per-module wall time
    Profile {
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Simulate batch scheduling from a scenario file or from decode runs
    Drs {
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Compare consistent and per-layer thresholds at a matched replay ratio
    Ablate,
    /// Print the effective config
    Config,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(t) = self.tau {
            o.push(format!("policy.tau={t:?}"));
        }
        if let Some(r) = self.target_ratio {
            o.push(format!("policy.target_ratio={r:?}"));
        }
        if let Some(m) = self.mode {
            let name = match m {
                Mode::Consistent => "consistent",
                Mode::Inconsistent => "inconsistent",
            };
            o.push(format!("policy.mode=\"{name}\""));
        }
        if let Some(l) = self.local {
            o.push(format!("mask.local={l}"));
            o.push(format!("mask.sink={}", self.sink.unwrap_or(0)));
        }
        if let Some(out) = &self.out {
            o.push(format!("out_dir={}", toml_string(&out.to_string_lossy())));
        }
        o.extend(self.sets.iter().cloned());
        o
    }
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn load(cli: &Cli, extra: &[String]) -> anyhow::Result<RunConfig> {
    let text = match &cli.common.config {
        Some(p) => {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => String::new(),
    };
    let mut overrides = cli.common.overrides();
    overrides.extend_from_slice(extra);
    let cfg = RunConfig::from_toml_with(&text, &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    let extra = match &cli.command {
        Command::Profile {
            repetitions: Some(r),
        } => vec![format!("profile.repetitions={r}")],
        Command::Drs { scenario: Some(p) } => vec![format!(
            "drs.scenario={}",
            toml_string(&p.to_string_lossy())
        )],
        _ => Vec::new(),
    };
    let cfg = load(cli, &extra)?;
    let out = harness::resolve_out_dir(&cfg, cli.common.out_root.as_deref());
    let outcome = match cli.command {
        Command::Generate => harness::cmd_generate(&cfg, &out)?,
        Command::Calibrate => harness::cmd_calibrate(&cfg, &out)?,
        Command::Verify => harness::cmd_verify(&cfg, &out)?,
        Command::Profile { .. } => harness::cmd_profile(&cfg, &out)?,
        Command::Drs { .. } => harness::cmd_drs(&cfg, &out)?,
        Command::Ablate => harness::cmd_ablate(&cfg, &out)?,
        Command::Config => {
            print!("{}", cfg.to_toml());
            return Ok(Outcome {
                passed: true,
                files: Vec::new(),
                summary: String::new(),
            });
        }
    };
    Ok(outcome)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(o) => {
            if !o.summary.is_empty() {
                println!("{}", o.summary);
            }
            for f in &o.files {
                log::debug!("wrote {}", f.display());
            }
            if o.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("checks failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
