//! `tradeflow`: run merchant dialogue experiments, score them, and check
//! recorded transcripts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tradeflow::config::{BackendChoice, ExperimentConfig, SeedSet};
use tradeflow::ppp::PppConfig;
use tradeflow::prompt::VariantId;
use tradeflow::simulation::ScenarioKind;

mod chat;
mod report;
mod run;

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  1  violations or replay differences found (validate, replay)
  2  configuration error or unreadable input
  3  backend error (missing API key, provider failure, dialogue that ended in an error)

The API key for the http backend is read from TRADEFLOW_API_KEY.";

#[derive(Parser)]
#[command(name = "tradeflow", version, about, after_help = EXIT_HELP)]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a (variant x seed) grid and write one transcript per dialogue.
    #[command(after_help = EXIT_HELP)]
    Run(run::RunArgs),
    /// Score a directory of transcripts and write summary and matrix CSVs.
    #[command(after_help = EXIT_HELP)]
    Metrics(report::MetricsArgs),
    /// Re-check every turn of a transcript; exits 1 on any violation.
    #[command(after_help = EXIT_HELP)]
    Validate(report::ValidateArgs),
    /// Re-run a transcript against its own recorded outputs and compare.
    #[command(after_help = EXIT_HELP)]
    Replay(report::ReplayArgs),
    /// Play the customer yourself against a configured merchant.
    #[command(after_help = EXIT_HELP)]
    Chat(chat::ChatArgs),
}

/// Settings shared by `run` and `chat`. Each flag overrides the config key
/// of the same name.
#[derive(Args, Debug, Clone, Default)]
pub struct EngineArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Merchant backend: rule (alias scripted), http or replay.
    #[arg(long)]
    pub backend: Option<BackendChoice>,
    #[arg(long)]
    pub model_id: Option<String>,
    /// Chat-completion URL for the http backend.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub cassette_dir: Option<PathBuf>,
    /// Record every merchant exchange to cassettes.
    #[arg(long)]
    pub record: bool,
    #[arg(long)]
    pub scenario: Option<ScenarioKind>,
    #[arg(long)]
    pub outdir: Option<PathBuf>,
    /// Reject non-compliant merchant responses and re-prompt.
    #[arg(long)]
    pub enforce: bool,
    /// Token the merchant writes in place of computed totals.
    #[arg(long)]
    pub placeholder: Option<String>,
    /// Turn off price post-processing for every variant.
    #[arg(long)]
    pub no_ppp: bool,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Transition policy (TOML).
    #[arg(long)]
    pub policy: Option<PathBuf>,
}

impl EngineArgs {
    pub fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(b) = self.backend {
            cfg.npc.backend = b;
        }
        if let Some(m) = &self.model_id {
            cfg.npc.model_id = m.clone();
        }
        if let Some(e) = &self.endpoint {
            cfg.npc.endpoint = Some(e.clone());
        }
        if let Some(d) = &self.cassette_dir {
            cfg.npc.cassette_dir = Some(d.clone());
        }
        cfg.npc.record |= self.record;
        if let Some(s) = self.scenario {
            cfg.scenario.0 = s;
        }
        if let Some(o) = &self.outdir {
            cfg.outdir = o.clone();
        }
        cfg.enforce |= self.enforce;
        if let Some(p) = &self.placeholder {
            let keep = cfg.ppp.clone();
            cfg.ppp = PppConfig::with_placeholder(p)?;
            cfg.ppp.enabled = keep.enabled;
            cfg.ppp.applicable_state = keep.applicable_state;
            cfg.ppp.fuzzy_repair = keep.fuzzy_repair;
            cfg.ppp.currency_word = keep.currency_word;
        }
        if self.no_ppp {
            cfg.ppp.enabled = false;
        }
        for (slot, v) in [
            (&mut cfg.world, &self.world),
            (&mut cfg.templates, &self.templates),
            (&mut cfg.policy, &self.policy),
        ] {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        Ok(cfg)
    }
}

/// A command failure tagged with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub const EXIT_VIOLATIONS: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;

pub trait Classify<T> {
    fn or_exit(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_exit(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

pub fn parse_variants(list: &[VariantId]) -> Vec<VariantId> {
    let mut out = Vec::new();
    for v in list {
        if !out.contains(v) {
            out.push(*v);
        }
    }
    out
}

pub fn parse_seeds(s: &str) -> Result<SeedSet, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();

    let outcome = match cli.command {
        Command::Run(a) => run::cmd_run(a),
        Command::Metrics(a) => report::cmd_metrics(a),
        Command::Validate(a) => report::cmd_validate(a),
        Command::Replay(a) => report::cmd_replay(a),
        Command::Chat(a) => chat::cmd_chat(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
