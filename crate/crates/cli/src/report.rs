use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use tradeflow::backend::{scripted_from_transcript, Side};
use tradeflow::game_world::GameWorld;
use tradeflow::metrics::{summarize_cell, write_summary_csv, CellSummary};
use tradeflow::prompt::{Persona, TemplateStore, VariantId};
use tradeflow::simulation::{
    read_transcript, run_dialogue, DialogueLimits, Engine, ScenarioKind, ScriptedPlayer, SessionConfig, Termination,
    Transcript, Violation, DEFAULT_MAX_TURNS, EXIT_TOKEN,
};
use tradeflow::state_machine::{default_policy, TransitionPolicy};
use tradeflow::validate::validate_transcript;

use crate::{Classify, Failure, EXIT_CONFIG, EXIT_VIOLATIONS};

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Directory searched recursively for transcript files.
    dir: PathBuf,
    /// Score only the first N commit dialogues (by seed) of each cell.
    #[arg(long)]
    normalized_n: Option<u64>,
    /// Where the CSVs go. Defaults to `<dir>/metrics`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    file: PathBuf,
    /// Transition policy (TOML) to check against instead of the default.
    #[arg(long)]
    policy: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    file: PathBuf,
    #[arg(long)]
    policy: Option<PathBuf>,
}

fn load_policy(path: Option<&Path>) -> anyhow::Result<TransitionPolicy> {
    match path {
        None => Ok(default_policy()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            Ok(TransitionPolicy::from_toml_str(&text).with_context(|| p.display().to_string())?)
        }
    }
}

fn collect_jsonl(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if e.file_type()?.is_dir() {
            collect_jsonl(&path, out)?;
        } else if path.extension().is_some_and(|x| x == "jsonl") {
            out.push(path);
        }
    }
    Ok(())
}

pub fn cmd_metrics(args: MetricsArgs) -> Result<u8, Failure> {
    let mut files = Vec::new();
    collect_jsonl(&args.dir, &mut files)
        .with_context(|| format!("cannot read {}", args.dir.display()))
        .or_exit(EXIT_CONFIG)?;

    let mut cells: BTreeMap<(VariantId, ScenarioKind), Vec<Transcript>> = BTreeMap::new();
    for f in &files {
        match read_transcript(f) {
            Ok(t) => cells.entry((t.variant.id, t.scenario.kind)).or_default().push(t),
            // Cassettes and other JSONL files may share the tree.
            Err(e) => tracing::warn!("skipping {}: {e}", f.display()),
        }
    }
    if cells.is_empty() {
        return Err(anyhow::anyhow!("no transcripts found under {}", args.dir.display())).or_exit(EXIT_CONFIG);
    }

    let mut summaries: Vec<CellSummary> = Vec::new();
    let mut pooled: BTreeMap<VariantId, Vec<Transcript>> = BTreeMap::new();
    for ((variant, kind), ts) in &cells {
        let s = summarize_cell(variant.as_str(), &kind.dir_name(), ts, args.normalized_n).or_exit(EXIT_CONFIG)?;
        summaries.push(s);
        pooled.entry(*variant).or_default().extend(ts.iter().cloned());
    }
    // A pooled row per variant when it spans more than one scenario.
    for (variant, ts) in &pooled {
        if cells.keys().filter(|(v, _)| v == variant).count() > 1 {
            summaries.push(summarize_cell(variant.as_str(), "all", ts, args.normalized_n).or_exit(EXIT_CONFIG)?);
        }
    }

    let out = args.out.unwrap_or_else(|| args.dir.join("metrics"));
    std::fs::create_dir_all(&out)
        .with_context(|| format!("cannot create {}", out.display()))
        .or_exit(EXIT_CONFIG)?;
    let summary_path = out.join("summary.csv");
    let f = File::create(&summary_path)
        .with_context(|| summary_path.display().to_string())
        .or_exit(EXIT_CONFIG)?;
    write_summary_csv(&summaries, BufWriter::new(f)).or_exit(EXIT_CONFIG)?;
    for s in &summaries {
        let path = out.join(format!("matrix_{}_{}.csv", s.variant, s.scenario));
        let f = File::create(&path).with_context(|| path.display().to_string()).or_exit(EXIT_CONFIG)?;
        s.matrix.write_csv(BufWriter::new(f)).or_exit(EXIT_CONFIG)?;
    }

    let pct = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.1}"));
    println!("{:<14} {:<10} {:>9} {:>16} {:>8} {:>8}", "variant", "scenario", "dialogues", "STCR", "OS", "Others");
    for s in &summaries {
        println!(
            "{:<14} {:<10} {:>9} {:>16} {:>8} {:>8}",
            s.variant,
            s.scenario,
            s.dialogues,
            format!("{} ({}/{})", pct(s.stcr.stcr_percent), s.stcr.compliant, s.stcr.normalized_n),
            pct(s.price.os.percent()),
            pct(s.price.others.percent()),
        );
    }
    println!("wrote {}", out.display());
    Ok(0)
}

pub fn cmd_validate(args: ValidateArgs) -> Result<u8, Failure> {
    let policy = load_policy(args.policy.as_deref()).or_exit(EXIT_CONFIG)?;
    let t = read_transcript(&args.file).or_exit(EXIT_CONFIG)?;
    let report = validate_transcript(&t, &policy);
    println!("{}", args.file.display());
    println!("{report}");
    Ok(if report.is_clean() { 0 } else { EXIT_VIOLATIONS })
}

/// Retry budgets large enough to consume every rejected attempt that was
/// recorded, and enforce mode when any rejection was not a parse failure.
fn replay_config(t: &Transcript, policy: TransitionPolicy) -> SessionConfig {
    let mut cfg = SessionConfig {
        policy,
        ppp: t.ppp.clone(),
        model_id: t.model_id.clone(),
        ..SessionConfig::default()
    };
    for turn in &t.turns {
        let n = turn.rejected.len() as u32;
        let enforced = turn
            .rejected
            .iter()
            .any(|a| a.violations.iter().any(|v| *v != Violation::ParseFailure));
        cfg.enforce |= enforced;
        cfg.parse_retries = cfg.parse_retries.max(n);
        cfg.enforce_retries = cfg.enforce_retries.max(n);
    }
    cfg
}

pub fn cmd_replay(args: ReplayArgs) -> Result<u8, Failure> {
    let policy = load_policy(args.policy.as_deref()).or_exit(EXIT_CONFIG)?;
    let recorded = read_transcript(&args.file).or_exit(EXIT_CONFIG)?;
    if recorded.first_index != 1 || recorded.prior_state.is_some() {
        return Err(anyhow::anyhow!("{} is an excerpt; only whole dialogues can be replayed", args.file.display()))
            .or_exit(EXIT_CONFIG);
    }
    let world = GameWorld::reference();
    let persona = Persona::default();
    let config = replay_config(&recorded, policy);
    let engine = Engine {
        world: &world,
        persona: &persona,
        templates: TemplateStore::builtin(),
        config: &config,
    };
    let npc = scripted_from_transcript(&recorded, Side::Npc);
    let lines = recorded.turns.iter().skip(1).map(|t| t.player_utterance.clone());
    let mut player = ScriptedPlayer::new(lines.chain([EXIT_TOKEN.to_string()]));
    let max_turns = match recorded.terminated_by {
        Termination::MaxTurns => recorded.turns.len() as u32,
        _ => DEFAULT_MAX_TURNS.max(recorded.turns.len() as u32 + 1),
    };
    let replayed = run_dialogue(
        engine,
        &recorded.scenario,
        &recorded.variant,
        &npc,
        &mut player,
        DialogueLimits { max_turns },
    );

    let diffs = compare(&recorded, &replayed);
    for d in &diffs {
        println!("{d}");
    }
    if diffs.is_empty() {
        println!("replay matches: {} turn(s), {}", replayed.turns.len(), replayed.terminated_by);
        Ok(0)
    } else {
        println!("{} difference(s)", diffs.len());
        Ok(EXIT_VIOLATIONS)
    }
}

fn compare(a: &Transcript, b: &Transcript) -> Vec<String> {
    let mut out = Vec::new();
    if a.turns.len() != b.turns.len() {
        out.push(format!("turn count: recorded {}, replayed {}", a.turns.len(), b.turns.len()));
    }
    if a.terminated_by != b.terminated_by {
        out.push(format!("termination: recorded {}, replayed {}", a.terminated_by, b.terminated_by));
    }
    for (x, y) in a.turns.iter().zip(&b.turns) {
        let at = |what: &str| format!("turn {}: {what} differs", x.dialogue_turn());
        if x.player_utterance != y.player_utterance {
            out.push(at("player utterance"));
        }
        if x.raw_npc_output != y.raw_npc_output {
            out.push(at("merchant output"));
        }
        if x.state != y.state {
            out.push(format!(
                "turn {}: state recorded {:?}, replayed {:?}",
                x.dialogue_turn(),
                x.state,
                y.state
            ));
        }
        if x.violations != y.violations {
            out.push(format!(
                "turn {}: violations recorded {:?}, replayed {:?}",
                x.dialogue_turn(),
                x.violations,
                y.violations
            ));
        }
        if x.post_ppp != y.post_ppp {
            out.push(at("post-processed response"));
        }
    }
    out
}
