use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::Args;
use tradeflow::backend::API_KEY_ENV;
use tradeflow::config::BackendPool;
use tradeflow::ppp::verify_stated_total;
use tradeflow::prompt::{PromptVariant, VariantId};
use tradeflow::simulation::{Engine, ScenarioSpec, Session, Termination, Transcript, TranscriptWriter, Turn, Violation};
use tradeflow::state_machine::DialogueState;

use crate::{Classify, EngineArgs, Failure, EXIT_BACKEND, EXIT_CONFIG};

#[derive(Args, Debug)]
pub struct ChatArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Prompt variant for the merchant. Defaults to the first configured one.
    #[arg(long)]
    variant: Option<VariantId>,
    /// Transcript path. Defaults to `<outdir>/chat/<unix time>.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

const QUIT: &[&str] = &["/quit", "/exit"];
const FAREWELLS: &[&str] = &["bye", "goodbye", "farewell", "see you"];

pub fn cmd_chat(args: ChatArgs) -> Result<u8, Failure> {
    let cfg = args.engine.load().or_exit(EXIT_CONFIG)?;
    cfg.validate().or_exit(EXIT_CONFIG)?;
    let world = cfg.load_world().or_exit(EXIT_CONFIG)?;
    let templates = cfg.load_templates().or_exit(EXIT_CONFIG)?;
    let session_cfg = cfg.session_config(cfg.load_policy().or_exit(EXIT_CONFIG)?);
    let pool = BackendPool::new(&cfg.npc, "npc", &world, std::env::var(API_KEY_ENV).ok()).or_exit(EXIT_BACKEND)?;
    let npc = pool.with_cassette(None).or_exit(EXIT_BACKEND)?;
    let variant = PromptVariant::of(args.variant.unwrap_or(cfg.variants[0]));
    let engine = Engine {
        world: &world,
        persona: &cfg.persona,
        templates: &templates,
        config: &session_cfg,
    };
    let out = args.out.unwrap_or_else(|| {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        cfg.outdir.join("chat").join(format!("{secs}.jsonl"))
    });

    let mut session = Session::new(engine, variant.clone(), npc.as_ref());
    let mut writer: Option<TranscriptWriter> = None;
    let mut last_state: Option<DialogueState> = None;
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    println!(
        "Talking to {} ({}). Type /quit to leave.",
        cfg.persona.character_name, variant.id
    );

    loop {
        print!("you> ");
        stdout.flush().ok();
        let mut line = String::new();
        let read = stdin.lock().read_line(&mut line).context("reading stdin").or_exit(EXIT_CONFIG)?;
        let line = line.trim();
        if read == 0 || QUIT.contains(&line) {
            break;
        }
        if line.is_empty() {
            continue;
        }
        if last_state == Some(DialogueState::End) && is_farewell(line) {
            break;
        }
        if writer.is_none() {
            let header = Transcript {
                scenario: ScenarioSpec::opening(cfg.scenario.0, 0, line),
                variant: variant.clone(),
                model_id: session_cfg.model_id.clone(),
                ppp: session_cfg.ppp.clone(),
                first_index: 1,
                prior_state: None,
                turns: Vec::new(),
                terminated_by: Termination::PlayerExit,
                error: None,
            };
            writer = Some(TranscriptWriter::create(&out, &header).or_exit(EXIT_CONFIG)?);
        }
        let turn = session.run_turn(line);
        if let Some(w) = writer.as_mut() {
            w.append(&turn).or_exit(EXIT_CONFIG)?;
        }
        show(&turn, last_state, &session_cfg.ppp.currency_word);
        if turn.state.is_some() {
            last_state = turn.state;
        }
    }
    println!();

    match writer {
        Some(w) => {
            w.finish(Termination::PlayerExit, None).or_exit(EXIT_CONFIG)?;
            println!("saved {}", out.display());
        }
        None => println!("nothing to save"),
    }
    Ok(0)
}

fn is_farewell(line: &str) -> bool {
    let lower = line.to_lowercase();
    FAREWELLS.iter().any(|w| lower.contains(w))
}

fn show(turn: &Turn, prev: Option<DialogueState>, currency: &str) {
    if let Some(e) = &turn.error {
        println!("  [backend error: {e}]");
        return;
    }
    let Some(resp) = turn.final_response() else {
        println!("  [unparseable response]");
        println!("{}", turn.raw_npc_output);
        return;
    };
    println!("merchant> {}", resp.npc_dialogue);

    let state = turn.state.map_or("?", |s| s.as_str());
    let violations = if turn.violations.is_empty() {
        "none".to_string()
    } else {
        turn.violations.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(", ")
    };
    let mut status = format!("  [state={state} | violations: {violations}");
    if resp.items.as_ref().is_some_and(|i| !i.is_empty()) {
        match verify_stated_total(resp, currency) {
            Ok(c) => status.push_str(&format!(
                " | total: stated {}, items {}{}",
                c.stated,
                c.expected,
                if c.consistent { " ok" } else { " MISMATCH" }
            )),
            Err(e) => status.push_str(&format!(" | total: {e}")),
        }
    }
    status.push(']');
    println!("{status}");

    if turn.state == Some(DialogueState::CommitSale) {
        if turn.violations.contains(&Violation::CommitWithoutFinalCheck) {
            let from = prev.map_or("start", |s| s.as_str());
            println!("  guard: commit from {from} without FINAL_CHECK");
        } else if prev == Some(DialogueState::FinalCheck) {
            println!("  guard: passed (FINAL_CHECK -> COMMIT_SALE)");
        }
    }
}
