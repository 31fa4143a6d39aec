use clap::Args;
use tradeflow::backend::{BackendError, ChatBackend, API_KEY_ENV};
use tradeflow::config::{BackendPool, PlayerKind, SeedSet};
use tradeflow::prompt::VariantId;
use tradeflow::simulation::{
    run_experiment, DialogueKey, Engine, LlmPlayer, PolicyPlayer, ScenarioSpec, VirtualPlayer,
};

use crate::{parse_seeds, parse_variants, Classify, EngineArgs, Failure, EXIT_BACKEND, EXIT_CONFIG};

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Prompt variants to run; repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    variant: Vec<VariantId>,
    /// Seeds, e.g. "0..299" (inclusive), "3,7" or "12".
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedSet>,
    /// Skip dialogues whose transcript already exists.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    max_turns: Option<u32>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Who plays the customer: policy or llm.
    #[arg(long)]
    player: Option<String>,
}

pub fn cmd_run(args: RunArgs) -> Result<u8, Failure> {
    let mut cfg = args.engine.load().or_exit(EXIT_CONFIG)?;
    if !args.variant.is_empty() {
        cfg.variants = parse_variants(&args.variant);
    }
    if let Some(s) = args.seeds {
        cfg.seeds = s;
    }
    cfg.resume |= args.resume;
    if let Some(n) = args.max_turns {
        cfg.max_turns = n;
    }
    if let Some(n) = args.max_in_flight {
        cfg.max_in_flight = n;
    }
    match args.player.as_deref() {
        None => {}
        Some("policy") => cfg.player.kind = PlayerKind::Policy,
        Some("llm") => cfg.player.kind = PlayerKind::Llm,
        Some(other) => {
            return Err(anyhow::anyhow!("player: unknown kind {other:?}; expected policy or llm")).or_exit(EXIT_CONFIG)
        }
    }
    cfg.validate().or_exit(EXIT_CONFIG)?;

    let world = cfg.load_world().or_exit(EXIT_CONFIG)?;
    let templates = cfg.load_templates().or_exit(EXIT_CONFIG)?;
    let session = cfg.session_config(cfg.load_policy().or_exit(EXIT_CONFIG)?);
    let key = std::env::var(API_KEY_ENV).ok();
    let npc_pool = BackendPool::new(&cfg.npc, "npc", &world, key.clone()).or_exit(EXIT_BACKEND)?;
    let player_pool = match cfg.player.kind {
        PlayerKind::Policy => None,
        PlayerKind::Llm => Some(BackendPool::new(&cfg.player.llm, "player", &world, key).or_exit(EXIT_BACKEND)?),
    };

    let engine = Engine {
        world: &world,
        persona: &cfg.persona,
        templates: &templates,
        config: &session,
    };
    let plan = cfg.plan();
    let npc = |k: &DialogueKey| -> Result<Box<dyn ChatBackend>, BackendError> { npc_pool.for_dialogue(k) };
    let player = |k: &DialogueKey, spec: &ScenarioSpec| -> Result<Box<dyn VirtualPlayer + '_>, BackendError> {
        match &player_pool {
            None => Ok(Box::new(PolicyPlayer::new(spec, &world))),
            Some(pool) => {
                let mut p = LlmPlayer::new(pool.for_dialogue(k)?, &templates, &cfg.persona, spec, &pool.spec().model_id);
                p.temperature = pool.spec().temperature;
                Ok(Box::new(p))
            }
        }
    };

    let total = plan.keys().len();
    eprintln!(
        "running {total} dialogue(s) into {} with {} in flight",
        plan.outdir.display(),
        plan.max_in_flight
    );
    let report = run_experiment(engine, &plan, &npc, &player);
    for (key, t) in &report.transcripts {
        println!("{key}: {} turn(s), {}", t.turns.len(), t.terminated_by);
    }
    for (key, e) in &report.failures {
        eprintln!("failed {key}: {e}");
    }
    println!(
        "{} written, {} skipped, {} failed",
        report.transcripts.len(),
        report.skipped.len(),
        report.failures.len()
    );
    Ok(if report.failures.is_empty() { 0 } else { EXIT_BACKEND })
}
