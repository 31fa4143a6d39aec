//! Automated dialogues between a virtual player and an NPC backend.

mod experiment;
mod player;
mod scenario;
mod session;
mod transcript;

pub use experiment::{run_experiment, DialogueKey, ExperimentPlan, ExperimentReport, NpcFactory, PlayerFactory};
pub use player::{player_goal, LlmPlayer, PlayerPolicy, PolicyPlayer, ScriptedPlayer, VirtualPlayer};
pub use scenario::{
    default_purposes, format_list, sample_scenario, ScenarioError, ScenarioKind, ScenarioSpec, ShoppingItem,
    UnknownScenario, DEFAULT_PURPOSES, MAX_LIST_ITEMS, MAX_QUANTITY,
};
pub use session::{
    evaluate_response, is_exit, is_priced, run_dialogue, run_dialogue_with, DialogueLimits, Engine, Evaluation,
    Finding, Session, SessionConfig, DEFAULT_MAX_TURNS,
};
pub use transcript::{
    parse_transcript, parse_transcript_with, partial_path, read_transcript, write_transcript, Attempt,
    Termination, Transcript, TranscriptError, TranscriptWriter, Turn, Usage, Violation, EXIT_TOKEN,
};
