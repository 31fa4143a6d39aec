//! Dialogue-flow control for LLM-driven merchant NPCs: state machine,
//! prompt composition, response parsing, price post-processing, scripted
//! and live backends, the simulation driver and the evaluation metrics.

pub mod backend;
pub mod config;
pub mod game_world;
pub mod metrics;
pub mod ppp;
pub mod prompt;
pub mod response;
pub mod simulation;
pub mod state_machine;
pub mod validate;
