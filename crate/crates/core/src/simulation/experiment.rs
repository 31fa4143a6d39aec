//! The (variant × seed) grid runner.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::player::VirtualPlayer;
use super::scenario::{sample_scenario, ScenarioKind, ScenarioSpec};
use super::session::{run_dialogue_with, DialogueLimits, Engine};
use super::transcript::{Termination, Transcript, TranscriptWriter};
use crate::backend::{BackendError, ChatBackend};
use crate::prompt::{PromptVariant, VariantId};

/// Identifies one dialogue of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DialogueKey {
    pub variant: VariantId,
    pub kind: ScenarioKind,
    pub seed: u64,
}

impl DialogueKey {
    /// `<variant>/<scenario>/<seed>.jsonl`
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from(self.variant.as_str())
            .join(self.kind.dir_name())
            .join(format!("{}.jsonl", self.seed))
    }

    pub fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join(self.relative_path())
    }
}

impl std::fmt::Display for DialogueKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.variant, self.kind.dir_name(), self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub kind: ScenarioKind,
    pub variants: Vec<PromptVariant>,
    pub seeds: Vec<u64>,
    pub outdir: PathBuf,
    /// Skip dialogues whose transcript file already exists.
    pub resume: bool,
    /// Dialogues run concurrently.
    pub max_in_flight: usize,
    pub limits: DialogueLimits,
    pub purposes: Vec<String>,
}

impl ExperimentPlan {
    pub fn keys(&self) -> Vec<DialogueKey> {
        self.variants
            .iter()
            .flat_map(|v| {
                self.seeds.iter().map(move |&seed| DialogueKey {
                    variant: v.id,
                    kind: self.kind,
                    seed,
                })
            })
            .collect()
    }
}

pub type NpcFactory<'f> = dyn Fn(&DialogueKey) -> Result<Box<dyn ChatBackend + 'f>, BackendError> + Sync + 'f;
pub type PlayerFactory<'f> =
    dyn Fn(&DialogueKey, &ScenarioSpec) -> Result<Box<dyn VirtualPlayer + 'f>, BackendError> + Sync + 'f;

#[derive(Debug, Default)]
pub struct ExperimentReport {
    pub transcripts: Vec<(DialogueKey, Transcript)>,
    pub skipped: Vec<DialogueKey>,
    /// Dialogues that could not start, ended in an error, or were not saved.
    pub failures: Vec<(DialogueKey, String)>,
}

enum Outcome {
    Done(Box<Transcript>, Option<String>),
    Skipped,
    Failed(String),
}

/// Runs every dialogue of the plan, writing each transcript as it goes.
/// Failures are isolated per dialogue and collected in the report.
pub fn run_experiment(
    engine: Engine<'_>,
    plan: &ExperimentPlan,
    npc: &NpcFactory<'_>,
    player: &PlayerFactory<'_>,
) -> ExperimentReport {
    let keys = plan.keys();
    let variants: std::collections::BTreeMap<VariantId, &PromptVariant> =
        plan.variants.iter().map(|v| (v.id, v)).collect();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(keys.len()));
    let workers = plan.max_in_flight.clamp(1, keys.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(key) = keys.get(i) else { break };
                let outcome = run_one(engine, plan, variants[&key.variant], *key, npc, player);
                results.lock().unwrap_or_else(|e| e.into_inner()).push((*key, outcome));
            });
        }
    });

    let mut results = results.into_inner().unwrap_or_else(|e| e.into_inner());
    results.sort_by_key(|(k, _)| *k);
    let mut report = ExperimentReport::default();
    for (key, outcome) in results {
        match outcome {
            Outcome::Done(t, problem) => {
                if let Some(p) = problem {
                    report.failures.push((key, p));
                }
                report.transcripts.push((key, *t));
            }
            Outcome::Skipped => report.skipped.push(key),
            Outcome::Failed(e) => report.failures.push((key, e)),
        }
    }
    report
}

fn run_one(
    engine: Engine<'_>,
    plan: &ExperimentPlan,
    variant: &PromptVariant,
    key: DialogueKey,
    npc: &NpcFactory<'_>,
    player: &PlayerFactory<'_>,
) -> Outcome {
    let path = key.path_in(&plan.outdir);
    if plan.resume && path.exists() {
        tracing::debug!(%key, "transcript exists, skipping");
        return Outcome::Skipped;
    }
    let spec = match sample_scenario(key.kind, key.seed, engine.world, &plan.purposes) {
        Ok(s) => s,
        Err(e) => return Outcome::Failed(e.to_string()),
    };
    let npc = match npc(&key) {
        Ok(b) => b,
        Err(e) => return Outcome::Failed(format!("NPC backend: {e}")),
    };
    let mut player = match player(&key, &spec) {
        Ok(p) => p,
        Err(e) => return Outcome::Failed(format!("player: {e}")),
    };

    let header = Transcript {
        scenario: spec.clone(),
        variant: variant.clone(),
        model_id: engine.config.model_id.clone(),
        ppp: engine.config.ppp.clone(),
        first_index: 1,
        prior_state: None,
        turns: Vec::new(),
        terminated_by: Termination::Error,
        error: None,
    };
    let mut writer = match TranscriptWriter::create(&path, &header) {
        Ok(w) => w,
        Err(e) => return Outcome::Failed(e.to_string()),
    };
    let mut write_error = None;
    let t = run_dialogue_with(engine, &spec, variant, &npc, player.as_mut(), plan.limits, &mut |turn| {
        if write_error.is_none() {
            write_error = writer.append(turn).err();
        }
    });
    if let Some(e) = write_error {
        return Outcome::Failed(e.to_string());
    }
    if let Err(e) = writer.finish(t.terminated_by, t.error.as_deref()) {
        return Outcome::Failed(e.to_string());
    }
    tracing::info!(%key, turns = t.turns.len(), terminated_by = ?t.terminated_by, "dialogue finished");
    let problem = (t.terminated_by == Termination::Error)
        .then(|| t.error.clone().unwrap_or_else(|| "dialogue ended with an error".into()));
    Outcome::Done(Box::new(t), problem)
}
