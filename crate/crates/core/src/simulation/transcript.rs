//! Dialogue transcripts and their JSONL storage form.
//!
//! A file holds one `header` line, one `turn` line per NPC turn and, once
//! the dialogue has finished, one `end` line. Turn lines may omit the
//! derived fields (`parsed`, `post_ppp`, `state`, `violations`); the reader
//! recomputes them from `raw_npc_output`, which keeps hand-written fixtures
//! short.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scenario::ScenarioSpec;
use super::session::evaluate_response;
use crate::backend::{ChatResult, UNREPORTED};
use crate::ppp::{PppConfig, PppResult};
use crate::prompt::{PromptVariant, VariantId};
use crate::response::{Issue, NpcResponse, ParseOutcome};
use crate::state_machine::{default_policy, DialogueHistory, DialogueState, TransitionPolicy};

/// Reserved player output that ends the dialogue.
pub const EXIT_TOKEN: &str = "<EXIT>";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub completion_tokens: i64,
    pub thought_tokens: i64,
    pub latency_seconds: f64,
}

impl Default for Usage {
    fn default() -> Self {
        Self {
            completion_tokens: UNREPORTED,
            thought_tokens: UNREPORTED,
            latency_seconds: 0.0,
        }
    }
}

impl From<&ChatResult> for Usage {
    fn from(r: &ChatResult) -> Self {
        Self {
            completion_tokens: r.completion_tokens,
            thought_tokens: r.thought_tokens,
            latency_seconds: r.latency_seconds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Violation {
    InvalidEdge,
    CommitWithoutFinalCheck,
    InconsistentLastState,
    ParseFailure,
    PriceMismatch,
}

impl Violation {
    pub fn as_str(self) -> &'static str {
        match self {
            Violation::InvalidEdge => "INVALID_EDGE",
            Violation::CommitWithoutFinalCheck => "COMMIT_WITHOUT_FINAL_CHECK",
            Violation::InconsistentLastState => "INCONSISTENT_LAST_STATE",
            Violation::ParseFailure => "PARSE_FAILURE",
            Violation::PriceMismatch => "PRICE_MISMATCH",
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A model output that was not accepted: a parse failure that was retried,
/// or a non-compliant response rejected in enforce mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub raw_output: String,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub issues: Vec<Issue>,
}

impl Attempt {
    pub fn to_result(&self) -> ChatResult {
        usage_result(&self.raw_output, self.usage)
    }
}

fn usage_result(text: &str, u: Usage) -> ChatResult {
    ChatResult {
        text: text.to_string(),
        completion_tokens: u.completion_tokens,
        thought_tokens: u.thought_tokens,
        latency_seconds: u.latency_seconds,
        provider_meta: Default::default(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    /// Exchange number; the NPC line of exchange `i` is dialogue turn `2i`.
    pub index: u32,
    pub player_utterance: String,
    pub raw_npc_output: String,
    pub parsed: ParseOutcome,
    pub post_ppp: Option<PppResult>,
    /// Present iff the output parsed.
    pub state: Option<DialogueState>,
    pub usage: Usage,
    pub violations: Vec<Violation>,
    pub rejected: Vec<Attempt>,
    /// Set when the turn ended the dialogue with an error.
    pub error: Option<String>,
}

impl Turn {
    /// The response as it entered the history: post-PPP when PPP ran.
    pub fn final_response(&self) -> Option<&NpcResponse> {
        self.post_ppp
            .as_ref()
            .map(|p| &p.response)
            .or(self.parsed.response.as_ref())
    }

    /// The accepted model output with its recorded usage.
    pub fn npc_result(&self) -> ChatResult {
        usage_result(&self.raw_npc_output, self.usage)
    }

    pub fn dialogue_turn(&self) -> u32 {
        self.index * 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Termination {
    EndState,
    MaxTurns,
    PlayerExit,
    Error,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::EndState => "END_STATE",
            Termination::MaxTurns => "MAX_TURNS",
            Termination::PlayerExit => "PLAYER_EXIT",
            Termination::Error => "ERROR",
        }
    }
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub scenario: ScenarioSpec,
    pub variant: PromptVariant,
    pub model_id: String,
    pub ppp: PppConfig,
    /// Index of the first turn; above 1 only for excerpts.
    pub first_index: u32,
    /// State established before the first recorded turn (excerpts only).
    pub prior_state: Option<DialogueState>,
    pub turns: Vec<Turn>,
    pub terminated_by: Termination,
    pub error: Option<String>,
}

impl Transcript {
    /// NPC states in turn order, skipping turns that did not parse.
    pub fn states(&self) -> impl Iterator<Item = DialogueState> + '_ {
        self.turns.iter().filter_map(|t| t.state)
    }

    /// The history as it stood after the last turn.
    pub fn history(&self) -> DialogueHistory {
        let mut h = DialogueHistory::with_prior_state(self.prior_state);
        for t in &self.turns {
            if let Some(r) = t.final_response() {
                h.push_player(t.player_utterance.clone());
                h.push_npc(r.clone());
            }
        }
        h
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&line(&Line::Header(self.header())));
        for t in &self.turns {
            out.push_str(&line(&Line::Turn(TurnWire::from(t))));
        }
        out.push_str(&line(&Line::End {
            terminated_by: self.terminated_by,
            error: self.error.clone(),
        }));
        out
    }

    fn header(&self) -> Header {
        Header {
            scenario: self.scenario.clone(),
            variant: self.variant.id,
            model_id: self.model_id.clone(),
            ppp: self.ppp.clone(),
            first_index: self.first_index,
            prior_state: self.prior_state,
        }
    }
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Structure { line: usize, message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    scenario: ScenarioSpec,
    variant: VariantId,
    model_id: String,
    #[serde(default)]
    ppp: PppConfig,
    #[serde(default = "one")]
    first_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior_state: Option<DialogueState>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TurnWire {
    index: u32,
    player_utterance: String,
    raw_npc_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parsed: Option<ParseOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    post_ppp: Option<PppResult>,
    #[serde(default)]
    state: Option<DialogueState>,
    #[serde(default)]
    usage: Usage,
    #[serde(default)]
    violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    rejected: Vec<Attempt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl From<&Turn> for TurnWire {
    fn from(t: &Turn) -> Self {
        TurnWire {
            index: t.index,
            player_utterance: t.player_utterance.clone(),
            raw_npc_output: t.raw_npc_output.clone(),
            parsed: Some(t.parsed.clone()),
            post_ppp: t.post_ppp.clone(),
            state: t.state,
            usage: t.usage,
            violations: t.violations.clone(),
            rejected: t.rejected.clone(),
            error: t.error.clone(),
        }
    }
}

// Parsed once per line and dropped, so the size spread does not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(Header),
    Turn(TurnWire),
    End {
        terminated_by: Termination,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
}

fn line(l: &Line) -> String {
    let mut s = serde_json::to_string(l).expect("transcript lines serialize");
    s.push('\n');
    s
}

/// Parses a transcript, deriving omitted turn fields under the default
/// transition policy. A file without an `end` line (an interrupted run)
/// reads as terminated by `ERROR`.
pub fn parse_transcript(text: &str) -> Result<Transcript, TranscriptError> {
    parse_transcript_with(text, &default_policy())
}

pub fn parse_transcript_with(text: &str, policy: &TransitionPolicy) -> Result<Transcript, TranscriptError> {
    let mut header: Option<Header> = None;
    let mut wires: Vec<(usize, TurnWire)> = Vec::new();
    let mut end: Option<(Termination, Option<String>)> = None;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let structure = |message: &str| TranscriptError::Structure {
            line: lineno,
            message: message.to_string(),
        };
        let parsed: Line = serde_json::from_str(raw).map_err(|e| TranscriptError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if end.is_some() {
            return Err(structure("content after the end line"));
        }
        match parsed {
            Line::Header(h) => {
                if header.is_some() {
                    return Err(structure("second header line"));
                }
                header = Some(h);
            }
            Line::Turn(t) => {
                if header.is_none() {
                    return Err(structure("turn before header"));
                }
                wires.push((lineno, t));
            }
            Line::End { terminated_by, error } => {
                if header.is_none() {
                    return Err(structure("end before header"));
                }
                end = Some((terminated_by, error));
            }
        }
    }
    let header = header.ok_or(TranscriptError::Structure {
        line: 0,
        message: "missing header line".into(),
    })?;
    let variant = PromptVariant::of(header.variant);
    let mut history = DialogueHistory::with_prior_state(header.prior_state);
    let mut turns = Vec::with_capacity(wires.len());
    for (k, (lineno, w)) in wires.into_iter().enumerate() {
        let expected = header.first_index + k as u32;
        if w.index != expected {
            return Err(TranscriptError::Structure {
                line: lineno,
                message: format!("turn index {} where {expected} was expected", w.index),
            });
        }
        let turn = match w.parsed {
            Some(mut parsed) => Turn {
                parsed: {
                    parsed.raw_text = w.raw_npc_output.clone();
                    parsed
                },
                index: w.index,
                player_utterance: w.player_utterance,
                raw_npc_output: w.raw_npc_output,
                post_ppp: w.post_ppp,
                state: w.state,
                usage: w.usage,
                violations: w.violations,
                rejected: w.rejected,
                error: w.error,
            },
            None => {
                let eval = evaluate_response(&w.raw_npc_output, &variant, &header.ppp, policy, &history);
                Turn {
                    index: w.index,
                    player_utterance: w.player_utterance,
                    raw_npc_output: w.raw_npc_output,
                    state: eval.state,
                    violations: eval.violations(),
                    parsed: eval.parsed,
                    post_ppp: eval.post_ppp,
                    usage: w.usage,
                    rejected: w.rejected,
                    error: w.error,
                }
            }
        };
        if turn.error.is_none() {
            if let Some(r) = turn.final_response() {
                history.push_player(turn.player_utterance.clone());
                history.push_npc(r.clone());
            }
        }
        turns.push(turn);
    }
    let (terminated_by, error) = end.unwrap_or((Termination::Error, Some("transcript has no end line".into())));
    Ok(Transcript {
        scenario: header.scenario,
        variant,
        model_id: header.model_id,
        ppp: header.ppp,
        first_index: header.first_index,
        prior_state: header.prior_state,
        turns,
        terminated_by,
        error,
    })
}

pub fn read_transcript(path: impl AsRef<Path>) -> Result<Transcript, TranscriptError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TranscriptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_transcript(&text)
}

/// Writes a finished transcript atomically.
pub fn write_transcript(path: impl AsRef<Path>, t: &Transcript) -> Result<(), TranscriptError> {
    let mut w = TranscriptWriter::create(path, t)?;
    for turn in &t.turns {
        w.append(turn)?;
    }
    w.finish(t.terminated_by, t.error.as_deref())
}

/// Appends lines to `<path>.partial` as the dialogue progresses and renames
/// the file into place when it ends, so readers never see a half-written
/// transcript under the final name.
pub struct TranscriptWriter {
    path: PathBuf,
    partial: PathBuf,
    out: BufWriter<File>,
}

impl TranscriptWriter {
    /// Starts a file from the transcript's header fields; its turns are ignored.
    pub fn create(path: impl AsRef<Path>, t: &Transcript) -> Result<Self, TranscriptError> {
        let path = path.as_ref().to_path_buf();
        let partial = partial_path(&path);
        let io = |source| TranscriptError::Io {
            path: partial.clone(),
            source,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&partial)
            .map_err(io)?;
        let mut w = Self {
            path,
            partial,
            out: BufWriter::new(file),
        };
        w.write(&Line::Header(t.header()))?;
        Ok(w)
    }

    pub fn append(&mut self, turn: &Turn) -> Result<(), TranscriptError> {
        self.write(&Line::Turn(TurnWire::from(turn)))
    }

    pub fn finish(mut self, terminated_by: Termination, error: Option<&str>) -> Result<(), TranscriptError> {
        self.write(&Line::End {
            terminated_by,
            error: error.map(str::to_string),
        })?;
        let io = |source| TranscriptError::Io {
            path: self.path.clone(),
            source,
        };
        self.out.get_ref().sync_all().map_err(io)?;
        std::fs::rename(&self.partial, &self.path).map_err(io)
    }

    fn write(&mut self, l: &Line) -> Result<(), TranscriptError> {
        let io = |source| TranscriptError::Io {
            path: self.partial.clone(),
            source,
        };
        self.out.write_all(line(l).as_bytes()).map_err(io)?;
        self.out.flush().map_err(io)
    }
}

pub fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".partial");
    PathBuf::from(name)
}
