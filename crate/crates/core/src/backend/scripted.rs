use std::collections::VecDeque;
use std::sync::Mutex;

use super::{BackendError, BackendKind, ChatBackend, ChatRequest, ChatResult};
use crate::simulation::{Transcript, EXIT_TOKEN};

/// Replays a fixed queue of results in order, ignoring the request.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<ChatResult>>,
    served: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_results(texts.into_iter().map(ChatResult::text_only))
    }

    pub fn from_results(results: impl IntoIterator<Item = ChatResult>) -> Self {
        Self {
            queue: Mutex::new(results.into_iter().collect()),
            served: Mutex::new(0),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap_or_else(|e| e.into_inner()).len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResult, BackendError> {
        req.validate()?;
        let mut served = self.served.lock().unwrap_or_else(|e| e.into_inner());
        let next = self
            .queue
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .pop_front();
        match next {
            Some(r) => {
                *served += 1;
                Ok(r)
            }
            None => Err(BackendError::ScriptExhausted(*served)),
        }
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Npc,
    Player,
}

/// A backend that replays one side of a recorded dialogue.
///
/// The NPC side yields every raw output, rejected attempts included, with
/// the recorded usage. The player side yields the utterances after the
/// opening one, then the exit token.
pub fn scripted_from_transcript(transcript: &Transcript, side: Side) -> ScriptedBackend {
    match side {
        Side::Npc => ScriptedBackend::from_results(transcript.turns.iter().flat_map(|t| {
            t.rejected
                .iter()
                .map(|a| a.to_result())
                .chain(std::iter::once(t.npc_result()))
                .collect::<Vec<_>>()
        })),
        Side::Player => {
            if transcript.turns.is_empty() {
                return ScriptedBackend::default();
            }
            let mut lines: Vec<String> = transcript
                .turns
                .iter()
                .skip(1)
                .map(|t| t.player_utterance.clone())
                .collect();
            lines.push(EXIT_TOKEN.to_string());
            ScriptedBackend::new(lines)
        }
    }
}
