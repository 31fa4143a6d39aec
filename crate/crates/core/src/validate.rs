//! Offline re-checking of recorded transcripts.

use serde::Serialize;

use crate::simulation::{evaluate_response, Finding, Transcript, Violation};
use crate::state_machine::{DialogueHistory, TransitionPolicy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TurnFinding {
    /// Exchange index of the turn.
    pub turn_index: u32,
    /// Position of the NPC line in the dialogue (player lines are odd).
    pub dialogue_turn: u32,
    pub code: Violation,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<TurnFinding>,
    pub turns_checked: u32,
    /// Turns skipped because no output was accepted for them.
    pub turns_skipped: u32,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn count(&self, code: Violation) -> usize {
        self.findings.iter().filter(|f| f.code == code).count()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for x in &self.findings {
            writeln!(
                f,
                "turn {} (exchange {}): {} - {}",
                x.dialogue_turn, x.turn_index, x.code, x.message
            )?;
        }
        write!(
            f,
            "{} violation(s) in {} checked turn(s)",
            self.findings.len(),
            self.turns_checked
        )
    }
}

/// Re-derives every turn from its raw model output: parsing, PPP,
/// transition validity, the commit guard, inference consistency and the
/// stated total. Stored verdicts in the transcript are not trusted.
pub fn validate_transcript(t: &Transcript, policy: &TransitionPolicy) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut history = DialogueHistory::with_prior_state(t.prior_state);
    for turn in &t.turns {
        if turn.error.is_some() {
            report.turns_skipped += 1;
            continue;
        }
        report.turns_checked += 1;
        let eval = evaluate_response(&turn.raw_npc_output, &t.variant, &t.ppp, policy, &history);
        for Finding { code, message } in &eval.findings {
            report.findings.push(TurnFinding {
                turn_index: turn.index,
                dialogue_turn: turn.dialogue_turn(),
                code: *code,
                message: message.clone(),
            });
        }
        let accepted = eval.post_ppp.map(|p| p.response).or(eval.parsed.response);
        if let Some(r) = accepted {
            history.push_player(turn.player_utterance.clone());
            history.push_npc(r);
        }
    }
    report
}
