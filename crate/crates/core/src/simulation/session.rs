//! The per-turn loop: prompt, call, parse, post-process, check, record.

use serde::{Deserialize, Serialize};

use super::player::VirtualPlayer;
use super::scenario::ScenarioSpec;
use super::transcript::{Attempt, Termination, Transcript, Turn, Usage, Violation, EXIT_TOKEN};
use crate::backend::{ChatBackend, ChatRequest};
use crate::game_world::GameWorld;
use crate::ppp::{apply_ppp, verify_stated_total, PppConfig, PppError, PppResult, TotalCheckError};
use crate::prompt::{Element, Persona, PromptContext, PromptVariant, TemplateStore, DEFAULT_HISTORY_CAP};
use crate::response::{check_inference_consistency, parse_response_with, ParseOptions, ParseOutcome};
use crate::state_machine::{
    default_policy, last_state, last_trade_state, DialogueHistory, DialogueState, TransitionPolicy,
};

pub const DEFAULT_MAX_TURNS: u32 = 30;

/// One detected problem with a response, with a human-readable detail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub code: Violation,
    pub message: String,
}

/// Everything derived from one raw model output.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub parsed: ParseOutcome,
    pub post_ppp: Option<PppResult>,
    pub state: Option<DialogueState>,
    pub findings: Vec<Finding>,
}

impl Evaluation {
    pub fn violations(&self) -> Vec<Violation> {
        self.findings.iter().map(|f| f.code).collect()
    }
}

/// Parses `raw`, applies PPP and checks it against the history it answers.
///
/// The history is not modified; the caller decides whether to accept.
pub fn evaluate_response(
    raw: &str,
    variant: &PromptVariant,
    ppp: &PppConfig,
    policy: &TransitionPolicy,
    history: &DialogueHistory,
) -> Evaluation {
    let mut ppp = ppp.clone();
    ppp.enabled &= variant.ppp_enabled;
    let parsed = parse_response_with(raw, &ParseOptions::new(variant, &ppp));
    let Some(resp) = parsed.response.clone() else {
        let message = parsed
            .fatal_issues()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        return Evaluation {
            parsed,
            post_ppp: None,
            state: None,
            findings: vec![Finding {
                code: Violation::ParseFailure,
                message,
            }],
        };
    };

    let state = resp.state();
    let mut findings = Vec::new();
    let from = last_state(history);
    if !policy.is_valid_transition(from, state) {
        let label = from.map_or("start", DialogueState::as_str);
        if state == DialogueState::CommitSale && policy.commit_guard() {
            findings.push(Finding {
                code: Violation::CommitWithoutFinalCheck,
                message: format!("COMMIT_SALE reached from {label}"),
            });
        } else {
            findings.push(Finding {
                code: Violation::InvalidEdge,
                message: format!("{label} -> {state} is not an allowed transition"),
            });
        }
    }
    if variant.has(Element::E4) && !check_inference_consistency(&resp, history) {
        let expected = last_trade_state(history).map_or("", DialogueState::as_str);
        findings.push(Finding {
            code: Violation::InconsistentLastState,
            message: format!(
                "reported last_trade_context {:?}, history says {expected:?}",
                resp.last_trade_context.as_deref().unwrap_or("<missing>")
            ),
        });
    }

    let post_ppp = match apply_ppp(resp, &ppp) {
        Ok(p) => Some(p),
        Err(e) => {
            if let PppError::PlaceholderInWrongState(_) = e {
                tracing::debug!(%e, "placeholder left in place");
            }
            None
        }
    };
    let checked = post_ppp
        .as_ref()
        .map(|p| &p.response)
        .or(parsed.response.as_ref())
        .expect("parsed response present");
    if is_priced(state) && checked.items.as_ref().is_some_and(|i| !i.is_empty()) {
        match verify_stated_total(checked, &ppp.currency_word) {
            Ok(c) if c.consistent => {}
            Ok(c) => findings.push(Finding {
                code: Violation::PriceMismatch,
                message: format!("stated {} but the items total {}", c.stated, c.expected),
            }),
            Err(TotalCheckError::NoStatedTotal { expected }) => findings.push(Finding {
                code: Violation::PriceMismatch,
                message: format!("no stated total; the items total {expected}"),
            }),
            Err(e) => findings.push(Finding {
                code: Violation::PriceMismatch,
                message: e.to_string(),
            }),
        }
    }

    Evaluation {
        parsed,
        post_ppp,
        state: Some(state),
        findings,
    }
}

/// States whose responses quote a total that can be checked.
pub fn is_priced(state: DialogueState) -> bool {
    matches!(
        state,
        DialogueState::OfferSell | DialogueState::Negotiate | DialogueState::FinalCheck | DialogueState::CommitSale
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub policy: TransitionPolicy,
    /// Placeholder settings; PPP runs only when the variant also enables it.
    pub ppp: PppConfig,
    pub model_id: String,
    pub temperature: f64,
    pub thinking_budget: u32,
    /// Same-prompt retries after an unparseable output.
    pub parse_retries: u32,
    /// Reject non-compliant responses and re-prompt instead of recording them.
    pub enforce: bool,
    /// Re-prompts per turn in enforce mode.
    pub enforce_retries: u32,
    pub history_cap: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            policy: default_policy(),
            ppp: PppConfig::default(),
            model_id: "scripted".to_string(),
            temperature: 0.7,
            thinking_budget: 0,
            parse_retries: 1,
            enforce: false,
            enforce_retries: 2,
            history_cap: DEFAULT_HISTORY_CAP,
        }
    }
}

/// Shared, read-only inputs for every dialogue of a run.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub world: &'a GameWorld,
    pub persona: &'a Persona,
    pub templates: &'a TemplateStore,
    pub config: &'a SessionConfig,
}

pub struct Session<'a> {
    engine: Engine<'a>,
    variant: PromptVariant,
    npc: &'a dyn ChatBackend,
    history: DialogueHistory,
    next_index: u32,
    seed: Option<u64>,
}

impl<'a> Session<'a> {
    pub fn new(engine: Engine<'a>, variant: PromptVariant, npc: &'a dyn ChatBackend) -> Self {
        Self {
            engine,
            variant,
            npc,
            history: DialogueHistory::new(),
            next_index: 1,
            seed: None,
        }
    }

    /// Passes the seed to providers that accept one.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn history(&self) -> &DialogueHistory {
        &self.history
    }

    pub fn variant(&self) -> &PromptVariant {
        &self.variant
    }

    pub fn prompt_for(&self, utterance: &str) -> String {
        let cfg = self.engine.config;
        let mut ctx = PromptContext::new(self.engine.persona, self.engine.world, &self.history)
            .with_utterance(utterance);
        ctx.history_cap = cfg.history_cap;
        ctx.placeholder = cfg.ppp.placeholder();
        self.engine.templates.build(&self.variant, &ctx)
    }

    /// Runs one exchange. Backend failures do not return early: they come
    /// back as a turn with `error` set and the history untouched.
    pub fn run_turn(&mut self, utterance: &str) -> Turn {
        let cfg = self.engine.config;
        let index = self.next_index;
        self.next_index += 1;
        let base_prompt = self.prompt_for(utterance);
        let mut prompt = base_prompt.clone();
        let mut rejected = Vec::new();
        let mut parse_left = cfg.parse_retries;
        let mut enforce_left = cfg.enforce_retries;

        loop {
            let mut req = ChatRequest::new(prompt.clone(), cfg.model_id.clone());
            req.temperature = cfg.temperature;
            req.thinking_budget = cfg.thinking_budget;
            req.seed_hint = self.seed;
            let result = match self.npc.complete(&req) {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(turn = index, error = %e, "NPC backend failed");
                    return failed_turn(index, utterance, rejected, e.to_string());
                }
            };
            let eval = evaluate_response(&result.text, &self.variant, &cfg.ppp, &cfg.policy, &self.history);
            let usage = Usage::from(&result);

            if eval.state.is_none() && parse_left > 0 {
                parse_left -= 1;
                rejected.push(attempt(&result.text, usage, &eval));
                continue;
            }
            if cfg.enforce && !eval.findings.is_empty() {
                rejected.push(attempt(&result.text, usage, &eval));
                if enforce_left == 0 {
                    return failed_turn(index, utterance, rejected, "no compliant response within the enforce budget".into());
                }
                enforce_left -= 1;
                prompt = format!(
                    "{base_prompt}\n\nYour previous response was rejected: {}. Respond again.",
                    eval.findings.iter().map(|f| f.message.as_str()).collect::<Vec<_>>().join("; ")
                );
                continue;
            }

            let turn = Turn {
                index,
                player_utterance: utterance.to_string(),
                raw_npc_output: result.text,
                violations: eval.violations(),
                state: eval.state,
                parsed: eval.parsed,
                post_ppp: eval.post_ppp,
                usage,
                rejected,
                error: None,
            };
            if let Some(r) = turn.final_response() {
                self.history.push_player(utterance);
                self.history.push_npc(r.clone());
            }
            return turn;
        }
    }
}

fn attempt(raw: &str, usage: Usage, eval: &Evaluation) -> Attempt {
    Attempt {
        raw_output: raw.to_string(),
        usage,
        violations: eval.violations(),
        issues: eval.parsed.issues.clone(),
    }
}

fn failed_turn(index: u32, utterance: &str, rejected: Vec<Attempt>, error: String) -> Turn {
    Turn {
        index,
        player_utterance: utterance.to_string(),
        raw_npc_output: String::new(),
        parsed: ParseOutcome {
            response: None,
            issues: Vec::new(),
            raw_text: String::new(),
        },
        post_ppp: None,
        state: None,
        usage: Usage::default(),
        violations: Vec::new(),
        rejected,
        error: Some(error),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DialogueLimits {
    /// Maximum number of NPC turns.
    pub max_turns: u32,
}

impl Default for DialogueLimits {
    fn default() -> Self {
        Self {
            max_turns: DEFAULT_MAX_TURNS,
        }
    }
}

/// Plays one dialogue to completion. Each finished turn is passed to
/// `on_turn` before the next one starts so callers can persist progress.
pub fn run_dialogue_with(
    engine: Engine<'_>,
    spec: &ScenarioSpec,
    variant: &PromptVariant,
    npc: &dyn ChatBackend,
    player: &mut dyn VirtualPlayer,
    limits: DialogueLimits,
    on_turn: &mut dyn FnMut(&Turn),
) -> Transcript {
    let mut session = Session::new(engine, variant.clone(), npc).with_seed(spec.seed);
    let mut transcript = Transcript {
        scenario: spec.clone(),
        variant: variant.clone(),
        model_id: engine.config.model_id.clone(),
        ppp: engine.config.ppp.clone(),
        first_index: 1,
        prior_state: None,
        turns: Vec::new(),
        terminated_by: Termination::MaxTurns,
        error: None,
    };
    let mut utterance = spec.initial_utterance();
    loop {
        let turn = session.run_turn(&utterance);
        on_turn(&turn);
        let error = turn.error.clone();
        let state = turn.state;
        transcript.turns.push(turn);
        if let Some(e) = error {
            transcript.terminated_by = Termination::Error;
            transcript.error = Some(e);
            break;
        }
        if state == Some(DialogueState::End) {
            transcript.terminated_by = Termination::EndState;
            break;
        }
        if transcript.turns.len() as u32 >= limits.max_turns {
            transcript.terminated_by = Termination::MaxTurns;
            break;
        }
        match player.next_utterance(session.history()) {
            Ok(u) if is_exit(&u) => {
                transcript.terminated_by = Termination::PlayerExit;
                break;
            }
            Ok(u) => utterance = u,
            Err(e) => {
                transcript.terminated_by = Termination::Error;
                transcript.error = Some(format!("player backend: {e}"));
                break;
            }
        }
    }
    transcript
}

pub fn run_dialogue(
    engine: Engine<'_>,
    spec: &ScenarioSpec,
    variant: &PromptVariant,
    npc: &dyn ChatBackend,
    player: &mut dyn VirtualPlayer,
    limits: DialogueLimits,
) -> Transcript {
    run_dialogue_with(engine, spec, variant, npc, player, limits, &mut |_| {})
}

pub fn is_exit(utterance: &str) -> bool {
    utterance.contains(EXIT_TOKEN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::game_world::CartLine;
    use crate::prompt::VariantId;
    use crate::response::NpcResponse;
    use crate::simulation::player::ScriptedPlayer;
    use crate::simulation::scenario::ScenarioKind;

    struct Fixture {
        world: GameWorld,
        persona: Persona,
        config: SessionConfig,
    }

    impl Fixture {
        fn new() -> Self {
            Self {
                world: GameWorld::reference(),
                persona: Persona::default(),
                config: SessionConfig::default(),
            }
        }

        fn engine(&self) -> Engine<'_> {
            Engine {
                world: &self.world,
                persona: &self.persona,
                templates: TemplateStore::builtin(),
                config: &self.config,
            }
        }
    }

    fn resp(state: DialogueState, dialogue: &str) -> NpcResponse {
        let mut r = NpcResponse::with_state(state, dialogue);
        if state.is_trade() && state != DialogueState::ShowItems {
            r.items = Some(vec![CartLine::new("trap_01", "Hunting Trap", 2, 75)]);
        }
        r
    }

    fn history_ending(state: DialogueState) -> DialogueHistory {
        let mut h = DialogueHistory::new();
        h.push_player("I'd like 2x Hunting Trap.");
        h.push_npc(resp(state, "That is 150 gold."));
        h
    }

    #[test]
    fn commit_after_final_check_is_clean() {
        let b1 = PromptVariant::of(VariantId::Baseline1);
        let h = history_ending(DialogueState::FinalCheck);
        let raw = resp(DialogueState::CommitSale, "Done, 150 gold it is.").to_json();
        let eval = evaluate_response(&raw, &b1, &PppConfig::default(), &default_policy(), &h);
        assert!(eval.findings.is_empty(), "{:?}", eval.findings);
    }

    #[test]
    fn commit_after_offer_is_flagged() {
        let b1 = PromptVariant::of(VariantId::Baseline1);
        let h = history_ending(DialogueState::OfferSell);
        let raw = resp(DialogueState::CommitSale, "Done, 150 gold it is.").to_json();
        let eval = evaluate_response(&raw, &b1, &PppConfig::default(), &default_policy(), &h);
        assert_eq!(eval.violations(), vec![Violation::CommitWithoutFinalCheck]);
    }

    #[test]
    fn wrong_total_is_flagged() {
        let b1 = PromptVariant::of(VariantId::Baseline1);
        let h = history_ending(DialogueState::OfferSell);
        let raw = resp(DialogueState::FinalCheck, "So that's 160 gold?").to_json();
        let eval = evaluate_response(&raw, &b1, &PppConfig::default(), &default_policy(), &h);
        assert_eq!(eval.violations(), vec![Violation::PriceMismatch]);
    }

    #[test]
    fn parse_failure_leaves_history_unchanged() {
        let f = Fixture {
            config: SessionConfig {
                parse_retries: 0,
                ..SessionConfig::default()
            },
            ..Fixture::new()
        };
        let npc = ScriptedBackend::new(["I am not JSON at all"]);
        let mut s = Session::new(f.engine(), PromptVariant::of(VariantId::Astp), &npc);
        let turn = s.run_turn("hello");
        assert_eq!(turn.violations, vec![Violation::ParseFailure]);
        assert_eq!(turn.state, None);
        assert!(s.history().is_empty());
    }

    #[test]
    fn parse_retry_resends_and_keeps_rejected_output() {
        let f = Fixture::new();
        let good = resp(DialogueState::Casual, "Welcome!").to_json();
        let npc = ScriptedBackend::new(["oops".to_string(), good]);
        let mut s = Session::new(f.engine(), PromptVariant::of(VariantId::Baseline1), &npc);
        let turn = s.run_turn("hello");
        assert_eq!(turn.state, Some(DialogueState::Casual));
        assert_eq!(turn.rejected.len(), 1);
        assert_eq!(turn.rejected[0].violations, vec![Violation::ParseFailure]);
    }

    #[test]
    fn placeholder_total_reaches_next_prompt() {
        let f = Fixture::new();
        let mut offer = resp(DialogueState::OfferSell, "Two traps, __PRICE__ gold in total.");
        offer.last_trade_context = Some(String::new());
        let npc = ScriptedBackend::new([offer.to_json()]);
        let mut s = Session::new(f.engine(), PromptVariant::of(VariantId::Astp), &npc);
        let turn = s.run_turn("I'd like 2x Hunting Trap.");
        assert!(turn.violations.is_empty(), "{:?}", turn.violations);
        let next = s.prompt_for("ok");
        assert!(next.contains("Two traps, 150 gold in total."));
        assert!(!next.contains("Two traps, __PRICE__"));
    }

    #[test]
    fn enforce_mode_rejects_and_reprompts() {
        let f = Fixture {
            config: SessionConfig {
                enforce: true,
                ..SessionConfig::default()
            },
            ..Fixture::new()
        };
        let b1 = PromptVariant::of(VariantId::Baseline1);
        let npc = ScriptedBackend::new([
            resp(DialogueState::OfferSell, "That is 150 gold.").to_json(),
            resp(DialogueState::CommitSale, "Sold for 150 gold.").to_json(),
            resp(DialogueState::FinalCheck, "So, 150 gold?").to_json(),
        ]);
        let mut s = Session::new(f.engine(), b1, &npc);
        s.run_turn("I'd like 2x Hunting Trap.");
        let turn = s.run_turn("Yes.");
        assert_eq!(turn.state, Some(DialogueState::FinalCheck));
        assert!(turn.violations.is_empty());
        assert_eq!(turn.rejected[0].violations, vec![Violation::CommitWithoutFinalCheck]);
    }

    #[test]
    fn max_turns_stops_after_one() {
        let f = Fixture::new();
        let npc = ScriptedBackend::new([resp(DialogueState::Casual, "Hi").to_json()]);
        let mut player = ScriptedPlayer::new(["unused"]);
        let spec = ScenarioSpec::opening(ScenarioKind::SpecificPurchase, 0, "hello");
        let t = run_dialogue(
            f.engine(),
            &spec,
            &PromptVariant::of(VariantId::Baseline1),
            &npc,
            &mut player,
            DialogueLimits { max_turns: 1 },
        );
        assert_eq!(t.turns.len(), 1);
        assert_eq!(t.terminated_by, Termination::MaxTurns);
    }

    #[test]
    fn backend_failure_ends_with_error() {
        let f = Fixture::new();
        let npc = ScriptedBackend::default();
        let mut player = ScriptedPlayer::new(Vec::<String>::new());
        let spec = ScenarioSpec::opening(ScenarioKind::SpecificPurchase, 0, "hello");
        let t = run_dialogue(
            f.engine(),
            &spec,
            &PromptVariant::of(VariantId::Baseline1),
            &npc,
            &mut player,
            DialogueLimits::default(),
        );
        assert_eq!(t.terminated_by, Termination::Error);
        assert!(t.turns[0].error.is_some());
    }
}
