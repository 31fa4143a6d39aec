//! The customer side of a simulated dialogue.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scenario::{format_list, ScenarioKind, ScenarioSpec};
use super::transcript::EXIT_TOKEN;
use crate::backend::{BackendError, ChatBackend, ChatRequest};
use crate::game_world::GameWorld;
use crate::prompt::{render_history, Persona, TemplateStore};
use crate::state_machine::{last_state, DialogueHistory, DialogueState};

pub trait VirtualPlayer {
    /// The next player line given the dialogue so far. Returning a line
    /// containing [`EXIT_TOKEN`] ends the dialogue.
    fn next_utterance(&mut self, history: &DialogueHistory) -> Result<String, BackendError>;
}

/// Behaviour switches for one simulated customer, drawn from the scenario
/// seed so the whole player policy is reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlayerPolicy {
    pub negotiate: bool,
    pub modify_cart: bool,
    pub buy: bool,
}

impl PlayerPolicy {
    pub const NEGOTIATE_P: f64 = 0.5;
    pub const MODIFY_P: f64 = 0.3;
    pub const BUY_P: f64 = 0.85;

    pub fn from_seed(seed: u64) -> Self {
        Self::draw(&mut player_rng(seed))
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            negotiate: rng.random_bool(Self::NEGOTIATE_P),
            modify_cart: rng.random_bool(Self::MODIFY_P),
            buy: rng.random_bool(Self::BUY_P),
        }
    }

    /// The policy phrased as instructions for an LLM player.
    pub fn guidelines(&self) -> String {
        let mut lines = vec!["- Ask the merchant about the items you are interested in.".to_string()];
        lines.push(if self.negotiate {
            "- Try to negotiate the price at least once before agreeing.".into()
        } else {
            "- Accept quoted prices without haggling.".into()
        });
        if self.modify_cart {
            lines.push("- Change your order once: drop an item or change a quantity.".into());
        }
        lines.push(if self.buy {
            "- Answer the merchant's confirmation questions affirmatively and complete the purchase.".into()
        } else {
            "- You are not obligated to buy; politely decline in the end.".into()
        });
        lines.push("- Say goodbye once the purchase is complete or you have decided not to buy.".into());
        lines.join("\n")
    }
}

fn player_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100);
    rng
}

pub fn player_goal(spec: &ScenarioSpec) -> String {
    match (spec.kind, &spec.shopping_list, &spec.purpose) {
        (ScenarioKind::SpecificPurchase, Some(list), _) => format!(
            "Your goal: buy {}. Some of these may not be for sale.",
            format_list(list)
        ),
        (_, _, Some(p)) => format!("Your goal: find and buy suitable equipment {p}."),
        _ => "Your goal: browse the shop and buy something useful.".to_string(),
    }
}

/// A rule-driven customer that follows its [`PlayerPolicy`].
pub struct PolicyPlayer<'a> {
    policy: PlayerPolicy,
    spec: ScenarioSpec,
    world: &'a GameWorld,
    rng: ChaCha8Rng,
    negotiated: bool,
    modified: bool,
    reasks: u32,
    turns: u32,
    said_goodbye: bool,
}

impl<'a> PolicyPlayer<'a> {
    const MAX_TURNS: u32 = 14;
    const MAX_REASKS: u32 = 2;

    pub fn new(spec: &ScenarioSpec, world: &'a GameWorld) -> Self {
        let mut rng = player_rng(spec.seed);
        let policy = PlayerPolicy::draw(&mut rng);
        Self {
            policy,
            spec: spec.clone(),
            world,
            rng,
            negotiated: false,
            modified: false,
            reasks: 0,
            turns: 0,
            said_goodbye: false,
        }
    }

    pub fn policy(&self) -> PlayerPolicy {
        self.policy
    }

    fn goodbye(&mut self, line: &str) -> String {
        self.said_goodbye = true;
        line.to_string()
    }

    fn reask(&mut self) -> String {
        if self.reasks >= Self::MAX_REASKS {
            return self.goodbye("Thanks anyway. Goodbye.");
        }
        self.reasks += 1;
        match (&self.spec.shopping_list, &self.spec.purpose) {
            (Some(list), _) if self.reasks == 1 => format!("I'm looking to buy {}.", format_list(list)),
            (_, Some(p)) if self.reasks == 1 => format!("Can you recommend something {p}?"),
            _ => "Do you have anything else?".to_string(),
        }
    }
}

impl VirtualPlayer for PolicyPlayer<'_> {
    fn next_utterance(&mut self, history: &DialogueHistory) -> Result<String, BackendError> {
        self.turns += 1;
        if self.said_goodbye {
            return Ok(EXIT_TOKEN.to_string());
        }
        if self.turns > Self::MAX_TURNS {
            return Ok(self.goodbye("I have to go now. Goodbye."));
        }
        let last = history.last_npc_response();
        let line = match last_state(history) {
            None => "Sorry, could you say that again?".to_string(),
            Some(DialogueState::End) => EXIT_TOKEN.to_string(),
            Some(DialogueState::CommitSale) => self.goodbye("Thank you! Goodbye."),
            Some(DialogueState::FinalCheck) if self.policy.buy => "Yes, let's do it.".to_string(),
            Some(DialogueState::FinalCheck) => self.goodbye("On second thought, no thanks. Goodbye."),
            Some(s @ (DialogueState::OfferSell | DialogueState::Negotiate)) => {
                let cart = last.and_then(|r| r.items.clone()).unwrap_or_default();
                if self.policy.modify_cart && !self.modified && !cart.is_empty() {
                    self.modified = true;
                    let line = &cart[cart.len() - 1];
                    if cart.len() > 1 {
                        format!("Actually, remove the {}.", line.item_name)
                    } else {
                        let q = if line.quantity >= 5 { line.quantity - 1 } else { line.quantity + 1 };
                        format!("Actually, make it {q}x {}.", line.item_name)
                    }
                } else if self.policy.negotiate && !self.negotiated && s == DialogueState::OfferSell {
                    self.negotiated = true;
                    "That's a bit too expensive. How about a discount?".to_string()
                } else if self.policy.buy {
                    "Alright, deal.".to_string()
                } else {
                    self.goodbye("No thanks, I'll pass. Goodbye.")
                }
            }
            Some(DialogueState::ShowItems) => {
                let text = last.map(|r| r.npc_dialogue.to_lowercase()).unwrap_or_default();
                let offered = self
                    .world
                    .sellable()
                    .iter()
                    .filter(|e| text.contains(&e.item.item_name.to_lowercase()))
                    .map(|e| e.item.item_name.clone())
                    .next();
                match offered {
                    Some(name) => {
                        let q: u32 = self.rng.random_range(1..=3);
                        format!("I'll take {q}x {name}.")
                    }
                    None => self.reask(),
                }
            }
            Some(DialogueState::Casual) => self.reask(),
        };
        Ok(line)
    }
}

/// A customer played by a chat model through the player template.
pub struct LlmPlayer<'a> {
    backend: Box<dyn ChatBackend + 'a>,
    templates: &'a TemplateStore,
    persona: &'a Persona,
    goal: String,
    guidelines: String,
    pub model_id: String,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl<'a> LlmPlayer<'a> {
    pub fn new(
        backend: impl ChatBackend + 'a,
        templates: &'a TemplateStore,
        persona: &'a Persona,
        spec: &ScenarioSpec,
        model_id: impl Into<String>,
    ) -> Self {
        Self {
            backend: Box::new(backend),
            templates,
            persona,
            goal: player_goal(spec),
            guidelines: PlayerPolicy::from_seed(spec.seed).guidelines(),
            model_id: model_id.into(),
            temperature: 0.7,
            seed: Some(spec.seed),
        }
    }

    pub fn prompt(&self, history: &DialogueHistory) -> String {
        self.templates
            .build_player(self.persona, &self.goal, &self.guidelines, &render_history(history))
    }
}

impl VirtualPlayer for LlmPlayer<'_> {
    fn next_utterance(&mut self, history: &DialogueHistory) -> Result<String, BackendError> {
        let mut req = ChatRequest::new(self.prompt(history), self.model_id.clone());
        req.temperature = self.temperature;
        req.seed_hint = self.seed;
        let out = self.backend.complete(&req)?;
        let text = out.text.trim();
        let text = text.strip_prefix("Player:").unwrap_or(text).trim();
        Ok(text.to_string())
    }
}

/// Replays fixed lines, then reports exhaustion.
#[derive(Debug, Default)]
pub struct ScriptedPlayer {
    lines: VecDeque<String>,
    served: usize,
}

impl ScriptedPlayer {
    pub fn new<I, S>(lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            lines: lines.into_iter().map(Into::into).collect(),
            served: 0,
        }
    }
}

impl VirtualPlayer for ScriptedPlayer {
    fn next_utterance(&mut self, _history: &DialogueHistory) -> Result<String, BackendError> {
        let line = self.lines.pop_front().ok_or(BackendError::ScriptExhausted(self.served))?;
        self.served += 1;
        Ok(line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{RuleMerchant, ScriptedBackend};
    use crate::prompt::{PromptVariant, VariantId};
    use crate::simulation::scenario::{default_purposes, sample_scenario};
    use crate::simulation::session::{run_dialogue, DialogueLimits, Engine, SessionConfig};
    use crate::simulation::Termination;

    #[test]
    fn policy_is_seeded() {
        assert_eq!(PlayerPolicy::from_seed(9), PlayerPolicy::from_seed(9));
        let w = GameWorld::reference();
        let spec = sample_scenario(ScenarioKind::SpecificPurchase, 9, &w, &[]).unwrap();
        assert_eq!(PolicyPlayer::new(&spec, &w).policy(), PlayerPolicy::from_seed(9));
    }

    #[test]
    fn policies_vary_across_seeds() {
        let all: Vec<_> = (0..50).map(PlayerPolicy::from_seed).collect();
        assert!(all.iter().any(|p| p.negotiate) && all.iter().any(|p| !p.negotiate));
        assert!(all.iter().any(|p| p.buy) && all.iter().any(|p| !p.buy));
    }

    #[test]
    fn llm_player_prompt_carries_goal_and_history() {
        let persona = Persona::default();
        let b = ScriptedBackend::new(["Player: I'll take it."]);
        let spec = ScenarioSpec {
            kind: ScenarioKind::Recommendation,
            seed: 1,
            shopping_list: None,
            purpose: Some("for a goblin battle".into()),
            opening: None,
        };
        let mut p = LlmPlayer::new(&b, TemplateStore::builtin(), &persona, &spec, "m");
        let mut h = DialogueHistory::new();
        h.push_player("hi");
        let prompt = p.prompt(&h);
        assert!(prompt.contains("for a goblin battle"));
        assert!(prompt.contains("Player: hi"));
        assert_eq!(p.next_utterance(&h).unwrap(), "I'll take it.");
    }

    #[test]
    fn rule_merchant_dialogues_terminate() {
        let world = GameWorld::reference();
        let persona = Persona::default();
        let config = SessionConfig::default();
        let engine = Engine {
            world: &world,
            persona: &persona,
            templates: TemplateStore::builtin(),
            config: &config,
        };
        let npc = RuleMerchant::new(world.clone());
        let variant = PromptVariant::of(VariantId::Astp);
        let mut commits = 0;
        for (kind, seed) in (0..10).map(|s| (ScenarioKind::SpecificPurchase, s)).chain((0..10).map(|s| (ScenarioKind::Recommendation, s))) {
            let spec = sample_scenario(kind, seed, &world, &default_purposes()).unwrap();
            let mut player = PolicyPlayer::new(&spec, &world);
            let t = run_dialogue(engine, &spec, &variant, &npc, &mut player, DialogueLimits::default());
            assert_ne!(t.terminated_by, Termination::Error, "{kind} seed {seed}: {:?}", t.error);
            assert_ne!(t.terminated_by, Termination::MaxTurns, "{kind} seed {seed}");
            for turn in &t.turns {
                assert!(turn.violations.is_empty(), "{kind} seed {seed} turn {}: {:?}", turn.index, turn.violations);
            }
            commits += t.states().any(|s| s == DialogueState::CommitSale) as u32;
        }
        assert!(commits > 0);
    }
}
