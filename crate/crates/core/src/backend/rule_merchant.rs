//! A deterministic stand-in for the NPC model.
//!
//! It reads the rendered prompt (history block, response-format fields,
//! placeholder rule) and answers with a well-formed JSON response. Two
//! knobs inject the failure modes the metrics measure: skipping the final
//! check and misquoting totals outside the placeholder path. Both are
//! decided by hashing the prompt, so output is a pure function of input.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{BackendError, BackendKind, ChatBackend, ChatRequest, ChatResult};
use crate::game_world::{compute_total_price, CartLine, GameWorld};
use crate::response::{NpcResponse, PriceValue};
use crate::state_machine::DialogueState;

#[derive(Debug, Clone)]
pub struct RuleMerchant {
    world: GameWorld,
    /// Probability of committing straight from an offer or negotiation.
    pub skip_final_check_rate: f64,
    /// Probability of quoting a wrong total when computing it itself.
    pub price_error_rate: f64,
}

impl RuleMerchant {
    pub fn new(world: GameWorld) -> Self {
        Self {
            world,
            skip_final_check_rate: 0.0,
            price_error_rate: 0.0,
        }
    }

    pub fn with_rates(mut self, skip_final_check: f64, price_error: f64) -> Self {
        self.skip_final_check_rate = skip_final_check;
        self.price_error_rate = price_error;
        self
    }

    fn respond(&self, prompt: &str) -> NpcResponse {
        let view = PromptView::read(prompt);
        let last_trade = view
            .npc_states
            .iter()
            .rev()
            .copied()
            .find(|s| s.is_trade());
        let utterance = view.last_player.as_deref().unwrap_or("").to_lowercase();
        let (cart, refused) = self.cart(&view.player_lines);
        let mentioned = self.mentions(&utterance);
        let total = compute_total_price(&cart).unwrap_or(0);
        let roll = |salt: &str| unit_hash(prompt, salt);

        let mut resp = if has_any(&utterance, &["bye", "farewell", "goodbye", "see you"]) {
            casual(DialogueState::End, "The player is leaving.", "Safe travels, adventurer. Come back any time.")
        } else if !mentioned.is_empty() && !cart.is_empty() {
            self.offer(&cart, &refused, view.placeholder.as_deref(), roll("price"))
        } else if !mentioned.is_empty() {
            let mut r = self.show(&utterance);
            r.npc_dialogue = format!(
                "Sorry, {} is not for sale here. {}",
                refused.join(", "),
                r.npc_dialogue
            );
            r
        } else if has_any(
            &utterance,
            &["discount", "cheaper", "lower", "how about", "too expensive", "too pricey", "knock"],
        ) && last_trade.is_some_and(|s| s != DialogueState::ShowItems)
        {
            let stated = self.maybe_wrong(total, roll("price"));
            let mut r = trade(DialogueState::Negotiate, &cart, stated);
            r.context_reason = "The player is haggling over the price.".into();
            r.npc_dialogue = format!("I can't go any lower, friend. It stays at {stated} gold.");
            r
        } else if has_any(
            &utterance,
            &["yes", "deal", "sounds good", "i'll take", "i accept", "alright", "let's do it", "agreed", "sure"],
        ) && last_trade.is_some_and(|s| s != DialogueState::ShowItems)
        {
            let stated = self.maybe_wrong(total, roll("price"));
            let skip = roll("skip") < self.skip_final_check_rate;
            if last_trade == Some(DialogueState::FinalCheck) || skip {
                let mut r = trade(DialogueState::CommitSale, &cart, stated);
                r.context_reason = "The player confirmed the purchase.".into();
                r.npc_dialogue = format!("Pleasure doing business. That's {stated} gold, and the goods are yours.");
                r
            } else {
                let mut r = trade(DialogueState::FinalCheck, &cart, stated);
                r.context_reason = "The player agreed to the offer.".into();
                r.npc_dialogue = format!(
                    "So that's {} for {stated} gold. Shall I wrap them up?",
                    describe(&cart)
                );
                r
            }
        } else if has_any(&utterance, &["no thanks", "pass", "not today", "think about it"]) {
            casual(DialogueState::Casual, "The player declined.", "Suit yourself. Let me know if anything catches your eye.")
        } else if has_any(
            &utterance,
            &["recommend", "what do you have", "anything else", "show", "need", "looking for", "suggest", "preparing", "wares"],
        ) {
            self.show(&utterance)
        } else {
            casual(
                DialogueState::Casual,
                "Small talk.",
                "Greyford is quiet these days. Ask me about my wares if you need anything.",
            )
        };

        if view.expects_last_trade_context {
            resp.last_trade_context = Some(last_trade.map(|s| s.as_str().to_string()).unwrap_or_default());
        }
        resp
    }

    fn maybe_wrong(&self, total: u64, roll: f64) -> u64 {
        if total > 0 && roll < self.price_error_rate {
            total + 50
        } else {
            total
        }
    }

    fn offer(&self, cart: &[CartLine], refused: &[String], placeholder: Option<&str>, roll: f64) -> NpcResponse {
        let total = compute_total_price(cart).unwrap_or(0);
        let mut r = NpcResponse::with_state(DialogueState::OfferSell, "");
        r.context_reason = "The player asked to buy items.".into();
        r.npc_thoughts = "Let me tally up the order.".into();
        r.npc_action = "Pulls the items from the shelf.".into();
        r.items = Some(cart.to_vec());
        let each: Vec<String> = cart
            .iter()
            .map(|l| format!("{}x {} at {} gold each", l.quantity, l.item_name, l.unit_price))
            .collect();
        let (quoted, price) = match placeholder {
            Some(p) => (p.to_string(), PriceValue::Placeholder),
            None => {
                let stated = self.maybe_wrong(total, roll);
                (stated.to_string(), PriceValue::Amount(stated))
            }
        };
        r.original_price = Some(price);
        r.sale_price = Some(price);
        let mut text = String::new();
        if !refused.is_empty() {
            text.push_str(&format!("I don't sell {}. ", refused.join(", ")));
        }
        text.push_str(&format!("I can offer {}. The total comes to {quoted} gold.", each.join(", ")));
        r.npc_dialogue = text;
        r
    }

    fn show(&self, utterance: &str) -> NpcResponse {
        let stock: Vec<_> = self.world.sellable().iter().filter(|e| e.quantity > 0).collect();
        let mut r = NpcResponse::with_state(DialogueState::ShowItems, "");
        r.context_reason = "The player wants to see what is on offer.".into();
        if stock.is_empty() {
            r.npc_dialogue = "My shelves are empty, I'm afraid.".into();
            return r;
        }
        let start = (unit_hash(utterance, "show") * stock.len() as f64) as usize;
        let picks: Vec<&str> = (0..3.min(stock.len()))
            .map(|i| stock[(start + i) % stock.len()].item.item_name.as_str())
            .collect();
        r.npc_dialogue = format!("I have {}, and more besides.", picks.join(", "));
        r
    }

    /// Item names mentioned in `text`, longest names first so that
    /// "Greater Healing Potion" is not read as "Healing Potion".
    fn mentions(&self, text: &str) -> Vec<(String, u32)> {
        let lower = text.to_lowercase();
        let mut names: Vec<&str> = self.world.all_items().iter().map(|i| i.item_name.as_str()).collect();
        names.sort_by_key(|n| std::cmp::Reverse(n.len()));
        let mut taken = vec![false; lower.len()];
        let mut found = Vec::new();
        for name in names {
            let needle = name.to_lowercase();
            for (pos, _) in lower.match_indices(&needle) {
                if taken[pos..pos + needle.len()].iter().any(|t| *t) {
                    continue;
                }
                taken[pos..pos + needle.len()].iter_mut().for_each(|t| *t = true);
                found.push((pos, name.to_string(), quantity_before(&lower, pos)));
            }
        }
        found.sort_by_key(|(pos, _, _)| *pos);
        found.into_iter().map(|(_, n, q)| (n, q)).collect()
    }

    /// The cart implied by the player's lines, plus refused item names
    /// from the most recent line that mentioned items.
    fn cart(&self, player_lines: &[String]) -> (Vec<CartLine>, Vec<String>) {
        let mut cart: BTreeMap<String, u32> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        let mut refused = Vec::new();
        for line in player_lines {
            let lower = line.to_lowercase();
            let mentioned = self.mentions(&lower);
            if mentioned.is_empty() {
                continue;
            }
            refused.clear();
            let removing = has_any(&lower, &["remove", "without", "drop", "instead of"]);
            for (name, qty) in mentioned {
                match self.world.lookup_sellable(&name) {
                    Some(entry) => {
                        let key = entry.item.item_id.clone();
                        if removing {
                            cart.remove(&key);
                        } else {
                            if !cart.contains_key(&key) {
                                order.push(key.clone());
                            }
                            cart.insert(key, qty.min(entry.quantity));
                        }
                    }
                    None => refused.push(name),
                }
            }
        }
        let lines = order
            .iter()
            .filter_map(|id| {
                let q = *cart.get(id)?;
                let e = self.world.sellable().iter().find(|e| &e.item.item_id == id)?;
                Some(CartLine::new(&e.item.item_id, &e.item.item_name, q, e.price))
            })
            .collect();
        (lines, refused)
    }
}

impl ChatBackend for RuleMerchant {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResult, BackendError> {
        req.validate()?;
        let text = self.respond(&req.prompt).to_json();
        Ok(ChatResult {
            completion_tokens: (text.len() / 4) as i64,
            thought_tokens: 0,
            latency_seconds: 0.0,
            text,
            provider_meta: Default::default(),
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }
}

struct PromptView {
    player_lines: Vec<String>,
    last_player: Option<String>,
    npc_states: Vec<DialogueState>,
    expects_last_trade_context: bool,
    /// Placeholder token when the prompt asks for one.
    placeholder: Option<String>,
}

impl PromptView {
    fn read(prompt: &str) -> Self {
        let block = prompt
            .rfind("<DIALOGUE_HISTORY>")
            .map(|i| &prompt[i + "<DIALOGUE_HISTORY>".len()..])
            .map(|rest| rest.split("</DIALOGUE_HISTORY>").next().unwrap_or(rest))
            .unwrap_or("");
        let mut player_lines = Vec::new();
        let mut npc_states = Vec::new();
        for line in block.lines() {
            if let Some(u) = line.strip_prefix("Player: ") {
                player_lines.push(u.to_string());
            } else if line.starts_with("NPC: ") {
                if let Some(label) = line
                    .rfind("[state=")
                    .map(|i| &line[i + 7..])
                    .and_then(|l| l.strip_suffix(']'))
                {
                    if let Ok(s) = label.parse() {
                        npc_states.push(s);
                    }
                }
            }
        }
        let placeholder = prompt.find("but use \"").and_then(|i| {
            let rest = &prompt[i + 9..];
            let end = rest.find('"')?;
            rest[end..].starts_with("\" for the total").then(|| rest[..end].to_string())
        });
        Self {
            last_player: player_lines.last().cloned(),
            player_lines,
            npc_states,
            expects_last_trade_context: prompt.contains("0. last_trade_context"),
            placeholder,
        }
    }
}

fn casual(state: DialogueState, reason: &str, dialogue: &str) -> NpcResponse {
    let mut r = NpcResponse::with_state(state, dialogue);
    r.context_reason = reason.into();
    r.npc_thoughts = "Keep it friendly.".into();
    r.npc_action = "Leans on the counter.".into();
    r
}

fn trade(state: DialogueState, cart: &[CartLine], stated: u64) -> NpcResponse {
    let mut r = NpcResponse::with_state(state, "");
    r.npc_thoughts = "Stick to the agreed order.".into();
    r.npc_action = "Taps the counter.".into();
    if !cart.is_empty() {
        r.items = Some(cart.to_vec());
        r.original_price = Some(PriceValue::Amount(stated));
        r.sale_price = Some(PriceValue::Amount(stated));
    }
    r
}

fn describe(cart: &[CartLine]) -> String {
    if cart.is_empty() {
        return "your order".into();
    }
    cart.iter()
        .map(|l| format!("{}x {}", l.quantity, l.item_name))
        .collect::<Vec<_>>()
        .join(", ")
}

fn has_any(text: &str, phrases: &[&str]) -> bool {
    phrases.iter().any(|p| {
        text.match_indices(p).any(|(i, _)| {
            let before = text[..i].chars().next_back();
            let after = text[i + p.len()..].chars().next();
            !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
        })
    })
}

/// Reads "3x " or "3 " directly before `pos`; defaults to 1.
fn quantity_before(text: &str, pos: usize) -> u32 {
    let head = text[..pos].trim_end();
    let head = head.strip_suffix('x').unwrap_or(head).trim_end();
    let digits: String = head
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok().filter(|q| *q > 0).unwrap_or(1)
}

/// Uniform value in [0, 1) derived from the text.
fn unit_hash(text: &str, salt: &str) -> f64 {
    let digest = Sha256::new()
        .chain_update(salt.as_bytes())
        .chain_update([0u8])
        .chain_update(text.as_bytes())
        .finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}
