//! Dialogue state space, history-derived state extraction and transition policy.
//!
//! The state space is kept flat internally. The two-level
//! `context_type` / `context_subtype` form the model speaks is mapped onto it
//! by the response parser.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::response::{extract_state, NpcResponse};

/// One of the seven dialogue states.
///
/// Declaration order is the canonical matrix order (C, SI, OS, N, FC, CS, E).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DialogueState {
    Casual,
    ShowItems,
    OfferSell,
    Negotiate,
    FinalCheck,
    CommitSale,
    End,
}

impl DialogueState {
    pub const ALL: [DialogueState; 7] = [
        DialogueState::Casual,
        DialogueState::ShowItems,
        DialogueState::OfferSell,
        DialogueState::Negotiate,
        DialogueState::FinalCheck,
        DialogueState::CommitSale,
        DialogueState::End,
    ];

    pub const BASE: [DialogueState; 2] = [DialogueState::Casual, DialogueState::End];

    pub const TRADE: [DialogueState; 5] = [
        DialogueState::ShowItems,
        DialogueState::OfferSell,
        DialogueState::Negotiate,
        DialogueState::FinalCheck,
        DialogueState::CommitSale,
    ];

    /// States a dialogue may open with when there is no prior response.
    pub const INITIAL: [DialogueState; 3] = [
        DialogueState::Casual,
        DialogueState::ShowItems,
        DialogueState::OfferSell,
    ];

    pub fn is_trade(self) -> bool {
        !matches!(self, DialogueState::Casual | DialogueState::End)
    }

    /// Position in the canonical matrix order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DialogueState::Casual => "CASUAL",
            DialogueState::ShowItems => "SHOW_ITEMS",
            DialogueState::OfferSell => "OFFER_SELL",
            DialogueState::Negotiate => "NEGOTIATE",
            DialogueState::FinalCheck => "FINAL_CHECK",
            DialogueState::CommitSale => "COMMIT_SALE",
            DialogueState::End => "END",
        }
    }

    /// Short label used in matrix headers.
    pub fn abbrev(self) -> &'static str {
        match self {
            DialogueState::Casual => "C",
            DialogueState::ShowItems => "SI",
            DialogueState::OfferSell => "OS",
            DialogueState::Negotiate => "N",
            DialogueState::FinalCheck => "FC",
            DialogueState::CommitSale => "CS",
            DialogueState::End => "E",
        }
    }
}

impl fmt::Display for DialogueState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown dialogue state `{0}`")]
pub struct UnknownState(pub String);

impl FromStr for DialogueState {
    type Err = UnknownState;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase();
        DialogueState::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| UnknownState(s.to_string()))
    }
}

/// A single entry of the dialogue history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "speaker", rename_all = "snake_case")]
pub enum HistoryEntry {
    Player { utterance: String },
    /// The NPC response as it was committed, i.e. after placeholder substitution.
    Npc { response: NpcResponse },
}

/// Alternating player utterances and committed NPC responses.
///
/// `prior_state` carries the state established before the first recorded
/// entry. It is only set for transcript excerpts whose opening turns are
/// not available.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueHistory {
    pub entries: Vec<HistoryEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_state: Option<DialogueState>,
}

impl DialogueHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_prior_state(prior_state: Option<DialogueState>) -> Self {
        Self {
            entries: Vec::new(),
            prior_state,
        }
    }

    pub fn push_player(&mut self, utterance: impl Into<String>) {
        self.entries.push(HistoryEntry::Player {
            utterance: utterance.into(),
        });
    }

    pub fn push_npc(&mut self, response: NpcResponse) {
        self.entries.push(HistoryEntry::Npc { response });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn npc_responses(&self) -> impl DoubleEndedIterator<Item = &NpcResponse> {
        self.entries.iter().filter_map(|e| match e {
            HistoryEntry::Npc { response } => Some(response),
            HistoryEntry::Player { .. } => None,
        })
    }

    pub fn last_npc_response(&self) -> Option<&NpcResponse> {
        self.npc_responses().next_back()
    }
}

/// State recorded in the most recent NPC response.
pub fn last_state(history: &DialogueHistory) -> Option<DialogueState> {
    history
        .last_npc_response()
        .map(extract_state)
        .or(history.prior_state)
}

/// Most recent trade state in the history, looking past casual asides.
pub fn last_trade_state(history: &DialogueHistory) -> Option<DialogueState> {
    history
        .npc_responses()
        .rev()
        .map(extract_state)
        .find(|s| s.is_trade())
        .or(history.prior_state.filter(|s| s.is_trade()))
}

/// An observed move between two consecutive NPC states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub from_state: DialogueState,
    pub to_state: DialogueState,
    pub turn_index: u32,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy must contain FINAL_CHECK->COMMIT_SALE")]
    MissingCommitEdge,
    #[error("bad edge `{0}`: expected FROM->TO")]
    BadEdge(String),
    #[error(transparent)]
    State(#[from] UnknownState),
    #[error("policy config: {0}")]
    Config(#[from] toml::de::Error),
}

/// Valid edge set plus the critical commit guard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionPolicy {
    edges: BTreeSet<(DialogueState, DialogueState)>,
    commit_guard: bool,
}

impl TransitionPolicy {
    pub fn new(
        edges: impl IntoIterator<Item = (DialogueState, DialogueState)>,
        commit_guard: bool,
    ) -> Result<Self, PolicyError> {
        let edges: BTreeSet<_> = edges.into_iter().collect();
        if !edges.contains(&(DialogueState::FinalCheck, DialogueState::CommitSale)) {
            return Err(PolicyError::MissingCommitEdge);
        }
        Ok(Self {
            edges,
            commit_guard,
        })
    }

    pub fn edges(&self) -> impl Iterator<Item = (DialogueState, DialogueState)> + '_ {
        self.edges.iter().copied()
    }

    pub fn commit_guard(&self) -> bool {
        self.commit_guard
    }

    pub fn contains(&self, from: DialogueState, to: DialogueState) -> bool {
        self.edges.contains(&(from, to))
    }

    /// Parses a policy document:
    ///
    /// ```toml
    /// commit_guard = true
    /// edges = ["FINAL_CHECK->COMMIT_SALE", "*->END"]
    /// ```
    ///
    /// `*` on either side expands to every state.
    pub fn from_toml_str(text: &str) -> Result<Self, PolicyError> {
        let doc: PolicyDoc = toml::from_str(text)?;
        let mut edges = Vec::new();
        for raw in &doc.edges {
            let (from, to) = raw
                .split_once("->")
                .ok_or_else(|| PolicyError::BadEdge(raw.clone()))?;
            let froms = expand_side(from)?;
            let tos = expand_side(to)?;
            for f in &froms {
                for t in &tos {
                    edges.push((*f, *t));
                }
            }
        }
        Self::new(edges, doc.commit_guard)
    }

    pub fn to_toml_string(&self) -> String {
        let doc = PolicyDoc {
            commit_guard: self.commit_guard,
            edges: self
                .edges
                .iter()
                .map(|(f, t)| format!("{f}->{t}"))
                .collect(),
        };
        toml::to_string(&doc).expect("policy document serializes")
    }

    /// True iff the move is an allowed edge, or an allowed opening state when
    /// there is no previous state. The commit guard overrides the edge set.
    pub fn is_valid_transition(&self, from: Option<DialogueState>, to: DialogueState) -> bool {
        if self.commit_guard
            && to == DialogueState::CommitSale
            && from != Some(DialogueState::FinalCheck)
        {
            return false;
        }
        match from {
            None => DialogueState::INITIAL.contains(&to),
            Some(f) => self.edges.contains(&(f, to)),
        }
    }
}

impl Default for TransitionPolicy {
    fn default() -> Self {
        default_policy()
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyDoc {
    #[serde(default = "default_true")]
    commit_guard: bool,
    edges: Vec<String>,
}

fn default_true() -> bool {
    true
}

fn expand_side(side: &str) -> Result<Vec<DialogueState>, PolicyError> {
    let side = side.trim();
    if side == "*" {
        Ok(DialogueState::ALL.to_vec())
    } else {
        Ok(vec![side.parse()?])
    }
}

/// The canonical edge set.
///
/// Trade edges follow the transition-graph rules handed to the graph-framed
/// prompt variants. On top of those: every state may move to END, CASUAL and
/// the trade entry states (SHOW_ITEMS, OFFER_SELL) reach each other, every
/// state except COMMIT_SALE may repeat, a finished sale may drop back to
/// CASUAL, SHOW_ITEMS or END, and END may reopen into any opening state.
pub fn default_policy() -> TransitionPolicy {
    use DialogueState::*;
    let mut edges = vec![
        (ShowItems, ShowItems),
        (ShowItems, OfferSell),
        (OfferSell, OfferSell),
        (OfferSell, ShowItems),
        (OfferSell, Negotiate),
        (OfferSell, FinalCheck),
        (Negotiate, Negotiate),
        (Negotiate, ShowItems),
        (Negotiate, OfferSell),
        (Negotiate, FinalCheck),
        (FinalCheck, ShowItems),
        (FinalCheck, OfferSell),
        (FinalCheck, Negotiate),
        (FinalCheck, CommitSale),
    ];
    for s in DialogueState::ALL {
        edges.push((s, End));
        if s != CommitSale {
            edges.push((s, s));
        }
    }
    for entry in [ShowItems, OfferSell] {
        edges.push((Casual, entry));
        edges.push((entry, Casual));
    }
    edges.extend([(CommitSale, Casual), (CommitSale, ShowItems)]);
    edges.extend(DialogueState::INITIAL.into_iter().map(|s| (End, s)));
    TransitionPolicy::new(edges, true).expect("default policy holds the commit edge")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::response::{ContextType, NpcResponse};
    use DialogueState::*;

    fn npc(state: DialogueState) -> NpcResponse {
        NpcResponse::with_state(state, "...")
    }

    #[test]
    fn partition_is_total_and_disjoint() {
        assert_eq!(DialogueState::ALL.len(), 7);
        for s in DialogueState::ALL {
            let in_base = DialogueState::BASE.contains(&s);
            let in_trade = DialogueState::TRADE.contains(&s);
            assert!(in_base ^ in_trade, "{s}");
            assert_eq!(in_trade, s.is_trade());
        }
    }

    #[test]
    fn parses_state_names() {
        assert_eq!("final_check".parse::<DialogueState>().unwrap(), FinalCheck);
        assert!("CHECKOUT".parse::<DialogueState>().is_err());
    }

    #[test]
    fn last_state_of_empty_history_is_absent() {
        assert_eq!(last_state(&DialogueHistory::new()), None);
    }

    #[test]
    fn last_state_reads_most_recent_response() {
        let mut h = DialogueHistory::new();
        h.push_player("hi");
        h.push_npc(npc(OfferSell));
        h.push_player("yes");
        h.push_npc(npc(FinalCheck));
        assert_eq!(last_state(&h), Some(FinalCheck));
        h.push_player("one more thing");
        assert_eq!(last_state(&h), Some(FinalCheck));
    }

    #[test]
    fn last_trade_state_skips_casual_asides() {
        let mut h = DialogueHistory::new();
        h.push_player("show me");
        h.push_npc(npc(ShowItems));
        h.push_player("tell me about the kit");
        h.push_npc(npc(Casual));
        assert_eq!(last_state(&h), Some(Casual));
        assert_eq!(last_trade_state(&h), Some(ShowItems));
    }

    #[test]
    fn prior_state_backs_empty_excerpts() {
        let h = DialogueHistory::with_prior_state(Some(Negotiate));
        assert_eq!(last_state(&h), Some(Negotiate));
        assert_eq!(last_trade_state(&h), Some(Negotiate));
        let h = DialogueHistory::with_prior_state(Some(Casual));
        assert_eq!(last_trade_state(&h), None);
    }

    #[test]
    fn commit_requires_final_check() {
        let p = default_policy();
        assert!(p.is_valid_transition(Some(FinalCheck), CommitSale));
        assert!(!p.is_valid_transition(Some(OfferSell), CommitSale));
        assert!(!p.is_valid_transition(None, CommitSale));
        for s in DialogueState::ALL {
            assert_eq!(p.is_valid_transition(Some(s), CommitSale), s == FinalCheck);
        }
    }

    #[test]
    fn trade_self_loops_allowed_except_commit() {
        let p = default_policy();
        for s in DialogueState::TRADE {
            if s != CommitSale {
                assert!(p.is_valid_transition(Some(s), s), "{s}");
            }
        }
    }

    #[test]
    fn default_edges_match_graph_rules() {
        let p = default_policy();
        assert!(p.contains(Negotiate, FinalCheck));
        assert!(p.contains(FinalCheck, Negotiate));
        assert!(!p.contains(ShowItems, CommitSale));
        assert!(p.contains(ShowItems, Casual));
        assert!(p.contains(Casual, OfferSell));
        assert!(!p.contains(Negotiate, Casual));
        assert!(p.contains(CommitSale, End));
        assert!(!p.contains(CommitSale, Negotiate));
    }

    #[test]
    fn opening_states() {
        let p = default_policy();
        assert!(p.is_valid_transition(None, Casual));
        assert!(p.is_valid_transition(None, ShowItems));
        assert!(p.is_valid_transition(None, OfferSell));
        assert!(!p.is_valid_transition(None, FinalCheck));
    }

    #[test]
    fn guard_overrides_custom_edges() {
        let p = TransitionPolicy::new([(FinalCheck, CommitSale), (OfferSell, CommitSale)], true)
            .unwrap();
        assert!(!p.is_valid_transition(Some(OfferSell), CommitSale));
        let loose =
            TransitionPolicy::new([(FinalCheck, CommitSale), (OfferSell, CommitSale)], false)
                .unwrap();
        assert!(loose.is_valid_transition(Some(OfferSell), CommitSale));
    }

    #[test]
    fn policy_requires_commit_edge() {
        assert!(matches!(
            TransitionPolicy::new([(OfferSell, FinalCheck)], true),
            Err(PolicyError::MissingCommitEdge)
        ));
    }

    #[test]
    fn policy_toml_round_trip() {
        let p = default_policy();
        let text = p.to_toml_string();
        assert_eq!(TransitionPolicy::from_toml_str(&text).unwrap(), p);
    }

    #[test]
    fn policy_toml_wildcards() {
        let p = TransitionPolicy::from_toml_str(
            r#"edges = ["FINAL_CHECK->COMMIT_SALE", "*->END"]"#,
        )
        .unwrap();
        assert!(p.commit_guard());
        for s in DialogueState::ALL {
            assert!(p.contains(s, End));
        }
        assert!(TransitionPolicy::from_toml_str(r#"edges = ["A=>B"]"#).is_err());
        assert!(TransitionPolicy::from_toml_str(r#"edges = ["FOO->END"]"#).is_err());
    }

    #[test]
    fn npc_helper_maps_context_type() {
        assert_eq!(npc(End).context_type, ContextType::End);
        assert_eq!(npc(Negotiate).context_type, ContextType::Trade);
    }
}
