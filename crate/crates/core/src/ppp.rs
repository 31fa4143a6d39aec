//! Placeholder post-processing: the model writes a placeholder where the
//! cart total belongs and the engine fills in the exact amount.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game_world::{compute_total_price, PriceError};
use crate::response::{extract_state, Issue, IssueCode, NpcResponse, PriceValue};
use crate::state_machine::DialogueState;

pub const DEFAULT_PLACEHOLDER: &str = "__PRICE__";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PppError {
    #[error("placeholder must be non-empty and contain no whitespace, got {0:?}")]
    BadPlaceholder(String),
    #[error("placeholder used in {0}, only allowed in the offer state")]
    PlaceholderInWrongState(DialogueState),
    #[error(transparent)]
    Price(#[from] PriceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPppConfig", into = "RawPppConfig")]
pub struct PppConfig {
    placeholder: String,
    pub enabled: bool,
    pub applicable_state: DialogueState,
    /// Repair tokens within edit distance 1 of the placeholder.
    pub fuzzy_repair: bool,
    /// Word that follows a stated total in free text.
    pub currency_word: String,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawPppConfig {
    placeholder: String,
    enabled: bool,
    applicable_state: DialogueState,
    fuzzy_repair: bool,
    currency_word: String,
}

impl Default for RawPppConfig {
    fn default() -> Self {
        PppConfig::default().into()
    }
}

impl From<PppConfig> for RawPppConfig {
    fn from(c: PppConfig) -> Self {
        RawPppConfig {
            placeholder: c.placeholder,
            enabled: c.enabled,
            applicable_state: c.applicable_state,
            fuzzy_repair: c.fuzzy_repair,
            currency_word: c.currency_word,
        }
    }
}

impl TryFrom<RawPppConfig> for PppConfig {
    type Error = PppError;

    fn try_from(r: RawPppConfig) -> Result<Self, PppError> {
        let mut c = PppConfig::with_placeholder(&r.placeholder)?;
        c.enabled = r.enabled;
        c.applicable_state = r.applicable_state;
        c.fuzzy_repair = r.fuzzy_repair;
        c.currency_word = r.currency_word;
        Ok(c)
    }
}

impl Default for PppConfig {
    fn default() -> Self {
        Self {
            placeholder: DEFAULT_PLACEHOLDER.to_string(),
            enabled: true,
            applicable_state: DialogueState::OfferSell,
            fuzzy_repair: false,
            currency_word: "gold".to_string(),
        }
    }
}

impl PppConfig {
    pub fn with_placeholder(placeholder: &str) -> Result<Self, PppError> {
        if placeholder.is_empty() || placeholder.chars().any(char::is_whitespace) {
            return Err(PppError::BadPlaceholder(placeholder.to_string()));
        }
        Ok(Self {
            placeholder: placeholder.to_string(),
            ..Self::default()
        })
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn placeholder(&self) -> &str {
        &self.placeholder
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitutions {
    pub npc_dialogue: u32,
    pub original_price: u32,
    pub sale_price: u32,
}

impl Substitutions {
    pub fn total(&self) -> u32 {
        self.npc_dialogue + self.original_price + self.sale_price
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PppResult {
    pub response: NpcResponse,
    pub computed_total: u64,
    pub substitutions: Substitutions,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub issues: Vec<Issue>,
}

/// Substitutes the cart total for the placeholder when the response is in
/// the applicable state. Other responses come back unchanged.
pub fn apply_ppp(resp: NpcResponse, cfg: &PppConfig) -> Result<PppResult, PppError> {
    let state = extract_state(&resp);
    if !cfg.enabled {
        return Ok(unchanged(resp));
    }
    if state != cfg.applicable_state {
        if mentions_placeholder(&resp, cfg.placeholder()) {
            return Err(PppError::PlaceholderInWrongState(state));
        }
        return Ok(unchanged(resp));
    }

    let mut issues = Vec::new();
    let computed_total = match resp.items.as_deref() {
        Some(items) if !items.is_empty() => compute_total_price(items)?,
        _ => {
            issues.push(Issue::warning(
                IssueCode::EmptyCart,
                "offer without items, substituting 0",
            ));
            0
        }
    };

    let mut resp = resp;
    let mut subs = Substitutions::default();
    let (dialogue, n) = substitute(&resp.npc_dialogue, cfg.placeholder(), computed_total);
    resp.npc_dialogue = dialogue;
    subs.npc_dialogue = n;
    // Absent price fields are filled too, so the structured record always
    // carries the total the player was quoted.
    for (field, count) in [
        (&mut resp.original_price, &mut subs.original_price),
        (&mut resp.sale_price, &mut subs.sale_price),
    ] {
        if matches!(field, None | Some(PriceValue::Placeholder)) {
            *field = Some(PriceValue::Amount(computed_total));
            *count = 1;
        }
    }
    Ok(PppResult {
        response: resp,
        computed_total,
        substitutions: subs,
        issues,
    })
}

fn unchanged(resp: NpcResponse) -> PppResult {
    PppResult {
        response: resp,
        computed_total: 0,
        substitutions: Substitutions::default(),
        issues: Vec::new(),
    }
}

fn mentions_placeholder(resp: &NpcResponse, placeholder: &str) -> bool {
    resp.npc_dialogue.contains(placeholder)
        || resp.original_price == Some(PriceValue::Placeholder)
        || resp.sale_price == Some(PriceValue::Placeholder)
}

/// Replaces each placeholder with `total`. A space is inserted when the
/// placeholder was glued to a following word ("__PRICE__gold").
fn substitute(text: &str, placeholder: &str, total: u64) -> (String, u32) {
    let rendered = total.to_string();
    let mut out = String::with_capacity(text.len() + 8);
    let mut count = 0;
    let mut rest = text;
    while let Some(pos) = rest.find(placeholder) {
        out.push_str(&rest[..pos]);
        out.push_str(&rendered);
        count += 1;
        rest = &rest[pos + placeholder.len()..];
        if rest.chars().next().is_some_and(|c| c.is_alphabetic()) {
            out.push(' ');
        }
    }
    out.push_str(rest);
    (out, count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TotalCheck {
    pub consistent: bool,
    pub stated: u64,
    pub expected: u64,
    /// Consistent only because a granted discount was honoured.
    pub discounted: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TotalCheckError {
    #[error("no stated total (expected {expected})")]
    NoStatedTotal { expected: u64 },
    #[error(transparent)]
    Price(#[from] PriceError),
}

/// Compares the total the NPC quoted with the exact cart total.
pub fn verify_stated_total(resp: &NpcResponse, currency_word: &str) -> Result<TotalCheck, TotalCheckError> {
    let expected = compute_total_price(resp.items.as_deref().unwrap_or_default())?;
    let sale = resp.sale_price.and_then(PriceValue::amount);
    let original = resp.original_price.and_then(PriceValue::amount);
    let stated = sale
        .or_else(|| stated_in_text(&resp.npc_dialogue, currency_word))
        .ok_or(TotalCheckError::NoStatedTotal { expected })?;
    let exact = stated == expected;
    let discounted = !exact
        && matches!((sale, original), (Some(s), Some(o)) if s < o && stated == s);
    Ok(TotalCheck {
        consistent: exact || discounted,
        stated,
        expected,
        discounted,
    })
}

/// Rightmost integer directly before the currency word, e.g. "1,820 gold".
pub fn stated_in_text(text: &str, currency_word: &str) -> Option<u64> {
    if currency_word.is_empty() {
        return None;
    }
    let lower = text.to_lowercase();
    // Lowercasing can change byte lengths outside ASCII; fall back to the
    // original text in that case so offsets stay valid.
    let hay = if lower.len() == text.len() { lower.as_str() } else { text };
    let needle = currency_word.to_lowercase();
    let bytes = hay.as_bytes();
    let mut best = None;
    for (pos, _) in hay.match_indices(&needle) {
        let mut end = pos;
        while end > 0 && bytes[end - 1].is_ascii_whitespace() {
            end -= 1;
        }
        let mut start = end;
        while start > 0 && (bytes[start - 1].is_ascii_digit() || bytes[start - 1] == b',') {
            start -= 1;
        }
        let digits: String = hay[start..end].chars().filter(char::is_ascii_digit).collect();
        if let Ok(v) = digits.parse::<u64>() {
            best = Some(v);
        }
    }
    best
}

/// A token in free text that looks like a mangled placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Malformed {
    pub start: usize,
    pub end: usize,
    pub token: String,
    pub distance: usize,
}

/// Levenshtein distance over chars.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const MAX_TOKEN: usize = 128;

/// Underscore-bearing tokens within edit distance 2 of the placeholder,
/// ignoring exact occurrences.
pub fn scan_malformed(text: &str, placeholder: &str) -> Vec<Malformed> {
    if placeholder.is_empty() {
        return Vec::new();
    }
    let upper_only = !placeholder.chars().any(|c| c.is_ascii_lowercase());
    let is_tok = |c: char| {
        c == '_' || c.is_ascii_digit() || c.is_ascii_uppercase() || (!upper_only && c.is_ascii_lowercase())
    };
    let mut found = Vec::new();
    let mut seg_start = 0;
    let scan_segment = |seg_start: usize, seg: &str, found: &mut Vec<Malformed>| {
        let mut iter = seg.char_indices().peekable();
        while let Some((i, c)) = iter.next() {
            if !is_tok(c) {
                continue;
            }
            let mut end = i + c.len_utf8();
            while let Some(&(j, d)) = iter.peek() {
                if !is_tok(d) {
                    break;
                }
                end = j + d.len_utf8();
                iter.next();
            }
            let token = &seg[i..end];
            if token.contains('_')
                && token.len() <= MAX_TOKEN
                && token.chars().any(|c| c != '_')
            {
                let distance = edit_distance(token, placeholder);
                if distance <= 2 && distance > 0 {
                    found.push(Malformed {
                        start: seg_start + i,
                        end: seg_start + end,
                        token: token.to_string(),
                        distance,
                    });
                }
            }
        }
    };
    for (pos, _) in text.match_indices(placeholder) {
        scan_segment(seg_start, &text[seg_start..pos], &mut found);
        seg_start = pos + placeholder.len();
    }
    scan_segment(seg_start, &text[seg_start..], &mut found);
    found
}

/// Rewrites tokens at edit distance 1 to the exact placeholder.
pub fn repair_malformed(text: &str, placeholder: &str) -> (String, usize) {
    let hits: Vec<_> = scan_malformed(text, placeholder)
        .into_iter()
        .filter(|m| m.distance <= 1)
        .collect();
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for m in &hits {
        out.push_str(&text[last..m.start]);
        out.push_str(placeholder);
        last = m.end;
    }
    out.push_str(&text[last..]);
    (out, hits.len())
}
