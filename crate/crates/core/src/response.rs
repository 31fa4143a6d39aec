//! Parsing and validation of raw model output into [`NpcResponse`].
//!
//! The parser never fails: every problem becomes an [`Issue`] on the
//! returned [`ParseOutcome`]. A response is produced iff no fatal issue was
//! raised.

use std::fmt;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::game_world::CartLine;
use crate::ppp::{self, PppConfig, DEFAULT_PLACEHOLDER};
use crate::prompt::{Element, PromptVariant};
use crate::state_machine::{last_trade_state, DialogueHistory, DialogueState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ContextType {
    Casual,
    Trade,
    End,
}

impl ContextType {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CASUAL" => Some(ContextType::Casual),
            "TRADE" => Some(ContextType::Trade),
            "END" => Some(ContextType::End),
            _ => None,
        }
    }
}

/// A price field: either an integral amount or the unsubstituted placeholder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriceValue {
    Amount(u64),
    Placeholder,
}

impl PriceValue {
    pub fn amount(self) -> Option<u64> {
        match self {
            PriceValue::Amount(v) => Some(v),
            PriceValue::Placeholder => None,
        }
    }
}

impl Serialize for PriceValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PriceValue::Amount(v) => s.serialize_u64(*v),
            PriceValue::Placeholder => s.serialize_str(DEFAULT_PLACEHOLDER),
        }
    }
}

impl<'de> Deserialize<'de> for PriceValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::String(s) => Ok(s
                .trim()
                .parse::<u64>()
                .map(PriceValue::Amount)
                .unwrap_or(PriceValue::Placeholder)),
            v => integral(&v)
                .map(PriceValue::Amount)
                .ok_or_else(|| de::Error::custom(format!("invalid price {v}"))),
        }
    }
}

/// The structured NPC response. The trade fields are flattened here and
/// nested under `context_details` on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "WireResponse", try_from = "WireResponse")]
pub struct NpcResponse {
    pub last_trade_context: Option<String>,
    pub context_reason: String,
    pub context_type: ContextType,
    pub context_subtype: Option<DialogueState>,
    pub items: Option<Vec<CartLine>>,
    pub original_price: Option<PriceValue>,
    pub sale_price: Option<PriceValue>,
    pub npc_thoughts: String,
    pub npc_action: String,
    pub npc_dialogue: String,
}

impl NpcResponse {
    /// A bare response in `state` with no trade payload.
    pub fn with_state(state: DialogueState, dialogue: &str) -> Self {
        let (context_type, context_subtype) = match state {
            DialogueState::Casual => (ContextType::Casual, None),
            DialogueState::End => (ContextType::End, None),
            s => (ContextType::Trade, Some(s)),
        };
        Self {
            last_trade_context: None,
            context_reason: String::new(),
            context_type,
            context_subtype,
            items: None,
            original_price: None,
            sale_price: None,
            npc_thoughts: String::new(),
            npc_action: String::new(),
            npc_dialogue: dialogue.to_string(),
        }
    }

    pub fn state(&self) -> DialogueState {
        extract_state(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct WireDetails {
    context_subtype: DialogueState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    items: Option<Vec<CartLine>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    original_price: Option<PriceValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sale_price: Option<PriceValue>,
}

#[derive(Serialize, Deserialize)]
struct WireResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    last_trade_context: Option<String>,
    context_reason: String,
    context_type: ContextType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context_details: Option<WireDetails>,
    npc_thoughts: String,
    npc_action: String,
    npc_dialogue: String,
}

impl From<NpcResponse> for WireResponse {
    fn from(r: NpcResponse) -> Self {
        let context_details = r.context_subtype.map(|context_subtype| WireDetails {
            context_subtype,
            items: r.items,
            original_price: r.original_price,
            sale_price: r.sale_price,
        });
        WireResponse {
            last_trade_context: r.last_trade_context,
            context_reason: r.context_reason,
            context_type: r.context_type,
            context_details,
            npc_thoughts: r.npc_thoughts,
            npc_action: r.npc_action,
            npc_dialogue: r.npc_dialogue,
        }
    }
}

impl TryFrom<WireResponse> for NpcResponse {
    type Error = String;

    fn try_from(w: WireResponse) -> Result<Self, Self::Error> {
        let mut r = NpcResponse {
            last_trade_context: w.last_trade_context,
            context_reason: w.context_reason,
            context_type: w.context_type,
            context_subtype: None,
            items: None,
            original_price: None,
            sale_price: None,
            npc_thoughts: w.npc_thoughts,
            npc_action: w.npc_action,
            npc_dialogue: w.npc_dialogue,
        };
        match (w.context_type, w.context_details) {
            (ContextType::Trade, Some(d)) => {
                if !d.context_subtype.is_trade() {
                    return Err(format!("{} is not a trade subtype", d.context_subtype));
                }
                r.context_subtype = Some(d.context_subtype);
                r.items = d.items;
                r.original_price = d.original_price;
                r.sale_price = d.sale_price;
            }
            (ContextType::Trade, None) => return Err("TRADE response without context_details".into()),
            (_, Some(_)) => return Err("context_details on a non-trade response".into()),
            (_, None) => {}
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Fatal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueCode {
    NoJsonObject,
    JsonSyntax,
    MultipleObjects,
    MissingField,
    InvalidFieldType,
    UnknownContextType,
    UnknownSubtype,
    MissingSubtype,
    ItemMissingQuantity,
    ItemMissingPrice,
    InvalidItem,
    MissingItemId,
    InvalidPrice,
    NonIntegralPrice,
    PlaceholderMalformed,
    PlaceholderRepaired,
    PlaceholderOutsideOffer,
    MissingLastTradeContext,
    FlattenedDetails,
    TradeFieldsIgnored,
    UnknownField,
    MissingOptionalField,
    EmptyCart,
    PlaceholderInWrongState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub code: IssueCode,
    pub message: String,
}

impl Issue {
    pub fn fatal(code: IssueCode, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Fatal,
            code,
            message: message.into(),
        }
    }

    pub fn warning(code: IssueCode, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Warning,
            code,
            message: message.into(),
        }
    }

    pub fn is_fatal(&self) -> bool {
        self.severity == Severity::Fatal
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Fatal => "fatal",
        };
        write!(f, "{sev} {:?}: {}", self.code, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub response: Option<NpcResponse>,
    pub issues: Vec<Issue>,
    #[serde(skip)]
    pub raw_text: String,
}

impl ParseOutcome {
    pub fn is_ok(&self) -> bool {
        self.response.is_some()
    }

    pub fn fatal_issues(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.is_fatal())
    }

    pub fn has_code(&self, code: IssueCode) -> bool {
        self.issues.iter().any(|i| i.code == code)
    }
}

/// Knobs that change what the parser accepts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOptions {
    pub expect_last_trade_context: bool,
    pub placeholder: String,
    pub repair_placeholders: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            expect_last_trade_context: false,
            placeholder: DEFAULT_PLACEHOLDER.to_string(),
            repair_placeholders: false,
        }
    }
}

impl ParseOptions {
    pub fn new(variant: &PromptVariant, ppp: &PppConfig) -> Self {
        Self {
            expect_last_trade_context: variant.has(Element::E4),
            placeholder: ppp.placeholder().to_string(),
            repair_placeholders: ppp.fuzzy_repair,
        }
    }
}

/// Parses with the default placeholder configuration.
pub fn parse_response(raw: &str, variant: &PromptVariant) -> ParseOutcome {
    parse_response_with(raw, &ParseOptions::new(variant, &PppConfig::default()))
}

pub fn parse_response_with(raw: &str, opts: &ParseOptions) -> ParseOutcome {
    let mut issues = Vec::new();
    let response = parse_inner(raw, opts, &mut issues);
    let response = if issues.iter().any(Issue::is_fatal) {
        None
    } else {
        response
    };
    ParseOutcome {
        response,
        issues,
        raw_text: raw.to_string(),
    }
}

fn parse_inner(raw: &str, opts: &ParseOptions, issues: &mut Vec<Issue>) -> Option<NpcResponse> {
    let obj = match extract_object(raw) {
        Ok(obj) => obj,
        Err(issue) => {
            issues.push(issue);
            return None;
        }
    };
    let mut v = Validator {
        opts,
        issues,
        obj: &obj,
    };
    v.response()
}

const TOP_LEVEL_FIELDS: &[&str] = &[
    "last_trade_context",
    "context_reason",
    "context_type",
    "context_details",
    "npc_thoughts",
    "npc_action",
    "npc_dialogue",
];
const DETAIL_FIELDS: &[&str] = &["context_subtype", "items", "original_price", "sale_price"];
const ITEM_FIELDS: &[&str] = &["item_id", "item_name", "quantity", "price"];

struct Validator<'a> {
    opts: &'a ParseOptions,
    issues: &'a mut Vec<Issue>,
    obj: &'a Map<String, Value>,
}

impl<'a> Validator<'a> {
    fn response(&mut self) -> Option<NpcResponse> {
        let obj = self.obj;
        for key in obj.keys() {
            let known = TOP_LEVEL_FIELDS.contains(&key.as_str())
                || DETAIL_FIELDS.contains(&key.as_str())
                || key == "state";
            if !known {
                self.warn(IssueCode::UnknownField, format!("unknown field `{key}`"));
            }
        }

        let (context_type, flat_state) = self.context_type()?;
        let npc_dialogue = self.dialogue();
        let context_reason = self.optional_string("context_reason");
        let npc_thoughts = self.optional_string("npc_thoughts");
        let npc_action = self.optional_string("npc_action");
        let last_trade_context = self.last_trade_context();

        let mut resp = NpcResponse {
            last_trade_context,
            context_reason,
            context_type,
            context_subtype: None,
            items: None,
            original_price: None,
            sale_price: None,
            npc_thoughts,
            npc_action,
            npc_dialogue: npc_dialogue?,
        };

        let details = self.details();
        match context_type {
            ContextType::Trade => {
                let subtype = match details.and_then(|d| d.get("context_subtype")) {
                    Some(Value::String(s)) => match s.parse::<DialogueState>() {
                        Ok(st) if st.is_trade() => Some(st),
                        _ => {
                            self.fatal(
                                IssueCode::UnknownSubtype,
                                format!("unknown context_subtype `{s}`"),
                            );
                            None
                        }
                    },
                    Some(other) => {
                        self.fatal(
                            IssueCode::InvalidFieldType,
                            format!("context_subtype must be a string, got {other}"),
                        );
                        None
                    }
                    None => match flat_state {
                        Some(s) => Some(s),
                        None => {
                            self.fatal(IssueCode::MissingSubtype, "TRADE response without context_subtype");
                            None
                        }
                    },
                };
                resp.context_subtype = subtype;
                if let Some(d) = details {
                    resp.items = self.items(d);
                    resp.original_price = self.price(d, "original_price");
                    resp.sale_price = self.price(d, "sale_price");
                }
                let has_placeholder = resp.original_price == Some(PriceValue::Placeholder)
                    || resp.sale_price == Some(PriceValue::Placeholder)
                    || resp.npc_dialogue.contains(&self.opts.placeholder);
                if has_placeholder && subtype.is_some() && subtype != Some(DialogueState::OfferSell) {
                    self.warn(
                        IssueCode::PlaceholderOutsideOffer,
                        format!(
                            "placeholder used in {}",
                            subtype.map(|s| s.as_str()).unwrap_or("?")
                        ),
                    );
                }
            }
            ContextType::Casual | ContextType::End => {
                if details.is_some_and(|d| DETAIL_FIELDS.iter().any(|f| d.contains_key(*f))) {
                    self.warn(
                        IssueCode::TradeFieldsIgnored,
                        "trade fields on a non-trade response were dropped",
                    );
                }
            }
        }
        Some(resp)
    }

    fn fatal(&mut self, code: IssueCode, msg: impl Into<String>) {
        self.issues.push(Issue::fatal(code, msg));
    }

    fn warn(&mut self, code: IssueCode, msg: impl Into<String>) {
        self.issues.push(Issue::warning(code, msg));
    }

    /// Returns the context type and, when the model used a flat `state`
    /// field instead, the state it named.
    fn context_type(&mut self) -> Option<(ContextType, Option<DialogueState>)> {
        match self.obj.get("context_type") {
            Some(Value::String(s)) => match ContextType::parse(s) {
                Some(ct) => Some((ct, None)),
                None => {
                    self.fatal(IssueCode::UnknownContextType, format!("unknown context_type `{s}`"));
                    None
                }
            },
            Some(other) => {
                self.fatal(
                    IssueCode::InvalidFieldType,
                    format!("context_type must be a string, got {other}"),
                );
                None
            }
            None => match self.obj.get("state") {
                Some(Value::String(s)) => match s.parse::<DialogueState>() {
                    Ok(st) => {
                        self.warn(IssueCode::FlattenedDetails, "flat `state` used instead of context_type");
                        let ct = match st {
                            DialogueState::Casual => ContextType::Casual,
                            DialogueState::End => ContextType::End,
                            _ => ContextType::Trade,
                        };
                        Some((ct, Some(st).filter(|s| s.is_trade())))
                    }
                    Err(_) => {
                        self.fatal(IssueCode::UnknownContextType, format!("unknown state `{s}`"));
                        None
                    }
                },
                _ => {
                    self.fatal(IssueCode::MissingField, "missing context_type");
                    None
                }
            },
        }
    }

    fn dialogue(&mut self) -> Option<String> {
        let text = match self.obj.get("npc_dialogue") {
            Some(Value::String(s)) => s.clone(),
            Some(other) => {
                self.fatal(
                    IssueCode::InvalidFieldType,
                    format!("npc_dialogue must be a string, got {other}"),
                );
                return None;
            }
            None => {
                self.fatal(IssueCode::MissingField, "missing npc_dialogue");
                return None;
            }
        };
        let malformed = ppp::scan_malformed(&text, &self.opts.placeholder);
        if malformed.is_empty() {
            return Some(text);
        }
        if self.opts.repair_placeholders && malformed.iter().all(|m| m.distance <= 1) {
            let (fixed, n) = ppp::repair_malformed(&text, &self.opts.placeholder);
            self.warn(
                IssueCode::PlaceholderRepaired,
                format!("repaired {n} malformed placeholder token(s) in npc_dialogue"),
            );
            return Some(fixed);
        }
        for m in malformed {
            self.fatal(
                IssueCode::PlaceholderMalformed,
                format!("malformed placeholder `{}` in npc_dialogue", m.token),
            );
        }
        None
    }

    fn optional_string(&mut self, field: &str) -> String {
        match self.obj.get(field) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Null) | None => {
                self.warn(IssueCode::MissingOptionalField, format!("missing {field}"));
                String::new()
            }
            Some(other) => {
                self.warn(
                    IssueCode::InvalidFieldType,
                    format!("{field} should be a string, got {other}"),
                );
                other.to_string()
            }
        }
    }

    fn last_trade_context(&mut self) -> Option<String> {
        match self.obj.get("last_trade_context") {
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Null) | None => {
                if self.opts.expect_last_trade_context {
                    self.warn(IssueCode::MissingLastTradeContext, "missing last_trade_context");
                }
                None
            }
            Some(other) => {
                self.warn(
                    IssueCode::InvalidFieldType,
                    format!("last_trade_context should be a string, got {other}"),
                );
                None
            }
        }
    }

    /// The object holding trade fields: `context_details` if present,
    /// otherwise the top level when it carries any trade field.
    fn details(&mut self) -> Option<&'a Map<String, Value>> {
        match self.obj.get("context_details") {
            Some(Value::Object(d)) => {
                for key in d.keys() {
                    if !DETAIL_FIELDS.contains(&key.as_str()) {
                        self.warn(
                            IssueCode::UnknownField,
                            format!("unknown field `context_details.{key}`"),
                        );
                    }
                }
                Some(d)
            }
            Some(Value::Null) | None => {
                if DETAIL_FIELDS.iter().any(|f| self.obj.contains_key(*f)) {
                    self.warn(IssueCode::FlattenedDetails, "trade fields found at top level");
                    Some(self.obj)
                } else {
                    None
                }
            }
            Some(other) => {
                self.fatal(
                    IssueCode::InvalidFieldType,
                    format!("context_details must be an object, got {other}"),
                );
                None
            }
        }
    }

    fn items(&mut self, d: &Map<String, Value>) -> Option<Vec<CartLine>> {
        let arr = match d.get("items") {
            Some(Value::Array(a)) => a,
            Some(Value::Null) | None => return None,
            Some(other) => {
                self.fatal(
                    IssueCode::InvalidFieldType,
                    format!("items must be an array, got {other}"),
                );
                return None;
            }
        };
        let mut out = Vec::with_capacity(arr.len());
        for (i, entry) in arr.iter().enumerate() {
            let Value::Object(o) = entry else {
                self.fatal(IssueCode::InvalidItem, format!("items[{i}] is not an object"));
                continue;
            };
            for key in o.keys() {
                if !ITEM_FIELDS.contains(&key.as_str()) && key != "name" {
                    self.warn(IssueCode::UnknownField, format!("unknown field `items[{i}].{key}`"));
                }
            }
            let name = match o.get("item_name").or_else(|| o.get("name")) {
                Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
                _ => {
                    self.fatal(IssueCode::InvalidItem, format!("items[{i}] has no item_name"));
                    continue;
                }
            };
            let item_id = match o.get("item_id") {
                Some(Value::String(s)) => s.clone(),
                _ => {
                    self.warn(IssueCode::MissingItemId, format!("items[{i}] has no item_id"));
                    String::new()
                }
            };
            let quantity = match o.get("quantity") {
                None | Some(Value::Null) => {
                    self.fatal(IssueCode::ItemMissingQuantity, format!("items[{i}] has no quantity"));
                    continue;
                }
                Some(v) => match integral(v).and_then(|q| u32::try_from(q).ok()) {
                    Some(q) if q >= 1 => q,
                    _ => {
                        self.fatal(IssueCode::InvalidItem, format!("items[{i}].quantity {v} is not a positive integer"));
                        continue;
                    }
                },
            };
            let unit_price = match o.get("price") {
                None | Some(Value::Null) => {
                    self.fatal(IssueCode::ItemMissingPrice, format!("items[{i}] has no price"));
                    continue;
                }
                Some(v) => match integral(v) {
                    Some(p) => p,
                    None => {
                        let code = if v.is_number() {
                            IssueCode::NonIntegralPrice
                        } else {
                            IssueCode::InvalidPrice
                        };
                        self.fatal(code, format!("items[{i}].price {v} is not a non-negative integer"));
                        continue;
                    }
                },
            };
            out.push(CartLine {
                item_id,
                item_name: name,
                quantity,
                unit_price,
            });
        }
        Some(out)
    }

    fn price(&mut self, d: &Map<String, Value>, field: &str) -> Option<PriceValue> {
        let v = d.get(field)?;
        match v {
            Value::Null => None,
            Value::Number(_) => match integral(v) {
                Some(p) => Some(PriceValue::Amount(p)),
                None => {
                    self.fatal(IssueCode::NonIntegralPrice, format!("{field} {v} is not a non-negative integer"));
                    None
                }
            },
            Value::String(s) => {
                let s = s.trim();
                let placeholder = self.opts.placeholder.as_str();
                if s == placeholder {
                    return Some(PriceValue::Placeholder);
                }
                if let Ok(p) = s.parse::<u64>() {
                    self.warn(IssueCode::InvalidFieldType, format!("{field} given as a string"));
                    return Some(PriceValue::Amount(p));
                }
                let dist = ppp::edit_distance(s, placeholder);
                if dist <= 1 && self.opts.repair_placeholders {
                    self.warn(IssueCode::PlaceholderRepaired, format!("repaired {field} `{s}`"));
                    Some(PriceValue::Placeholder)
                } else if dist <= 2 || s.starts_with("__") {
                    self.fatal(IssueCode::PlaceholderMalformed, format!("malformed placeholder `{s}` in {field}"));
                    None
                } else {
                    self.fatal(IssueCode::InvalidPrice, format!("{field} `{s}` is not a price"));
                    None
                }
            }
            other => {
                self.fatal(IssueCode::InvalidPrice, format!("{field} {other} is not a price"));
                None
            }
        }
    }
}

/// A non-negative integral JSON number; floats count when they have no
/// fractional part.
fn integral(v: &Value) -> Option<u64> {
    if let Some(u) = v.as_u64() {
        return Some(u);
    }
    let f = v.as_f64()?;
    (f >= 0.0 && f.fract() == 0.0 && f <= crate::game_world::MAX_TOTAL as f64).then_some(f as u64)
}

/// Strips a Markdown fence when one is present.
fn strip_fence(raw: &str) -> &str {
    let Some(start) = raw.find("```") else {
        return raw;
    };
    let after = &raw[start + 3..];
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
    let tag = &after[..body_start];
    // An inline fence like ```{...}``` has no language tag line.
    let body = if tag.trim_start().starts_with('{') {
        after
    } else {
        &after[body_start..]
    };
    let body = match body.find("```") {
        Some(end) => &body[..end],
        None => body,
    };
    if body.contains('{') {
        body
    } else {
        raw
    }
}

/// End offset (exclusive) of the balanced `{...}` starting at `start`.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Outermost balanced spans, scanned left to right without overlap.
fn candidate_spans(text: &str) -> (Vec<(usize, usize)>, bool) {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut pos = 0;
    let mut unterminated = false;
    while let Some(off) = text[pos..].find('{') {
        let start = pos + off;
        match balanced_end(bytes, start) {
            Some(end) => {
                spans.push((start, end));
                pos = end;
            }
            None => {
                unterminated = true;
                break;
            }
        }
    }
    (spans, unterminated)
}

fn extract_object(raw: &str) -> Result<Map<String, Value>, Issue> {
    let text = strip_fence(raw);
    let (spans, unterminated) = candidate_spans(text);
    if spans.is_empty() {
        return Err(if unterminated {
            Issue::fatal(IssueCode::JsonSyntax, "unterminated JSON object")
        } else {
            Issue::fatal(IssueCode::NoJsonObject, "no JSON object found")
        });
    }
    let mut first_error = None;
    let mut found: Option<(usize, Map<String, Value>)> = None;
    for (n, &(s, e)) in spans.iter().enumerate() {
        match serde_json::from_str::<Value>(&text[s..e]) {
            Ok(Value::Object(map)) => {
                if found.is_some() {
                    return Err(Issue::fatal(
                        IssueCode::MultipleObjects,
                        "more than one top-level JSON object",
                    ));
                }
                found = Some((n, map));
            }
            Ok(_) => {}
            Err(err) => {
                if first_error.is_none() {
                    first_error = Some(err.to_string());
                }
            }
        }
    }
    match found {
        Some((_, map)) => Ok(map),
        None => Err(Issue::fatal(
            IssueCode::JsonSyntax,
            first_error.unwrap_or_else(|| "no JSON object found".into()),
        )),
    }
}

/// CASUAL and END map to themselves; TRADE maps to its subtype.
pub fn extract_state(resp: &NpcResponse) -> DialogueState {
    match resp.context_type {
        ContextType::Casual => DialogueState::Casual,
        ContextType::End => DialogueState::End,
        // A validated TRADE response always carries a subtype.
        ContextType::Trade => resp.context_subtype.unwrap_or(DialogueState::ShowItems),
    }
}

/// Whether the reported `last_trade_context` names the most recent trade
/// state of the history. An empty string stands for "no trade state yet".
/// A missing field never counts as consistent.
pub fn check_inference_consistency(resp: &NpcResponse, history: &DialogueHistory) -> bool {
    let Some(reported) = resp.last_trade_context.as_deref() else {
        return false;
    };
    let reported = reported.trim().to_ascii_uppercase();
    let expected = last_trade_state(history).map(|s| s.as_str()).unwrap_or("");
    reported == expected
}
