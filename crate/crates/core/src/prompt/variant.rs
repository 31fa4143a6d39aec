use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The four prompt design elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Element {
    /// State definitions.
    E1,
    /// Transition conditions attached to each state rule.
    E2,
    /// Directive to identify the previous trade state.
    E3,
    /// Directive to output the previous trade state.
    E4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Framing {
    Unified,
    Subtask,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VariantId {
    Baseline1,
    Baseline2,
    Baseline3,
    Baseline4,
    Astp,
    AstpNoPpp,
    ZsCot,
    #[serde(rename = "AUTOTOD")]
    AutoTod,
    #[serde(rename = "AUTOTOD_PLUS")]
    AutoTodPlus,
    Dfi,
    DfiPlus,
}

impl VariantId {
    pub const ALL: [VariantId; 11] = [
        VariantId::Baseline1,
        VariantId::Baseline2,
        VariantId::Baseline3,
        VariantId::Baseline4,
        VariantId::Astp,
        VariantId::AstpNoPpp,
        VariantId::ZsCot,
        VariantId::AutoTod,
        VariantId::AutoTodPlus,
        VariantId::Dfi,
        VariantId::DfiPlus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantId::Baseline1 => "BASELINE1",
            VariantId::Baseline2 => "BASELINE2",
            VariantId::Baseline3 => "BASELINE3",
            VariantId::Baseline4 => "BASELINE4",
            VariantId::Astp => "ASTP",
            VariantId::AstpNoPpp => "ASTP_NO_PPP",
            VariantId::ZsCot => "ZS_COT",
            VariantId::AutoTod => "AUTOTOD",
            VariantId::AutoTodPlus => "AUTOTOD_PLUS",
            VariantId::Dfi => "DFI",
            VariantId::DfiPlus => "DFI_PLUS",
        }
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown prompt variant `{0}`")]
pub struct UnknownVariant(pub String);

impl FromStr for VariantId {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', ' '], "_");
        VariantId::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVariant {
    pub id: VariantId,
    pub elements: BTreeSet<Element>,
    pub ppp_enabled: bool,
    pub framing: Framing,
    pub cot_line: bool,
}

impl PromptVariant {
    pub fn of(id: VariantId) -> Self {
        use Element::*;
        let (elements, framing): (&[Element], Framing) = match id {
            VariantId::Baseline1 => (&[E1], Framing::Unified),
            VariantId::Baseline2 | VariantId::ZsCot => (&[E1, E2], Framing::Unified),
            VariantId::Baseline3 => (&[E1, E2, E3], Framing::Unified),
            VariantId::Baseline4 => (&[E1, E2, E4], Framing::Unified),
            VariantId::Astp | VariantId::AstpNoPpp => (&[E1, E2, E3, E4], Framing::Unified),
            VariantId::AutoTod => (&[E1], Framing::Subtask),
            VariantId::AutoTodPlus => (&[E1, E2, E3, E4], Framing::Subtask),
            VariantId::Dfi => (&[E1], Framing::Graph),
            VariantId::DfiPlus => (&[E1, E2, E3, E4], Framing::Graph),
        };
        Self {
            id,
            elements: elements.iter().copied().collect(),
            ppp_enabled: id != VariantId::AstpNoPpp,
            framing,
            cot_line: id == VariantId::ZsCot,
        }
    }

    pub fn all() -> Vec<Self> {
        VariantId::ALL.into_iter().map(Self::of).collect()
    }

    pub fn has(&self, e: Element) -> bool {
        self.elements.contains(&e)
    }
}

impl FromStr for PromptVariant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(Self::of)
    }
}

pub fn element_set(variant: &PromptVariant) -> BTreeSet<Element> {
    PromptVariant::of(variant.id).elements
}
