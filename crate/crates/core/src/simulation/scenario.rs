use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game_world::GameWorld;

/// Purposes drawn for recommendation scenarios.
pub const DEFAULT_PURPOSES: &[&str] = &[
    "for a goblin battle",
    "for a long journey through the mountains",
    "for mining in the northern caves",
    "for a hunting trip in the forest",
    "for exploring an old dungeon",
    "for defending the village from wolves",
    "for a fishing expedition on the lake",
    "for surviving a harsh winter",
];

pub const MAX_LIST_ITEMS: u32 = 6;
pub const MAX_QUANTITY: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScenarioKind {
    /// The player arrives with a shopping list.
    SpecificPurchase,
    /// The player asks for equipment suited to a purpose.
    Recommendation,
}

impl ScenarioKind {
    pub fn number(self) -> u8 {
        match self {
            ScenarioKind::SpecificPurchase => 1,
            ScenarioKind::Recommendation => 2,
        }
    }

    /// Directory name used in the output layout.
    pub fn dir_name(self) -> String {
        format!("scenario{}", self.number())
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::SpecificPurchase => "SPECIFIC_PURCHASE",
            ScenarioKind::Recommendation => "RECOMMENDATION",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown scenario {0:?}; use 1, 2, SPECIFIC_PURCHASE or RECOMMENDATION")]
pub struct UnknownScenario(pub String);

impl FromStr for ScenarioKind {
    type Err = UnknownScenario;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        match norm.trim_start_matches("scenario").trim_start_matches('_') {
            "1" | "specific_purchase" => Ok(ScenarioKind::SpecificPurchase),
            "2" | "recommendation" => Ok(ScenarioKind::Recommendation),
            _ => Err(UnknownScenario(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShoppingItem {
    pub item_name: String,
    pub quantity: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shopping_list: Option<Vec<ShoppingItem>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purpose: Option<String>,
    /// Verbatim opening line; replaces the generated one when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opening: Option<String>,
}

impl ScenarioSpec {
    /// A scenario defined only by its opening line, as in recorded dialogues.
    pub fn opening(kind: ScenarioKind, seed: u64, opening: &str) -> Self {
        Self {
            kind,
            seed,
            shopping_list: None,
            purpose: None,
            opening: Some(opening.to_string()),
        }
    }

    pub fn initial_utterance(&self) -> String {
        if let Some(o) = &self.opening {
            return o.clone();
        }
        match (&self.shopping_list, &self.purpose) {
            (Some(list), _) if !list.is_empty() => {
                format!("Hello! I'd like to buy {}.", format_list(list))
            }
            (_, Some(p)) => format!("Hi there. Could you recommend some items {p}?"),
            _ => "Hello there.".to_string(),
        }
    }
}

/// "2x Hunting Trap, 1x Plate Armor"
pub fn format_list(list: &[ShoppingItem]) -> String {
    list.iter()
        .map(|i| format!("{}x {}", i.quantity, i.item_name))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("recommendation scenarios need at least one purpose")]
    NoPurposes,
    #[error("the world has no items to draw from")]
    EmptyWorld,
}

/// Draws a scenario from the seed alone; the same `(kind, seed)` always
/// yields the same scenario.
///
/// Shopping lists mix sellable and unsellable items on purpose so that
/// refusals get exercised.
pub fn sample_scenario(
    kind: ScenarioKind,
    seed: u64,
    world: &GameWorld,
    purposes: &[String],
) -> Result<ScenarioSpec, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(kind.number()));
    let mut spec = ScenarioSpec {
        kind,
        seed,
        shopping_list: None,
        purpose: None,
        opening: None,
    };
    match kind {
        ScenarioKind::SpecificPurchase => {
            let pool = world.all_items();
            if pool.is_empty() {
                return Err(ScenarioError::EmptyWorld);
            }
            let n = rng.random_range(1..=MAX_LIST_ITEMS).min(pool.len() as u32);
            let picks = index::sample(&mut rng, pool.len(), n as usize);
            let list = picks
                .into_iter()
                .map(|i| ShoppingItem {
                    item_name: pool[i].item_name.clone(),
                    quantity: rng.random_range(1..=MAX_QUANTITY),
                })
                .collect();
            spec.shopping_list = Some(list);
        }
        ScenarioKind::Recommendation => {
            if purposes.is_empty() {
                return Err(ScenarioError::NoPurposes);
            }
            let i = rng.random_range(0..purposes.len() as u32) as usize;
            spec.purpose = Some(purposes[i].clone());
        }
    }
    Ok(spec)
}

pub fn default_purposes() -> Vec<String> {
    DEFAULT_PURPOSES.iter().map(|s| s.to_string()).collect()
}
