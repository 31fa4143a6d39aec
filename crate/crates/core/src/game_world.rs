//! Item catalog, merchant inventory and the exact price oracle.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest total accepted by [`compute_total_price`] (2^53 - 1).
pub const MAX_TOTAL: u64 = (1 << 53) - 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub item_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventoryEntry {
    #[serde(flatten)]
    pub item: Item,
    pub price: u64,
    pub quantity: u32,
}

/// One line of a shopping cart as reported by the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CartLine {
    pub item_id: String,
    pub item_name: String,
    pub quantity: u32,
    #[serde(rename = "price")]
    pub unit_price: u64,
}

impl CartLine {
    pub fn new(item_id: &str, item_name: &str, quantity: u32, unit_price: u64) -> Self {
        Self {
            item_id: item_id.to_string(),
            item_name: item_name.to_string(),
            quantity,
            unit_price,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GameWorld {
    all_items: Vec<Item>,
    sellable: Vec<InventoryEntry>,
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("cannot read world file: {0}")]
    Io(#[from] std::io::Error),
    #[error("world file line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate item_id `{0}`")]
    DuplicateId(String),
    #[error("{field}: empty value")]
    Empty { field: String },
    #[error("merchant_inventory[{index}] `{item_id}`: price must be positive")]
    ZeroPrice { index: usize, item_id: String },
    #[error("merchant_inventory[{index}] `{item_id}` is not listed in game_items")]
    UnknownSellable { index: usize, item_id: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PriceError {
    #[error("cart total exceeds {MAX_TOTAL}")]
    Overflow,
}

#[derive(Serialize, Deserialize)]
struct WorldDoc {
    game_items: Vec<Item>,
    merchant_inventory: Vec<InventoryEntry>,
}

impl GameWorld {
    pub fn new(all_items: Vec<Item>, sellable: Vec<InventoryEntry>) -> Result<Self, WorldError> {
        let mut seen = HashSet::new();
        for (i, item) in all_items.iter().enumerate() {
            if item.item_id.trim().is_empty() {
                return Err(WorldError::Empty {
                    field: format!("game_items[{i}].item_id"),
                });
            }
            if item.item_name.trim().is_empty() {
                return Err(WorldError::Empty {
                    field: format!("game_items[{i}].item_name"),
                });
            }
            if !seen.insert(item.item_id.as_str()) {
                return Err(WorldError::DuplicateId(item.item_id.clone()));
            }
        }
        let mut seen_sellable = HashSet::new();
        for (index, entry) in sellable.iter().enumerate() {
            if !seen.contains(entry.item.item_id.as_str()) {
                return Err(WorldError::UnknownSellable {
                    index,
                    item_id: entry.item.item_id.clone(),
                });
            }
            if !seen_sellable.insert(entry.item.item_id.as_str()) {
                return Err(WorldError::DuplicateId(entry.item.item_id.clone()));
            }
            if entry.price == 0 {
                return Err(WorldError::ZeroPrice {
                    index,
                    item_id: entry.item.item_id.clone(),
                });
            }
        }
        Ok(Self {
            all_items,
            sellable,
        })
    }

    /// The bundled 52-item reference world.
    pub fn reference() -> Self {
        parse_world(REFERENCE_WORLD).expect("bundled world file is valid")
    }

    pub fn all_items(&self) -> &[Item] {
        &self.all_items
    }

    pub fn sellable(&self) -> &[InventoryEntry] {
        &self.sellable
    }

    pub fn is_sellable_name(&self, name: &str) -> bool {
        self.lookup_sellable(name).is_some()
    }

    /// Case-insensitive exact name match over entries with stock left.
    pub fn lookup_sellable(&self, name: &str) -> Option<&InventoryEntry> {
        let needle = name.trim().to_lowercase();
        self.sellable
            .iter()
            .find(|e| e.quantity > 0 && e.item.item_name.to_lowercase() == needle)
    }

    pub fn lookup_item(&self, name: &str) -> Option<&Item> {
        let needle = name.trim().to_lowercase();
        self.all_items
            .iter()
            .find(|i| i.item_name.to_lowercase() == needle)
    }

    /// JSON array injected as `{game_items}`.
    pub fn game_items_json(&self) -> String {
        serde_json::to_string_pretty(&self.all_items).expect("items serialize")
    }

    /// JSON array injected as `{merchant_inventory}`.
    pub fn merchant_inventory_json(&self) -> String {
        serde_json::to_string_pretty(&self.sellable).expect("inventory serializes")
    }

    pub fn to_json(&self) -> String {
        let doc = WorldDoc {
            game_items: self.all_items.clone(),
            merchant_inventory: self.sellable.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("world serializes")
    }
}

const REFERENCE_WORLD: &str = include_str!("../data/world.json");

pub fn load_world(path: impl AsRef<Path>) -> Result<GameWorld, WorldError> {
    let text = std::fs::read_to_string(path)?;
    parse_world(&text)
}

pub fn parse_world(text: &str) -> Result<GameWorld, WorldError> {
    let doc: WorldDoc = serde_json::from_str(text).map_err(|e| WorldError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    GameWorld::new(doc.game_items, doc.merchant_inventory)
}

/// Sum of quantity x unit price with exact integer arithmetic.
pub fn compute_total_price(cart: &[CartLine]) -> Result<u64, PriceError> {
    cart.iter().try_fold(0u64, |acc, line| {
        let sub = u64::from(line.quantity)
            .checked_mul(line.unit_price)
            .ok_or(PriceError::Overflow)?;
        let total = acc.checked_add(sub).ok_or(PriceError::Overflow)?;
        if total > MAX_TOTAL {
            Err(PriceError::Overflow)
        } else {
            Ok(total)
        }
    })
}
