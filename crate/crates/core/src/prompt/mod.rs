//! Prompt composition from the text templates under `templates/`.

mod variant;

pub use variant::{element_set, Element, Framing, PromptVariant, UnknownVariant, VariantId};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game_world::GameWorld;
use crate::ppp::DEFAULT_PLACEHOLDER;
use crate::response::extract_state;
use crate::state_machine::{DialogueHistory, HistoryEntry};

/// Default number of history entries rendered into a prompt.
pub const DEFAULT_HISTORY_CAP: usize = 40;

const NPC_PLACEHOLDERS: &[&str] = &[
    "character_name",
    "character_info",
    "game_items",
    "merchant_inventory",
    "current_location",
    "current_time",
    "current_situation",
    "formatted_history",
];

const PLAYER_PLACEHOLDERS: &[&str] = &[
    "character_name",
    "player_goal",
    "player_guidelines",
    "formatted_history",
];

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad template manifest: {0}")]
    Manifest(#[from] toml::de::Error),
    #[error("manifest has no entry for variant {0}")]
    MissingVariant(VariantId),
    #[error("variant {variant}: section `{section}` not found")]
    MissingSection { variant: VariantId, section: String },
    #[error("section `{section}` uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { section: String, name: String },
    #[error("manifest entry for {variant} disagrees with the built-in variant table: {detail}")]
    ManifestMismatch { variant: VariantId, detail: String },
}

/// The merchant persona and scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Persona {
    pub character_name: String,
    pub character_info: String,
    pub location: String,
    pub time: String,
    pub background: String,
}

impl Default for Persona {
    fn default() -> Self {
        Self {
            character_name: "Haman".into(),
            character_info: "Haman is a veteran blacksmith who runs the general store in the \
                             frontier town of Greyford. He is gruff but fair, proud of his \
                             craftsmanship, and does not tolerate haggling that insults his work."
                .into(),
            location: "Haman's General Store, Greyford".into(),
            time: "Late afternoon".into(),
            background: "Adventurers are gearing up for an expedition into the nearby dungeon."
                .into(),
        }
    }
}

/// Everything a prompt is rendered from.
#[derive(Debug, Clone, Copy)]
pub struct PromptContext<'a> {
    pub persona: &'a Persona,
    pub world: &'a GameWorld,
    pub history: &'a DialogueHistory,
    /// The player's utterance for this turn when not yet in `history`.
    pub player_utterance: Option<&'a str>,
    pub history_cap: usize,
    /// Price placeholder token the templates should name.
    pub placeholder: &'a str,
}

impl<'a> PromptContext<'a> {
    pub fn new(persona: &'a Persona, world: &'a GameWorld, history: &'a DialogueHistory) -> Self {
        Self {
            persona,
            world,
            history,
            player_utterance: None,
            history_cap: DEFAULT_HISTORY_CAP,
            placeholder: DEFAULT_PLACEHOLDER,
        }
    }

    pub fn with_utterance(mut self, utterance: &'a str) -> Self {
        self.player_utterance = Some(utterance);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub variant: PromptVariant,
    pub sections: Vec<Section>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    variants: BTreeMap<VariantId, ManifestEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    elements: Vec<Element>,
    ppp: bool,
    framing: Framing,
    cot_line: bool,
    sections: Vec<String>,
}

/// Immutable set of loaded templates.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: BTreeMap<VariantId, PromptTemplate>,
    player: String,
}

macro_rules! builtin_sections {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../../templates/sections/", $name, ".txt")))),*]
    };
}

const BUILTIN_SECTIONS: &[(&str, &str)] = builtin_sections!(
    "system_instructions",
    "system_instructions_subtask",
    "game_item_list",
    "character_info",
    "character_inventory",
    "context_guidelines",
    "trade_guidelines_e1",
    "trade_guidelines_e2",
    "trade_guidelines_e3",
    "trade_guidelines_e3_no_ppp",
    "trade_state_transition_rules",
    "subtasks_e1",
    "subtasks_e3",
    "output_format_header",
    "response_format",
    "response_format_e4",
    "response_format_e4_no_ppp",
    "response_guidelines",
    "response_guidelines_cot",
    "begin",
    "current_situation",
    "dialogue_history",
);

const BUILTIN_MANIFEST: &str = include_str!("../../templates/manifest.toml");
const BUILTIN_PLAYER: &str = include_str!("../../templates/player.txt");

impl TemplateStore {
    /// Templates compiled into the binary.
    pub fn builtin() -> &'static TemplateStore {
        static STORE: OnceLock<TemplateStore> = OnceLock::new();
        STORE.get_or_init(|| {
            Self::from_sources(BUILTIN_MANIFEST, BUILTIN_PLAYER, |name| {
                BUILTIN_SECTIONS
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| Ok(t.to_string()))
            })
            .expect("built-in templates are valid")
        })
    }

    /// Loads `manifest.toml`, `player.txt` and `sections/*.txt` from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let dir = dir.as_ref();
        let read = |path: PathBuf| {
            std::fs::read_to_string(&path).map_err(|source| TemplateError::Io { path, source })
        };
        let manifest = read(dir.join("manifest.toml"))?;
        let player = read(dir.join("player.txt"))?;
        Self::from_sources(&manifest, &player, |name| {
            let path = dir.join("sections").join(format!("{name}.txt"));
            path.exists().then(|| read(path))
        })
    }

    /// Builds a store from a manifest, the player template and a lookup for
    /// section texts by name. The lookup returns `None` for unknown names.
    pub fn from_sources(
        manifest: &str,
        player: &str,
        mut section: impl FnMut(&str) -> Option<Result<String, TemplateError>>,
    ) -> Result<Self, TemplateError> {
        let manifest: Manifest = toml::from_str(manifest)?;
        let mut templates = BTreeMap::new();
        for id in VariantId::ALL {
            let entry = manifest
                .variants
                .get(&id)
                .ok_or(TemplateError::MissingVariant(id))?;
            let variant = PromptVariant::of(id);
            check_entry(&variant, entry)?;
            let mut sections = Vec::with_capacity(entry.sections.len());
            for name in &entry.sections {
                let text = section(name).ok_or_else(|| TemplateError::MissingSection {
                    variant: id,
                    section: name.clone(),
                })??;
                let text = normalize(&text);
                check_placeholders(name, &text, NPC_PLACEHOLDERS)?;
                sections.push(Section {
                    name: name.clone(),
                    text,
                });
            }
            templates.insert(id, PromptTemplate { variant, sections });
        }
        let player = normalize(player);
        check_placeholders("player", &player, PLAYER_PLACEHOLDERS)?;
        Ok(Self { templates, player })
    }

    pub fn template(&self, id: VariantId) -> &PromptTemplate {
        // Every id is checked at load time.
        &self.templates[&id]
    }

    /// Renders the full NPC prompt.
    pub fn build(&self, variant: &PromptVariant, ctx: &PromptContext<'_>) -> String {
        let template = self.template(variant.id);
        let history = render_history_capped(ctx.history, ctx.player_utterance, ctx.history_cap);
        let game_items = ctx.world.game_items_json();
        let inventory = ctx.world.merchant_inventory_json();
        let p = ctx.persona;
        let lookup = |name: &str| -> Option<&str> {
            Some(match name {
                "character_name" => &p.character_name,
                "character_info" => &p.character_info,
                "game_items" => &game_items,
                "merchant_inventory" => &inventory,
                "current_location" => &p.location,
                "current_time" => &p.time,
                "current_situation" => &p.background,
                "formatted_history" => &history,
                _ => return None,
            })
        };
        let body: Vec<&str> = template.sections.iter().map(|s| s.text.as_str()).collect();
        let mut body = body.join("\n\n");
        if ctx.placeholder != DEFAULT_PLACEHOLDER {
            body = body.replace(DEFAULT_PLACEHOLDER, ctx.placeholder);
        }
        substitute(&body, lookup)
    }

    /// Renders the virtual-player prompt.
    pub fn build_player(&self, persona: &Persona, goal: &str, guidelines: &str, history: &str) -> String {
        substitute(&self.player, |name| match name {
            "character_name" => Some(persona.character_name.as_str()),
            "player_goal" => Some(goal),
            "player_guidelines" => Some(guidelines),
            "formatted_history" => Some(history),
            _ => None,
        })
    }
}

fn check_entry(variant: &PromptVariant, entry: &ManifestEntry) -> Result<(), TemplateError> {
    let mismatch = |detail: String| TemplateError::ManifestMismatch {
        variant: variant.id,
        detail,
    };
    let elements = entry.elements.iter().copied().collect();
    if variant.elements != elements {
        return Err(mismatch(format!(
            "elements {:?}, expected {:?}",
            entry.elements, variant.elements
        )));
    }
    if variant.ppp_enabled != entry.ppp {
        return Err(mismatch(format!("ppp = {}", entry.ppp)));
    }
    if variant.framing != entry.framing {
        return Err(mismatch(format!("framing {:?}", entry.framing)));
    }
    if variant.cot_line != entry.cot_line {
        return Err(mismatch(format!("cot_line = {}", entry.cot_line)));
    }
    Ok(())
}

/// Drops trailing whitespace on every line and the final newline.
fn normalize(text: &str) -> String {
    let lines: Vec<&str> = text.lines().map(str::trim_end).collect();
    lines.join("\n").trim_end_matches('\n').to_string()
}

/// `{snake_case}` tokens as (start, end, name).
fn placeholders(text: &str) -> Vec<(usize, usize, &str)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                out.push((i, j + 1, &text[i + 1..j]));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

fn check_placeholders(section: &str, text: &str, allowed: &[&str]) -> Result<(), TemplateError> {
    match placeholders(text).into_iter().find(|(_, _, n)| !allowed.contains(n)) {
        Some((_, _, name)) => Err(TemplateError::UnknownPlaceholder {
            section: section.to_string(),
            name: name.to_string(),
        }),
        None => Ok(()),
    }
}

/// Single pass: substituted values are never rescanned.
fn substitute<'v>(text: &str, lookup: impl Fn(&str) -> Option<&'v str>) -> String {
    let mut out = String::with_capacity(text.len() * 2);
    let mut last = 0;
    for (start, end, name) in placeholders(text) {
        if let Some(value) = lookup(name) {
            out.push_str(&text[last..start]);
            out.push_str(value);
            last = end;
        }
    }
    out.push_str(&text[last..]);
    out
}

/// Renders the built-in template for `variant`.
pub fn build_prompt(variant: &PromptVariant, ctx: &PromptContext<'_>) -> String {
    TemplateStore::builtin().build(variant, ctx)
}

/// One line per entry; NPC lines carry the recorded state label.
pub fn render_history(history: &DialogueHistory) -> String {
    render_history_capped(history, None, usize::MAX)
}

/// Renders at most `cap` most recent lines, counting a pending player
/// utterance.
pub fn render_history_capped(history: &DialogueHistory, pending: Option<&str>, cap: usize) -> String {
    let mut lines: Vec<String> = history
        .entries
        .iter()
        .map(|e| match e {
            HistoryEntry::Player { utterance } => format!("Player: {utterance}"),
            HistoryEntry::Npc { response } => format!(
                "NPC: {} [state={}]",
                response.npc_dialogue,
                extract_state(response)
            ),
        })
        .collect();
    if let Some(u) = pending {
        lines.push(format!("Player: {u}"));
    }
    let skip = lines.len().saturating_sub(cap);
    lines[skip..].join("\n")
}
