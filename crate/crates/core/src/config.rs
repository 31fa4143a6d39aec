//! Experiment configuration files and backend construction from them.
//!
//! A config is one TOML document. Relative paths inside it resolve against
//! the directory holding the file. A minimal example:
//!
//! ```toml
//! scenario = 1
//! variants = ["ASTP", "BASELINE1"]
//! seeds = "0..299"
//! outdir = "runs"
//!
//! [npc]
//! backend = "http"
//! endpoint = "https://api.openai.com/v1/chat/completions"
//! dialect = "open_ai"
//! model_id = "gpt-4o-mini"
//! record = true
//! cassette_dir = "cassettes"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::backend::{
    BackendError, ChatBackend, Dialect, HttpBackend, HttpConfig, Recorder, Replayer, RuleMerchant, API_KEY_ENV,
};
use crate::game_world::{load_world, GameWorld, WorldError};
use crate::ppp::PppConfig;
use crate::prompt::{Persona, PromptVariant, TemplateError, TemplateStore, VariantId, DEFAULT_HISTORY_CAP};
use crate::simulation::{
    default_purposes, DialogueKey, DialogueLimits, ExperimentPlan, ScenarioKind, SessionConfig, DEFAULT_MAX_TURNS,
};
use crate::state_machine::{default_policy, PolicyError, TransitionPolicy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Toml {
        path: String,
        source: toml::de::Error,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("world: {0}")]
    World(#[from] WorldError),
    #[error("templates: {0}")]
    Templates(#[from] TemplateError),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Seeds as written in configs and on the command line: `"0..299"` and
/// `"0..=299"` are both inclusive, `"1,5,9"` lists seeds, `"7"` is one seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedSet(pub Vec<u64>);

impl FromStr for SeedSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let num = |t: &str| t.trim().parse::<u64>().map_err(|_| format!("bad seed {t:?} in {s:?}"));
        let s = s.trim();
        if let Some((a, b)) = s.split_once("..") {
            let b = b.strip_prefix('=').unwrap_or(b);
            let (a, b) = (num(a)?, num(b)?);
            if a > b {
                return Err(format!("empty seed range {s:?}"));
            }
            return Ok(SeedSet((a..=b).collect()));
        }
        let seeds = s.split(',').map(num).collect::<Result<Vec<_>, _>>()?;
        if seeds.is_empty() {
            return Err("no seeds given".into());
        }
        Ok(SeedSet(seeds))
    }
}

impl fmt::Display for SeedSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.0;
        let contiguous = s.windows(2).all(|w| w[1] == w[0] + 1);
        match (s.first(), s.last()) {
            (Some(a), Some(b)) if contiguous && s.len() > 1 => write!(f, "{a}..{b}"),
            _ => f.write_str(&s.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
        }
    }
}

impl Serialize for SeedSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SeedSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            One(u64),
            Text(String),
            List(Vec<u64>),
        }
        match Raw::deserialize(d)? {
            Raw::One(n) => Ok(SeedSet(vec![n])),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
            Raw::List(v) if !v.is_empty() => Ok(SeedSet(v)),
            Raw::List(_) => Err(serde::de::Error::custom("no seeds given")),
        }
    }
}

/// Scenario kind, written as `1`, `2` or a name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioField(pub ScenarioKind);

impl Serialize for ScenarioField {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.0.number())
    }
}

impl<'de> Deserialize<'de> for ScenarioField {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Num(n) => n.to_string(),
            Raw::Text(t) => t,
        };
        text.parse().map(ScenarioField).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    /// The built-in rule-based merchant. NPC side only.
    #[serde(alias = "scripted")]
    Rule,
    /// A hosted chat-completion API.
    Http,
    /// Recorded cassettes, one per dialogue.
    Replay,
}

impl FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rule" | "scripted" => Ok(BackendChoice::Rule),
            "http" => Ok(BackendChoice::Http),
            "replay" => Ok(BackendChoice::Replay),
            other => Err(format!("unknown backend {other:?}; expected rule, scripted, http or replay")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    pub backend: BackendChoice,
    pub model_id: String,
    pub temperature: f64,
    pub thinking_budget: u32,
    pub endpoint: Option<String>,
    pub dialect: Dialect,
    pub timeout_seconds: u64,
    pub max_attempts: u32,
    /// Provider calls in flight at once, across all dialogues.
    pub max_in_flight: usize,
    pub structured_output: bool,
    /// Also write every exchange to a per-dialogue cassette.
    pub record: bool,
    pub cassette_dir: Option<PathBuf>,
    /// Rule backend only.
    pub skip_final_check_rate: f64,
    /// Rule backend only.
    pub price_error_rate: f64,
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            backend: BackendChoice::Rule,
            model_id: "rule-merchant".into(),
            temperature: 0.7,
            thinking_budget: 0,
            endpoint: None,
            dialect: Dialect::OpenAi,
            timeout_seconds: 60,
            max_attempts: 3,
            max_in_flight: 4,
            structured_output: false,
            record: false,
            cassette_dir: None,
            skip_final_check_rate: 0.0,
            price_error_rate: 0.0,
        }
    }
}

impl BackendSpec {
    fn validate(&self, section: &str) -> Result<(), ConfigError> {
        let field = |name: &str| format!("{section}.{name}");
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(invalid(&field("temperature"), "must be within [0, 2]"));
        }
        for (name, rate) in [
            ("skip_final_check_rate", self.skip_final_check_rate),
            ("price_error_rate", self.price_error_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(invalid(&field(name), "must be within [0, 1]"));
            }
        }
        if self.backend == BackendChoice::Http && self.endpoint.is_none() {
            return Err(invalid(&field("endpoint"), "required for the http backend"));
        }
        if (self.record || self.backend == BackendChoice::Replay) && self.cassette_dir.is_none() {
            return Err(invalid(&field("cassette_dir"), "required to record or replay"));
        }
        if self.record && self.backend == BackendChoice::Replay {
            return Err(invalid(&field("record"), "cannot record while replaying"));
        }
        if self.max_in_flight == 0 {
            return Err(invalid(&field("max_in_flight"), "must be at least 1"));
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(d) = &self.cassette_dir {
            self.cassette_dir = Some(base.join(d));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlayerKind {
    /// The seeded rule-driven customer.
    #[default]
    Policy,
    /// A chat model driven by the player template.
    Llm,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlayerConfig {
    pub kind: PlayerKind,
    /// Backend for the `llm` kind.
    pub llm: BackendSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioField,
    pub variants: Vec<VariantId>,
    pub seeds: SeedSet,
    pub outdir: PathBuf,
    pub resume: bool,
    pub max_turns: u32,
    /// Dialogues run concurrently.
    pub max_in_flight: usize,
    pub enforce: bool,
    pub enforce_retries: u32,
    pub parse_retries: u32,
    pub history_cap: usize,
    pub purposes: Vec<String>,
    /// Item catalog JSON; the built-in world when unset.
    pub world: Option<PathBuf>,
    /// Template directory; the built-in templates when unset.
    pub templates: Option<PathBuf>,
    /// Transition policy TOML; the default policy when unset.
    pub policy: Option<PathBuf>,
    pub persona: Persona,
    pub ppp: PppConfig,
    pub npc: BackendSpec,
    pub player: PlayerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioField(ScenarioKind::SpecificPurchase),
            variants: vec![VariantId::Astp],
            seeds: SeedSet((0..=299).collect()),
            outdir: PathBuf::from("runs"),
            resume: false,
            max_turns: DEFAULT_MAX_TURNS,
            max_in_flight: 4,
            enforce: false,
            enforce_retries: 2,
            parse_retries: 1,
            history_cap: DEFAULT_HISTORY_CAP,
            purposes: default_purposes(),
            world: None,
            templates: None,
            policy: None,
            persona: Persona::default(),
            ppp: PppConfig::default(),
            npc: BackendSpec::default(),
            player: PlayerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config; relative paths are resolved against `base`.
    pub fn from_toml_str(text: &str, base: &Path, label: &str) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|source| ConfigError::Toml {
            path: label.to_string(),
            source,
        })?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, &path.display().to_string())
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.world, &mut self.templates, &mut self.policy].into_iter().flatten() {
            *p = base.join(&*p);
        }
        self.outdir = base.join(&self.outdir);
        self.npc.resolve_paths(base);
        self.player.llm.resolve_paths(base);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.variants.is_empty() {
            return Err(invalid("variants", "at least one variant is required"));
        }
        if self.max_turns == 0 {
            return Err(invalid("max_turns", "must be at least 1"));
        }
        if self.max_in_flight == 0 {
            return Err(invalid("max_in_flight", "must be at least 1"));
        }
        if self.scenario.0 == ScenarioKind::Recommendation && self.purposes.is_empty() {
            return Err(invalid("purposes", "recommendation scenarios need at least one purpose"));
        }
        self.npc.validate("npc")?;
        if self.player.kind == PlayerKind::Llm {
            if self.player.llm.backend == BackendChoice::Rule {
                return Err(invalid("player.llm.backend", "the rule backend only plays the merchant"));
            }
            self.player.llm.validate("player.llm")?;
        }
        Ok(())
    }

    pub fn load_world(&self) -> Result<GameWorld, ConfigError> {
        Ok(match &self.world {
            Some(p) => load_world(p)?,
            None => GameWorld::reference(),
        })
    }

    pub fn load_templates(&self) -> Result<TemplateStore, ConfigError> {
        Ok(match &self.templates {
            Some(dir) => TemplateStore::load_dir(dir)?,
            None => TemplateStore::builtin().clone(),
        })
    }

    pub fn load_policy(&self) -> Result<TransitionPolicy, ConfigError> {
        match &self.policy {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.clone(),
                    source,
                })?;
                Ok(TransitionPolicy::from_toml_str(&text)?)
            }
            None => Ok(default_policy()),
        }
    }

    pub fn session_config(&self, policy: TransitionPolicy) -> SessionConfig {
        SessionConfig {
            policy,
            ppp: self.ppp.clone(),
            model_id: self.npc.model_id.clone(),
            temperature: self.npc.temperature,
            thinking_budget: self.npc.thinking_budget,
            parse_retries: self.parse_retries,
            enforce: self.enforce,
            enforce_retries: self.enforce_retries,
            history_cap: self.history_cap,
        }
    }

    pub fn plan(&self) -> ExperimentPlan {
        ExperimentPlan {
            kind: self.scenario.0,
            variants: self.variants.iter().copied().map(PromptVariant::of).collect(),
            seeds: self.seeds.0.clone(),
            outdir: self.outdir.clone(),
            resume: self.resume,
            max_in_flight: self.max_in_flight,
            limits: DialogueLimits {
                max_turns: self.max_turns,
            },
            purposes: self.purposes.clone(),
        }
    }
}

/// Builds per-dialogue backends from a [`BackendSpec`]. One HTTP client is
/// shared by every dialogue so its in-flight limit is global.
pub struct BackendPool {
    spec: BackendSpec,
    role: String,
    world: GameWorld,
    http: Option<Arc<HttpBackend>>,
}

impl BackendPool {
    /// `role` names the cassette subdirectory ("npc" or "player").
    /// `api_key` is only consulted for the http backend.
    pub fn new(spec: &BackendSpec, role: &str, world: &GameWorld, api_key: Option<String>) -> Result<Self, BackendError> {
        let http = match spec.backend {
            BackendChoice::Http => {
                let key = api_key.unwrap_or_default();
                if key.trim().is_empty() {
                    return Err(BackendError::Auth(format!("{role}: no API key; set {API_KEY_ENV}")));
                }
                let mut cfg = HttpConfig::new(spec.endpoint.clone().unwrap_or_default(), spec.dialect, key);
                cfg.timeout = Duration::from_secs(spec.timeout_seconds);
                cfg.max_attempts = spec.max_attempts;
                cfg.max_in_flight = spec.max_in_flight;
                cfg.structured_output = spec.structured_output;
                Some(Arc::new(HttpBackend::new(cfg)?))
            }
            _ => None,
        };
        Ok(Self {
            spec: spec.clone(),
            role: role.to_string(),
            world: world.clone(),
            http,
        })
    }

    pub fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    /// `<cassette_dir>/<role>/<variant>/<scenario>/<seed>.jsonl`
    pub fn cassette_path(&self, key: &DialogueKey) -> Option<PathBuf> {
        self.spec
            .cassette_dir
            .as_ref()
            .map(|d| d.join(&self.role).join(key.relative_path()))
    }

    pub fn for_dialogue(&self, key: &DialogueKey) -> Result<Box<dyn ChatBackend>, BackendError> {
        self.with_cassette(self.cassette_path(key).as_deref())
    }

    /// A backend reading or writing the given cassette, if any.
    pub fn with_cassette(&self, cassette: Option<&Path>) -> Result<Box<dyn ChatBackend>, BackendError> {
        let inner: Box<dyn ChatBackend> = match self.spec.backend {
            BackendChoice::Replay => {
                let path = cassette.ok_or_else(|| BackendError::InvalidRequest("replay needs a cassette".into()))?;
                return Ok(Box::new(Replayer::open(path)?));
            }
            BackendChoice::Rule => Box::new(RuleMerchant::new(self.world.clone()).with_rates(
                self.spec.skip_final_check_rate,
                self.spec.price_error_rate,
            )),
            BackendChoice::Http => Box::new(Arc::clone(self.http.as_ref().expect("http client built in new"))),
        };
        match (self.spec.record, cassette) {
            (true, Some(path)) => Ok(Box::new(Recorder::create(inner, path)?)),
            _ => Ok(inner),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_parse_inclusively() {
        assert_eq!("0..2".parse::<SeedSet>().unwrap().0, vec![0, 1, 2]);
        assert_eq!("0..=2".parse::<SeedSet>().unwrap().0, vec![0, 1, 2]);
        assert_eq!("4, 9".parse::<SeedSet>().unwrap().0, vec![4, 9]);
        assert!("3..1".parse::<SeedSet>().is_err());
        assert_eq!(SeedSet(vec![0, 1, 2]).to_string(), "0..2");
        assert_eq!(SeedSet(vec![4, 9]).to_string(), "4,9");
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml_str("variants = [\"BASELINE1\"]\nseeds = \"0..2\"", Path::new("/x"), "t").unwrap();
        assert_eq!(cfg.variants, vec![VariantId::Baseline1]);
        assert_eq!(cfg.seeds.0, vec![0, 1, 2]);
        assert_eq!(cfg.outdir, PathBuf::from("/x/runs"));
        assert_eq!(cfg.parse_retries, 1);
        assert_eq!(cfg.npc.temperature, 0.7);
    }

    #[test]
    fn scenario_accepts_number_or_name() {
        let cfg = ExperimentConfig::from_toml_str("scenario = 2", Path::new("."), "t").unwrap();
        assert_eq!(cfg.scenario.0, ScenarioKind::Recommendation);
        let cfg = ExperimentConfig::from_toml_str("scenario = \"SPECIFIC_PURCHASE\"", Path::new("."), "t").unwrap();
        assert_eq!(cfg.scenario.0, ScenarioKind::SpecificPurchase);
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::from_toml_str("[npc]\nbackend = \"http\"", Path::new("."), "t").unwrap_err();
        assert_eq!(err.to_string(), "npc.endpoint: required for the http backend");
        let err = ExperimentConfig::from_toml_str("[npc]\ntemperature = 3.0", Path::new("."), "t").unwrap_err();
        assert!(err.to_string().starts_with("npc.temperature"));
        let err = ExperimentConfig::from_toml_str("bogus = 1", Path::new("."), "t").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn http_without_key_is_auth_error() {
        let spec = BackendSpec {
            backend: BackendChoice::Http,
            endpoint: Some("http://127.0.0.1:9".into()),
            ..BackendSpec::default()
        };
        let err = BackendPool::new(&spec, "npc", &GameWorld::reference(), None).err().unwrap();
        assert!(matches!(err, BackendError::Auth(_)));
    }

    #[test]
    fn cassette_layout() {
        let spec = BackendSpec {
            record: true,
            cassette_dir: Some("/c".into()),
            ..BackendSpec::default()
        };
        let pool = BackendPool::new(&spec, "npc", &GameWorld::reference(), None).unwrap();
        let key = DialogueKey {
            variant: VariantId::Astp,
            kind: ScenarioKind::SpecificPurchase,
            seed: 4,
        };
        assert_eq!(pool.cassette_path(&key).unwrap(), PathBuf::from("/c/npc/ASTP/scenario1/4.jsonl"));
    }
}
