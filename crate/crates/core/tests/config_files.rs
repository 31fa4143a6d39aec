use std::path::PathBuf;

use tradeflow::config::{BackendChoice, ExperimentConfig, PlayerKind};
use tradeflow::simulation::ScenarioKind;
use tradeflow::state_machine::default_policy;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_policy_matches_builtin() {
    let cfg = ExperimentConfig::load(configs().join("rule_merchant.toml")).unwrap();
    let policy = cfg.load_policy().unwrap();
    assert_eq!(policy, default_policy());
}

#[test]
fn rule_config_loads() {
    let cfg = ExperimentConfig::load(configs().join("rule_merchant.toml")).unwrap();
    assert_eq!(cfg.npc.backend, BackendChoice::Rule);
    assert_eq!(cfg.seeds.0.len(), 20);
    assert_eq!(cfg.plan().keys().len(), 60);
    assert!(cfg.npc.cassette_dir.as_ref().unwrap().starts_with(configs()));
}

#[test]
fn hosted_config_loads() {
    let cfg = ExperimentConfig::load(configs().join("hosted.toml")).unwrap();
    assert_eq!(cfg.scenario.0, ScenarioKind::SpecificPurchase);
    assert_eq!(cfg.npc.backend, BackendChoice::Http);
    assert_eq!(cfg.player.kind, PlayerKind::Llm);
    assert_eq!(cfg.seeds.0.len(), 300);
}
