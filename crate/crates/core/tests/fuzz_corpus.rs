//! Runs the fuzz targets' invariants over their seed corpora and every
//! prefix of each seed, so the properties are exercised on stable too.

use std::path::PathBuf;

use tradeflow::backend::parse_cassette;
use tradeflow::game_world::parse_world;
use tradeflow::prompt::{PromptVariant, TemplateStore, VariantId};
use tradeflow::response::parse_response;
use tradeflow::simulation::parse_transcript;
use tradeflow::state_machine::TransitionPolicy;

fn corpus(target: &str) -> Vec<String> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let seeds: Vec<String> = files.iter().map(|p| std::fs::read_to_string(p).unwrap()).collect();
    assert!(!seeds.is_empty(), "empty corpus for {target}");
    seeds
}

/// The seed itself plus up to `max` prefixes cut at char boundaries.
fn prefixes(seed: &str, max: usize) -> impl Iterator<Item = &str> {
    let cuts: Vec<usize> = seed.char_indices().map(|(i, _)| i).collect();
    let step = (cuts.len() / max).max(1);
    cuts.into_iter().step_by(step).map(move |i| &seed[..i]).chain([seed])
}

#[test]
fn parse_response_roundtrips() {
    for seed in corpus("parse_response") {
        for input in prefixes(&seed, 400) {
            for id in [VariantId::Baseline1, VariantId::Astp, VariantId::AstpNoPpp] {
                let v = PromptVariant::of(id);
                if let Some(r) = parse_response(input, &v).response {
                    let again = parse_response(&r.to_json().to_string(), &v);
                    assert_eq!(again.response.map(|x| x.state()), Some(r.state()), "{input:?}");
                }
            }
        }
    }
}

#[test]
fn world_roundtrips() {
    for seed in corpus("parse_world") {
        let world = parse_world(&seed).expect("seed world parses");
        assert_eq!(parse_world(&world.to_json()).unwrap(), world);
        for input in prefixes(&seed, 300) {
            let _ = parse_world(input);
        }
    }
}

#[test]
fn policy_roundtrips() {
    for seed in corpus("policy_toml") {
        for input in prefixes(&seed, 300) {
            if let Ok(p) = TransitionPolicy::from_toml_str(input) {
                assert_eq!(TransitionPolicy::from_toml_str(&p.to_toml_string()).unwrap(), p);
            }
        }
    }
}

#[test]
fn transcripts_read_back() {
    for seed in corpus("parse_transcript") {
        parse_transcript(&seed).expect("seed transcript parses");
        for input in prefixes(&seed, 200) {
            if let Ok(t) = parse_transcript(input) {
                parse_transcript(&t.to_jsonl()).expect("written transcript reads back");
            }
        }
    }
}

#[test]
fn cassettes_parse() {
    for seed in corpus("parse_cassette") {
        assert!(!parse_cassette(&seed).unwrap().is_empty());
        for input in prefixes(&seed, 300) {
            let _ = parse_cassette(input);
        }
    }
}

#[test]
fn manifests_load_or_fail_cleanly() {
    for seed in corpus("template_manifest") {
        let mut parts = seed.splitn(3, '\0');
        let (m, p, s) = (parts.next().unwrap(), parts.next().unwrap_or_default(), parts.next().unwrap_or_default());
        for input in prefixes(m, 200) {
            let _ = TemplateStore::from_sources(input, p, |_| Some(Ok(s.to_string())));
        }
    }
}
