use std::fs;

use drivelab::error::Error;
use drivelab::gen::{expert_is_valid, generate_scenario, GeneratorConfig};
use drivelab::io::{
    generate_dataset, load_scenario, load_vocab, save_scenario, save_vocab, scenario_from_json, scenario_to_json,
    DatasetManifest,
};
use drivelab::reward::{evaluate, RewardConfig};
use drivelab::tokenizer::VocabSet;

fn cfg(rate: f64) -> GeneratorConfig {
    GeneratorConfig {
        speeding_injection_rate: rate,
        ..GeneratorConfig::default()
    }
}

#[test]
fn injection_rate_zero_flags_nothing() {
    let c = cfg(0.0);
    for i in 0..200 {
        let (_, meta) = generate_scenario(&c, i, "s").unwrap();
        assert!(!meta.has_injected_speeding);
    }
}

#[test]
fn injection_rate_matches_configuration() {
    let c = cfg(0.12);
    let flagged = (0..1000)
        .filter(|&i| generate_scenario(&c, i, "s").unwrap().1.has_injected_speeding)
        .count();
    let frac = flagged as f64 / 1000.0;
    assert!((frac - 0.12).abs() <= 0.03, "{frac}");
}

#[test]
fn experts_pass_the_safety_gates_and_speed_only_fails_when_injected() {
    let c = GeneratorConfig {
        speeding_injection_rate: 0.5,
        ..GeneratorConfig::default()
    };
    let rc = RewardConfig::default();
    for i in 0..300 {
        let (s, meta) = generate_scenario(&c, i, "s").unwrap();
        assert!(expert_is_valid(&s, meta.has_injected_speeding, &rc).unwrap());
        let others: Vec<_> = s.agents[1..].iter().map(|a| a.future.clone().unwrap()).collect();
        let b = evaluate(&s, s.ego().future.as_ref().unwrap(), &others, &rc).unwrap();
        assert!(b.is_safe());
        assert_eq!(b.speed() < 1.0, meta.has_injected_speeding, "scenario {i}");
    }
}

#[test]
fn generation_is_deterministic() {
    let c = GeneratorConfig::default();
    for i in [0, 7, 123] {
        assert_eq!(generate_scenario(&c, i, "x").unwrap(), generate_scenario(&c, i, "x").unwrap());
    }
    let bad = GeneratorConfig {
        obstacle_rate: 1.5,
        ..GeneratorConfig::default()
    };
    assert!(generate_scenario(&bad, 0, "x").is_err());
}

#[test]
fn scenarios_round_trip_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let c = GeneratorConfig::default();
    for i in 0..20 {
        let (s, _) = generate_scenario(&c, i, &format!("s{i}")).unwrap();
        let path = dir.path().join(format!("{i}.json"));
        save_scenario(&s, &path).unwrap();
        let back = load_scenario::<f64>(&path).unwrap();
        assert_eq!(back, s);
    }
}

#[test]
fn unknown_version_and_truncation_are_reported() {
    let (s, _) = generate_scenario(&GeneratorConfig::default(), 0, "s").unwrap();
    let text = scenario_to_json(&s).unwrap();
    let bumped = text.replacen("\"version\": 1", "\"version\": 99", 1);
    match scenario_from_json::<f64>(&bumped, "bumped") {
        Err(Error::Version { found: 99, expected: 1, .. }) => {}
        other => panic!("expected a version error, got {other:?}"),
    }
    let cut = &text[..text.len() / 2];
    match scenario_from_json::<f64>(cut, "cut") {
        Err(Error::Parse { what, msg }) => {
            assert_eq!(what, "cut");
            assert!(msg.contains("line"), "{msg}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn dataset_manifest_verifies_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let c = GeneratorConfig {
        num_scenarios: 12,
        num_eval: 4,
        ..GeneratorConfig::default()
    };
    let m = generate_dataset(&c, dir.path()).unwrap();
    let loaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(loaded, m);
    loaded.verify(dir.path()).unwrap();
    let train = loaded.load_split::<f64>(dir.path(), "train").unwrap();
    let eval = loaded.load_split::<f64>(dir.path(), "eval").unwrap();
    assert_eq!((train.len(), eval.len()), (12, 4));
    assert!(train.iter().all(|s| eval.iter().all(|e| e.agents != s.agents)));
    assert!(loaded.split("test").is_err());

    // Same config, same bytes.
    let again = tempfile::tempdir().unwrap();
    assert_eq!(generate_dataset(&c, again.path()).unwrap(), m);

    let first = dir.path().join(&m.splits["train"][0].file);
    let text = fs::read_to_string(&first).unwrap();
    fs::write(&first, text.replacen("\"version\": 1", "\"version\":1", 1)).unwrap();
    assert!(loaded.verify(dir.path()).is_err());

    let vocab = VocabSet::build(train.iter().flat_map(|s| s.agents.iter()), 0.5, 16, 0).unwrap();
    let vpath = dir.path().join("vocab.json");
    save_vocab(&vocab, &vpath).unwrap();
    assert_eq!(load_vocab::<f64>(&vpath).unwrap(), vocab);
}
