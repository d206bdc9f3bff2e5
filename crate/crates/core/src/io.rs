//! Versioned on-disk formats: scenarios, vocabularies, and dataset manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gen::{generate_scenario, GeneratorConfig, Template};
use crate::scalar::Scalar;
use crate::scene::Scenario;
use crate::tokenizer::VocabSet;

pub const SCENARIO_VERSION: u32 = 1;
pub const VOCAB_SET_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn parse_err(what: &str, e: impl ToString) -> Error {
    Error::Parse {
        what: what.to_string(),
        msg: e.to_string(),
    }
}

/// Checks the `version` field before decoding the rest, so an unknown
/// version reports as such rather than as a schema mismatch.
fn from_versioned<D: DeserializeOwned>(text: &str, what: &str, kind: &'static str, expected: u32) -> Result<D> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| parse_err(what, e))?;
    if probe.version != expected {
        return Err(Error::Version {
            kind,
            found: probe.version,
            expected,
        });
    }
    serde_json::from_str(text).map_err(|e| parse_err(what, e))
}

fn to_json<S: Serialize>(doc: &S, what: &str) -> Result<String> {
    serde_json::to_string_pretty(doc).map_err(|e| parse_err(what, e))
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct ScenarioDoc<T: Scalar> {
    version: u32,
    scenario: Scenario<T>,
}

pub fn scenario_to_json<T: Scalar>(s: &Scenario<T>) -> Result<String> {
    to_json(
        &ScenarioDoc {
            version: SCENARIO_VERSION,
            scenario: s.clone(),
        },
        "scenario",
    )
}

pub fn scenario_from_json<T: Scalar>(text: &str, what: &str) -> Result<Scenario<T>> {
    let doc: ScenarioDoc<T> = from_versioned(text, what, "scenario", SCENARIO_VERSION)?;
    doc.scenario.validate()?;
    Ok(doc.scenario)
}

pub fn save_scenario<T: Scalar>(s: &Scenario<T>, path: &Path) -> Result<()> {
    fs::write(path, scenario_to_json(s)?)?;
    Ok(())
}

pub fn load_scenario<T: Scalar>(path: &Path) -> Result<Scenario<T>> {
    scenario_from_json(&fs::read_to_string(path)?, &path.display().to_string())
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct VocabDoc<T: Scalar> {
    version: u32,
    vocabularies: VocabSet<T>,
}

pub fn save_vocab<T: Scalar>(v: &VocabSet<T>, path: &Path) -> Result<()> {
    let doc = VocabDoc {
        version: VOCAB_SET_VERSION,
        vocabularies: v.clone(),
    };
    fs::write(path, to_json(&doc, "vocabulary")?)?;
    Ok(())
}

pub fn load_vocab<T: Scalar>(path: &Path) -> Result<VocabSet<T>> {
    let text = fs::read_to_string(path)?;
    let doc: VocabDoc<T> = from_versioned(&text, &path.display().to_string(), "vocabulary", VOCAB_SET_VERSION)?;
    Ok(doc.vocabularies)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root.
    pub file: String,
    pub sha256: String,
    pub template: Template,
    pub has_injected_speeding: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub generator_config_hash: String,
    pub generator: GeneratorConfig,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn save(&self, root: &Path) -> Result<()> {
        fs::write(root.join(MANIFEST_FILE), to_json(self, "manifest")?)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        from_versioned(&text, &path.display().to_string(), "manifest", MANIFEST_VERSION)
    }

    pub fn split(&self, name: &str) -> Result<&[ManifestEntry]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::InvalidInput(format!("dataset has no split named {name:?}")))
    }

    /// Recomputes every file hash.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for e in self.splits.values().flatten() {
            let got = sha256_hex(&fs::read(root.join(&e.file))?);
            if got != e.sha256 {
                return Err(Error::InvalidInput(format!(
                    "hash mismatch for {}: manifest {}, file {got}",
                    e.file, e.sha256
                )));
            }
        }
        Ok(())
    }

    pub fn load_split<T: Scalar>(&self, root: &Path, name: &str) -> Result<Vec<Scenario<T>>> {
        self.split(name)?
            .iter()
            .map(|e| load_scenario(&root.join(&e.file)))
            .collect()
    }
}

pub fn config_hash(cfg: &GeneratorConfig) -> Result<String> {
    let text = serde_json::to_string(cfg).map_err(|e| parse_err("generator config", e))?;
    Ok(sha256_hex(text.as_bytes()))
}

/// Writes `train/` and `eval/` scenario files plus the manifest under
/// `root`. Eval scenarios draw from generator streams after the training
/// ones, so the splits never share a scenario.
pub fn generate_dataset(cfg: &GeneratorConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut splits = BTreeMap::new();
    for (name, count, offset) in [("train", cfg.num_scenarios, 0), ("eval", cfg.num_eval, cfg.num_scenarios)] {
        let dir: PathBuf = root.join(name);
        fs::create_dir_all(&dir)?;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("{name}-{i:05}");
            let (s, meta) = generate_scenario(cfg, offset + i, &id)?;
            let text = scenario_to_json(&s)?;
            let file = format!("{name}/{id}.json");
            fs::write(root.join(&file), &text)?;
            entries.push(ManifestEntry {
                file,
                sha256: sha256_hex(text.as_bytes()),
                template: meta.template,
                has_injected_speeding: meta.has_injected_speeding,
            });
        }
        log::info!("generated {count} {name} scenarios");
        splits.insert(name.to_string(), entries);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        generator_config_hash: config_hash(cfg)?,
        generator: cfg.clone(),
        splits,
    };
    manifest.save(root)?;
    Ok(manifest)
}
