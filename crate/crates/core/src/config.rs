//! Run configuration. Files are JSON objects whose keys are dotted paths
//! (`"model.d_model": 64`); nested objects are accepted too. Command-line
//! `--key value` pairs use the same paths and win over the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::postprocess::BinarizeSpec;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "STRUCTPE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub midi_dir: PathBuf,
    pub labels_dir: PathBuf,
    pub offsets: PathBuf,
    /// Ingested rolls, index files and manifest.
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint to generate from; `<out_dir>/checkpoint.ckpt` when empty.
    pub checkpoint: PathBuf,
    /// Evaluation inputs; `<out_dir>/generated` and `<out_dir>/targets`
    /// when empty.
    pub generated_dir: PathBuf,
    pub target_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            midi_dir: "midi".into(),
            labels_dir: "labels".into(),
            offsets: "offsets.txt".into(),
            corpus_dir: "corpus".into(),
            out_dir: "out".into(),
            checkpoint: PathBuf::new(),
            generated_dir: PathBuf::new(),
            target_dir: PathBuf::new(),
        }
    }
}

impl Paths {
    pub fn checkpoint(&self) -> PathBuf {
        or_default(&self.checkpoint, self.out_dir.join("checkpoint.ckpt"))
    }

    pub fn generated_dir(&self) -> PathBuf {
        or_default(&self.generated_dir, self.out_dir.join("generated"))
    }

    pub fn target_dir(&self) -> PathBuf {
        or_default(&self.target_dir, self.out_dir.join("targets"))
    }
}

fn or_default(p: &Path, default: PathBuf) -> PathBuf {
    if p.as_os_str().is_empty() {
        default
    } else {
        p.to_path_buf()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Track whose highest pitch gives the melody-pitch stream.
    pub melody_track: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { melody_track: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Autoregressive steps after an L1 seed for next-timestep models; 0
    /// gives teacher-forced one-step predictions over the L2 window.
    pub horizon: usize,
    /// Song ids to generate for; all ingested songs when empty.
    pub songs: Vec<String>,
    /// Pick the binarization method per song by MSE against the target.
    pub select: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub ssm_window: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { ssm_window: 32 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    pub rolls: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub ingest: IngestConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub binarize: BinarizeSpec,
    pub generate: GenerateConfig,
    pub metrics: MetricsConfig,
    pub plot: PlotConfig,
}

/// Dotted-path view of nested objects; arrays and scalars are leaves.
pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(map) if !map.is_empty() || prefix.is_empty() => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Result<Value> {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed key `{key}`")));
        }
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("key `{key}` conflicts with a value at `{p}`")))?;
        }
        let last = parts[parts.len() - 1];
        if node.insert(last.to_string(), v.clone()).is_some() {
            return Err(Error::Config(format!("key `{key}` given twice")));
        }
    }
    Ok(Value::Object(root))
}

/// A command-line value: JSON when it parses, a string otherwise.
pub fn parse_override_value(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

impl RunConfig {
    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_value(unflatten(flat)?)
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Reads `path`, applies overrides, then the seed environment variable.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !value.is_object() {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        let mut flat = flatten(&value);
        for (k, v) in overrides {
            flat.insert(k.clone(), parse_override_value(v));
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={seed} is not an unsigned integer")))?;
            flat.insert("seed".into(), Value::from(seed));
        }
        Self::from_flat(&flat)
    }

    /// Derived fields: the PE width follows the model width, learnable
    /// tables cover the longer of L1 and L2, and a task setting tag fixes
    /// the task.
    pub fn resolve(&mut self) -> Result<()> {
        let (l1, l2) = self.train.lengths()?;
        self.model.pe.d_model = self.model.d_model;
        self.model.pe.max_len = l1.max(l2);
        if let Some(task) = self.train.setting.task() {
            self.model.task = task;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.binarize.validate()?;
        if self.metrics.ssm_window == 0 {
            return Err(Error::Config("metrics.ssm_window must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Effective configuration as flat-key JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posenc::Variant;
    use crate::train::SettingTag;

    #[test]
    fn flat_round_trip() {
        let cfg = RunConfig::from_flat(&BTreeMap::new()).unwrap();
        let back = RunConfig::from_flat(&cfg.to_flat()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), cfg.to_json());
    }

    #[test]
    fn overrides_and_derived_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"model.d_model": 32, "model": {"n_heads": 4}, "train.setting": "A2", "train.curriculum": [{"length": 512, "epochs": 1}]}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(
            &path,
            &[("model.pe.variant".into(), "NS-RPE-chord".into()), ("binarize.theta".into(), "0.25".into())],
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.pe.d_model, 32);
        assert_eq!(cfg.model.pe.variant, Variant::NsRpeChord);
        assert_eq!(cfg.model.pe.max_len, 1024);
        assert_eq!(cfg.model.task, crate::model::Task::Accompaniment);
        assert_eq!(cfg.train.setting, SettingTag::A2);
        assert_eq!(cfg.binarize.theta, 0.25);
    }

    #[test]
    fn unknown_and_conflicting_keys_fail() {
        let mut flat = BTreeMap::new();
        flat.insert("model.bogus".to_string(), Value::from(1));
        assert!(RunConfig::from_flat(&flat).is_err());
        let mut flat = BTreeMap::new();
        flat.insert("model".to_string(), Value::from(1));
        flat.insert("model.d_model".to_string(), Value::from(8));
        assert!(unflatten(&flat).is_err());
    }
}
