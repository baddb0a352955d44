//! Run configuration: named presets, JSON documents merged over them, and
//! command-line overrides on top.

use std::path::Path;

use bsnpp::evaluation::EvalConfig;
use bsnpp::model::ModelConfig;
use bsnpp::numerics::derive_seed;
use bsnpp::pipeline::InferenceConfig;
use bsnpp::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const PRESETS: [&str; 3] = ["desk", "paper-activitynet", "paper-thumos"];

/// Synthetic dataset shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_videos: usize,
    /// Snippets per video.
    pub length: usize,
    /// Action instances per video.
    pub n_actions: usize,
    pub n_classes: u32,
    pub amplitude: f64,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    /// Root seed; data, initialisation and training use named sub-seeds of it.
    pub seed: u64,
    pub threads: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// `train.seed` and `train.threads` are replaced by values derived from
    /// the top-level `seed` and `threads`.
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    /// tIoU thresholds of the detection mAP.
    pub detection_thresholds: Vec<f64>,
}

fn range(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|k| ((lo + k as f64 * step) * 1e6).round() / 1e6).collect()
}

impl RunConfig {
    pub fn preset(name: &str) -> CliResult<Self> {
        let desk = RunConfig {
            preset: "desk".into(),
            seed: 0,
            threads: 1,
            data: DataConfig { n_videos: 8, length: 32, n_actions: 2, n_classes: 2, amplitude: 5.0, noise_std: 1.0 },
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::activitynet(),
            detection_thresholds: range(0.5, 0.95, 0.05),
        };
        match name {
            "desk" => Ok(desk),
            "paper-activitynet" => Ok(RunConfig {
                preset: name.into(),
                data: DataConfig { n_videos: 32, length: 400, n_actions: 3, ..desk.data.clone() },
                model: ModelConfig::paper_activitynet(),
                train: TrainConfig::paper(),
                ..desk
            }),
            "paper-thumos" => Ok(RunConfig {
                preset: name.into(),
                data: DataConfig { n_videos: 32, length: 512, n_actions: 4, ..desk.data.clone() },
                model: ModelConfig::paper_thumos(),
                train: TrainConfig::paper(),
                eval: EvalConfig::thumos(),
                detection_thresholds: range(0.3, 0.7, 0.1),
                ..desk
            }),
            other => Err(CliError::Config(format!("preset: unknown preset {other:?}; expected one of {}", PRESETS.join(", ")))),
        }
    }

    /// Preset (flag, then the document's `preset` key, then `desk`), the JSON
    /// document merged over it, then `seed` and `threads` overrides.
    pub fn resolve(preset: Option<&str>, doc: Option<&Path>, seed: Option<u64>, threads: Option<usize>) -> CliResult<Self> {
        let doc = match doc {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                if !v.is_object() {
                    return Err(CliError::Config(format!("{}: config must be a JSON object", path.display())));
                }
                v
            }
            None => Value::Object(Default::default()),
        };
        let name = match (preset, doc.get("preset")) {
            (Some(p), _) => p.to_string(),
            (None, Some(Value::String(p))) => p.clone(),
            (None, Some(other)) => return Err(CliError::Config(format!("preset: expected a string, got {other}"))),
            (None, None) => "desk".to_string(),
        };
        let mut merged = serde_json::to_value(Self::preset(&name)?).expect("config serializes");
        merge(&mut merged, &doc);
        merged["preset"] = Value::String(name);
        if let Some(s) = seed {
            merged["seed"] = s.into();
        }
        if let Some(t) = threads {
            merged["threads"] = t.into();
        }
        Self::from_value(merged)
    }

    /// Deserializes and validates, rejecting keys the schema does not know.
    pub fn from_value(v: Value) -> CliResult<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(&v).map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?;
        let known = serde_json::to_value(&cfg).expect("config serializes");
        if let Some(path) = unknown_key(&v, &known, String::new()) {
            return Err(CliError::Config(format!("{path}: unknown field")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let field = |name: &str, e: bsnpp::Error| CliError::Config(format!("{name}: {e}"));
        self.model.validate().map_err(|e| field("model", e))?;
        self.train_config().validate().map_err(|e| field("train", e))?;
        self.inference.suppression.validate().map_err(|e| field("inference.suppression", e))?;
        self.eval.validate().map_err(|e| field("eval", e))?;
        let bad = |name: &str, msg: String| Err(CliError::Config(format!("{name}: {msg}")));
        if self.threads == 0 {
            return bad("threads", "must be ≥ 1".into());
        }
        let d = &self.data;
        if d.length < self.model.window_len {
            return bad("data.length", format!("must be ≥ model.window_len = {}, got {}", self.model.window_len, d.length));
        }
        if d.n_actions == 0 {
            return bad("data.n_actions", "must be ≥ 1".into());
        }
        if d.n_classes == 0 {
            return bad("data.n_classes", "must be ≥ 1".into());
        }
        if !(d.amplitude.is_finite() && d.noise_std.is_finite() && d.noise_std >= 0.0) {
            return bad("data.noise_std", "amplitude and noise_std must be finite, noise_std ≥ 0".into());
        }
        let t = &self.detection_thresholds;
        if t.is_empty() || t.windows(2).any(|w| !(w[0] < w[1])) || t.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return bad("detection_thresholds", format!("must be non-empty, strictly increasing, in (0, 1]; got {t:?}"));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data")
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }

    /// Training settings with the derived seed and the run's thread count.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, "train"), threads: self.threads, ..self.train.clone() }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Recursive object merge; non-object values in `over` replace those in `base`.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn unknown_key(given: &Value, known: &Value, prefix: String) -> Option<String> {
    let (Value::Object(g), Value::Object(k)) = (given, known) else {
        return None;
    };
    for (key, v) in g {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            None => return Some(path),
            Some(kv) => {
                if let Some(p) = unknown_key(v, kv, path) {
                    return Some(p);
                }
            }
        }
    }
    None
}
