//! Run configuration: one merged, serializable view of every knob a command
//! can touch. Sources are a flat `key = value` file and command-line
//! overrides, applied in that order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::conditioner::CondMode;
use crate::datakit::SynthSpec;
use crate::error::{Error, Result};
use crate::model::{GenerationConfig, ModelConfig};
use crate::trainer::TrainConfig;

/// Data generation and tokenizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_samples: usize,
    pub min_images: usize,
    pub max_images: usize,
    /// Target size of the BPE vocabulary learned from the training split.
    pub vocab_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_samples: 2000, min_images: 1, max_images: 5, vocab_size: 512 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub generations: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Master seed; copied into the train and generation sections.
    pub seed: u64,
    /// `vocab_size` is filled in from the vocabulary at train time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenerationConfig,
    pub data: DataConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                layers: 2,
                heads: 4,
                dim: 64,
                vocab_size: 0,
                max_pos: 48,
                cond_mode: CondMode::Mantis,
                max_images: 5,
                image_size: crate::datakit::IMAGE_SIZE,
                vision_channels: [16, 32],
                proj_bias: true,
                tied_head: true,
                dropout: 0.1,
            },
            train: TrainConfig::default(),
            gen: GenerationConfig::default(),
            data: DataConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Sets one dotted key such as `train.lr_peak` or `model.vision_channels`.
    /// The value is parsed against the type of the current field: numbers,
    /// booleans, bare strings, and comma-separated lists for arrays.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown key `{}`", key)))?;
        }
        *slot = parse_like(slot, raw.trim()).ok_or_else(|| Error::Config(format!("bad value `{}` for `{}`", raw.trim(), key)))?;
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("`{}`: {}", key, e)))?;
        Ok(())
    }

    /// Applies every `key = value` line of a config text. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", origin.display(), i + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("{}:{}: {}", origin.display(), i + 1, e)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        self.apply_text(&text, path)?;
        self.paths.config = Some(path.to_path_buf());
        Ok(())
    }

    /// Copies the master seed into the sections that consume one.
    pub fn sync_seed(&mut self) {
        self.train.seed = self.seed;
        self.gen.seed = self.seed;
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec { n_samples: self.data.n_samples, seed: self.seed, min_images: self.data.min_images, max_images: self.data.max_images }
    }

    /// Artifact stem shared by a run's checkpoint, report and generations.
    pub fn run_name(&self) -> String {
        format!("{}-{}", self.model.cond_mode.name(), self.seed)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Recovers a config from an artifact's embedded copy.
    pub fn from_json(v: &Value) -> Result<Self> {
        serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("embedded run config: {}", e)))
    }
}

fn parse_like(current: &Value, raw: &str) -> Option<Value> {
    match current {
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().ok().map(Value::from),
        Value::Number(_) => raw.parse::<f64>().ok().filter(|x| x.is_finite()).map(Value::from),
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Null => Some(if raw.is_empty() { Value::Null } else { Value::String(raw.to_string()) }),
        Value::Array(items) => {
            let template = items.first().cloned().unwrap_or(Value::String(String::new()));
            raw.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_like(&template, s.trim())).collect::<Option<Vec<_>>>().map(Value::Array)
        }
        Value::Object(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_typed_fields() {
        let mut c = RunConfig::default();
        c.set("train.lr_peak", "0.001").unwrap();
        c.set("model.cond_mode", "context_attn").unwrap();
        c.set("model.vision_channels", "8, 12").unwrap();
        c.set("train.betas", "0.8,0.99").unwrap();
        c.set("model.tied_head", "false").unwrap();
        c.set("seed", "9").unwrap();
        assert_eq!(c.train.lr_peak, 0.001);
        assert_eq!(c.model.cond_mode, CondMode::ContextAttn);
        assert_eq!(c.model.vision_channels, [8, 12]);
        assert_eq!(c.train.betas, (0.8, 0.99));
        assert!(!c.model.tied_head);
        assert_eq!(c.run_name(), "context_attn-9");
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("train.nope", "1"), Err(Error::Config(_))));
        assert!(matches!(c.set("train.total_steps", "-3"), Err(Error::Config(_))));
        assert!(matches!(c.set("model.cond_mode", "telepathy"), Err(Error::Config(_))));
        assert!(matches!(c.set("train", "1"), Err(Error::Config(_))));
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn file_text_and_round_trip() {
        let mut c = RunConfig::default();
        let text = "# comment\n\nmodel.layers = 3\ngen.strategy=top_k\ngen.k = 5\n";
        c.apply_text(text, Path::new("run.cfg")).unwrap();
        assert_eq!(c.model.layers, 3);
        assert_eq!(c.gen.k, 5);
        let err = c.apply_text("model.layers 3", Path::new("run.cfg")).unwrap_err();
        assert!(err.to_string().contains("run.cfg:1"), "{}", err);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
