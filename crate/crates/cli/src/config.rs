//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use merge_gate_core::control::TrainConfig;
use merge_gate_core::data::TaskSpec;
use merge_gate_core::model::{Baseline, DeletionMode, ModelConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Held-out evaluation run during and after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default = "default_eval_count")]
    pub count: usize,
    #[serde(default = "default_eval_mode")]
    pub mode: DeletionMode,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    #[serde(default = "default_timing_runs")]
    pub timing_runs: usize,
}

fn default_eval_count() -> usize {
    512
}
fn default_eval_mode() -> DeletionMode {
    DeletionMode::Hard
}
fn default_eval_batch() -> usize {
    64
}
fn default_timing_runs() -> usize {
    5
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            count: default_eval_count(),
            mode: default_eval_mode(),
            batch_size: default_eval_batch(),
            timing_runs: default_timing_runs(),
        }
    }
}

/// The file format read by `--config`.
///
/// `model` holds overrides applied to the tiny preset; its `gate_layer` may be
/// a list, which expands into one run per entry. `vocab_size` defaults to the
/// task vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    #[serde(default)]
    pub model: Option<Value>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Overrides `model.baseline`.
    #[serde(default)]
    pub baseline: Option<Baseline>,
    /// Train on this ndjson file instead of the generated stream.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub eval: Option<EvalSettings>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Seeds model initialisation and the example stream.
    #[serde(default)]
    pub seed: u64,
}

/// A fully expanded single run, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedRun {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub eval: Option<EvalSettings>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    fn check_paths(&self) -> Result<()> {
        if let TaskSpec::SpanCorruption { corpus, .. } = &self.task {
            if !corpus.is_file() {
                bail!("corpus {} does not exist", corpus.display());
            }
        }
        if let Some(d) = &self.dataset {
            if !d.is_file() {
                bail!("dataset {} does not exist", d.display());
            }
        }
        Ok(())
    }

    /// Model configurations, one per swept gate layer.
    pub fn model_configs(&self) -> Result<Vec<ModelConfig>> {
        let vocab = self.task.vocab().size();
        let mut base = serde_json::to_value(ModelConfig::tiny(vocab))?;
        let overrides = match &self.model {
            None => serde_json::Map::new(),
            Some(Value::Object(m)) => m.clone(),
            Some(other) => bail!("model must be an object, got {other}"),
        };
        let layers: Vec<Option<Value>> = match overrides.get("gate_layer") {
            Some(Value::Array(xs)) if xs.is_empty() => bail!("gate_layer list is empty"),
            Some(Value::Array(xs)) => xs.iter().cloned().map(Some).collect(),
            _ => vec![None],
        };
        let obj = base.as_object_mut().expect("model config serialises to an object");
        for (k, v) in overrides {
            obj.insert(k, v);
        }
        let mut out = Vec::new();
        for layer in layers {
            let mut v = base.clone();
            if let Some(l) = layer {
                v["gate_layer"] = l;
            }
            let mut cfg: ModelConfig = serde_json::from_value(v).context("model section")?;
            if let Some(b) = &self.baseline {
                cfg.baseline = b.clone();
            }
            if cfg.vocab_size != vocab {
                bail!("model vocab_size {} does not match the task vocabulary {}", cfg.vocab_size, vocab);
            }
            cfg.validate()?;
            out.push(cfg);
        }
        Ok(out)
    }

    /// Expands the config into runs rooted at `out_dir`.
    pub fn resolve(&self, out_dir: &Path) -> Result<Vec<ResolvedRun>> {
        let train = self.train.clone().context("config has no train section")?;
        train.validate()?;
        let models = self.model_configs()?;
        let sweep = models.len() > 1;
        let mut layers: Vec<usize> = models.iter().map(|m| m.gate_layer).collect();
        layers.sort_unstable();
        layers.dedup();
        if layers.len() != models.len() {
            bail!("gate_layer list has duplicates");
        }
        Ok(models
            .into_iter()
            .map(|model| ResolvedRun {
                out_dir: if sweep { out_dir.join(format!("gate_layer_{}", model.gate_layer)) } else { out_dir.to_path_buf() },
                task: self.task.clone(),
                model,
                train: train.clone(),
                dataset: self.dataset.clone(),
                eval: self.eval.clone(),
                seed: self.seed,
            })
            .collect())
    }
}
