//! Run configuration: strict JSON plus flat command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use stabletrain_core::dataset::{generate_corpus, read_corpus, CorpusSpec, LabeledExample};
use stabletrain_core::distortions::{Distortion, DistortionSpec};
use stabletrain_core::evaluation::EvalConfig;
use stabletrain_core::network::{Head, InputShape, LayerSpec, DEFAULT_EMBEDDING_DIM};
use stabletrain_core::objectives::{DistanceForm, StabilityConfig, TripletLossConfig};
use stabletrain_core::trainer::{GridSpec, OptimizerConfig, Task, TrainMode, TrainSettings};

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Generate(CorpusSpec),
    Dir(PathBuf),
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Generate(CorpusSpec::default())
    }
}

impl CorpusSource {
    pub fn load(&self) -> Result<Vec<LabeledExample>, Failure> {
        match self {
            CorpusSource::Generate(spec) => Ok(generate_corpus(spec)?),
            CorpusSource::Dir(dir) => {
                if !dir.is_dir() {
                    return Err(Failure::data(format!("corpus directory {} does not exist", dir.display())));
                }
                Ok(read_corpus(dir)?)
            }
        }
    }
}

/// Stability knobs as written; `None` means "not set" so baseline runs can
/// warn about values they ignore.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySection {
    pub alpha: Option<f64>,
    pub sigma: Option<f64>,
    pub distance_form: Option<DistanceForm>,
}

impl StabilitySection {
    pub fn resolve(&self) -> StabilityConfig {
        let d = StabilityConfig::default();
        StabilityConfig {
            alpha: self.alpha.unwrap_or(d.alpha),
            sigma: self.sigma.unwrap_or(d.sigma),
            distance_form: self.distance_form.unwrap_or(d.distance_form),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_train_triplets() -> usize {
    300
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    /// Defaults to the standard conv stack sized to the corpus.
    #[serde(default)]
    pub architecture: Option<LayerSpec>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub stability: StabilitySection,
    #[serde(default)]
    pub triplet_loss: TripletLossConfig,
    #[serde(default)]
    pub corpus: CorpusSource,
    /// Defaults to the training corpus; a generated corpus gets seed + 1.
    #[serde(default)]
    pub eval_corpus: Option<CorpusSource>,
    #[serde(default = "default_train_triplets")]
    pub train_triplets: usize,
    /// Distortion tags such as `jpeg-50` or `crop-2`.
    #[serde(default)]
    pub distortions: Vec<String>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_task() -> Task {
    Task::Classification
}

fn default_mode() -> TrainMode {
    TrainMode::Stability
}

/// Flat overrides collected from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub pairs: Vec<(String, Value)>,
}

impl Overrides {
    pub fn set(&mut self, key: &str, value: Value) {
        self.pairs.push((key.to_string(), value));
    }

    /// `key.path=value`; the value is read as JSON and falls back to a string.
    pub fn parse_assignment(&mut self, text: &str) -> Result<(), Failure> {
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| Failure::validation(format!("--set expects key=value, got '{text}'")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        self.set(k.trim(), value);
        Ok(())
    }

    fn apply(&self, root: &mut Value) -> Result<(), Failure> {
        for (key, value) in &self.pairs {
            let mut node = &mut *root;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Failure::validation(format!("override '{key}': '{part}' is not inside an object")))?;
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
            }
        }
        Ok(())
    }
}

/// Loads the config file (or `{}`), applies overrides, then parses strictly.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, Failure> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::validation(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::validation(format!("config {}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(Failure::validation("config must be a JSON object"));
    }
    for section in ["optimizer", "eval"] {
        if root.get(section).and_then(|s| s.get("seed")).is_some() {
            return Err(Failure::validation(format!("{section}.seed is derived from the top-level seed; set that instead")));
        }
    }
    overrides.apply(&mut root)?;
    let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Failure::validation(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Failure> {
        self.optimizer.validate()?;
        self.stability.resolve().validate()?;
        self.triplet_loss.validate()?;
        self.distortion_specs()?;
        if let CorpusSource::Generate(spec) = &self.corpus {
            spec.validate()?;
        }
        if let Some(CorpusSource::Generate(spec)) = &self.eval_corpus {
            spec.validate()?;
        }
        if let Some(arch) = &self.architecture {
            arch.plan()?;
            let head_ok = matches!(
                (self.task, arch.head),
                (Task::Classification, Head::Classifier { .. }) | (Task::Triplet, Head::Embedding { .. })
            );
            if !head_ok {
                return Err(Failure::validation(format!("head {} does not fit task {:?}", arch.head, self.task)));
            }
        }
        if self.task == Task::Triplet && self.train_triplets == 0 {
            return Err(Failure::validation("train_triplets must be positive"));
        }
        Ok(())
    }

    /// Values in the `stability` section that a baseline run ignores.
    pub fn ignored_stability_keys(&self) -> Vec<&'static str> {
        if self.mode != TrainMode::Baseline {
            return Vec::new();
        }
        let mut keys = Vec::new();
        if self.stability.alpha.is_some() {
            keys.push("alpha");
        }
        if self.stability.sigma.is_some() {
            keys.push("sigma");
        }
        keys
    }

    /// Hex sha256 of the canonical config. The output directory is left out
    /// so that relocating a run does not change its identity.
    pub fn digest(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canon).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn distortion_specs(&self) -> Result<Vec<DistortionSpec>, Failure> {
        self.distortions
            .iter()
            .map(|t| Ok(DistortionSpec::new(t.parse::<Distortion>()?, self.seed)))
            .collect()
    }

    pub fn eval_config(&self) -> EvalConfig {
        let mut e = self.eval.clone();
        e.seed = self.seed;
        e
    }

    pub fn train_settings(&self) -> TrainSettings {
        let mut optimizer = self.optimizer.clone();
        optimizer.seed = self.seed;
        TrainSettings {
            optimizer,
            stability: self.stability.resolve(),
            mode: self.mode,
            margin: self.triplet_loss.margin,
        }
    }

    pub fn eval_source(&self) -> CorpusSource {
        match (&self.eval_corpus, &self.corpus) {
            (Some(src), _) => src.clone(),
            (None, CorpusSource::Generate(spec)) => {
                CorpusSource::Generate(CorpusSpec { seed: spec.seed.wrapping_add(1), ..spec.clone() })
            }
            (None, dir) => dir.clone(),
        }
    }

    /// Architecture for a corpus whose first image has the given shape.
    pub fn architecture_for(&self, input: InputShape, num_classes: usize) -> Result<LayerSpec, Failure> {
        let spec = match &self.architecture {
            Some(a) => a.clone(),
            None => {
                let head = match self.task {
                    Task::Classification => Head::Classifier { num_classes },
                    Task::Triplet => Head::Embedding { dim: DEFAULT_EMBEDDING_DIM },
                };
                LayerSpec { input, ..LayerSpec::desk_default(head) }
            }
        };
        if spec.input != input {
            return Err(Failure::validation(format!(
                "architecture expects {}×{}×{} images but the corpus has {}×{}×{}",
                spec.input.width, spec.input.height, spec.input.channels, input.width, input.height, input.channels
            )));
        }
        spec.plan()?;
        Ok(spec)
    }
}
