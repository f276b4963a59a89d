//! Two-phase SGD-with-momentum training and hyperparameter grid search.
//!
//! Phase 1 fits every layer on the task loss with clean inputs. Phase 2
//! (stability and augmentation modes) freezes the convolutional layers and
//! fine-tunes the rest on the mode's objective.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::dataset::LabeledExample;
use crate::distortions::GaussianSampler;
use crate::error::{Error, Result};
use crate::network::{Model, ModelParams};
use crate::objectives::{self, StabilityConfig, StepOutput, Triplet};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Triplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Baseline,
    Stability,
    Augmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    StabilityFinetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Phase-2 learning rate; falls back to `learning_rate`.
    pub finetune_learning_rate: Option<f64>,
    pub momentum: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    /// Layers held fixed in phase 2; defaults to everything before the last
    /// dense layer.
    pub freeze: Option<BTreeSet<String>>,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            finetune_learning_rate: None,
            momentum: 0.9,
            batch_size: 32,
            pretrain_steps: 300,
            finetune_steps: 100,
            freeze: None,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = |v: f64| v.is_finite() && v > 0.0;
        if !lr_ok(self.learning_rate) || !self.finetune_learning_rate.is_none_or(lr_ok) {
            return Err(Error::config("learning rates must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.pretrain_steps == 0 {
            return Err(Error::config("pretrain steps must be positive"));
        }
        Ok(())
    }

    pub fn finetune_lr(&self) -> f64 {
        self.finetune_learning_rate.unwrap_or(self.learning_rate)
    }
}

/// Training inputs for either task.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Labeled(&'a [LabeledExample]),
    Triplets(&'a [Triplet]),
}

impl TrainData<'_> {
    fn len(&self) -> usize {
        match self {
            TrainData::Labeled(v) => v.len(),
            TrainData::Triplets(v) => v.len(),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            TrainData::Labeled(_) => Task::Classification,
            TrainData::Triplets(_) => Task::Triplet,
        }
    }
}

/// Everything besides the data that shapes a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub optimizer: OptimizerConfig,
    pub stability: StabilityConfig,
    pub mode: TrainMode,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub task_loss: f64,
    pub stability_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Model,
    pub history: Vec<HistoryRecord>,
    /// Number of Gaussian perturbations drawn during the run.
    pub perturbation_calls: usize,
}

/// Momentum buffers aligned with a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(Vec<Tensor>);

impl Velocity {
    pub fn zeros(params: &ModelParams) -> Self {
        Self(params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect())
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.0[index]
    }
}

/// `v ← μv − λg; θ ← θ + v` for every unfrozen tensor.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grads: &Gradients,
    velocity: &mut Velocity,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    if velocity.0.len() != params.len() {
        return Err(TensorError::Contract(format!(
            "velocity has {} tensors for {} parameters",
            velocity.0.len(),
            params.len()
        ))
        .into());
    }
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if params.is_frozen(id) {
            continue;
        }
        let name = params.name(id).to_string();
        let g = grads
            .get(id)
            .ok_or_else(|| TensorError::Contract(format!("no gradient for {name}")))?;
        let v = &mut velocity.0[id.0];
        let theta = params.get_mut(id);
        if g.shape() != theta.shape() || v.shape() != theta.shape() {
            return Err(TensorError::Contract(format!(
                "{name}: gradient {:?} / velocity {:?} vs parameter {:?}",
                g.shape(),
                v.shape(),
                theta.shape()
            ))
            .into());
        }
        for ((t, vi), gi) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi - learning_rate * gi;
            *t += *vi;
        }
    }
    Ok(())
}

const BATCH_STREAM: u64 = 0;
const NOISE_SALT: u64 = 0x5ee_d0f0_015e;

struct Loop<'a> {
    data: TrainData<'a>,
    settings: &'a TrainSettings,
    history: Vec<HistoryRecord>,
    perturbation_calls: usize,
}

impl Loop<'_> {
    fn example_step(&mut self, model: &Model, phase: Phase, index: usize, noise_stream: u64) -> Result<StepOutput> {
        let s = self.settings;
        let mode = if phase == Phase::Pretrain { TrainMode::Baseline } else { s.mode };
        if mode == TrainMode::Baseline {
            return match self.data {
                TrainData::Labeled(v) => objectives::task_step_classification(model, &v[index].image, v[index].label),
                TrainData::Triplets(v) => objectives::task_step_triplet(model, &v[index], s.margin),
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(s.optimizer.seed ^ NOISE_SALT);
        rng.set_stream(noise_stream);
        let mut sampler = GaussianSampler::new(s.stability.sigma, rng)?;
        let out = match (self.data, mode) {
            (TrainData::Labeled(v), TrainMode::Stability) => {
                objectives::stability_step_classification(model, &v[index].image, v[index].label, &s.stability, &mut sampler)
            }
            (TrainData::Labeled(v), _) => {
                objectives::augmentation_step_classification(model, &v[index].image, v[index].label, &mut sampler)
            }
            (TrainData::Triplets(v), TrainMode::Stability) => {
                objectives::stability_step_triplet(model, &v[index], &s.stability, s.margin, &mut sampler)
            }
            (TrainData::Triplets(v), _) => objectives::augmentation_step_triplet(model, &v[index], s.margin, &mut sampler),
        }?;
        self.perturbation_calls += sampler.calls();
        Ok(out)
    }

    fn run_phase(&mut self, model: &mut Model, phase: Phase, steps: usize, lr: f64) -> Result<()> {
        let opt = &self.settings.optimizer;
        let mut velocity = Velocity::zeros(model.params());
        let mut batch_rng = ChaCha8Rng::seed_from_u64(opt.seed);
        batch_rng.set_stream(BATCH_STREAM + phase as u64);
        let n = self.data.len();
        let b = opt.batch_size;
        for step in 0..steps {
            let mut sum: Option<Gradients> = None;
            let (mut loss, mut task, mut stab) = (0.0, 0.0, 0.0);
            for slot in 0..b {
                let index = batch_rng.random_range(0..n);
                let stream = ((phase as u64) << 48) | (step * b + slot) as u64;
                let out = self.example_step(model, phase, index, stream)?;
                loss += out.loss;
                task += out.task_loss;
                stab += out.stability_loss;
                match &mut sum {
                    Some(acc) => acc.add_scaled(&out.gradients, 1.0)?,
                    None => sum = Some(out.gradients),
                }
            }
            let mut grads = sum.expect("batch size is positive");
            let inv = 1.0 / b as f64;
            grads.scale(inv);
            sgd_momentum_step(model.params_mut(), &grads, &mut velocity, lr, opt.momentum)?;
            let record = HistoryRecord {
                step: self.history.len() + 1,
                phase,
                loss: loss * inv,
                task_loss: task * inv,
                stability_loss: stab * inv,
            };
            if !record.loss.is_finite() {
                return Err(Error::Tensor(TensorError::NonFinite("training loss")));
            }
            self.history.push(record);
        }
        Ok(())
    }
}

fn check(data: &TrainData<'_>, settings: &TrainSettings) -> Result<()> {
    settings.optimizer.validate()?;
    settings.stability.validate()?;
    if data.len() == 0 {
        return Err(Error::data("training set is empty"));
    }
    if data.task() == Task::Triplet && !(settings.margin.is_finite() && settings.margin > 0.0) {
        return Err(Error::config(format!("triplet margin must be > 0, got {}", settings.margin)));
    }
    Ok(())
}

/// Phase 1: every layer on the task loss, clean inputs.
pub fn pretrain(mut model: Model, data: TrainData<'_>, settings: &TrainSettings) -> Result<TrainRun> {
    check(&data, settings)?;
    model.params_mut().set_frozen(BTreeSet::new())?;
    let mut lp = Loop {
        data,
        settings,
        history: Vec::new(),
        perturbation_calls: 0,
    };
    let opt = &settings.optimizer;
    lp.run_phase(&mut model, Phase::Pretrain, opt.pretrain_steps, opt.learning_rate)?;
    Ok(TrainRun {
        model,
        history: lp.history,
        perturbation_calls: lp.perturbation_calls,
    })
}

/// Phase 2 on top of a finished phase 1; a no-op in baseline mode.
pub fn finetune(run: TrainRun, data: TrainData<'_>, settings: &TrainSettings) -> Result<TrainRun> {
    check(&data, settings)?;
    if settings.mode == TrainMode::Baseline {
        return Ok(run);
    }
    let TrainRun {
        mut model,
        history,
        perturbation_calls,
    } = run;
    let mask = match &settings.optimizer.freeze {
        Some(m) => m.clone(),
        None => model.spec().finetune_freeze_mask()?,
    };
    model.params_mut().set_frozen(mask)?;
    let mut lp = Loop {
        data,
        settings,
        history,
        perturbation_calls,
    };
    let opt = &settings.optimizer;
    lp.run_phase(&mut model, Phase::StabilityFinetune, opt.finetune_steps, opt.finetune_lr())?;
    Ok(TrainRun {
        model,
        history: lp.history,
        perturbation_calls: lp.perturbation_calls,
    })
}

pub fn train(model: Model, data: TrainData<'_>, settings: &TrainSettings) -> Result<TrainRun> {
    let run = pretrain(model, data, settings)?;
    finetune(run, data, settings)
}

/// Closed search range for one hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub start: f64,
    pub end: f64,
}

impl Range {
    pub fn contains(&self, v: f64) -> bool {
        (self.start..=self.end).contains(&v)
    }

    /// `n` geometrically spaced values with exact endpoints.
    pub fn geometric(&self, n: usize) -> Vec<f64> {
        match n {
            0 => Vec::new(),
            1 => vec![self.start],
            _ => (0..n)
                .map(|i| match i {
                    0 => self.start,
                    i if i == n - 1 => self.end,
                    i => self.start * (self.end / self.start).powf(i as f64 / (n - 1) as f64),
                })
                .collect(),
        }
    }
}

pub const SIGMA_RANGE: Range = Range { start: 0.01, end: 0.4 };
pub const ALPHA_RANGE: Range = Range { start: 0.001, end: 1.0 };
pub const LEARNING_RATE_RANGE: Range = Range { start: 0.001, end: 0.1 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub sigma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub learning_rate: Vec<f64>,
    /// Reject values outside the default search ranges.
    pub enforce_ranges: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            sigma: SIGMA_RANGE.geometric(3),
            alpha: ALPHA_RANGE.geometric(3),
            learning_rate: LEARNING_RATE_RANGE.geometric(3),
            enforce_ranges: true,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, values, range) in [
            ("sigma", &self.sigma, SIGMA_RANGE),
            ("alpha", &self.alpha, ALPHA_RANGE),
            ("learning_rate", &self.learning_rate, LEARNING_RATE_RANGE),
        ] {
            if values.is_empty() {
                return Err(Error::config(format!("grid {name} list is empty")));
            }
            for &v in values {
                if !(v.is_finite() && v >= 0.0) || (name == "learning_rate" && v <= 0.0) {
                    return Err(Error::config(format!("grid {name} value {v} is invalid")));
                }
                if self.enforce_ranges && !range.contains(v) {
                    return Err(Error::config(format!(
                        "grid {name} value {v} outside [{}, {}]",
                        range.start, range.end
                    )));
                }
            }
        }
        Ok(())
    }

    /// Cells in σ-major, then α, then λ order.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &sigma in &self.sigma {
            for &alpha in &self.alpha {
                for &learning_rate in &self.learning_rate {
                    out.push(GridCell { sigma, alpha, learning_rate });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub sigma: f64,
    pub alpha: f64,
    /// Phase-2 learning rate.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub rank: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub value: f64,
}

/// Settings for one grid cell.
pub fn cell_settings(base: &TrainSettings, cell: &GridCell) -> TrainSettings {
    let mut s = base.clone();
    s.stability.sigma = cell.sigma;
    s.stability.alpha = cell.alpha;
    s.optimizer.finetune_learning_rate = Some(cell.learning_rate);
    s
}

/// Runs phase 2 and `evaluate` for every cell on top of one shared phase 1
/// and ranks the cells by descending metric (grid order breaks ties).
pub fn grid_search(
    model: Model,
    data: TrainData<'_>,
    base: &TrainSettings,
    grid: &GridSpec,
    mut evaluate: impl FnMut(&Model) -> Result<f64>,
) -> Result<Vec<GridRow>> {
    grid.validate()?;
    let pre = pretrain(model, data, base)?;
    let mut rows = Vec::new();
    for cell in grid.cells() {
        let run = finetune(pre.clone(), data, &cell_settings(base, &cell))?;
        let value = evaluate(&run.model)?;
        rows.push(GridRow {
            rank: 0,
            sigma: cell.sigma,
            alpha: cell.alpha,
            learning_rate: cell.learning_rate,
            value,
        });
    }
    rows.sort_by(|a, b| b.value.total_cmp(&a.value));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(rows)
}
