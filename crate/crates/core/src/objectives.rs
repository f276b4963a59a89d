//! Task losses, stability losses and the combined per-example steps.
//!
//! Every loss is built on a [`Tape`] so gradients reach the model parameters
//! through both the clean and the perturbed forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::distortions::GaussianSampler;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{Model, Prediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceForm {
    /// `Σ P(y|x) log(P(y|x) / P(y|x′))`
    #[default]
    KlForm,
    /// `−Σ P(y|x) log P(y|x′)`
    CrossEntropyForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub alpha: f64,
    pub sigma: f64,
    #[serde(default)]
    pub distance_form: DistanceForm,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            sigma: 0.2,
            distance_form: DistanceForm::KlForm,
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config(format!("alpha must be finite and ≥ 0, got {}", self.alpha)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::config(format!("sigma must be finite and ≥ 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletLossConfig {
    pub margin: f64,
}

impl Default for TripletLossConfig {
    fn default() -> Self {
        Self { margin: 0.1 }
    }
}

impl TripletLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::config(format!("triplet margin must be > 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Query, positive and negative images of equal dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub q: Image,
    pub p: Image,
    pub n: Image,
}

impl Triplet {
    pub fn new(q: Image, p: Image, n: Image) -> Result<Self> {
        if !q.same_dims(&p) || !q.same_dims(&n) {
            return Err(Error::config("triplet images must share dimensions"));
        }
        Ok(Self { q, p, n })
    }
}

/// `−log P(label | x)`.
pub fn cross_entropy_loss(tape: &mut Tape, pred: &Prediction, label: usize) -> Result<NodeId> {
    let classes = pred.probabilities.len();
    if label >= classes {
        return Err(Error::data(format!("label {label} out of range for {classes} classes")));
    }
    let lp = tape.select(pred.log_probs_node, label)?;
    Ok(tape.scale(lp, -1.0)?)
}

/// `max(0, g + ‖q − p‖ − ‖q − n‖)` on embedding nodes.
pub fn triplet_hinge_loss(tape: &mut Tape, fq: NodeId, fp: NodeId, fn_: NodeId, margin: f64) -> Result<NodeId> {
    let dp = l2_stability_loss(tape, fq, fp)?;
    let dn = l2_stability_loss(tape, fq, fn_)?;
    let gap = tape.sub(dp, dn)?;
    let z = tape.add_scalar(gap, margin)?;
    Ok(tape.relu(z)?)
}

/// `‖a − b‖₂`.
pub fn l2_stability_loss(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = tape.sub(a, b)?;
    Ok(tape.l2_norm(d)?)
}

pub fn classification_stability_loss(
    tape: &mut Tape,
    px: &Prediction,
    px_prime: &Prediction,
    form: DistanceForm,
) -> Result<NodeId> {
    let inner = match form {
        DistanceForm::CrossEntropyForm => {
            let prod = tape.mul(px.probs_node, px_prime.log_probs_node)?;
            let s = tape.sum(prod)?;
            return Ok(tape.scale(s, -1.0)?);
        }
        DistanceForm::KlForm => tape.sub(px.log_probs_node, px_prime.log_probs_node)?,
    };
    let prod = tape.mul(px.probs_node, inner)?;
    Ok(tape.sum(prod)?)
}

/// Result of one per-example objective evaluation.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub task_loss: f64,
    pub stability_loss: f64,
    pub gradients: Gradients,
}

fn finish(tape: &Tape, total: NodeId, task: NodeId, stability: Option<NodeId>) -> Result<StepOutput> {
    let scalar = |n: NodeId| tape.scalar(n).expect("losses are scalar nodes");
    Ok(StepOutput {
        loss: scalar(total),
        task_loss: scalar(task),
        stability_loss: stability.map_or(0.0, scalar),
        gradients: tape.backward(total)?,
    })
}

fn combine(tape: &mut Tape, task: NodeId, stability: NodeId, alpha: f64) -> Result<NodeId> {
    let weighted = tape.scale(stability, alpha)?;
    Ok(tape.add(task, weighted)?)
}

/// Plain cross-entropy step on the clean image.
pub fn task_step_classification(model: &Model, x: &Image, label: usize) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let pred = model.forward_classifier(&mut tape, x)?;
    let l0 = cross_entropy_loss(&mut tape, &pred, label)?;
    finish(&tape, l0, l0, None)
}

/// Plain hinge step on the clean triplet.
pub fn task_step_triplet(model: &Model, t: &Triplet, margin: f64) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let fq = model.forward_embedding(&mut tape, &t.q)?.node;
    let fp = model.forward_embedding(&mut tape, &t.p)?.node;
    let fn_ = model.forward_embedding(&mut tape, &t.n)?.node;
    let l0 = triplet_hinge_loss(&mut tape, fq, fp, fn_, margin)?;
    finish(&tape, l0, l0, None)
}

/// `L0(x) + α·D(P_x, P_x′)` with a caller-supplied perturbed copy.
pub fn classification_objective(
    model: &Model,
    x: &Image,
    x_prime: &Image,
    label: usize,
    cfg: &StabilityConfig,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let px = model.forward_classifier(&mut tape, x)?;
    let l0 = cross_entropy_loss(&mut tape, &px, label)?;
    let pxp = model.forward_classifier(&mut tape, x_prime)?;
    let s = classification_stability_loss(&mut tape, &px, &pxp, cfg.distance_form)?;
    let total = combine(&mut tape, l0, s, cfg.alpha)?;
    finish(&tape, total, l0, Some(s))
}

/// Samples `x′` and evaluates [`classification_objective`].
pub fn stability_step_classification<R: Rng>(
    model: &Model,
    x: &Image,
    label: usize,
    cfg: &StabilityConfig,
    sampler: &mut GaussianSampler<R>,
) -> Result<StepOutput> {
    let x_prime = sampler.perturb(x)?;
    classification_objective(model, x, &x_prime, label, cfg)
}

/// Hinge on the clean triplet plus `α·Σ ‖f(·) − f(·′)‖` over q, p and n,
/// with caller-supplied perturbed copies.
pub fn triplet_objective(
    model: &Model,
    t: &Triplet,
    t_prime: &Triplet,
    cfg: &StabilityConfig,
    margin: f64,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let mut clean = Vec::with_capacity(3);
    for img in [&t.q, &t.p, &t.n] {
        clean.push(model.forward_embedding(&mut tape, img)?.node);
    }
    let l0 = triplet_hinge_loss(&mut tape, clean[0], clean[1], clean[2], margin)?;
    let mut stability: Option<NodeId> = None;
    for (c, img) in clean.iter().zip([&t_prime.q, &t_prime.p, &t_prime.n]) {
        let f = model.forward_embedding(&mut tape, img)?.node;
        let d = l2_stability_loss(&mut tape, *c, f)?;
        stability = Some(match stability {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    let s = stability.expect("three stability terms");
    let total = combine(&mut tape, l0, s, cfg.alpha)?;
    finish(&tape, total, l0, Some(s))
}

pub fn stability_step_triplet<R: Rng>(
    model: &Model,
    t: &Triplet,
    cfg: &StabilityConfig,
    margin: f64,
    sampler: &mut GaussianSampler<R>,
) -> Result<StepOutput> {
    let t_prime = perturb_triplet(t, sampler)?;
    triplet_objective(model, t, &t_prime, cfg, margin)
}

/// Hinge evaluated on perturbed copies only (noise augmentation).
pub fn augmentation_step_triplet<R: Rng>(
    model: &Model,
    t: &Triplet,
    margin: f64,
    sampler: &mut GaussianSampler<R>,
) -> Result<StepOutput> {
    let t_prime = perturb_triplet(t, sampler)?;
    task_step_triplet(model, &t_prime, margin)
}

/// Cross-entropy on a perturbed copy (noise augmentation).
pub fn augmentation_step_classification<R: Rng>(
    model: &Model,
    x: &Image,
    label: usize,
    sampler: &mut GaussianSampler<R>,
) -> Result<StepOutput> {
    let x_prime = sampler.perturb(x)?;
    task_step_classification(model, &x_prime, label)
}

fn perturb_triplet<R: Rng>(t: &Triplet, sampler: &mut GaussianSampler<R>) -> Result<Triplet> {
    Ok(Triplet {
        q: sampler.perturb(&t.q)?,
        p: sampler.perturb(&t.p)?,
        n: sampler.perturb(&t.n)?,
    })
}
