//! Robustness metrics: near-duplicate PR sweeps, feature-distance CDFs,
//! ranking score@K and classification precision@k.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{make_pairs, make_triplet_indices, LabeledExample};
use crate::distortions::{Distortion, DistortionSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{Head, Model};
use crate::objectives::Triplet;

pub const DEFAULT_RANKING_K: usize = 30;

/// Upper bound on the distance between two unit vectors.
pub const MAX_UNIT_DISTANCE: f64 = 2.0;

/// Near-duplicate positives `(x, distort(x))` and dissimilar negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    positives: Vec<(Image, Image)>,
    negatives: Vec<(Image, Image)>,
}

impl PairSet {
    pub fn new(positives: Vec<(Image, Image)>, negatives: Vec<(Image, Image)>) -> Result<Self> {
        if let Some((a, b)) = positives.iter().chain(&negatives).find(|(a, b)| !a.same_dims(b)) {
            return Err(Error::data(format!(
                "pair members differ in size: {}×{} vs {}×{}",
                a.width(),
                a.height(),
                b.width(),
                b.height()
            )));
        }
        Ok(Self { positives, negatives })
    }

    pub fn positives(&self) -> &[(Image, Image)] {
        &self.positives
    }

    pub fn negatives(&self) -> &[(Image, Image)] {
        &self.negatives
    }
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `‖a − b‖ < T`.
pub fn near_duplicate_decide(fa: &[f64], fb: &[f64], threshold: f64) -> bool {
    l2_distance(fa, fb) < threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdfPoint {
    pub distance: f64,
    pub fraction: f64,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// PR points from precomputed positive and negative pair distances.
/// Precision is 1 at thresholds with no detections.
pub fn pr_sweep_from_distances(positives: &[f64], negatives: &[f64], thresholds: &[f64]) -> Result<Vec<PrPoint>> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::data("pr sweep needs positive and negative pairs"));
    }
    let (pos, neg) = (sorted(positives), sorted(negatives));
    Ok(thresholds
        .iter()
        .map(|&t| {
            let tp = pos.partition_point(|d| *d < t);
            let fp = neg.partition_point(|d| *d < t);
            PrPoint {
                threshold: t,
                precision: if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 },
                recall: tp as f64 / pos.len() as f64,
                true_positives: tp,
                false_positives: fp,
            }
        })
        .collect())
}

/// Fraction of positive distances strictly below each grid value; 1 for
/// `d ≥ 2` by the unit-norm bound.
pub fn distance_cdf_from_distances(positives: &[f64], grid: &[f64]) -> Result<Vec<CdfPoint>> {
    if positives.is_empty() {
        return Err(Error::data("distance cdf needs positive pairs"));
    }
    let pos = sorted(positives);
    Ok(grid
        .iter()
        .map(|&d| CdfPoint {
            distance: d,
            fraction: if d >= MAX_UNIT_DISTANCE {
                1.0
            } else {
                pos.partition_point(|v| *v < d) as f64 / pos.len() as f64
            },
        })
        .collect())
}

/// Embedding distances of every positive and negative pair.
pub fn pair_distances(model: &Model, pairs: &PairSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let dist = |set: &[(Image, Image)]| -> Result<Vec<f64>> {
        set.iter()
            .map(|(a, b)| Ok(l2_distance(&model.embed(a)?, &model.embed(b)?)))
            .collect()
    };
    Ok((dist(&pairs.positives)?, dist(&pairs.negatives)?))
}

pub fn pr_sweep(model: &Model, pairs: &PairSet, thresholds: &[f64]) -> Result<Vec<PrPoint>> {
    let (pos, neg) = pair_distances(model, pairs)?;
    pr_sweep_from_distances(&pos, &neg, thresholds)
}

pub fn distance_cdf(model: &Model, pairs: &PairSet, grid: &[f64]) -> Result<Vec<CdfPoint>> {
    let pos = pairs
        .positives
        .iter()
        .map(|(a, b)| Ok(l2_distance(&model.embed(a)?, &model.embed(b)?)))
        .collect::<Result<Vec<_>>>()?;
    distance_cdf_from_distances(&pos, grid)
}

/// Score contribution of one triplet: `Some(±1)` if `p` or `n` is among the
/// `k` gallery items nearest to the query, `None` otherwise. Ties in the
/// neighbour order fall to the lower gallery index; a tie between `D(q,p)`
/// and `D(q,n)` counts as incorrect.
fn triplet_vote(query: &[f64], exclude: Option<usize>, p: usize, n: usize, gallery: &[Vec<f64>], k: usize) -> Option<i64> {
    let mut order: Vec<(f64, usize)> = gallery
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != exclude)
        .map(|(j, g)| (l2_distance(query, g), j))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let eligible = order.iter().take(k).any(|(_, j)| *j == p || *j == n);
    if !eligible {
        return None;
    }
    let (dp, dn) = (l2_distance(query, &gallery[p]), l2_distance(query, &gallery[n]));
    Some(if dp < dn { 1 } else { -1 })
}

/// Ranking score over triplets given as gallery indices; each query is
/// excluded from its own neighbour list.
pub fn ranking_score_from_embeddings(gallery: &[Vec<f64>], triplets: &[(usize, usize, usize)], k: usize) -> Result<i64> {
    if k == 0 {
        return Err(Error::config("ranking score needs K ≥ 1"));
    }
    let mut score = 0;
    for &(q, p, n) in triplets {
        if q >= gallery.len() || p >= gallery.len() || n >= gallery.len() {
            return Err(Error::data(format!("triplet ({q}, {p}, {n}) indexes past a gallery of {}", gallery.len())));
        }
        score += triplet_vote(&gallery[q], Some(q), p, n, gallery, k).unwrap_or(0);
    }
    Ok(score)
}

/// Image-level ranking score; `p` and `n` must appear in the gallery
/// (matched by exact pixel values). A query found in the gallery is
/// excluded from its own neighbours.
pub fn ranking_score_at_k(model: &Model, triplets: &[Triplet], gallery: &[Image], k: usize) -> Result<i64> {
    if k == 0 {
        return Err(Error::config("ranking score needs K ≥ 1"));
    }
    let mut lookup: HashMap<Vec<u64>, usize> = HashMap::new();
    for (i, g) in gallery.iter().enumerate() {
        lookup.entry(g.pixel_bits()).or_insert(i);
    }
    let emb: Vec<Vec<f64>> = gallery.iter().map(|g| model.embed(g)).collect::<Result<_>>()?;
    let mut score = 0;
    for (i, t) in triplets.iter().enumerate() {
        let find = |img: &Image, role: &str| {
            lookup
                .get(&img.pixel_bits())
                .copied()
                .ok_or_else(|| Error::data(format!("triplet {i}: {role} image is not in the gallery")))
        };
        let (p, n) = (find(&t.p, "positive")?, find(&t.n, "negative")?);
        let q = lookup.get(&t.q.pixel_bits()).copied();
        let fq = match q {
            Some(qi) => emb[qi].clone(),
            None => model.embed(&t.q)?,
        };
        score += triplet_vote(&fq, q, p, n, &emb, k).unwrap_or(0);
    }
    Ok(score)
}

/// Fraction of rows whose label is among the `k` highest probabilities,
/// equal probabilities ordered by class index.
pub fn precision_at_k_from_probabilities(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::data("precision@k needs one label per prediction"));
    }
    if probs.is_empty() {
        return Err(Error::data("precision@k needs at least one prediction"));
    }
    let mut hits = 0usize;
    for (p, &y) in probs.iter().zip(labels) {
        if k == 0 || k > p.len() {
            return Err(Error::config(format!("precision@k needs 1 ≤ k ≤ {}, got {k}", p.len())));
        }
        if y >= p.len() {
            return Err(Error::data(format!("label {y} out of range for {} classes", p.len())));
        }
        let ahead = p
            .iter()
            .enumerate()
            .filter(|(j, v)| **v > p[y] || (**v == p[y] && *j < y))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / probs.len() as f64)
}

pub fn precision_at_k(model: &Model, examples: &[LabeledExample], k: usize) -> Result<f64> {
    let probs = examples.iter().map(|e| model.predict(&e.image)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    precision_at_k_from_probabilities(&probs, &labels, k)
}

/// A requested metric; parsed from names like `pr_sweep`, `ranking_score@30`
/// or `precision@1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Metric {
    PrSweep,
    DistanceCdf,
    RankingScore { k: usize },
    PrecisionAt { k: usize },
}

impl Metric {
    pub fn needs_embedding(&self) -> bool {
        !matches!(self, Metric::PrecisionAt { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Metric::PrSweep => "pr_sweep",
            Metric::DistanceCdf => "distance_cdf",
            Metric::RankingScore { .. } => "ranking_score",
            Metric::PrecisionAt { .. } => "precision_at_k",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::PrSweep => f.write_str("pr_sweep"),
            Metric::DistanceCdf => f.write_str("distance_cdf"),
            Metric::RankingScore { k } => write!(f, "ranking_score@{k}"),
            Metric::PrecisionAt { k } => write!(f, "precision@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = match s.split_once('@') {
            Some((n, k)) => {
                let k = k
                    .parse::<usize>()
                    .ok()
                    .filter(|k| *k > 0)
                    .ok_or_else(|| Error::config(format!("metric '{s}': '{k}' is not a positive count")))?;
                (n, Some(k))
            }
            None => (s, None),
        };
        match (name, k) {
            ("pr_sweep", None) => Ok(Metric::PrSweep),
            ("distance_cdf", None) => Ok(Metric::DistanceCdf),
            ("ranking_score", k) => Ok(Metric::RankingScore { k: k.unwrap_or(DEFAULT_RANKING_K) }),
            ("precision", Some(k)) => Ok(Metric::PrecisionAt { k }),
            _ => Err(Error::config(format!("unknown metric '{s}'"))),
        }
    }
}

impl TryFrom<String> for Metric {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Metric> for String {
    fn from(m: Metric) -> String {
        m.to_string()
    }
}

/// One curve point of a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Point {
    Pr(PrPoint),
    Cdf(CdfPoint),
}

/// Serialized result of one metric on one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub task: String,
    pub distortion: String,
    pub metric: String,
    pub params: Value,
    pub points: Vec<Point>,
    pub value: f64,
    pub seed: u64,
    pub config_digest: String,
}

fn default_grid() -> Vec<f64> {
    (0..=40).map(|i| f64::from(i) * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub thresholds: Vec<f64>,
    pub cdf_grid: Vec<f64>,
    /// Distance at which the CDF report's headline value is read.
    pub cdf_probe: f64,
    pub positives: usize,
    pub negatives: usize,
    pub triplets: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::RankingScore { k: DEFAULT_RANKING_K }],
            thresholds: default_grid(),
            cdf_grid: default_grid(),
            cdf_probe: 0.1,
            positives: 50,
            negatives: 50,
            triplets: 50,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, head: Head) -> Result<()> {
        if self.metrics.is_empty() {
            return Err(Error::config("no metrics requested"));
        }
        for m in &self.metrics {
            match (m, head) {
                (Metric::PrecisionAt { k }, Head::Classifier { num_classes }) if *k > num_classes => {
                    return Err(Error::config(format!("{m}: k exceeds the {num_classes} classes")));
                }
                (Metric::PrecisionAt { .. }, Head::Embedding { .. }) => {
                    return Err(Error::config(format!("{m} needs a classifier head")));
                }
                (_, Head::Classifier { .. }) if m.needs_embedding() => {
                    return Err(Error::config(format!("{m} needs an embedding head")));
                }
                _ => {}
            }
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x >= 0.0);
        if self.thresholds.is_empty() || !finite(&self.thresholds) || self.cdf_grid.is_empty() || !finite(&self.cdf_grid) {
            return Err(Error::config("thresholds and cdf grid must be non-empty lists of finite values ≥ 0"));
        }
        Ok(())
    }
}

/// Values echoed into every report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportMeta {
    pub task: String,
    pub seed: u64,
    pub config_digest: String,
}

fn identity() -> DistortionSpec {
    DistortionSpec::new(Distortion::Gaussian { sigma: 0.0 }, 0)
}

/// Runs every configured metric on the clean set and on each distorted copy.
/// Clean pair metrics use `(x, x)` positives.
pub fn evaluate_suite(
    model: &Model,
    corpus: &[LabeledExample],
    distortions: &[DistortionSpec],
    cfg: &EvalConfig,
    meta: &ReportMeta,
) -> Result<Vec<EvalReport>> {
    cfg.validate(model.spec().head)?;
    for d in distortions {
        d.distortion.validate()?;
    }
    if corpus.is_empty() {
        return Err(Error::data("evaluation corpus is empty"));
    }
    let needs_triplets = cfg.metrics.iter().any(|m| matches!(m, Metric::RankingScore { .. }));
    let triplets = if needs_triplets {
        make_triplet_indices(corpus, cfg.triplets, cfg.seed)?
    } else {
        Vec::new()
    };

    let mut reports = Vec::new();
    let sets: Vec<(String, Option<&DistortionSpec>)> =
        std::iter::once(("clean".to_string(), None)).chain(distortions.iter().map(|d| (d.tag(), Some(d)))).collect();
    for (tag, dist) in sets {
        let mut pair_cache: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut images_cache: Option<Vec<Image>> = None;
        for metric in &cfg.metrics {
            let mut params = json!({ "metric_spec": metric.to_string() });
            if let Some(d) = dist {
                params["distortion_spec"] = serde_json::to_value(d)?;
            }
            let (points, value) = match *metric {
                Metric::PrSweep | Metric::DistanceCdf => {
                    if pair_cache.is_none() {
                        let spec = dist.cloned().unwrap_or_else(identity);
                        let pairs = make_pairs(corpus, &spec, cfg.positives, cfg.negatives, cfg.seed)?;
                        pair_cache = Some(pair_distances(model, &pairs)?);
                    }
                    let (pos, neg) = pair_cache.as_ref().expect("filled above");
                    params["positives"] = json!(pos.len());
                    params["negatives"] = json!(neg.len());
                    if *metric == Metric::PrSweep {
                        let pts = pr_sweep_from_distances(pos, neg, &cfg.thresholds)?;
                        params["zero_detection_precision"] = json!(1.0);
                        params["value_definition"] = json!("max F1 over thresholds");
                        let best = pts
                            .iter()
                            .map(|p| {
                                if p.precision + p.recall == 0.0 {
                                    0.0
                                } else {
                                    2.0 * p.precision * p.recall / (p.precision + p.recall)
                                }
                            })
                            .fold(0.0, f64::max);
                        (pts.into_iter().map(Point::Pr).collect(), best)
                    } else {
                        let pts = distance_cdf_from_distances(pos, &cfg.cdf_grid)?;
                        let probe = distance_cdf_from_distances(pos, &[cfg.cdf_probe])?[0].fraction;
                        params["cdf_probe"] = json!(cfg.cdf_probe);
                        (pts.into_iter().map(Point::Cdf).collect(), probe)
                    }
                }
                Metric::RankingScore { k } => {
                    let imgs = distorted_images(corpus, dist, &mut images_cache)?;
                    let gallery: Vec<Vec<f64>> = imgs.iter().map(|g| model.embed(g)).collect::<Result<_>>()?;
                    params["k"] = json!(k);
                    params["triplets"] = json!(triplets.len());
                    params["gallery"] = json!(gallery.len());
                    params["ties"] = json!("incorrect");
                    (Vec::new(), ranking_score_from_embeddings(&gallery, &triplets, k)? as f64)
                }
                Metric::PrecisionAt { k } => {
                    let imgs = distorted_images(corpus, dist, &mut images_cache)?;
                    let probs = imgs.iter().map(|g| model.predict(g)).collect::<Result<Vec<_>>>()?;
                    let labels: Vec<usize> = corpus.iter().map(|e| e.label).collect();
                    params["k"] = json!(k);
                    (Vec::new(), precision_at_k_from_probabilities(&probs, &labels, k)?)
                }
            };
            reports.push(EvalReport {
                task: meta.task.clone(),
                distortion: tag.clone(),
                metric: metric.name().to_string(),
                params,
                points,
                value,
                seed: meta.seed,
                config_digest: meta.config_digest.clone(),
            });
        }
    }
    Ok(reports)
}

fn distorted_images<'a>(
    corpus: &[LabeledExample],
    dist: Option<&DistortionSpec>,
    cache: &'a mut Option<Vec<Image>>,
) -> Result<&'a Vec<Image>> {
    if cache.is_none() {
        let imgs = corpus
            .iter()
            .enumerate()
            .map(|(i, e)| match dist {
                Some(d) => d.apply(&e.image, i as u64),
                None => Ok(e.image.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        *cache = Some(imgs);
    }
    Ok(cache.as_ref().expect("filled above"))
}
