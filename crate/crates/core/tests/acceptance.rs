//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stabletrain_core::autodiff::ParamId;
use stabletrain_core::dataset::{generate_corpus, make_triplet_indices, make_triplets, CorpusSpec, LabeledExample};
use stabletrain_core::distortions::{
    gaussian_perturb, jpeg_distort, quantization_tables, Distortion, DistortionSpec,
};
use stabletrain_core::evaluation::{
    distance_cdf_from_distances, evaluate_suite, pair_distances, pr_sweep, pr_sweep_from_distances,
    precision_at_k_from_probabilities, ranking_score_at_k, ranking_score_from_embeddings, EvalConfig, Metric,
    ReportMeta,
};
use stabletrain_core::network::{Head, InputShape, Layer, LayerSpec, Model};
use stabletrain_core::objectives::{
    classification_objective, classification_stability_loss, triplet_objective, DistanceForm, StabilityConfig,
    StepOutput, Triplet,
};
use stabletrain_core::trainer::{
    sgd_momentum_step, train, GridSpec, OptimizerConfig, TrainData, TrainMode, TrainSettings, Velocity,
};
use stabletrain_core::{Gradients, Image, Tape, Tensor};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, 3, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

fn small_spec(head: Head) -> LayerSpec {
    LayerSpec {
        input: InputShape { width: 8, height: 8, channels: 3 },
        layers: vec![
            Layer::Conv3x3 { channels: 3 },
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::Dense { width: 12 },
            Layer::Relu,
        ],
        head,
    }
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
/// Denominator floor so that gradients near zero are compared absolutely.
const FD_FLOOR: f64 = 1e-6;

/// Max relative error between analytic gradients and central differences of
/// `loss` over every parameter element.
fn fd_max_rel_error(model: &Model, analytic: &Gradients, loss: &dyn Fn(&Model) -> f64) -> (f64, usize) {
    let mut worst = 0.0_f64;
    let mut checked = 0;
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        let base = model.params().get(id).clone();
        let g = analytic.get(id).expect("gradient for every parameter");
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut data = base.data().to_vec();
                data[i] += delta;
                m.params_mut().set(id, Tensor::new(base.shape().to_vec(), data).unwrap()).unwrap();
                loss(&m)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let a = g.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

fn criterion_1() -> Check {
    let t0 = Instant::now();
    let mut worst = 0.0_f64;
    let mut checked = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let form = if seed % 2 == 0 { DistanceForm::KlForm } else { DistanceForm::CrossEntropyForm };
        let cfg = StabilityConfig { alpha: 0.7, sigma: 0.1, distance_form: form };

        let cls = Model::init(small_spec(Head::Classifier { num_classes: 4 }), seed).unwrap();
        let x = random_image(&mut rng, 8, 8);
        let xp = gaussian_perturb(&x, cfg.sigma, &mut rng).unwrap();
        let label = rng.random_range(0..4);
        let out = classification_objective(&cls, &x, &xp, label, &cfg).unwrap();
        let (w, n) = fd_max_rel_error(&cls, &out.gradients, &|m| {
            classification_objective(m, &x, &xp, label, &cfg).unwrap().loss
        });
        worst = worst.max(w);
        checked += n;

        let emb = Model::init(small_spec(Head::Embedding { dim: 4 }), seed + 100).unwrap();
        let t = Triplet::new(random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8)).unwrap();
        let tp = Triplet::new(
            gaussian_perturb(&t.q, cfg.sigma, &mut rng).unwrap(),
            gaussian_perturb(&t.p, cfg.sigma, &mut rng).unwrap(),
            gaussian_perturb(&t.n, cfg.sigma, &mut rng).unwrap(),
        )
        .unwrap();
        // margin above the largest possible distance gap keeps the hinge active
        let margin = 2.5;
        let out: StepOutput = triplet_objective(&emb, &t, &tp, &cfg, margin).unwrap();
        let (w, n) = fd_max_rel_error(&emb, &out.gradients, &|m| triplet_objective(m, &t, &tp, &cfg, margin).unwrap().loss);
        worst = worst.max(w);
        checked += n;
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(worst < FD_TOL, || format!("max relative error {worst:.3e} ≥ {FD_TOL:e}"))?;
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{checked} gradient entries, max rel err {worst:.2e}, {secs:.1}s"))
}

// ---------------------------------------------------------------- 2

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|v| v * v.ln()).sum::<f64>()
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut kl_self, mut ce_self, mut ident) = (0.0_f64, 0.0_f64, 0.0_f64);
    for _ in 0..1000 {
        let classes = rng.random_range(2..8);
        let a: Vec<f64> = (0..classes).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..classes).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut tape = Tape::new();
        let pred = |tape: &mut Tape, logits: &[f64]| {
            let n = tape.constant(Tensor::vector(logits.to_vec()).unwrap());
            let lp = tape.log_softmax(n).unwrap();
            let p = tape.softmax(n).unwrap();
            stabletrain_core::network::Prediction {
                logits: tape.value(n).clone(),
                probabilities: tape.value(p).clone(),
                logits_node: n,
                log_probs_node: lp,
                probs_node: p,
            }
        };
        let pa = pred(&mut tape, &a);
        let pa2 = pred(&mut tape, &a);
        let pb = pred(&mut tape, &b);
        let h = entropy(pa.probabilities.data());
        let mut eval = |x: &stabletrain_core::network::Prediction, y: &stabletrain_core::network::Prediction, f| {
            let n = classification_stability_loss(&mut tape, x, y, f).unwrap();
            tape.scalar(n).unwrap()
        };
        kl_self = kl_self.max(eval(&pa, &pa2, DistanceForm::KlForm).abs());
        ce_self = ce_self.max((eval(&pa, &pa2, DistanceForm::CrossEntropyForm) - h).abs());
        let ce = eval(&pa, &pb, DistanceForm::CrossEntropyForm);
        let kl = eval(&pa, &pb, DistanceForm::KlForm);
        ident = ident.max((ce - kl - h).abs());
    }
    ensure(kl_self <= 1e-12, || format!("kl(x,x) off by {kl_self:e}"))?;
    ensure(ce_self <= 1e-10, || format!("ce(x,x) − H off by {ce_self:e}"))?;
    ensure(ident <= 1e-10, || format!("ce − kl − H off by {ident:e}"))?;
    Ok(format!("max |kl(x,x)| {kl_self:.1e}, |ce(x,x)−H| {ce_self:.1e}, |ce−kl−H| {ident:.1e}"))
}

// ---------------------------------------------------------------- 3

const STD_LUMINANCE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29,
    51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121,
    120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
];
const STD_CHROMINANCE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

fn criterion_3() -> Check {
    let t = quantization_tables(50).unwrap();
    ensure(t.luminance == STD_LUMINANCE, || "q=50 luminance table differs".into())?;
    ensure(t.chrominance == STD_CHROMINANCE, || "q=50 chrominance table differs".into())?;
    let corpus = generate_corpus(&CorpusSpec { seed: 3, ..CorpusSpec::default() }).unwrap();
    ensure(corpus.len() == 100, || format!("corpus has {} images", corpus.len()))?;
    let mut max100 = 0.0_f64;
    let mut mae = [0.0; 3];
    for ex in &corpus {
        max100 = max100.max(ex.image.max_abs_diff(&jpeg_distort(&ex.image, 100).unwrap()));
        for (slot, q) in [10u8, 50, 90].into_iter().enumerate() {
            mae[slot] += ex.image.mean_abs_diff(&jpeg_distort(&ex.image, q).unwrap()) / corpus.len() as f64;
        }
    }
    ensure(max100 <= 2.0 / 255.0, || format!("q=100 max error {:.3}/255", max100 * 255.0))?;
    ensure(mae[0] >= mae[1] && mae[1] >= mae[2], || format!("MAE not monotone: {mae:?}"))?;
    Ok(format!(
        "tables match; q=100 max err {:.3}/255; MAE q10/50/90 = {:.4}/{:.4}/{:.4}",
        max100 * 255.0,
        mae[0],
        mae[1],
        mae[2]
    ))
}

// ---------------------------------------------------------------- 4

fn oracle_pr(pos: &[f64], neg: &[f64], t: f64) -> (f64, f64) {
    let mut tp = 0;
    for d in pos {
        if *d < t {
            tp += 1;
        }
    }
    let mut fp = 0;
    for d in neg {
        if *d < t {
            fp += 1;
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    (precision, tp as f64 / pos.len() as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

/// Eligibility via the neighbour rank: the number of gallery items strictly
/// closer than the candidate, plus equally close items with a lower index.
fn oracle_ranking(gallery: &[Vec<f64>], triplets: &[(usize, usize, usize)], k: usize) -> i64 {
    let mut score = 0;
    for &(q, p, n) in triplets {
        let rank = |c: usize| {
            let dc = dist(&gallery[q], &gallery[c]);
            (0..gallery.len())
                .filter(|&j| j != q && j != c)
                .filter(|&j| {
                    let dj = dist(&gallery[q], &gallery[j]);
                    dj < dc || (dj == dc && j < c)
                })
                .count()
        };
        if rank(p) < k || rank(n) < k {
            let (dp, dn) = (dist(&gallery[q], &gallery[p]), dist(&gallery[q], &gallery[n]));
            score += if dp < dn { 1 } else { -1 };
        }
    }
    score
}

fn oracle_precision(probs: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (p, &y) in probs.iter().zip(labels) {
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
        if order[..k].contains(&y) {
            hits += 1;
        }
    }
    hits as f64 / probs.len() as f64
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut trials = 0;
    let spec = small_spec(Head::Embedding { dim: 3 });
    for trial in 0..20u64 {
        let model = Model::init(spec.clone(), trial).unwrap();
        // pr_sweep and distance_cdf on model distances
        let n_img = rng.random_range(4..=50);
        let imgs: Vec<Image> = (0..n_img).map(|_| random_image(&mut rng, 8, 8)).collect();
        let pairs = stabletrain_core::evaluation::PairSet::new(
            (0..n_img / 2).map(|i| (imgs[i].clone(), gaussian_perturb(&imgs[i], 0.1, &mut rng).unwrap())).collect(),
            (n_img / 2..n_img - 1).map(|i| (imgs[i].clone(), imgs[i + 1].clone())).collect(),
        )
        .unwrap();
        let thresholds: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..2.2)).collect();
        let (pos, neg) = pair_distances(&model, &pairs).unwrap();
        let sweep = pr_sweep(&model, &pairs, &thresholds).unwrap();
        for (pt, &t) in sweep.iter().zip(&thresholds) {
            let (p, r) = oracle_pr(&pos, &neg, t);
            ensure((pt.precision - p).abs() <= 1e-12 && (pt.recall - r).abs() <= 1e-12, || {
                format!("pr mismatch at T={t}: ({}, {}) vs ({p}, {r})", pt.precision, pt.recall)
            })?;
        }
        let cdf = distance_cdf_from_distances(&pos, &thresholds).unwrap();
        for (pt, &d) in cdf.iter().zip(&thresholds) {
            let frac = if d >= 2.0 { 1.0 } else { pos.iter().filter(|v| **v < d).count() as f64 / pos.len() as f64 };
            ensure((pt.fraction - frac).abs() <= 1e-12, || format!("cdf mismatch at d={d}"))?;
        }

        // ranking on an image gallery
        let g_len = rng.random_range(6..=60);
        let gallery: Vec<Image> = (0..g_len).map(|_| random_image(&mut rng, 8, 8)).collect();
        let n_trip = rng.random_range(1..=50);
        let idx: Vec<(usize, usize, usize)> = (0..n_trip)
            .map(|_| {
                let q = rng.random_range(0..g_len);
                let mut p = rng.random_range(0..g_len);
                while p == q {
                    p = rng.random_range(0..g_len);
                }
                let mut n = rng.random_range(0..g_len);
                while n == q || n == p {
                    n = rng.random_range(0..g_len);
                }
                (q, p, n)
            })
            .collect();
        let k = rng.random_range(1..=g_len);
        let emb: Vec<Vec<f64>> = gallery.iter().map(|g| model.embed(g).unwrap()).collect();
        let triplets: Vec<Triplet> = idx
            .iter()
            .map(|&(q, p, n)| Triplet::new(gallery[q].clone(), gallery[p].clone(), gallery[n].clone()).unwrap())
            .collect();
        let expect = oracle_ranking(&emb, &idx, k);
        let got_idx = ranking_score_from_embeddings(&emb, &idx, k).unwrap();
        let got_img = ranking_score_at_k(&model, &triplets, &gallery, k).unwrap();
        ensure(expect == got_idx && expect == got_img, || {
            format!("ranking mismatch: oracle {expect}, index {got_idx}, image {got_img}")
        })?;

        // precision@k on random probability rows with deliberate ties
        let classes = rng.random_range(2..=10);
        let rows = rng.random_range(1..=100);
        let probs: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                let raw: Vec<f64> = (0..classes).map(|_| f64::from(rng.random_range(1..5u8))).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let k = rng.random_range(1..=classes);
        let got = precision_at_k_from_probabilities(&probs, &labels, k).unwrap();
        let expect = oracle_precision(&probs, &labels, k);
        ensure((got - expect).abs() <= 1e-12, || format!("precision@{k}: {got} vs {expect}"))?;
        trials += 1;
    }
    Ok(format!("{trials} randomized instances per metric agree with brute force"))
}

// ---------------------------------------------------------------- 5 to 7

const SEEDS: [u64; 3] = [0, 1, 2];
const SIGMA: f64 = 0.2;
const ALPHA: f64 = 0.1;

fn settings(mode: TrainMode, seed: u64) -> TrainSettings {
    TrainSettings {
        optimizer: OptimizerConfig {
            learning_rate: 0.02,
            batch_size: 16,
            pretrain_steps: 500,
            finetune_steps: 300,
            seed,
            ..OptimizerConfig::default()
        },
        stability: StabilityConfig { alpha: ALPHA, sigma: SIGMA, distance_form: DistanceForm::KlForm },
        mode,
        margin: 0.2,
    }
}

struct RankingRun {
    seed: u64,
    baseline: Model,
    augmentation: Model,
    stability: Model,
    eval: Vec<LabeledExample>,
    triplets: Vec<(usize, usize, usize)>,
}

fn ranking_runs() -> Vec<RankingRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let train_c = generate_corpus(&CorpusSpec { per_class: 20, seed: 100 + seed, ..CorpusSpec::default() }).unwrap();
            let eval = generate_corpus(&CorpusSpec { per_class: 20, seed: 900 + seed, ..CorpusSpec::default() }).unwrap();
            let trip = make_triplets(&train_c, 300, seed).unwrap();
            let fit = |mode| {
                let model = Model::init(LayerSpec::desk_default(Head::Embedding { dim: 16 }), seed).unwrap();
                train(model, TrainData::Triplets(&trip), &settings(mode, seed)).unwrap().model
            };
            RankingRun {
                seed,
                baseline: fit(TrainMode::Baseline),
                augmentation: fit(TrainMode::Augmentation),
                stability: fit(TrainMode::Stability),
                triplets: make_triplet_indices(&eval, 100, seed).unwrap(),
                eval,
            }
        })
        .collect()
}

fn ranking(model: &Model, run: &RankingRun, d: Option<&DistortionSpec>) -> i64 {
    let gallery: Vec<Vec<f64>> = run
        .eval
        .iter()
        .enumerate()
        .map(|(i, e)| match d {
            Some(d) => model.embed(&d.apply(&e.image, i as u64).unwrap()).unwrap(),
            None => model.embed(&e.image).unwrap(),
        })
        .collect();
    ranking_score_from_embeddings(&gallery, &run.triplets, 30).unwrap()
}

fn criterion_5(runs: &[RankingRun]) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for r in runs {
        let (b, a, s) = (ranking(&r.baseline, r, None), ranking(&r.augmentation, r, None), ranking(&r.stability, r, None));
        ok &= a <= b && s >= a;
        lines.push(format!("seed {}: base {b} aug {a} stab {s}", r.seed));
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6(runs: &[RankingRun]) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, d) in [
        ("jpeg-50", DistortionSpec::new(Distortion::Jpeg { quality: 50 }, 6)),
        ("crop-2", DistortionSpec::new(Distortion::Crop { offset: 2 }, 6)),
    ] {
        for r in runs {
            let gap = |m: &Model| ranking(m, r, None) - ranking(m, r, Some(&d));
            let (gb, gs) = (gap(&r.baseline), gap(&r.stability));
            ok &= gs <= gb;
            lines.push(format!("{name} seed {}: gap base {gb} stab {gs}", r.seed));
        }
    }
    let jpeg10 = DistortionSpec::new(Distortion::Jpeg { quality: 10 }, 6);
    for &seed in &SEEDS {
        let train_c = generate_corpus(&CorpusSpec { seed: 100 + seed, ..CorpusSpec::default() }).unwrap();
        let eval = generate_corpus(&CorpusSpec { per_class: 50, seed: 900 + seed, ..CorpusSpec::default() }).unwrap();
        let labels: Vec<usize> = eval.iter().map(|e| e.label).collect();
        let mut gaps = Vec::new();
        for mode in [TrainMode::Baseline, TrainMode::Stability] {
            let model = Model::init(LayerSpec::desk_default(Head::Classifier { num_classes: 4 }), seed).unwrap();
            let m = train(model, TrainData::Labeled(&train_c), &settings(mode, seed)).unwrap().model;
            let p1 = |dist: bool| {
                let probs: Vec<Vec<f64>> = eval
                    .iter()
                    .enumerate()
                    .map(|(i, e)| {
                        let img = if dist { jpeg10.apply(&e.image, i as u64).unwrap() } else { e.image.clone() };
                        m.predict(&img).unwrap()
                    })
                    .collect();
                precision_at_k_from_probabilities(&probs, &labels, 1).unwrap()
            };
            gaps.push(p1(false) - p1(true));
        }
        ok &= gaps[1] <= gaps[0];
        lines.push(format!("p@1 jpeg-10 seed {seed}: gap base {:.3} stab {:.3}", gaps[0], gaps[1]));
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7(runs: &[RankingRun]) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    let d = DistortionSpec::new(Distortion::Jpeg { quality: 50 }, 7);
    for r in runs {
        let pairs = stabletrain_core::dataset::make_pairs(&r.eval, &d, 80, 50, r.seed).unwrap();
        let (base_pos, _) = pair_distances(&r.baseline, &pairs).unwrap();
        let (stab_pos, _) = pair_distances(&r.stability, &pairs).unwrap();
        let mut sorted = base_pos.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let fb = distance_cdf_from_distances(&base_pos, &[median]).unwrap()[0].fraction;
        let fs = distance_cdf_from_distances(&stab_pos, &[median]).unwrap()[0].fraction;
        ok &= fs >= fb;
        lines.push(format!("seed {}: at d={median:.4} base {fb:.2} stab {fs:.2}", r.seed));
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Check {
    let corpus = generate_corpus(&CorpusSpec { per_class: 10, seed: 8, ..CorpusSpec::default() }).unwrap();
    let trip = make_triplets(&corpus, 60, 8).unwrap();
    let mut s = settings(TrainMode::Stability, 8);
    s.optimizer.pretrain_steps = 30;
    s.optimizer.finetune_steps = 20;
    s.optimizer.batch_size = 4;
    let cfg = EvalConfig {
        metrics: vec![Metric::PrSweep, Metric::DistanceCdf, Metric::RankingScore { k: 30 }],
        positives: 20,
        negatives: 20,
        triplets: 20,
        seed: 8,
        ..EvalConfig::default()
    };
    let distortions = [
        DistortionSpec::new(Distortion::Jpeg { quality: 50 }, 1),
        DistortionSpec::new(Distortion::Crop { offset: 2 }, 2),
        DistortionSpec::new(Distortion::Gaussian { sigma: 0.05 }, 3),
    ];
    let meta = ReportMeta { task: "triplet".into(), seed: 8, config_digest: "fixed".into() };
    let once = || {
        let model = Model::init(LayerSpec::desk_default(Head::Embedding { dim: 16 }), 8).unwrap();
        let run = train(model, TrainData::Triplets(&trip), &s).unwrap();
        let reports = evaluate_suite(&run.model, &corpus, &distortions, &cfg, &meta).unwrap();
        (run.model.to_bytes(), serde_json::to_string(&reports).unwrap())
    };
    let (a, b) = (once(), once());
    ensure(a.0 == b.0, || "parameter bytes differ".into())?;
    ensure(a.1 == b.1, || "reports differ".into())?;
    Ok(format!("{} parameter bytes and {} report bytes identical", a.0.len(), a.1.len()))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let g = GridSpec::default();
    let span = |v: &[f64]| (v[0], *v.last().unwrap());
    ensure(span(&g.sigma) == (0.01, 0.4), || format!("sigma {:?}", g.sigma))?;
    ensure(span(&g.alpha) == (0.001, 1.0), || format!("alpha {:?}", g.alpha))?;
    ensure(span(&g.learning_rate) == (0.001, 0.1), || format!("learning rate {:?}", g.learning_rate))?;
    let inside = |v: &[f64], lo: f64, hi: f64| v.iter().all(|x| (lo..=hi).contains(x));
    ensure(
        inside(&g.sigma, 0.01, 0.4) && inside(&g.alpha, 0.001, 1.0) && inside(&g.learning_rate, 0.001, 0.1),
        || "default grid leaves its range".into(),
    )?;
    g.validate().map_err(|e| e.to_string())?;
    Ok(format!("sigma {:?}, alpha {:?}, lr {:?}", g.sigma, g.alpha, g.learning_rate))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Check {
    const TRIALS: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut failures = [0usize; 4];

    for _ in 0..TRIALS {
        let np = rng.random_range(1..40);
        let nn = rng.random_range(1..40);
        let pos: Vec<f64> = (0..np).map(|_| rng.random_range(0.0..2.0)).collect();
        let neg: Vec<f64> = (0..nn).map(|_| rng.random_range(0.0..2.0)).collect();
        let mut ts: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..2.0)).collect();
        ts.sort_by(f64::total_cmp);
        ts.insert(0, 0.0);
        ts.push(2.0);
        let pts = pr_sweep_from_distances(&pos, &neg, &ts).unwrap();
        let monotone = pts.windows(2).all(|w| w[0].recall <= w[1].recall);
        let ends = pts[0].recall == 0.0 && pts.last().unwrap().recall == 1.0;
        let bounded = pts.iter().all(|p| (0.0..=1.0).contains(&p.precision));
        if !(monotone && ends && bounded) {
            failures[0] += 1;
        }
    }

    let model = Model::init(small_spec(Head::Embedding { dim: 5 }), 10).unwrap();
    for _ in 0..TRIALS {
        let img = random_image(&mut rng, 8, 8);
        let norm = model.embed(&img).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            failures[1] += 1;
        }
    }

    let mut model = Model::init(small_spec(Head::Classifier { num_classes: 3 }), 11).unwrap();
    let layers = ["conv1", "dense1", "head"];
    let mut velocity = Velocity::zeros(model.params());
    for _ in 0..TRIALS {
        let frozen: std::collections::BTreeSet<String> =
            layers.iter().filter(|_| rng.random_bool(0.5)).map(|s| s.to_string()).collect();
        model.params_mut().set_frozen(frozen).unwrap();
        let before = model.params().clone();
        let mut grads = Gradients::new();
        for id in model.params().ids() {
            let t = model.params().get(id);
            let data = (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            grads.insert(id, Tensor::new(t.shape().to_vec(), data).unwrap());
        }
        sgd_momentum_step(model.params_mut(), &grads, &mut velocity, 1e-3, 0.9).unwrap();
        let p = model.params();
        let intact = p.ids().filter(|id| p.is_frozen(*id)).all(|id| {
            let (a, b) = (p.get(id).data(), before.get(id).data());
            a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if !intact {
            failures[2] += 1;
        }
    }

    for i in 0..TRIALS {
        let w = rng.random_range(8..24);
        let h = rng.random_range(8..24);
        let img = random_image(&mut rng, w, h);
        let d = match i % 4 {
            0 => Distortion::Gaussian { sigma: rng.random_range(0.0..0.5) },
            1 => Distortion::Jpeg { quality: rng.random_range(1..=100) },
            2 => Distortion::Thumb { pixels: rng.random_range(64..=w * h) },
            _ => Distortion::Crop { offset: rng.random_range(0..w.min(h)) },
        };
        let out = DistortionSpec::new(d, i as u64).apply(&img, i as u64).unwrap();
        if !out.same_dims(&img) || out.pixels().iter().any(|p| !(0.0..=1.0).contains(p)) {
            failures[3] += 1;
        }
    }

    let total: usize = failures.iter().sum();
    let detail = format!(
        "failures over {TRIALS} trials: pr monotonicity {}, unit norm {}, frozen layers {}, distortion domain {}",
        failures[0], failures[1], failures[2], failures[3]
    );
    if total == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Check, f64)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &dyn Fn() -> Check| {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("[{tag}] criterion {id:>2} {name} ({secs:.1}s): {detail}");
        results.push((id, name, outcome, secs));
    };

    run(1, "gradient correctness", &criterion_1);
    run(2, "loss identities", &criterion_2);
    run(3, "jpeg pipeline", &criterion_3);
    run(4, "metric-oracle equivalence", &criterion_4);
    let t0 = Instant::now();
    let runs = ranking_runs();
    let train_secs = t0.elapsed().as_secs_f64();
    println!("(trained {} ranking seeds × 3 modes in {train_secs:.1}s)", runs.len());
    run(5, "underfitting direction", &|| {
        let c = criterion_5(&runs);
        if train_secs >= 600.0 {
            return Err(format!("training took {train_secs:.0}s"));
        }
        c
    });
    run(6, "robustness gap direction", &|| criterion_6(&runs));
    run(7, "distance cdf direction", &|| criterion_7(&runs));
    run(8, "determinism", &criterion_8);
    run(9, "grid defaults", &criterion_9);
    run(10, "invariant suites", &criterion_10);

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
