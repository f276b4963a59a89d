//! The five subcommands.

use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use stabletrain_core::dataset::{
    generate_corpus, make_triplets, read_image, write_corpus, write_image, CorpusManifest, LabeledExample,
};
use stabletrain_core::distortions::{Distortion, DistortionSpec};
use stabletrain_core::evaluation::{evaluate_suite, EvalConfig, EvalReport, ReportMeta};
use stabletrain_core::network::{Head, InputShape, LayerSpec, Model};
use stabletrain_core::objectives::Triplet;
use stabletrain_core::trainer::{self, grid_search, GridRow, HistoryRecord, Task, TrainData, TrainMode, TrainRun};
use stabletrain_core::Error;

use crate::config::{CorpusSource, RunConfig};
use crate::failure::Failure;

pub const PARAMS_FILE: &str = "params.stp";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const REPORTS_DIR: &str = "reports";
pub const REPORTS_FILE: &str = "reports.json";
pub const GRID_CSV: &str = "grid.csv";
pub const GRID_JSON: &str = "grid.json";

type Result<T> = std::result::Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Classification => "classification",
        Task::Triplet => "triplet",
    }
}

fn input_shape(corpus: &[LabeledExample]) -> Result<InputShape> {
    let first = corpus.first().ok_or_else(|| Failure::data("corpus is empty"))?;
    let img = &first.image;
    Ok(InputShape { width: img.width(), height: img.height(), channels: img.channels() })
}

fn num_classes(corpus: &[LabeledExample]) -> usize {
    corpus.iter().map(|e| e.label + 1).max().unwrap_or(0)
}

pub fn datagen(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let CorpusSource::Generate(spec) = &cfg.corpus else {
        return Err(Failure::validation("datagen needs a `generate` corpus source"));
    };
    let dir = out.map_or_else(|| cfg.output_dir.join("corpus"), Path::to_path_buf);
    let corpus = generate_corpus(spec)?;
    let mut manifest = write_corpus(&dir, &corpus)?;
    manifest.spec = Some(spec.clone());
    manifest.config_digest = Some(cfg.digest());
    manifest.write(&dir)?;
    println!("wrote {} images to {}", corpus.len(), dir.display());
    Ok(dir)
}

/// Manifest paths must be plain relative names so outputs stay inside the
/// output directory.
fn check_entry_path(p: &str) -> Result<()> {
    let ok = !p.is_empty() && Path::new(p).components().all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(Failure::data(format!("manifest entry '{p}' is not a relative path")))
    }
}

pub fn distort(input: &Path, tag: &str, output: &Path, seed: u64) -> Result<()> {
    let d: Distortion = tag.parse()?;
    if !input.is_dir() {
        return Err(Failure::data(format!("input directory {} does not exist", input.display())));
    }
    let manifest = CorpusManifest::read(input)?;
    for e in &manifest.files {
        check_entry_path(&e.path)?;
    }
    create_dir(output)?;
    let same = fs::canonicalize(input).map_err(|e| io_err(input, e))?
        == fs::canonicalize(output).map_err(|e| io_err(output, e))?;
    if same {
        return Err(Failure::validation("output directory must differ from the input directory"));
    }
    let spec = DistortionSpec::new(d, seed);
    for (i, e) in manifest.files.iter().enumerate() {
        let img = read_image(input.join(&e.path))?;
        let out = spec.apply(&img, i as u64)?;
        let target = output.join(&e.path);
        if let Some(parent) = target.parent() {
            create_dir(parent)?;
        }
        write_image(&target, &out)?;
    }
    let identity = json!({ "distortion": spec, "input_digest": manifest.config_digest, "files": manifest.files });
    let digest = hex::encode(Sha256::digest(serde_json::to_vec(&identity).map_err(Error::from)?));
    let out_manifest = CorpusManifest {
        spec: manifest.spec.clone(),
        distortion: Some(spec),
        config_digest: Some(digest),
        files: manifest.files.clone(),
    };
    out_manifest.write(output)?;
    println!("wrote {} {} images to {}", out_manifest.files.len(), spec.tag(), output.display());
    Ok(())
}

/// Everything training needs, loaded and checked.
pub struct Prepared {
    pub spec: LayerSpec,
    pub corpus: Vec<LabeledExample>,
    pub triplets: Vec<Triplet>,
}

impl Prepared {
    pub fn data(&self) -> TrainData<'_> {
        if self.triplets.is_empty() {
            TrainData::Labeled(&self.corpus)
        } else {
            TrainData::Triplets(&self.triplets)
        }
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    for key in cfg.ignored_stability_keys() {
        eprintln!("warning: mode=baseline ignores stability.{key}");
    }
    let corpus = cfg.corpus.load()?;
    let spec = cfg.architecture_for(input_shape(&corpus)?, num_classes(&corpus))?;
    let triplets = match cfg.task {
        Task::Classification => Vec::new(),
        Task::Triplet => make_triplets(&corpus, cfg.train_triplets, cfg.seed)?,
    };
    Ok(Prepared { spec, corpus, triplets })
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    #[serde(flatten)]
    record: &'a HistoryRecord,
    config_digest: &'a str,
}

pub fn train(cfg: &RunConfig) -> Result<TrainRun> {
    let prep = prepare(cfg)?;
    let model = Model::init(prep.spec.clone(), cfg.seed)?;
    let run = trainer::train(model, prep.data(), &cfg.train_settings())?;
    let digest = cfg.digest();
    create_dir(&cfg.output_dir)?;

    let params_path = cfg.output_dir.join(PARAMS_FILE);
    let meta = [("config_digest".to_string(), digest.clone())].into();
    fs::write(&params_path, run.model.to_bytes_with_meta(&meta)).map_err(|e| io_err(&params_path, e))?;

    let history_path = cfg.output_dir.join(HISTORY_FILE);
    let mut buf = Vec::new();
    for record in &run.history {
        serde_json::to_writer(&mut buf, &HistoryLine { record, config_digest: &digest }).map_err(Error::from)?;
        buf.push(b'\n');
    }
    fs::File::create(&history_path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| io_err(&history_path, e))?;

    let last = run.history.last();
    write_json(
        &cfg.output_dir.join(TRAIN_SUMMARY_FILE),
        &json!({
            "task": task_name(cfg.task),
            "mode": cfg.mode,
            "steps": run.history.len(),
            "final_loss": last.map(|h| h.loss),
            "perturbation_calls": run.perturbation_calls,
            "params_file": PARAMS_FILE,
            "seed": cfg.seed,
            "config_digest": digest,
        }),
    )?;
    println!("trained {} steps; params in {}", run.history.len(), params_path.display());
    Ok(run)
}

/// Head-only check so that metric mistakes surface before any data is read.
fn precheck_metrics(cfg: &RunConfig, eval: &EvalConfig) -> Result<()> {
    let head = match (&cfg.architecture, cfg.task) {
        (Some(a), _) => a.head,
        (None, Task::Classification) => Head::Classifier { num_classes: usize::MAX },
        (None, Task::Triplet) => Head::Embedding { dim: 1 },
    };
    eval.validate(head)?;
    Ok(())
}

fn report_file_name(r: &EvalReport) -> String {
    let metric = r.params.get("metric_spec").and_then(|v| v.as_str()).unwrap_or(&r.metric);
    let clean = |s: &str| s.replace('@', "_at_").replace([':', '/', '.'], "_");
    format!("{}__{}.json", clean(&r.distortion), clean(metric))
}

pub fn eval(cfg: &RunConfig, params: &Path) -> Result<Vec<EvalReport>> {
    let eval_cfg = cfg.eval_config();
    precheck_metrics(cfg, &eval_cfg)?;
    let distortions = cfg.distortion_specs()?;
    let bytes = fs::read(params).map_err(|e| io_err(params, e))?;
    let (model, _) = Model::from_bytes_with_meta(&bytes)?;
    let corpus = cfg.eval_source().load()?;
    let expected = cfg.architecture_for(input_shape(&corpus)?, num_classes(&corpus))?;
    if model.spec() != &expected {
        return Err(Failure::validation(format!(
            "{} holds a different architecture than the config describes",
            params.display()
        )));
    }
    let meta = ReportMeta { task: task_name(cfg.task).into(), seed: cfg.seed, config_digest: cfg.digest() };
    let reports = evaluate_suite(&model, &corpus, &distortions, &eval_cfg, &meta)?;
    let dir = cfg.output_dir.join(REPORTS_DIR);
    create_dir(&dir)?;
    for r in &reports {
        write_json(&dir.join(report_file_name(r)), r)?;
    }
    write_json(&cfg.output_dir.join(REPORTS_FILE), &reports)?;
    println!("wrote {} reports to {}", reports.len(), dir.display());
    Ok(reports)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    rank: usize,
    sigma: f64,
    alpha: f64,
    learning_rate: f64,
    value: f64,
    metric: &'a str,
    config_digest: &'a str,
}

pub fn gridsearch(cfg: &RunConfig) -> Result<Vec<GridRow>> {
    if cfg.mode == TrainMode::Baseline {
        return Err(Failure::validation("gridsearch needs mode stability or augmentation"));
    }
    cfg.grid.validate()?;
    let mut eval_cfg = cfg.eval_config();
    precheck_metrics(cfg, &eval_cfg)?;
    let metric = eval_cfg.metrics[0];
    eval_cfg.metrics = vec![metric];

    let prep = prepare(cfg)?;
    let eval_corpus = cfg.eval_source().load()?;
    let digest = cfg.digest();
    let meta = ReportMeta { task: task_name(cfg.task).into(), seed: cfg.seed, config_digest: digest.clone() };
    let model = Model::init(prep.spec.clone(), cfg.seed)?;
    let rows = grid_search(model, prep.data(), &cfg.train_settings(), &cfg.grid, |m| {
        Ok(evaluate_suite(m, &eval_corpus, &[], &eval_cfg, &meta)?[0].value)
    })?;

    create_dir(&cfg.output_dir)?;
    let metric_name = metric.to_string();
    let csv_path = cfg.output_dir.join(GRID_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(CsvRow {
            rank: r.rank,
            sigma: r.sigma,
            alpha: r.alpha,
            learning_rate: r.learning_rate,
            value: r.value,
            metric: &metric_name,
            config_digest: &digest,
        })?;
    }
    w.flush().map_err(|e| io_err(&csv_path, e))?;
    write_json(
        &cfg.output_dir.join(GRID_JSON),
        &json!({ "metric": metric_name, "grid": cfg.grid, "rows": rows, "config_digest": digest }),
    )?;
    println!("ranked {} grid cells into {}", rows.len(), csv_path.display());
    Ok(rows)
}
