//! Configuration and command implementations behind the `predcls` binary.
//!
//! Settings resolve in the order command-line flag, TOML config file,
//! built-in default. Every command writes its artifacts below the output
//! directory (`--out`, `PREDCLS_OUT`, `output_dir` in the file, or `out`).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use predcls::data::{
    load_annotations, save_dataset, DatasetBundle, EmbeddingTable, FeatureProvider, SyntheticFeatures, SyntheticSpec,
};
use predcls::eval::projection::ProjectionConfig;
use predcls::eval::recall::{recall_table, write_predictions};
use predcls::eval::{export_projection, model_alignment, records_from_confidences, Aggregation, RecallConfig};
use predcls::experiment::{ablation_grid, run_ablation, AblationReport, BenchmarkConfig};
use predcls::model::BranchMode;
use predcls::{Checkpoint, Model, ModelDims, PreparedDataset, TrainConfig};
use serde::{Deserialize, Serialize};

/// Where pairs, embeddings and features come from.
///
/// Without annotation files the seeded synthetic benchmark is used: the
/// first `train_images` images form the training split, the rest the test
/// split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: usize,
    pub test_images: usize,
    pub synthetic: SyntheticSpec,
    pub synthetic_features: SyntheticFeatures,
    pub train_annotations: Option<PathBuf>,
    pub test_annotations: Option<PathBuf>,
    pub objects: Option<PathBuf>,
    pub predicates: Option<PathBuf>,
    pub image_sizes: Option<PathBuf>,
    /// Word vectors in text format; seeded random vectors otherwise.
    pub embeddings: Option<PathBuf>,
    /// Binary feature file; seeded synthetic features otherwise.
    pub features: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        Self {
            train_images: b.train_images,
            test_images: b.test_images,
            synthetic: b.data,
            synthetic_features: b.features,
            train_annotations: None,
            test_annotations: None,
            objects: None,
            predicates: None,
            image_sizes: None,
            embeddings: None,
            features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `(k, x)` settings; `k` is capped at the number of predicates.
    pub settings: Vec<(usize, usize)>,
    pub per_image: bool,
    pub write_predictions: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            settings: vec![(1, 50), (70, 50), (70, 100)],
            per_image: false,
            write_predictions: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: BenchmarkConfig::default().seeds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub projection: ProjectionConfig,
    /// Only the first `max_points` test pairs are projected.
    pub max_points: usize,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            projection: ProjectionConfig::default(),
            max_points: 500,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Not echoed into reports so that reruns elsewhere compare equal.
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    /// Defaults to the standard sizes for the data's predicate count.
    pub model: Option<ModelDims>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub project: ProjectConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("invalid config file")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn uses_annotations(&self) -> bool {
        self.data.train_annotations.is_some() || self.data.test_annotations.is_some()
    }

    pub fn dims(&self, n_pred: usize) -> Result<ModelDims> {
        let dims = self.model.unwrap_or_else(|| ModelDims::with_n_pred(n_pred));
        if dims.n_pred != n_pred {
            bail!("model has {} predicates but the data has {n_pred}", dims.n_pred);
        }
        dims.validate()?;
        Ok(dims)
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        let data = &self.data;
        BenchmarkConfig {
            train_images: data.train_images,
            test_images: data.test_images,
            dims: self.model.unwrap_or_else(|| ModelDims::with_n_pred(data.synthetic.n_pred)),
            data: data.synthetic.clone(),
            features: data.synthetic_features,
            train: self.train.clone(),
            seeds: self.ablate.seeds.clone(),
        }
    }

    /// Both splits with model inputs prepared.
    pub fn load_splits(&self) -> Result<Splits> {
        if !self.uses_annotations() {
            let d = self.benchmark().build(self.data.synthetic.seed)?;
            return Ok(Splits {
                train: (d.train, d.train_inputs),
                test: (d.test, d.test_inputs),
            });
        }
        let data = &self.data;
        let (Some(objects), Some(predicates)) = (&data.objects, &data.predicates) else {
            bail!("annotation files need `objects` and `predicates` vocabularies");
        };
        let load = |p: &Option<PathBuf>| -> Result<DatasetBundle> {
            let p = p.as_ref().context("both train_annotations and test_annotations are required")?;
            load_annotations(p, objects, predicates, data.image_sizes.as_deref())
                .with_context(|| format!("loading {}", p.display()))
        };
        let train = load(&data.train_annotations)?;
        let test = load(&data.test_annotations)?;
        let dims = self.dims(train.n_pred)?;
        let seed = data.synthetic.seed;
        let embeddings = match &data.embeddings {
            Some(p) => EmbeddingTable::from_text_file(p, &train.object_names)?,
            None => EmbeddingTable::synthetic(train.n_obj, dims.sla.word_dim, seed),
        };
        let features = match &data.features {
            Some(p) => FeatureProvider::load(p)?,
            None => FeatureProvider::synthetic_styled(dims.features, seed, data.synthetic_features),
        };
        let prep = |b: &DatasetBundle| PreparedDataset::new(b, &embeddings, &features, dims.sla.mask_resolution);
        Ok(Splits {
            train: (train.clone(), prep(&train)?),
            test: (test.clone(), prep(&test)?),
        })
    }

    pub fn recall_configs(&self, n_pred: usize) -> Vec<RecallConfig> {
        self.eval
            .settings
            .iter()
            .map(|&(k, x)| RecallConfig::new(k.min(n_pred), x))
            .collect()
    }
}

pub struct Splits {
    pub train: (DatasetBundle, PreparedDataset),
    pub test: (DatasetBundle, PreparedDataset),
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Writes both splits as annotation files under `<out>/data`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir().join("data");
    create_dir(&dir)?;
    let splits = cfg.load_splits()?;
    save_dataset(&splits.train.0, &dir, "train")?;
    save_dataset(&splits.test.0, &dir, "test")?;
    Ok(dir)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";

/// Trains on the training split and writes the checkpoint plus a JSONL log
/// whose first line holds the resolved configuration.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir();
    create_dir(&out)?;
    let splits = cfg.load_splits()?;
    let (gt, inputs) = &splits.train;
    let dims = cfg.dims(gt.n_pred)?;
    let outcome = predcls::train(gt, inputs, dims, &cfg.train)?;

    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log = fs::File::create(&log_path).with_context(|| format!("cannot write {}", log_path.display()))?;
    writeln!(log, "{}", serde_json::json!({ "config": cfg, "dims": dims }))?;
    for rec in &outcome.log {
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
    }
    let ck_path = out.join(CHECKPOINT_FILE);
    Checkpoint::from_model(&outcome.model, &cfg.train).save(&ck_path)?;
    Ok(ck_path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: RunConfig,
    pub variant: String,
    pub test_pairs: usize,
    pub aggregation: Aggregation,
    pub recall: BTreeMap<String, f64>,
    /// Mean distance between the two branch score vectors, both-branch
    /// models only.
    pub alignment: Option<f64>,
}

pub fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((ck.to_model()?, ck))
}

/// Evaluates a checkpoint on the test split and writes `eval_report.json`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let out = cfg.out_dir();
    create_dir(&out)?;
    let (model, ck) = load_model(checkpoint)?;
    let splits = cfg.load_splits()?;
    let (gt, inputs) = &splits.test;
    if model.dims.n_pred != gt.n_pred {
        bail!("checkpoint has {} predicates but the data has {}", model.dims.n_pred, gt.n_pred);
    }
    let conf = model.confidences(inputs)?;
    let records = records_from_confidences(gt, conf.view())?;
    if cfg.eval.write_predictions {
        write_predictions(&out.join("predictions.jsonl"), &records)?;
    }
    let aggregation = if cfg.eval.per_image {
        Aggregation::PerImage
    } else {
        Aggregation::Micro
    };
    let recall = recall_table(&records, gt, &cfg.recall_configs(gt.n_pred), aggregation)?;
    let alignment = match model.branches {
        BranchMode::Both => Some(model_alignment(&model, inputs)?),
        _ => None,
    };
    let report = EvalReport {
        config: cfg.clone(),
        variant: ck.train_config.variant_label(),
        test_pairs: gt.len(),
        aggregation,
        recall,
        alignment,
    };
    write_json(&out.join(EVAL_REPORT_FILE), &report)?;
    Ok(report)
}

/// Runs the seven-row component ablation on every configured seed.
pub fn cmd_ablate(cfg: &RunConfig, progress: impl FnMut(&predcls::experiment::RunResult)) -> Result<AblationReport> {
    if cfg.uses_annotations() {
        bail!("the ablation runs on the synthetic benchmark only");
    }
    let out = cfg.out_dir();
    create_dir(&out)?;
    let report = run_ablation(&cfg.benchmark(), &ablation_grid(), progress)?;
    write_json(&out.join("ablation.json"), &report)?;
    fs::write(out.join("ablation.md"), ablation_table(&report))?;
    Ok(report)
}

pub fn ablation_table(report: &AblationReport) -> String {
    let mut s = String::from("| variant | R_1@50 | per seed | alignment |\n|---|---|---|---|\n");
    for r in &report.rows {
        let seeds: Vec<String> = r.per_seed.iter().map(|v| format!("{:.2}", 100.0 * v)).collect();
        let align = r.mean_alignment.map_or_else(|| "-".into(), |a| format!("{a:.3}"));
        s += &format!(
            "| {} | {:.2} | {} | {align} |\n",
            r.variant,
            100.0 * r.mean_recall_1_50,
            seeds.join(" / ")
        );
    }
    s
}

/// Projects the attention vectors of test pairs, labelled by their first
/// ground-truth predicate, and writes SVG, CSV and JSON files.
pub fn cmd_project(cfg: &RunConfig, checkpoint: &Path) -> Result<PathBuf> {
    let out = cfg.out_dir();
    create_dir(&out)?;
    let (model, ck) = load_model(checkpoint)?;
    let splits = cfg.load_splits()?;
    let (gt, inputs) = &splits.test;
    let n = gt.len().min(cfg.project.max_points);
    let idx: Vec<usize> = (0..n).collect();
    let vectors = model.predict(&inputs.subset(&idx), 256)?.a;
    let labels: Vec<String> = gt.pairs[..n]
        .iter()
        .map(|p| gt.predicate_names[p.primary_predicate()].clone())
        .collect();
    let map = export_projection(vectors.view(), &labels, &cfg.project.projection)?;
    let title = format!("attention vectors, {}", ck.train_config.variant_label());
    map.write_files(&out, "projection", &title)?;
    Ok(out.join("projection.svg"))
}
