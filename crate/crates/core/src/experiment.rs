//! Seeded synthetic benchmark and the component ablation grid.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, DatasetBundle, EmbeddingTable, FeatureProvider, SyntheticFeatures, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{model_alignment, Aggregation, RecallConfig};
use crate::model::{top1_accuracy, BranchMode, Model, ModelDims, PreparedDataset};
use crate::sla::AttentionMode;
use crate::train::{evaluate_recall, train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub train_images: usize,
    pub test_images: usize,
    /// Dataset shape; `n_images` and `seed` are overridden per run.
    pub data: SyntheticSpec,
    pub dims: ModelDims,
    pub features: SyntheticFeatures,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let data = SyntheticSpec::default();
        Self {
            // 2000 training and 500 test pairs at 4 pairs per image
            train_images: 500,
            test_images: 125,
            dims: ModelDims::with_n_pred(data.n_pred),
            data,
            features: SyntheticFeatures::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

/// Train and test splits of one seeded benchmark instance, ready to feed.
pub struct BenchmarkData {
    pub train: DatasetBundle,
    pub test: DatasetBundle,
    pub train_inputs: PreparedDataset,
    pub test_inputs: PreparedDataset,
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_images == 0 || self.test_images == 0 {
            return Err(Error::Config("benchmark needs training and test images".into()));
        }
        if self.dims.n_pred != self.data.n_pred {
            return Err(Error::Config(format!(
                "model has {} predicates, data has {}",
                self.dims.n_pred, self.data.n_pred
            )));
        }
        self.dims.validate()?;
        self.train.validate()
    }

    /// Generates the images for `seed` and splits them by image.
    pub fn build(&self, seed: u64) -> Result<BenchmarkData> {
        self.validate()?;
        let spec = SyntheticSpec {
            n_images: self.train_images + self.test_images,
            seed,
            ..self.data.clone()
        };
        let all = generate_synthetic(&spec)?;
        let split = self.train_images * spec.pairs_per_image;
        let train_idx: Vec<usize> = (0..split).collect();
        let test_idx: Vec<usize> = (split..all.len()).collect();
        let embeddings = EmbeddingTable::synthetic(spec.n_obj, self.dims.sla.word_dim, seed);
        let features = FeatureProvider::synthetic_styled(self.dims.features, seed, self.features);
        let inputs = PreparedDataset::new(&all, &embeddings, &features, self.dims.sla.mask_resolution)?;
        Ok(BenchmarkData {
            train: all.subset(&train_idx),
            test: all.subset(&test_idx),
            train_inputs: inputs.subset(&train_idx),
            test_inputs: inputs.subset(&test_idx),
        })
    }
}

/// One row of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub attention: AttentionMode,
    pub branches: BranchMode,
    pub deep_supervision: bool,
}

impl Variant {
    pub fn label(&self) -> String {
        self.apply(&TrainConfig::default()).variant_label()
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        TrainConfig {
            attention: self.attention,
            branches: self.branches,
            deep_supervision: self.deep_supervision,
            ..cfg.clone()
        }
    }
}

/// The seven rows: each attention variant with both branches and deep
/// supervision, then the full attention module with a single branch, with
/// both branches unsupervised, and the complete model.
pub fn ablation_grid() -> Vec<Variant> {
    use AttentionMode::*;
    use BranchMode::*;
    let v = |attention, branches, deep_supervision| Variant {
        attention,
        branches,
        deep_supervision,
    };
    vec![
        v(None, Both, true),
        v(Linguistic, Both, true),
        v(Spatial, Both, true),
        v(SpatioLinguistic, Predicate, true),
        v(SpatioLinguistic, ObjectSubject, true),
        v(SpatioLinguistic, Both, false),
        v(SpatioLinguistic, Both, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub recall_1_50: f64,
    /// Only for two-branch variants.
    pub alignment: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub seconds: f64,
}

/// Trains `variant` on `data` and evaluates it on the test split.
pub fn run_variant(bench: &BenchmarkConfig, data: &BenchmarkData, variant: Variant, seed: u64) -> Result<RunResult> {
    let start = Instant::now();
    let cfg = TrainConfig {
        seed,
        ..variant.apply(&bench.train)
    };
    let outcome = train(&data.train, &data.train_inputs, bench.dims, &cfg)?;
    let recall_1_50 = evaluate_recall(
        &outcome.model,
        &data.test_inputs,
        &data.test,
        RecallConfig::new(1, 50),
        Aggregation::Micro,
    )?;
    let alignment = if variant.branches == BranchMode::Both {
        Some(model_alignment(&outcome.model, &data.test_inputs)?)
    } else {
        None
    };
    Ok(RunResult {
        variant: variant.label(),
        seed,
        recall_1_50,
        alignment,
        final_train_loss: outcome.log.last().map(|r| r.train_loss),
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_recall_1_50: f64,
    pub per_seed: Vec<f64>,
    pub mean_alignment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunResult>,
}

impl AblationReport {
    pub fn row(&self, variant: &Variant) -> Option<&AblationRow> {
        let label = variant.label();
        self.rows.iter().find(|r| r.variant == label)
    }
}

/// Runs every variant on every seed; `progress` sees each finished run.
pub fn run_ablation(
    bench: &BenchmarkConfig,
    variants: &[Variant],
    mut progress: impl FnMut(&RunResult),
) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for &seed in &bench.seeds {
        let data = bench.build(seed)?;
        for &v in variants {
            let r = run_variant(bench, &data, v, seed)?;
            progress(&r);
            runs.push(r);
        }
    }
    let rows = variants
        .iter()
        .map(|v| {
            let label = v.label();
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == label).collect();
            let per_seed: Vec<f64> = mine.iter().map(|r| r.recall_1_50).collect();
            let aligns: Vec<f64> = mine.iter().filter_map(|r| r.alignment).collect();
            AblationRow {
                variant: label,
                mean_recall_1_50: per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64,
                per_seed,
                mean_alignment: (!aligns.is_empty()).then(|| aligns.iter().sum::<f64>() / aligns.len() as f64),
            }
        })
        .collect();
    Ok(AblationReport { rows, runs })
}

/// Full-model fit of a tiny training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitResult {
    pub samples: usize,
    pub steps: usize,
    pub train_accuracy: f64,
    pub seconds: f64,
}

/// `images` synthetic images of four pairs each with default model sizes.
pub fn small_fixture(images: usize, seed: u64) -> Result<(DatasetBundle, PreparedDataset, ModelDims)> {
    let bench = BenchmarkConfig::default();
    let spec = SyntheticSpec {
        n_images: images,
        seed,
        ..bench.data.clone()
    };
    let ds = generate_synthetic(&spec)?;
    let dims = bench.dims;
    let embeddings = EmbeddingTable::synthetic(spec.n_obj, dims.sla.word_dim, seed);
    let features = FeatureProvider::synthetic_styled(dims.features, seed, bench.features);
    let inputs = PreparedDataset::new(&ds, &embeddings, &features, dims.sla.mask_resolution)?;
    Ok((ds, inputs, dims))
}

/// Trains the full model on 32 pairs with whole-set batches for `steps`
/// optimizer steps at a constant rate and reports training accuracy.
pub fn overfit(seed: u64, steps: usize) -> Result<OverfitResult> {
    let start = Instant::now();
    let (ds, inputs, dims) = small_fixture(8, seed)?;
    let cfg = TrainConfig {
        epochs: steps,
        batch_size: ds.len(),
        lr_drop_epochs: Vec::new(),
        validation_fraction: 0.0,
        seed,
        ..TrainConfig::default()
    };
    let outcome = train(&ds, &inputs, dims, &cfg)?;
    let scores = outcome.model.predict(&inputs, 64)?;
    Ok(OverfitResult {
        samples: ds.len(),
        steps: outcome.log.iter().map(|r| r.steps).sum(),
        train_accuracy: top1_accuracy(scores.final_scores().view(), &inputs.primary),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Whole-set loss of the full model on the 32-pair fixture before and after
/// one epoch of batch-8 training.
pub fn first_epoch_losses(seed: u64) -> Result<(f64, f64)> {
    let (ds, inputs, dims) = small_fixture(8, seed)?;
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        validation_fraction: 0.0,
        seed,
        ..TrainConfig::default()
    };
    let all: Vec<usize> = (0..ds.len()).collect();
    let batch = inputs.batch(&all);
    let loss = |m: &Model| -> Result<f64> {
        Ok(m.loss_and_grad(&batch, &inputs.primary, &cfg.loss_weights, cfg.deep_supervision)?.0.total)
    };
    let before = Model::new(dims, cfg.attention, cfg.branches, seed)?;
    let after = train(&ds, &inputs, dims, &cfg)?.model;
    Ok((loss(&before)?, loss(&after)?))
}
