//! Mini-batch training with Adam and a step learning-rate schedule.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::eval::{recall_k_at_x, records_from_confidences, Aggregation, RecallConfig};
use crate::fusion::LossWeights;
use crate::model::{BranchMode, Model, ModelDims, PreparedDataset};
use crate::nn::{Adam, AdamConfig};
use crate::sla::AttentionMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// The rate is divided by `lr_drop_factor` after each listed epoch.
    /// Drops at or beyond the last epoch never take effect.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub attention: AttentionMode,
    pub branches: BranchMode,
    pub deep_supervision: bool,
    pub loss_weights: LossWeights,
    pub adam: AdamConfig,
    /// Fraction of training pairs held out for per-epoch validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            base_lr: 0.002,
            lr_drop_epochs: vec![5, 9],
            lr_drop_factor: 10.0,
            seed: 0,
            attention: AttentionMode::SpatioLinguistic,
            branches: BranchMode::Both,
            deep_supervision: true,
            loss_weights: LossWeights::default(),
            adam: AdamConfig::default(),
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.lr_drop_factor.is_finite() && self.lr_drop_factor > 0.0) {
            return bad(format!("lr_drop_factor must be positive, got {}", self.lr_drop_factor));
        }
        if self.lr_drop_epochs.contains(&0) {
            return bad("lr_drop_epochs entries must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        self.loss_weights.validate()
    }

    /// Short description of the ablation switches, e.g. `SLA + (P+OS) + DS`.
    pub fn variant_label(&self) -> String {
        let branches = match self.branches {
            BranchMode::Both => "(P+OS)".to_string(),
            b => b.label().to_string(),
        };
        let mut s = format!("{} + {branches}", self.attention.label());
        if self.deep_supervision && self.branches == BranchMode::Both {
            s.push_str(" + DS");
        }
        s
    }
}

/// Learning rate in effect during `epoch` (1-based).
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::Config(format!("epoch {epoch} outside 1..={}", cfg.epochs)));
    }
    let drops = cfg.lr_drop_epochs.iter().filter(|&&d| epoch > d).count();
    Ok(cfg.base_lr / cfg.lr_drop_factor.powi(drops as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// `None` without a validation split.
    pub val_recall_1_50: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    /// Dataset indices held out for validation.
    pub validation: Vec<usize>,
}

/// Seeded split of `n` indices into `(train, validation)`, each sorted.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_d5e7);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = if n_val >= n { n.saturating_sub(1) } else { n_val };
    let (val, train) = idx.split_at(n_val);
    let (mut train, mut val) = (train.to_vec(), val.to_vec());
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn sample_target(gt: &std::collections::BTreeSet<usize>, rng: &mut ChaCha8Rng) -> usize {
    let i = rng.random_range(0..gt.len());
    *gt.iter().nth(i).expect("index within set")
}

/// Recall of the model's softmax confidences on `gt`.
pub fn evaluate_recall(
    model: &Model,
    data: &PreparedDataset,
    gt: &DatasetBundle,
    cfg: RecallConfig,
    aggregation: Aggregation,
) -> Result<f64> {
    let conf = model.confidences(data)?;
    recall_k_at_x(&records_from_confidences(gt, conf.view())?, gt, cfg, aggregation)
}

/// Trains a fresh model on `data` (aligned with `gt.pairs`).
pub fn train(gt: &DatasetBundle, data: &PreparedDataset, dims: ModelDims, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if gt.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if gt.len() != data.len() || dims.n_pred != gt.n_pred {
        return Err(Error::shape(
            "training data",
            format!("{} pairs, {} predicates", gt.len(), gt.n_pred),
            format!("{} pairs, {} predicates", data.len(), dims.n_pred),
        ));
    }
    let mut model = Model::new(dims, cfg.attention, cfg.branches, cfg.seed)?;
    let (train_idx, val_idx) = validation_split(gt.len(), cfg.validation_fraction, cfg.seed);
    let val = if val_idx.is_empty() {
        None
    } else {
        let bundle = gt.subset(&val_idx);
        let prepared = data.subset(&val_idx);
        Some((bundle, prepared))
    };

    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x0bad_5eed));
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        order.shuffle(&mut rng);
        let targets: Vec<usize> = order.iter().map(|&i| sample_target(&gt.pairs[i].gt_predicates, &mut rng)).collect();
        let (mut loss_sum, mut correct, mut steps) = (0.0, 0usize, 0usize);
        for (b, (idx, tgt)) in order.chunks(cfg.batch_size).zip(targets.chunks(cfg.batch_size)).enumerate() {
            let batch = data.batch(idx);
            let (loss, grad, hits) = step_inputs(&model, &batch, tgt, cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            adam.update(&mut model.params, &grad, lr);
            loss_sum += loss * idx.len() as f64;
            correct += hits;
            steps += 1;
        }
        let seen = order.len().max(1) as f64;
        let val_recall_1_50 = match &val {
            Some((bundle, prepared)) => Some(evaluate_recall(
                &model,
                prepared,
                bundle,
                RecallConfig::new(1, 50),
                Aggregation::Micro,
            )?),
            None => None,
        };
        log.push(EpochRecord {
            epoch,
            lr,
            steps,
            train_loss: loss_sum / seen,
            train_accuracy: correct as f64 / seen,
            val_recall_1_50,
        });
    }
    Ok(TrainOutcome {
        model,
        log,
        validation: val_idx,
    })
}

fn step_inputs(
    model: &Model,
    batch: &crate::model::Batch,
    targets: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, crate::model::ModelParams, usize)> {
    let (breakdown, grad, scores) = model.loss_grad_scores(batch, targets, &cfg.loss_weights, cfg.deep_supervision)?;
    let hits = scores
        .outer_iter()
        .zip(targets)
        .filter(|(row, &t)| crate::model::argmax(row.iter().copied()) == t)
        .count();
    Ok((breakdown.total, grad, hits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, EmbeddingTable, FeatureProvider, SyntheticSpec};
    use crate::gradcheck::toy_dims;

    #[test]
    fn schedule_matches_piecewise_oracle() {
        let cfg = TrainConfig::default();
        let got: Vec<f64> = (1..=10).map(|e| lr_at_epoch(&cfg, e).unwrap()).collect();
        let oracle = |e: usize| match e {
            1..=5 => 0.002,
            6..=9 => 0.002 / 10.0,
            _ => 0.002 / 100.0,
        };
        for (e, lr) in (1..=10).zip(&got) {
            assert_eq!(*lr, oracle(e), "epoch {e}");
        }
        assert_eq!(got[0], 0.002);
        assert!((got[5] - 0.0002).abs() < 1e-18);
        assert!((got[9] - 0.00002).abs() < 1e-18);
        assert!(lr_at_epoch(&cfg, 0).is_err());
        assert!(lr_at_epoch(&cfg, 11).is_err());
    }

    #[test]
    fn defaults_follow_recipe() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.base_lr), (10, 32, 0.002));
        assert_eq!(cfg.variant_label(), "SLA + (P+OS) + DS");
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = validation_split(100, 0.1, 4);
        assert_eq!((t.len(), v.len()), (90, 10));
        assert!(v.iter().all(|i| !t.contains(i)));
        assert_eq!(validation_split(100, 0.1, 4), (t, v));
        assert_eq!(validation_split(5, 0.0, 1).1.len(), 0);
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let ds = generate_synthetic(&SyntheticSpec {
            n_images: 4,
            ..Default::default()
        })
        .unwrap();
        let dims = toy_dims(ds.n_pred);
        let emb = EmbeddingTable::synthetic(ds.n_obj, 3, 0);
        let data = PreparedDataset::new(&ds, &emb, &FeatureProvider::synthetic(dims.features, 0), 8).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(&ds, &data, dims, &cfg).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.model, Model::new(dims, cfg.attention, cfg.branches, cfg.seed).unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.batch_size = 1;
        cfg.validation_fraction = 1.0;
        assert!(cfg.validate().is_err());
    }
}
