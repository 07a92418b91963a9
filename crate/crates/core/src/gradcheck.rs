//! Central finite-difference verification of the hand-written backward
//! passes on small fixtures.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{generate_synthetic, EmbeddingTable, FeatureDims, FeatureProvider, SyntheticSpec};
use crate::error::Result;
use crate::fusion::{total_loss_with_grad, LossWeights};
use crate::model::{BranchMode, Model, ModelDims, ModelParams, PreparedDataset};
use crate::nn::Parameters;
use crate::sla::{AttentionMode, SlaDims};

pub const DEFAULT_STEP: f64 = 1e-4;

/// Largest relative error over one group of checked coordinates.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps coordinates whose
/// true gradient is essentially zero from dividing noise by noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

pub fn flatten<P: Parameters>(p: &P) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, t| out.extend(t.iter().map(|&v| (name.to_string(), v))));
    out
}

fn assign_flat<P: Parameters>(p: &mut P, values: &[f64]) {
    let mut i = 0;
    p.visit_mut("", &mut |_, mut t| {
        for v in t.iter_mut() {
            *v = values[i];
            i += 1;
        }
    });
}

/// Compares `analytic` with central differences of `loss` for every
/// coordinate of `params`, grouping coordinates by the tensor-name prefix
/// that `group` returns (`None` skips the coordinate).
pub fn check_parameters<P: Parameters + Clone>(
    params: &P,
    analytic: &P,
    step: f64,
    mut loss: impl FnMut(&P) -> f64,
    group: impl Fn(&str) -> Option<String>,
) -> Vec<GradCheckReport> {
    let base = flatten(params);
    let values: Vec<f64> = base.iter().map(|(_, v)| *v).collect();
    let grads = flatten(analytic);
    let mut probe = params.clone();
    let mut reports: Vec<GradCheckReport> = Vec::new();
    let mut scratch = values.clone();
    for (i, (name, _)) in base.iter().enumerate() {
        let Some(g) = group(name) else { continue };
        scratch[i] = values[i] + step;
        assign_flat(&mut probe, &scratch);
        let up = loss(&probe);
        scratch[i] = values[i] - step;
        assign_flat(&mut probe, &scratch);
        let down = loss(&probe);
        scratch[i] = values[i];
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(grads[i].1, numeric);
        match reports.iter_mut().find(|r| r.name == g) {
            Some(r) => {
                r.checked += 1;
                r.max_rel_error = r.max_rel_error.max(err);
            }
            None => reports.push(GradCheckReport {
                name: g,
                checked: 1,
                max_rel_error: err,
            }),
        }
    }
    reports
}

/// Same comparison for a plain input matrix.
pub fn check_input(
    name: &str,
    x: &Array2<f64>,
    analytic: ArrayView2<f64>,
    step: f64,
    mut loss: impl FnMut(&Array2<f64>) -> f64,
) -> GradCheckReport {
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for ((i, j), &g) in analytic.indexed_iter() {
        probe[[i, j]] = x[[i, j]] + step;
        let up = loss(&probe);
        probe[[i, j]] = x[[i, j]] - step;
        let down = loss(&probe);
        probe[[i, j]] = x[[i, j]];
        worst = worst.max(relative_error(g, (up - down) / (2.0 * step)));
    }
    GradCheckReport {
        name: name.to_string(),
        checked: analytic.len(),
        max_rel_error: worst,
    }
}

/// Small dimensions for gradient checks.
pub fn toy_dims(n_pred: usize) -> ModelDims {
    ModelDims {
        sla: SlaDims {
            mask_resolution: 8,
            conv_channels: [2, 3, 4],
            word_dim: 3,
            lang_hidden: 4,
            lang_out: 3,
            sla_dim: 3,
        },
        features: FeatureDims {
            visual_dim: 4,
            map_channels: 3,
            map_height: 2,
            map_width: 2,
        },
        feature_dim: 4,
        rank: 2,
        n_pred,
    }
}

fn jitter<P: Parameters>(p: &mut P, std: f64, rng: &mut ChaCha8Rng) {
    // non-zero biases keep ReLU pre-activations away from the kink at 0
    p.visit_mut("", &mut |_, mut t| {
        t.mapv_inplace(|v| v + std * rng.sample::<f64, _>(StandardNormal));
    });
}

fn group_of(name: &str) -> Option<String> {
    let parts: Vec<&str> = name.split('.').collect();
    let label = match parts.as_slice() {
        ["sla", layer, ..] if layer.starts_with("conv") => "sla conv stack",
        ["sla", layer, ..] if layer.starts_with("lang") => "sla language mlp",
        ["sla", "fuse", ..] => "sla fusion",
        ["p_branch", "query", ..] => "attentional pooling",
        ["p_branch", "encoder", ..] => "predicate encoder",
        ["p_branch", "classifier", ..] => "p-branch attentional classifier",
        ["os_branch", "subject" | "object", ..] => "subject/object encoders",
        ["os_branch", "classifier", ..] => "os-branch attentional classifier",
        ["fusion", ..] => "meta-classifier",
        _ => return None,
    };
    Some(label.to_string())
}

/// Runs every parameter group of the toy model through the check, under
/// the full configuration and each ablation switch, plus the loss itself
/// with respect to the three score matrices.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let spec = SyntheticSpec {
        n_images: 2,
        pairs_per_image: 3,
        n_obj: 6,
        seed,
        ..Default::default()
    };
    let ds = generate_synthetic(&spec)?;
    let dims = toy_dims(ds.n_pred);
    let emb = EmbeddingTable::synthetic(ds.n_obj, dims.sla.word_dim, seed);
    let feats = FeatureProvider::synthetic(dims.features, seed);
    let data = PreparedDataset::new(&ds, &emb, &feats, dims.sla.mask_resolution)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let batch = data.batch(&idx);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let targets: Vec<usize> = (0..batch.size).map(|_| rng.random_range(0..ds.n_pred)).collect();
    let weights = LossWeights::default();

    let mut reports = Vec::new();
    let configs = [
        (AttentionMode::SpatioLinguistic, BranchMode::Both, true),
        (AttentionMode::SpatioLinguistic, BranchMode::Both, false),
        (AttentionMode::SpatioLinguistic, BranchMode::Predicate, true),
        (AttentionMode::SpatioLinguistic, BranchMode::ObjectSubject, true),
        (AttentionMode::Linguistic, BranchMode::Both, true),
        (AttentionMode::Spatial, BranchMode::Both, true),
    ];
    for (attention, branches, ds_on) in configs {
        let mut model = Model::new(dims, attention, branches, seed)?;
        jitter(&mut model.params, 0.1, &mut rng);
        let (_, grad) = model.loss_and_grad(&batch, &targets, &weights, ds_on)?;
        let tag = format!("{} {}{}", attention.label(), branches.label(), if ds_on { " +DS" } else { "" });
        let mut probe = model.clone();
        let loss = |p: &ModelParams| {
            probe.params = p.clone();
            probe
                .loss_and_grad(&batch, &targets, &weights, ds_on)
                .map(|(b, _)| b.total)
                .unwrap_or(f64::NAN)
        };
        let used = |name: &str| {
            let g = group_of(name)?;
            let active = match name.split('.').next() {
                Some("sla") => {
                    (name.starts_with("sla.conv") && attention.uses_masks())
                        || (name.starts_with("sla.lang") && attention.uses_language())
                        || name.starts_with("sla.fuse")
                }
                Some("p_branch") => branches.uses_p(),
                Some("os_branch") => branches.uses_os(),
                Some("fusion") => branches == BranchMode::Both,
                _ => false,
            };
            active.then(|| format!("{g} [{tag}]"))
        };
        reports.extend(check_parameters(&model.params, &grad, DEFAULT_STEP, loss, used));
    }

    let n = ds.n_pred;
    let scores = |rng: &mut ChaCha8Rng| Array2::from_shape_simple_fn((batch.size, n), || rng.sample(StandardNormal));
    let (f, p, os) = (scores(&mut rng), scores(&mut rng), scores(&mut rng));
    let (_, g) = total_loss_with_grad(f.view(), p.view(), os.view(), &targets, &weights)?;
    let eval = |f: &Array2<f64>, p: &Array2<f64>, os: &Array2<f64>| {
        total_loss_with_grad(f.view(), p.view(), os.view(), &targets, &weights)
            .map(|(b, _)| b.total)
            .unwrap_or(f64::NAN)
    };
    reports.push(check_input("total loss / fused scores", &f, g.fused.view(), DEFAULT_STEP, |x| {
        eval(x, &p, &os)
    }));
    reports.push(check_input("total loss / P scores", &p, g.predicate.view(), DEFAULT_STEP, |x| {
        eval(&f, x, &os)
    }));
    reports.push(check_input("total loss / OS scores", &os, g.object_subject.view(), DEFAULT_STEP, |x| {
        eval(&f, &p, x)
    }));
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_group_passes() {
        let reports = gradient_suite(3).unwrap();
        for r in &reports {
            assert!(r.passed(1e-3), "{r:?}");
        }
        for g in [
            "sla conv stack",
            "sla language mlp",
            "sla fusion",
            "attentional pooling",
            "predicate encoder",
            "p-branch attentional classifier",
            "subject/object encoders",
            "os-branch attentional classifier",
            "meta-classifier",
        ] {
            assert!(reports.iter().any(|r| r.name.starts_with(g)), "missing {g}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, -1e-12) < 1e-5);
    }
}
