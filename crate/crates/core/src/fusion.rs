//! Score fusion and the deeply supervised loss.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, log_sum_exp, softmax, Linear, Parameters};

/// Meta-classifier over the concatenated branch scores `[P; OS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `2 * n_pred -> n_pred`
    pub meta: Linear,
}

impl FusionParams {
    pub fn zeros(n_pred: usize) -> Self {
        Self {
            meta: Linear::zeros(2 * n_pred, n_pred),
        }
    }

    /// Starts as the average of the two branches plus a small perturbation.
    pub fn init<R: Rng>(n_pred: usize, rng: &mut R) -> Self {
        let mut meta = Linear::random(2 * n_pred, n_pred, 0.01, rng);
        for j in 0..n_pred {
            meta.weight[[j, j]] += 0.5;
            meta.weight[[n_pred + j, j]] += 0.5;
        }
        Self { meta }
    }

    pub fn n_pred(&self) -> usize {
        self.meta.output_dim()
    }

    pub fn fuse_scores(&self, p: ArrayView1<f64>, os: ArrayView1<f64>) -> Result<Array1<f64>> {
        let fused = self.forward(p.insert_axis(Axis(0)), os.insert_axis(Axis(0)))?;
        Ok(fused.row(0).to_owned())
    }

    pub fn forward(&self, p: ArrayView2<f64>, os: ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = self.n_pred();
        if p.ncols() != n || os.dim() != p.dim() {
            return Err(Error::shape(
                "fusion input",
                format!("(_, {n}) twice"),
                format!("{:?} / {:?}", p.dim(), os.dim()),
            ));
        }
        Ok(self.meta.forward(concatenate![Axis(1), p, os].view()))
    }

    /// Returns `(dP, dOS)` and accumulates parameter gradients.
    pub fn backward(
        &self,
        p: ArrayView2<f64>,
        os: ArrayView2<f64>,
        d_fused: ArrayView2<f64>,
        grad: &mut FusionParams,
    ) -> (Array2<f64>, Array2<f64>) {
        let n = self.n_pred();
        let d_in = self
            .meta
            .backward(concatenate![Axis(1), p, os].view(), d_fused, &mut grad.meta);
        (d_in.slice(s![.., ..n]).to_owned(), d_in.slice(s![.., n..]).to_owned())
    }
}

impl Parameters for FusionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>)) {
        self.meta.visit(&join(prefix, "meta"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.meta.visit_mut(&join(prefix, "meta"), f);
    }
}

/// Weights of the fused, predicate-branch and object-subject-branch terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub fused: f64,
    pub predicate: f64,
    pub object_subject: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            fused: 1.5,
            predicate: 1.0,
            object_subject: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.fused, self.predicate, self.object_subject];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }

    /// Branch terms are dropped without deep supervision.
    pub fn effective(&self, deep_supervision: bool) -> LossWeights {
        if deep_supervision {
            *self
        } else {
            LossWeights {
                predicate: 0.0,
                object_subject: 0.0,
                ..*self
            }
        }
    }
}

/// Mean cross-entropy of row-wise logits against target ids, with its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: ArrayView2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != targets.len() {
        return Err(Error::shape("cross-entropy targets", logits.nrows(), targets.len()));
    }
    let n = logits.ncols();
    let batch = targets.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (b, (&t, row)) in targets.iter().zip(logits.outer_iter()).enumerate() {
        if t >= n {
            return Err(Error::Vocabulary {
                kind: "predicate",
                id: t,
                size: n,
            });
        }
        loss += log_sum_exp(row) - row[t];
        let mut g = softmax(row);
        g[t] -= 1.0;
        grad.row_mut(b).assign(&(g / batch));
    }
    Ok((loss / batch, grad))
}

/// Loss value with its three components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub fused: f64,
    pub predicate: f64,
    pub object_subject: f64,
}

/// Gradients of the total loss with respect to each score matrix.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub fused: Array2<f64>,
    pub predicate: Array2<f64>,
    pub object_subject: Array2<f64>,
}

pub fn total_loss_with_grad(
    fused: ArrayView2<f64>,
    p: ArrayView2<f64>,
    os: ArrayView2<f64>,
    targets: &[usize],
    w: &LossWeights,
) -> Result<(LossBreakdown, LossGradients)> {
    w.validate()?;
    let (lf, gf) = cross_entropy(fused, targets)?;
    let (lp, gp) = cross_entropy(p, targets)?;
    let (los, gos) = cross_entropy(os, targets)?;
    let breakdown = LossBreakdown {
        total: w.fused * lf + w.predicate * lp + w.object_subject * los,
        fused: lf,
        predicate: lp,
        object_subject: los,
    };
    Ok((
        breakdown,
        LossGradients {
            fused: gf * w.fused,
            predicate: gp * w.predicate,
            object_subject: gos * w.object_subject,
        },
    ))
}

/// `lambda_f CE(fused) + lambda_P CE(P) + lambda_OS CE(OS)`, each term a
/// batch mean.
pub fn total_loss(
    fused: ArrayView2<f64>,
    p: ArrayView2<f64>,
    os: ArrayView2<f64>,
    targets: &[usize],
    w: &LossWeights,
) -> Result<f64> {
    Ok(total_loss_with_grad(fused, p, os, targets, w)?.0.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_meta_gives_bias() {
        let mut f = FusionParams::zeros(3);
        f.meta.bias = array![1.0, -2.0, 0.5];
        let out = f.fuse_scores(array![4.0, 5.0, 6.0].view(), array![-1.0, 0.0, 9.0].view()).unwrap();
        assert_eq!(out, f.meta.bias);
    }

    #[test]
    fn vrd_sized_meta_classifier() {
        let f = FusionParams::zeros(70);
        assert_eq!(f.meta.weight.dim(), (140, 70));
    }

    #[test]
    fn hand_two_class_fusion() {
        let mut f = FusionParams::zeros(2);
        f.meta.weight = array![[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0], [0.5, 0.5]];
        f.meta.bias = array![0.25, 0.0];
        // [P; OS] = [1, 2, 3, 4] -> [1 - 3 + 2, 4 + 3 + 2] + b
        let out = f.fuse_scores(array![1.0, 2.0].view(), array![3.0, 4.0].view()).unwrap();
        assert_eq!(out, array![0.25, 9.0]);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let f = FusionParams::zeros(2);
        assert!(f.fuse_scores(array![1.0].view(), array![1.0, 2.0].view()).is_err());
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp() {
        let logits = array![[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]];
        let (loss, _) = cross_entropy(logits.view(), &[1, 0]).unwrap();
        let ce = |row: &[f64], t: usize| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            z.ln() - row[t]
        };
        let expected = (ce(&[1.0, 2.0, 0.5], 1) + ce(&[-1.0, 0.0, 3.0], 0)) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn weights_validation_and_deep_supervision_switch() {
        assert!(LossWeights::default().validate().is_ok());
        let zero = LossWeights {
            fused: 0.0,
            predicate: 0.0,
            object_subject: 0.0,
        };
        assert!(zero.validate().is_err());
        let off = LossWeights::default().effective(false);
        assert_eq!((off.fused, off.predicate, off.object_subject), (1.5, 0.0, 0.0));
    }

    #[test]
    fn peaked_logits_drive_loss_to_zero() {
        let big = array![[60.0, 0.0, 0.0], [0.0, 0.0, 60.0]];
        let loss = total_loss(big.view(), big.view(), big.view(), &[0, 2], &LossWeights::default()).unwrap();
        assert!((0.0..1e-20).contains(&loss));
    }

    #[test]
    fn target_out_of_range() {
        let x = array![[0.0, 1.0]];
        assert!(total_loss(x.view(), x.view(), x.view(), &[2], &LossWeights::default()).is_err());
    }
}
