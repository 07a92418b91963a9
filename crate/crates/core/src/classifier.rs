//! Attention-conditioned linear classifier shared by both branches.
//!
//! Weights are `W(a) = W0 + U(a) V(a)^T` where bias-free hypernetworks map
//! the attention vector `a` to `U(a)` (`d_f x r`) and `V(a)` (`n_pred x r`).
//! Scores are `f W(a) + b`. The low-rank update keeps the classifier
//! conditioned on the pair's spatial and linguistic context without
//! generating a full `d_f x n_pred` matrix per pair.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Parameters, Projection};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionalClassifier {
    pub rank: usize,
    /// `d_f x n_pred`
    pub base: Array2<f64>,
    pub bias: Array1<f64>,
    /// `d_a -> d_f * rank`, row-major `(i, k)`
    pub gen_u: Projection,
    /// `d_a -> n_pred * rank`, row-major `(j, k)`
    pub gen_v: Projection,
}

#[derive(Debug, Clone)]
pub struct ClassifierCache {
    u: Array2<f64>,
    v: Array2<f64>,
    t: Array2<f64>,
}

impl AttentionalClassifier {
    pub fn zeros(feature_dim: usize, n_pred: usize, sla_dim: usize, rank: usize) -> Self {
        Self {
            rank,
            base: Array2::zeros((feature_dim, n_pred)),
            bias: Array1::zeros(n_pred),
            gen_u: Projection::zeros(sla_dim, feature_dim * rank),
            gen_v: Projection::zeros(sla_dim, n_pred * rank),
        }
    }

    pub fn init<R: Rng>(feature_dim: usize, n_pred: usize, sla_dim: usize, rank: usize, rng: &mut R) -> Self {
        let base = Projection::random(feature_dim, n_pred, (1.0 / feature_dim as f64).sqrt(), rng).weight;
        // scaled so that f U(a) V(a)^T has roughly the magnitude of f W0
        let u_std = (1.0 / (sla_dim * feature_dim) as f64).sqrt();
        let v_std = (1.0 / (sla_dim * rank) as f64).sqrt();
        Self {
            rank,
            base,
            bias: Array1::zeros(n_pred),
            gen_u: Projection::random(sla_dim, feature_dim * rank, u_std, rng),
            gen_v: Projection::random(sla_dim, n_pred * rank, v_std, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.base.nrows()
    }

    pub fn n_pred(&self) -> usize {
        self.base.ncols()
    }

    pub fn sla_dim(&self) -> usize {
        self.gen_u.weight.nrows()
    }

    pub fn forward(&self, f: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<(Array2<f64>, ClassifierCache)> {
        if f.ncols() != self.feature_dim() {
            return Err(Error::shape("classifier features", self.feature_dim(), f.ncols()));
        }
        if a.ncols() != self.sla_dim() || a.nrows() != f.nrows() {
            return Err(Error::shape(
                "classifier attention",
                format!("({}, {})", f.nrows(), self.sla_dim()),
                format!("{:?}", a.dim()),
            ));
        }
        let (batch, df, n, r) = (f.nrows(), self.feature_dim(), self.n_pred(), self.rank);
        let u = self.gen_u.forward(a);
        let v = self.gen_v.forward(a);
        let mut scores = f.dot(&self.base) + &self.bias;
        let mut t = Array2::zeros((batch, r));
        for b in 0..batch {
            let ub = u.row(b).into_shape_with_order((df, r)).expect("U layout");
            let vb = v.row(b).into_shape_with_order((n, r)).expect("V layout");
            let tb = f.row(b).dot(&ub);
            scores.row_mut(b).scaled_add(1.0, &vb.dot(&tb));
            t.row_mut(b).assign(&tb);
        }
        Ok((scores, ClassifierCache { u, v, t }))
    }

    /// Returns `(df, da)` and accumulates parameter gradients.
    pub fn backward(
        &self,
        f: ArrayView2<f64>,
        a: ArrayView2<f64>,
        cache: &ClassifierCache,
        d_scores: ArrayView2<f64>,
        grad: &mut AttentionalClassifier,
    ) -> (Array2<f64>, Array2<f64>) {
        let (batch, df, n, r) = (f.nrows(), self.feature_dim(), self.n_pred(), self.rank);
        grad.bias += &d_scores.sum_axis(Axis(0));
        grad.base += &f.t().dot(&d_scores);
        let mut d_f = d_scores.dot(&self.base.t());
        let mut d_u = Array2::zeros((batch, df * r));
        let mut d_v = Array2::zeros((batch, n * r));
        for b in 0..batch {
            let ub = cache.u.row(b).into_shape_with_order((df, r)).expect("U layout");
            let vb = cache.v.row(b).into_shape_with_order((n, r)).expect("V layout");
            let ds = d_scores.row(b);
            let tb = cache.t.row(b);
            let dt = vb.t().dot(&ds);
            {
                let mut dvb = d_v.row_mut(b).into_shape_with_order((n, r)).expect("V layout");
                for j in 0..n {
                    dvb.row_mut(j).scaled_add(ds[j], &tb);
                }
            }
            {
                let fb = f.row(b);
                let mut dub = d_u.row_mut(b).into_shape_with_order((df, r)).expect("U layout");
                for i in 0..df {
                    dub.row_mut(i).scaled_add(fb[i], &dt);
                }
            }
            d_f.row_mut(b).scaled_add(1.0, &ub.dot(&dt));
        }
        let da = self.gen_u.backward(a, d_u.view(), &mut grad.gen_u)
            + self.gen_v.backward(a, d_v.view(), &mut grad.gen_v);
        (d_f, da)
    }

    /// Effective weight matrix `W0 + U(a) V(a)^T` for one attention vector.
    pub fn weights_for(&self, a: ArrayView1<f64>) -> Array2<f64> {
        let (df, n, r) = (self.feature_dim(), self.n_pred(), self.rank);
        let a2 = a.insert_axis(Axis(0));
        let u = self.gen_u.forward(a2);
        let v = self.gen_v.forward(a2);
        let u = u.row(0).into_shape_with_order((df, r)).expect("U layout").to_owned();
        let v = v.row(0).into_shape_with_order((n, r)).expect("V layout").to_owned();
        &self.base + &u.dot(&v.t())
    }
}

impl Parameters for AttentionalClassifier {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>)) {
        f(&join(prefix, "base"), self.base.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
        self.gen_u.visit(&join(prefix, "gen_u"), f);
        self.gen_v.visit(&join(prefix, "gen_v"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "base"), self.base.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
        self.gen_u.visit_mut(&join(prefix, "gen_u"), f);
        self.gen_v.visit_mut(&join(prefix, "gen_v"), f);
    }
}
