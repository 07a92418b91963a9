//! Predicate branch: attention-conditioned pooling over the predicate-box
//! feature map, a rectified encoding layer and the attentional classifier.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::classifier::{AttentionalClassifier, ClassifierCache};
use crate::error::{Error, Result};
use crate::nn::{join, relu, relu_backward, softmax, Linear, Parameters, Projection};
use crate::sla::SlaVector;

#[derive(Debug, Clone, PartialEq)]
pub struct PBranchParams {
    /// `d_a -> d_c`: query vector scored against every map location
    pub query: Projection,
    pub encoder: Linear,
    pub classifier: AttentionalClassifier,
}

/// Pooled vector together with the attention weights over locations.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledMap {
    pub pooled: Array1<f64>,
    /// One weight per `(row, col)` location, raster order; sums to 1.
    pub weights: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct PBranchCache {
    alpha: Array2<f64>,
    pooled: Array2<f64>,
    f_p: Array2<f64>,
    cls: ClassifierCache,
}

impl PBranchParams {
    pub fn zeros(sla_dim: usize, map_channels: usize, feature_dim: usize, n_pred: usize, rank: usize) -> Self {
        Self {
            query: Projection::zeros(sla_dim, map_channels),
            encoder: Linear::zeros(map_channels, feature_dim),
            classifier: AttentionalClassifier::zeros(feature_dim, n_pred, sla_dim, rank),
        }
    }

    pub fn init<R: Rng>(
        sla_dim: usize,
        map_channels: usize,
        feature_dim: usize,
        n_pred: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query: Projection::random(sla_dim, map_channels, (1.0 / sla_dim as f64).sqrt(), rng),
            encoder: Linear::he(map_channels, feature_dim, rng),
            classifier: AttentionalClassifier::init(feature_dim, n_pred, sla_dim, rank, rng),
        }
    }

    pub fn map_channels(&self) -> usize {
        self.query.weight.ncols()
    }

    fn check_attention(&self, a: &SlaVector) -> Result<()> {
        if a.dim() != self.query.weight.nrows() {
            return Err(Error::shape("attention vector", self.query.weight.nrows(), a.dim()));
        }
        Ok(())
    }

    /// Softmax attention over the `H * W` locations of a `(d_c, H, W)` map,
    /// with logits `<q(a), f_ij>`.
    pub fn attentional_pool(&self, x_p: ArrayView3<f64>, a: &SlaVector) -> Result<PooledMap> {
        self.check_attention(a)?;
        let (c, h, w) = x_p.dim();
        if c != self.map_channels() {
            return Err(Error::shape("predicate map channels", self.map_channels(), c));
        }
        let locations = x_p
            .to_shape((c, h * w))
            .expect("standard layout")
            .t()
            .to_owned();
        let q = a.0.dot(&self.query.weight);
        let weights = softmax(locations.dot(&q).view());
        let pooled = weights.dot(&locations);
        Ok(PooledMap { pooled, weights })
    }

    pub fn encode_predicate(&self, pooled: ArrayView1<f64>) -> Result<Array1<f64>> {
        if pooled.len() != self.encoder.input_dim() {
            return Err(Error::shape("predicate encoder", self.encoder.input_dim(), pooled.len()));
        }
        Ok(relu(self.encoder.forward(pooled.insert_axis(Axis(0)))).row(0).to_owned())
    }

    /// `f_P W(a) + b`.
    pub fn p_scores(&self, f_p: ArrayView1<f64>, a: &SlaVector) -> Result<Array1<f64>> {
        self.check_attention(a)?;
        let (s, _) = self
            .classifier
            .forward(f_p.insert_axis(Axis(0)), a.0.view().insert_axis(Axis(0)))?;
        Ok(s.row(0).to_owned())
    }

    /// Batched forward. `x_p` is `(batch, H * W, d_c)`.
    pub fn forward(&self, x_p: ArrayView3<f64>, a: ArrayView2<f64>) -> Result<(Array2<f64>, PBranchCache)> {
        let (batch, locs, c) = x_p.dim();
        if c != self.map_channels() || a.nrows() != batch {
            return Err(Error::shape(
                "predicate branch",
                format!("(batch {}, channels {})", a.nrows(), self.map_channels()),
                format!("{:?}", x_p.dim()),
            ));
        }
        let q = self.query.forward(a);
        let mut alpha = Array2::zeros((batch, locs));
        let mut pooled = Array2::zeros((batch, c));
        for b in 0..batch {
            let map = x_p.index_axis(Axis(0), b);
            let wts = softmax(map.dot(&q.row(b)).view());
            pooled.row_mut(b).assign(&wts.dot(&map));
            alpha.row_mut(b).assign(&wts);
        }
        let f_p = relu(self.encoder.forward(pooled.view()));
        let (scores, cls) = self.classifier.forward(f_p.view(), a)?;
        Ok((
            scores,
            PBranchCache {
                alpha,
                pooled,
                f_p,
                cls,
            },
        ))
    }

    /// Returns `dL/da` and accumulates parameter gradients.
    pub fn backward(
        &self,
        x_p: ArrayView3<f64>,
        a: ArrayView2<f64>,
        cache: &PBranchCache,
        d_scores: ArrayView2<f64>,
        grad: &mut PBranchParams,
    ) -> Array2<f64> {
        let (d_f, mut da) = self
            .classifier
            .backward(cache.f_p.view(), a, &cache.cls, d_scores, &mut grad.classifier);
        let d_pre = relu_backward(cache.f_p.view(), d_f.view());
        let d_pooled = self.encoder.backward(cache.pooled.view(), d_pre.view(), &mut grad.encoder);
        let batch = x_p.dim().0;
        let mut d_q = Array2::zeros((batch, self.map_channels()));
        for b in 0..batch {
            let map = x_p.index_axis(Axis(0), b);
            let alpha = cache.alpha.row(b);
            let d_alpha = map.dot(&d_pooled.row(b));
            let centred = alpha.dot(&d_alpha);
            let d_logits = &alpha * &d_alpha.mapv(|v| v - centred);
            d_q.row_mut(b).assign(&map.t().dot(&d_logits));
        }
        da += &self.query.backward(a, d_q.view(), &mut grad.query);
        da
    }
}

impl Parameters for PBranchParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// Reorders a `(d_c, H, W)` map into `(H * W, d_c)` rows.
pub fn map_to_locations(x_p: ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = x_p.dim();
    x_p.to_shape((c, h * w)).expect("standard layout").t().to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> PBranchParams {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        PBranchParams::init(3, 2, 4, 5, 2, &mut rng)
    }

    #[test]
    fn zero_query_pools_to_spatial_mean() {
        let mut p = toy();
        p.query.weight.fill(0.0);
        let x = Array3::from_shape_fn((2, 3, 3), |(c, i, j)| (c * 9 + i * 3 + j) as f64);
        let a = SlaVector(array![0.4, -1.2, 2.0]);
        let out = p.attentional_pool(x.view(), &a).unwrap();
        assert!(out.weights.iter().all(|&w| (w - 1.0 / 9.0).abs() < 1e-15));
        assert!((out.pooled[0] - 4.0).abs() < 1e-12);
        assert!((out.pooled[1] - 13.0).abs() < 1e-12);
    }

    #[test]
    fn hand_softmax_on_2x2_map() {
        let mut p = toy();
        // q(a) = a W_q with a = [1, 0, 0] picks the first row: q = [1, 0.5]
        p.query.weight = array![[1.0, 0.5], [0.0, 0.0], [0.0, 0.0]];
        let a = SlaVector(array![1.0, 0.0, 0.0]);
        // channel-major 2x2x2 map; location features f_ij = (x[0,i,j], x[1,i,j])
        let x = array![[[1.0, 0.0], [2.0, -1.0]], [[0.0, 2.0], [-2.0, 0.0]]];
        let out = p.attentional_pool(x.view(), &a).unwrap();
        // logits: (1,0)->1, (0,2)->1, (2,-2)->1, (-1,0)->-1
        let e = [1f64.exp(), 1f64.exp(), 1f64.exp(), (-1f64).exp()];
        let z: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|v| v / z).collect();
        let feats = [(1.0, 0.0), (0.0, 2.0), (2.0, -2.0), (-1.0, 0.0)];
        let expected: (f64, f64) = feats
            .iter()
            .zip(&w)
            .fold((0.0, 0.0), |acc, (f, wt)| (acc.0 + wt * f.0, acc.1 + wt * f.1));
        for (got, want) in out.weights.iter().zip(&w) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((out.pooled[0] - expected.0).abs() < 1e-12);
        assert!((out.pooled[1] - expected.1).abs() < 1e-12);
    }

    #[test]
    fn degenerate_classifier_returns_bias() {
        let mut p = toy();
        p.classifier.base.fill(0.0);
        p.classifier.gen_u.weight.fill(0.0);
        p.classifier.gen_v.weight.fill(0.0);
        p.classifier.bias = array![1.0, 2.0, 3.0, 4.0, 5.0];
        let a = SlaVector(array![0.3, 0.1, -0.2]);
        let s = p.p_scores(array![9.0, -3.0, 1.0, 0.5].view(), &a).unwrap();
        assert_eq!(s, p.classifier.bias);
    }

    #[test]
    fn toy_scores_match_manual_contraction() {
        // d_f = 3, n_pred = 2, d_a = 2, r = 1
        let mut p = PBranchParams::zeros(2, 2, 3, 2, 1);
        p.classifier.base = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        p.classifier.bias = array![0.5, -0.5];
        // U(a) = a W_u -> 3x1, V(a) = a W_v -> 2x1
        p.classifier.gen_u.weight = array![[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]];
        p.classifier.gen_v.weight = array![[1.0, -1.0], [0.5, 0.0]];
        let a = SlaVector(array![1.0, 2.0]);
        let f = array![1.0, 2.0, 3.0];
        // U = [1, 2, 2]^T, V = [2, -1]^T, U V^T = [[2,-1],[4,-2],[4,-2]]
        // W = [[3,-1],[4,-1],[5,-1]]; f W = [3+8+15, -1-2-3] = [26, -6]
        let s = p.p_scores(f.view(), &a).unwrap();
        assert_eq!(s, array![26.5, -6.5]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = toy();
        let a = SlaVector(array![0.0, 0.0, 0.0]);
        assert!(p.attentional_pool(Array3::zeros((3, 2, 2)).view(), &a).is_err());
        assert!(p.encode_predicate(array![1.0].view()).is_err());
        assert!(p.p_scores(array![1.0].view(), &a).is_err());
        assert!(p.p_scores(Array1::zeros(4).view(), &SlaVector(array![0.0])).is_err());
    }
}
