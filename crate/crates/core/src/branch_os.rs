//! Object-subject branch.
//!
//! The translation view `W_O x_O - W_S x_S` is realised in two stages: the
//! separate subject and object encoders play the role of `W_S` and `W_O`,
//! and a single attentional classifier shared by both maps the encoded
//! difference `f_O - f_S` into score space.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::classifier::{AttentionalClassifier, ClassifierCache};
use crate::error::{Error, Result};
use crate::nn::{join, relu, relu_backward, Linear, Parameters};
use crate::sla::SlaVector;

#[derive(Debug, Clone, PartialEq)]
pub struct OsBranchParams {
    pub subject: Linear,
    pub object: Linear,
    pub classifier: AttentionalClassifier,
}

#[derive(Debug, Clone)]
pub struct OsBranchCache {
    f_s: Array2<f64>,
    f_o: Array2<f64>,
    diff: Array2<f64>,
    cls: ClassifierCache,
}

impl OsBranchParams {
    pub fn zeros(sla_dim: usize, visual_dim: usize, feature_dim: usize, n_pred: usize, rank: usize) -> Self {
        Self {
            subject: Linear::zeros(visual_dim, feature_dim),
            object: Linear::zeros(visual_dim, feature_dim),
            classifier: AttentionalClassifier::zeros(feature_dim, n_pred, sla_dim, rank),
        }
    }

    pub fn init<R: Rng>(
        sla_dim: usize,
        visual_dim: usize,
        feature_dim: usize,
        n_pred: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            subject: Linear::he(visual_dim, feature_dim, rng),
            object: Linear::he(visual_dim, feature_dim, rng),
            classifier: AttentionalClassifier::init(feature_dim, n_pred, sla_dim, rank, rng),
        }
    }

    fn encode(layer: &Linear, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != layer.input_dim() {
            return Err(Error::shape("visual encoder", layer.input_dim(), x.len()));
        }
        Ok(relu(layer.forward(x.insert_axis(Axis(0)))).row(0).to_owned())
    }

    pub fn encode_subject(&self, x_s: ArrayView1<f64>) -> Result<Array1<f64>> {
        Self::encode(&self.subject, x_s)
    }

    pub fn encode_object(&self, x_o: ArrayView1<f64>) -> Result<Array1<f64>> {
        Self::encode(&self.object, x_o)
    }

    /// `(f_O - f_S) W(a) + b`.
    pub fn os_scores(&self, f_o: ArrayView1<f64>, f_s: ArrayView1<f64>, a: &SlaVector) -> Result<Array1<f64>> {
        if f_o.len() != f_s.len() {
            return Err(Error::shape("object-subject encodings", f_o.len(), f_s.len()));
        }
        let diff = (&f_o - &f_s).insert_axis(Axis(0));
        let (s, _) = self
            .classifier
            .forward(diff.view(), a.0.view().insert_axis(Axis(0)))?;
        Ok(s.row(0).to_owned())
    }

    /// Batched forward over `(batch, d_v)` subject and object features.
    pub fn forward(
        &self,
        x_s: ArrayView2<f64>,
        x_o: ArrayView2<f64>,
        a: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, OsBranchCache)> {
        let d_v = self.subject.input_dim();
        if x_s.ncols() != d_v || x_o.dim() != x_s.dim() {
            return Err(Error::shape(
                "object-subject branch",
                format!("({}, {d_v})", x_s.nrows()),
                format!("{:?} / {:?}", x_s.dim(), x_o.dim()),
            ));
        }
        let f_s = relu(self.subject.forward(x_s));
        let f_o = relu(self.object.forward(x_o));
        let diff = &f_o - &f_s;
        let (scores, cls) = self.classifier.forward(diff.view(), a)?;
        Ok((scores, OsBranchCache { f_s, f_o, diff, cls }))
    }

    /// Returns `dL/da` and accumulates parameter gradients.
    pub fn backward(
        &self,
        x_s: ArrayView2<f64>,
        x_o: ArrayView2<f64>,
        a: ArrayView2<f64>,
        cache: &OsBranchCache,
        d_scores: ArrayView2<f64>,
        grad: &mut OsBranchParams,
    ) -> Array2<f64> {
        let (d_diff, da) = self
            .classifier
            .backward(cache.diff.view(), a, &cache.cls, d_scores, &mut grad.classifier);
        let d_o = relu_backward(cache.f_o.view(), d_diff.view());
        let d_s = relu_backward(cache.f_s.view(), (-&d_diff).view());
        self.object.backward_params(x_o, d_o.view(), &mut grad.object);
        self.subject.backward_params(x_s, d_s.view(), &mut grad.subject);
        da
    }
}

impl Parameters for OsBranchParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>)) {
        self.subject.visit(&join(prefix, "subject"), f);
        self.object.visit(&join(prefix, "object"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.subject.visit_mut(&join(prefix, "subject"), f);
        self.object.visit_mut(&join(prefix, "object"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> OsBranchParams {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = OsBranchParams::init(3, 4, 5, 6, 2, &mut rng);
        p.classifier.bias = array![0.1, -0.2, 0.3, 0.0, 1.5, -1.0];
        p
    }

    fn a() -> SlaVector {
        SlaVector(array![0.7, -0.3, 1.1])
    }

    #[test]
    fn zero_input_zero_bias_encodes_to_zero() {
        let p = toy();
        assert!(p.encode_subject(Array1::zeros(4).view()).unwrap().iter().all(|&v| v == 0.0));
        assert!(p.encode_object(Array1::zeros(4).view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoders_use_distinct_parameters() {
        let p = toy();
        let x = array![0.5, -1.0, 2.0, 0.3];
        assert_ne!(p.encode_subject(x.view()).unwrap(), p.encode_object(x.view()).unwrap());
    }

    #[test]
    fn equal_encodings_give_bias() {
        let p = toy();
        let f = array![1.0, 2.0, 0.0, 0.5, 3.0];
        assert_eq!(p.os_scores(f.view(), f.view(), &a()).unwrap(), p.classifier.bias);
    }

    #[test]
    fn antisymmetric_without_bias() {
        let mut p = toy();
        p.classifier.bias.fill(0.0);
        let fo = array![1.0, 2.0, 0.0, 0.5, 3.0];
        let fs = array![0.0, 0.2, 1.4, 0.0, 0.7];
        let x = p.os_scores(fo.view(), fs.view(), &a()).unwrap();
        let y = p.os_scores(fs.view(), fo.view(), &a()).unwrap();
        assert_eq!(x, -y);
    }

    #[test]
    fn depends_only_on_difference() {
        let p = toy();
        let fo = array![1.0, 2.0, 0.0, 0.5, 3.0];
        let fs = array![0.0, 0.2, 1.4, 0.0, 0.7];
        let shift = array![0.25, -1.0, 0.5, 2.0, 0.125];
        let x = p.os_scores(fo.view(), fs.view(), &a()).unwrap();
        let y = p.os_scores((&fo + &shift).view(), (&fs + &shift).view(), &a()).unwrap();
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_scores_match_manual_contraction() {
        // d_f = 2, n_pred = 2, d_a = 1, r = 1
        let mut p = OsBranchParams::zeros(1, 2, 2, 2, 1);
        p.classifier.base = array![[1.0, 2.0], [0.0, -1.0]];
        p.classifier.bias = array![0.0, 1.0];
        p.classifier.gen_u.weight = array![[1.0, 1.0]];
        p.classifier.gen_v.weight = array![[0.0, 3.0]];
        let a = SlaVector(array![2.0]);
        // U = [2, 2], V = [0, 6]; W = [[1, 14], [0, 11]]
        // diff = [3, 1] - [1, 0] = [2, 1]; diff W = [2, 39]
        let s = p
            .os_scores(array![3.0, 1.0].view(), array![1.0, 0.0].view(), &a)
            .unwrap();
        assert_eq!(s, array![2.0, 40.0]);
    }

    #[test]
    fn shape_errors() {
        let p = toy();
        assert!(p.encode_subject(array![1.0].view()).is_err());
        assert!(p.os_scores(array![1.0].view(), array![1.0, 2.0].view(), &a()).is_err());
        assert!(p.os_scores(Array1::zeros(5).view(), Array1::zeros(5).view(), &SlaVector(array![1.0])).is_err());
    }
}
