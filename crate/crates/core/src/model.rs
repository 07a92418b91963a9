//! The full two-branch predicate classifier and batched input assembly.

use ndarray::{Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branch_os::OsBranchParams;
use crate::branch_p::{PBranchCache, PBranchParams};
use crate::data::{rasterize_masks, DatasetBundle, EmbeddingTable, FeatureDims, FeatureProvider};
use crate::error::{Error, Result};
use crate::fusion::{cross_entropy, total_loss_with_grad, FusionParams, LossBreakdown, LossWeights};
use crate::nn::{join, softmax_rows, Parameters};
use crate::sla::{AttentionMode, SlaDims, SlaParams};

/// Which branches produce the final scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    /// Predicate branch alone.
    Predicate,
    /// Object-subject branch alone.
    ObjectSubject,
    /// Both branches fused by the meta-classifier.
    Both,
}

impl BranchMode {
    pub fn label(self) -> &'static str {
        match self {
            BranchMode::Predicate => "P",
            BranchMode::ObjectSubject => "OS",
            BranchMode::Both => "P+OS",
        }
    }

    pub fn uses_p(self) -> bool {
        self != BranchMode::ObjectSubject
    }

    pub fn uses_os(self) -> bool {
        self != BranchMode::Predicate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub sla: SlaDims,
    pub features: FeatureDims,
    /// d_f: encoded width of both branches
    pub feature_dim: usize,
    /// rank of the attentional weight update
    pub rank: usize,
    pub n_pred: usize,
}

impl ModelDims {
    pub fn with_n_pred(n_pred: usize) -> Self {
        Self {
            sla: SlaDims::default(),
            features: FeatureDims::default(),
            feature_dim: 128,
            rank: 8,
            n_pred,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sla;
        let f = &self.features;
        let sizes = [
            s.mask_resolution,
            s.word_dim,
            s.lang_hidden,
            s.lang_out,
            s.sla_dim,
            f.visual_dim,
            f.map_channels,
            f.map_height,
            f.map_width,
            self.feature_dim,
            self.rank,
            self.n_pred,
        ];
        if sizes.contains(&0) || s.conv_channels.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if s.mask_resolution < 2 {
            return Err(Error::Config("mask resolution must be at least 2".into()));
        }
        Ok(())
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub sla: SlaParams,
    pub p: PBranchParams,
    pub os: OsBranchParams,
    pub fusion: FusionParams,
}

impl ModelParams {
    pub fn zeros(dims: &ModelDims) -> Self {
        let d_a = dims.sla.sla_dim;
        Self {
            sla: SlaParams::zeros(&dims.sla),
            p: PBranchParams::zeros(d_a, dims.features.map_channels, dims.feature_dim, dims.n_pred, dims.rank),
            os: OsBranchParams::zeros(d_a, dims.features.visual_dim, dims.feature_dim, dims.n_pred, dims.rank),
            fusion: FusionParams::zeros(dims.n_pred),
        }
    }

    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_a = dims.sla.sla_dim;
        let sla = SlaParams::init(&dims.sla, &mut rng);
        let p = PBranchParams::init(
            d_a,
            dims.features.map_channels,
            dims.feature_dim,
            dims.n_pred,
            dims.rank,
            &mut rng,
        );
        let os = OsBranchParams::init(
            d_a,
            dims.features.visual_dim,
            dims.feature_dim,
            dims.n_pred,
            dims.rank,
            &mut rng,
        );
        let fusion = FusionParams::init(dims.n_pred, &mut rng);
        Self { sla, p, os, fusion }
    }
}

impl Parameters for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>)) {
        self.sla.visit(&join(prefix, "sla"), f);
        self.p.visit(&join(prefix, "p_branch"), f);
        self.os.visit(&join(prefix, "os_branch"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.sla.visit_mut(&join(prefix, "sla"), f);
        self.p.visit_mut(&join(prefix, "p_branch"), f);
        self.os.visit_mut(&join(prefix, "os_branch"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
    }
}

/// Per-pair network inputs, precomputed once per dataset.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub resolution: usize,
    /// `(pairs, R * R, 2)` channels-last masks
    pub masks: Array3<f64>,
    /// `(pairs, 2 * d_w)` subject then object embedding
    pub lang: Array2<f64>,
    pub x_s: Array2<f64>,
    pub x_o: Array2<f64>,
    /// `(pairs, H * W, d_c)` predicate map locations
    pub x_p: Array3<f64>,
    /// Lowest ground-truth id per pair.
    pub primary: Vec<usize>,
}

impl PreparedDataset {
    pub fn new(
        dataset: &DatasetBundle,
        embeddings: &EmbeddingTable,
        features: &FeatureProvider,
        resolution: usize,
    ) -> Result<Self> {
        let n = dataset.len();
        let dims = features.dims();
        let d_w = embeddings.dim();
        let locs = dims.map_height * dims.map_width;
        let mut masks = Array3::zeros((n, resolution * resolution, 2));
        let mut lang = Array2::zeros((n, 2 * d_w));
        let mut x_s = Array2::zeros((n, dims.visual_dim));
        let mut x_o = Array2::zeros((n, dims.visual_dim));
        let mut x_p = Array3::zeros((n, locs, dims.map_channels));
        let mut buf = Vec::with_capacity(2 * resolution * resolution);
        for (i, pair) in dataset.pairs.iter().enumerate() {
            buf.clear();
            rasterize_masks(&pair.subject.bbox, &pair.object.bbox, resolution)?.write_channels_last(&mut buf);
            masks
                .index_axis_mut(Axis(0), i)
                .assign(&ArrayView2::from_shape((resolution * resolution, 2), &buf).expect("mask layout"));
            let mut row = lang.row_mut(i);
            row.slice_mut(ndarray::s![..d_w]).assign(&embeddings.lookup(pair.subject.class_id)?);
            row.slice_mut(ndarray::s![d_w..]).assign(&embeddings.lookup(pair.object.class_id)?);
            let f = features.provide(pair)?;
            f.check(&dims)?;
            x_s.row_mut(i).assign(&f.x_s);
            x_o.row_mut(i).assign(&f.x_o);
            x_p.index_axis_mut(Axis(0), i)
                .assign(&crate::branch_p::map_to_locations(f.x_p.view()));
        }
        Ok(Self {
            resolution,
            masks,
            lang,
            x_s,
            x_o,
            x_p,
            primary: dataset.pairs.iter().map(|p| p.primary_predicate()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.lang.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> PreparedDataset {
        PreparedDataset {
            resolution: self.resolution,
            masks: self.masks.select(Axis(0), indices),
            lang: self.lang.select(Axis(0), indices),
            x_s: self.x_s.select(Axis(0), indices),
            x_o: self.x_o.select(Axis(0), indices),
            x_p: self.x_p.select(Axis(0), indices),
            primary: indices.iter().map(|&i| self.primary[i]).collect(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let r2 = self.resolution * self.resolution;
        let masks = self.masks.select(Axis(0), indices);
        Batch {
            size: indices.len(),
            masks: masks.into_shape_with_order((indices.len() * r2, 2)).expect("contiguous masks"),
            lang: self.lang.select(Axis(0), indices),
            x_s: self.x_s.select(Axis(0), indices),
            x_o: self.x_o.select(Axis(0), indices),
            x_p: self.x_p.select(Axis(0), indices),
        }
    }
}

/// Stacked inputs of a mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub masks: Array2<f64>,
    pub lang: Array2<f64>,
    pub x_s: Array2<f64>,
    pub x_o: Array2<f64>,
    pub x_p: Array3<f64>,
}

/// Scores of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub a: Array2<f64>,
    pub p: Option<Array2<f64>>,
    pub os: Option<Array2<f64>>,
    pub fused: Option<Array2<f64>>,
}

impl ForwardOutput {
    /// The scores the model predicts with.
    pub fn final_scores(&self) -> &Array2<f64> {
        self.fused
            .as_ref()
            .or(self.p.as_ref())
            .or(self.os.as_ref())
            .expect("at least one branch")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub attention: AttentionMode,
    pub branches: BranchMode,
    pub params: ModelParams,
}

impl Model {
    pub fn new(dims: ModelDims, attention: AttentionMode, branches: BranchMode, seed: u64) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            attention,
            branches,
            params: ModelParams::init(&dims, seed),
        })
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput> {
        Ok(self.forward_cached(batch)?.0)
    }

    fn forward_cached(&self, batch: &Batch) -> Result<(ForwardOutput, Caches)> {
        let prm = &self.params;
        let (a, sla_cache) = prm
            .sla
            .forward(self.attention, batch.masks.view(), batch.lang.view(), batch.size)?;
        let (p, p_cache) = if self.branches.uses_p() {
            let (s, c) = prm.p.forward(batch.x_p.view(), a.view())?;
            (Some(s), Some(c))
        } else {
            (None, None)
        };
        let (os, os_cache) = if self.branches.uses_os() {
            let (s, c) = prm.os.forward(batch.x_s.view(), batch.x_o.view(), a.view())?;
            (Some(s), Some(c))
        } else {
            (None, None)
        };
        let fused = match (&p, &os) {
            (Some(p), Some(os)) if self.branches == BranchMode::Both => Some(prm.fusion.forward(p.view(), os.view())?),
            _ => None,
        };
        Ok((
            ForwardOutput { a, p, os, fused },
            Caches {
                sla: sla_cache,
                p: p_cache,
                os: os_cache,
            },
        ))
    }

    /// Training loss for one batch and its gradient with respect to every
    /// parameter. Single-branch models use `weights.fused` on the branch's
    /// own cross-entropy.
    pub fn loss_and_grad(
        &self,
        batch: &Batch,
        targets: &[usize],
        weights: &LossWeights,
        deep_supervision: bool,
    ) -> Result<(LossBreakdown, ModelParams)> {
        let (b, g, _) = self.loss_grad_scores(batch, targets, weights, deep_supervision)?;
        Ok((b, g))
    }

    /// As [`Model::loss_and_grad`], also returning the final scores.
    pub fn loss_grad_scores(
        &self,
        batch: &Batch,
        targets: &[usize],
        weights: &LossWeights,
        deep_supervision: bool,
    ) -> Result<(LossBreakdown, ModelParams, Array2<f64>)> {
        weights.validate()?;
        let (out, caches) = self.forward_cached(batch)?;
        let mut grad = ModelParams::zeros(&self.dims);
        let prm = &self.params;
        let (breakdown, d_p, d_os) = match self.branches {
            BranchMode::Both => {
                let p = out.p.as_ref().expect("p scores");
                let os = out.os.as_ref().expect("os scores");
                let fused = out.fused.as_ref().expect("fused scores");
                let w = weights.effective(deep_supervision);
                let (b, g) = total_loss_with_grad(fused.view(), p.view(), os.view(), targets, &w)?;
                let (fp, fos) = prm.fusion.backward(p.view(), os.view(), g.fused.view(), &mut grad.fusion);
                (b, Some(fp + &g.predicate), Some(fos + &g.object_subject))
            }
            BranchMode::Predicate | BranchMode::ObjectSubject => {
                let scores = out.final_scores();
                let (ce, g) = cross_entropy(scores.view(), targets)?;
                let g = g * weights.fused;
                let b = LossBreakdown {
                    total: weights.fused * ce,
                    fused: ce,
                    predicate: if self.branches.uses_p() { ce } else { 0.0 },
                    object_subject: if self.branches.uses_os() { ce } else { 0.0 },
                };
                if self.branches.uses_p() {
                    (b, Some(g), None)
                } else {
                    (b, None, Some(g))
                }
            }
        };
        let mut da = Array2::zeros(out.a.raw_dim());
        if let (Some(d), Some(cache)) = (d_p, &caches.p) {
            da += &prm.p.backward(batch.x_p.view(), out.a.view(), cache, d.view(), &mut grad.p);
        }
        if let (Some(d), Some(cache)) = (d_os, &caches.os) {
            da += &prm
                .os
                .backward(batch.x_s.view(), batch.x_o.view(), out.a.view(), cache, d.view(), &mut grad.os);
        }
        prm.sla.backward(&caches.sla, da.view(), &mut grad.sla);
        let scores = out.final_scores().clone();
        Ok((breakdown, grad, scores))
    }

    /// Forward pass over a whole prepared dataset in chunks.
    pub fn predict(&self, data: &PreparedDataset, chunk: usize) -> Result<ForwardOutput> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let parts = idx
            .chunks(chunk.max(1))
            .map(|block| self.forward(&data.batch(block)))
            .collect::<Result<Vec<_>>>()?;
        let n_pred = self.dims.n_pred;
        let cat = |get: fn(&ForwardOutput) -> Option<&Array2<f64>>, present: bool, width: usize| {
            if !present {
                return None;
            }
            let views: Vec<ArrayView2<f64>> = parts.iter().filter_map(|p| get(p).map(|s| s.view())).collect();
            Some(if views.is_empty() {
                Array2::zeros((0, width))
            } else {
                ndarray::concatenate(Axis(0), &views).expect("equal widths")
            })
        };
        Ok(ForwardOutput {
            a: cat(|p| Some(&p.a), true, self.dims.sla.sla_dim).expect("always present"),
            p: cat(|p| p.p.as_ref(), self.branches.uses_p(), n_pred),
            os: cat(|p| p.os.as_ref(), self.branches.uses_os(), n_pred),
            fused: cat(|p| p.fused.as_ref(), self.branches == BranchMode::Both, n_pred),
        })
    }

    /// Softmax confidences of the final scores.
    pub fn confidences(&self, data: &PreparedDataset) -> Result<Array2<f64>> {
        Ok(softmax_rows(self.predict(data, 256)?.final_scores().view()))
    }
}

struct Caches {
    sla: crate::sla::SlaCache,
    p: Option<PBranchCache>,
    os: Option<crate::branch_os::OsBranchCache>,
}

/// Fraction of rows whose arg-max equals the target (lowest index on ties).
pub fn top1_accuracy(scores: ArrayView2<f64>, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = scores
        .outer_iter()
        .zip(targets)
        .filter(|(row, &t)| argmax(row.iter().copied()) == t)
        .count();
    hits as f64 / targets.len() as f64
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::gradcheck::toy_dims;

    #[test]
    fn prepared_batches_have_expected_shapes() {
        let spec = SyntheticSpec {
            n_images: 3,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let dims = toy_dims(ds.n_pred);
        let emb = EmbeddingTable::synthetic(ds.n_obj, 3, 1);
        let feats = FeatureProvider::synthetic(dims.features, 2);
        let data = PreparedDataset::new(&ds, &emb, &feats, 8).unwrap();
        let b = data.batch(&[0, 2, 5]);
        assert_eq!(b.masks.dim(), (3 * 64, 2));
        assert_eq!(b.x_p.dim(), (3, 4, 3));
        let model = Model::new(dims, AttentionMode::SpatioLinguistic, BranchMode::Both, 0).unwrap();
        let out = model.forward(&b).unwrap();
        assert_eq!(out.final_scores().dim(), (3, ds.n_pred));
        let all = model.predict(&data, 5).unwrap();
        assert_eq!(all.final_scores().nrows(), data.len());
        let one = model.forward(&data.batch(&[5])).unwrap();
        for (x, y) in one.final_scores().row(0).iter().zip(all.final_scores().row(5)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_branch_outputs() {
        let ds = generate_synthetic(&SyntheticSpec {
            n_images: 2,
            ..Default::default()
        })
        .unwrap();
        let dims = toy_dims(ds.n_pred);
        let emb = EmbeddingTable::synthetic(ds.n_obj, 3, 1);
        let data = PreparedDataset::new(&ds, &emb, &FeatureProvider::synthetic(dims.features, 2), 8).unwrap();
        for (mode, p, os) in [
            (BranchMode::Predicate, true, false),
            (BranchMode::ObjectSubject, false, true),
        ] {
            let m = Model::new(dims, AttentionMode::Spatial, mode, 3).unwrap();
            let out = m.forward(&data.batch(&[0, 1])).unwrap();
            assert_eq!((out.p.is_some(), out.os.is_some(), out.fused.is_some()), (p, os, false));
        }
    }

    #[test]
    fn top1_ties_resolve_to_lowest_index() {
        let s = ndarray::array![[1.0, 1.0], [0.0, 2.0]];
        assert_eq!(top1_accuracy(s.view(), &[0, 1]), 1.0);
        assert_eq!(top1_accuracy(s.view(), &[1, 1]), 0.5);
    }
}
