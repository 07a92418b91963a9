//! Spatio-linguistic attention module.
//!
//! A three-layer convolutional stack encodes the two-channel union-frame
//! mask, a two-layer perceptron encodes the concatenated subject and object
//! word embeddings, and an affine map fuses both codes into the conditioning
//! vector consumed by every attentional weight downstream.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MaskPair;
use crate::error::{Error, Result};
use crate::nn::{join, relu, relu_backward, Conv3x3, ConvGeometry, Linear, Parameters};

/// Which inputs feed the attention module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// No conditioning: the attention vector is identically zero, so pooling
    /// is uniform and the classifiers use their base weights only.
    None,
    /// Word embeddings only (mask code zeroed).
    Linguistic,
    /// Masks only (language code zeroed).
    Spatial,
    SpatioLinguistic,
}

impl AttentionMode {
    pub fn uses_masks(self) -> bool {
        matches!(self, AttentionMode::Spatial | AttentionMode::SpatioLinguistic)
    }

    pub fn uses_language(self) -> bool {
        matches!(self, AttentionMode::Linguistic | AttentionMode::SpatioLinguistic)
    }

    pub fn label(self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::Linguistic => "LA",
            AttentionMode::Spatial => "SA",
            AttentionMode::SpatioLinguistic => "SLA",
        }
    }
}

/// The fused attention code of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SlaVector(pub Array1<f64>);

impl SlaVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlaParams {
    pub mask_resolution: usize,
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub conv3: Conv3x3,
    pub lang1: Linear,
    pub lang2: Linear,
    pub fuse: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlaDims {
    pub mask_resolution: usize,
    pub conv_channels: [usize; 3],
    pub word_dim: usize,
    pub lang_hidden: usize,
    pub lang_out: usize,
    pub sla_dim: usize,
}

impl Default for SlaDims {
    fn default() -> Self {
        Self {
            mask_resolution: 32,
            conv_channels: [32, 64, 128],
            word_dim: 300,
            lang_hidden: 256,
            lang_out: 128,
            sla_dim: 64,
        }
    }
}

impl SlaDims {
    pub fn mask_code_dim(&self) -> usize {
        self.conv_channels[2]
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct SlaCache {
    batch: usize,
    mask: Option<MaskCache>,
    lang: Option<LangCache>,
    fuse_in: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct MaskCache {
    geoms: [ConvGeometry; 3],
    cols: [Array2<f64>; 3],
    acts: [Array2<f64>; 3],
}

#[derive(Debug, Clone)]
struct LangCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
    code: Array2<f64>,
}

impl SlaParams {
    pub fn zeros(dims: &SlaDims) -> Self {
        let [c1, c2, c3] = dims.conv_channels;
        Self {
            mask_resolution: dims.mask_resolution,
            conv1: Conv3x3::zeros(2, c1),
            conv2: Conv3x3::zeros(c1, c2),
            conv3: Conv3x3::zeros(c2, c3),
            lang1: Linear::zeros(2 * dims.word_dim, dims.lang_hidden),
            lang2: Linear::zeros(dims.lang_hidden, dims.lang_out),
            fuse: Linear::zeros(c3 + dims.lang_out, dims.sla_dim),
        }
    }

    pub fn init<R: Rng>(dims: &SlaDims, rng: &mut R) -> Self {
        let [c1, c2, c3] = dims.conv_channels;
        let fuse_in = c3 + dims.lang_out;
        Self {
            mask_resolution: dims.mask_resolution,
            conv1: Conv3x3::he(2, c1, rng),
            conv2: Conv3x3::he(c1, c2, rng),
            conv3: Conv3x3::he(c2, c3, rng),
            lang1: Linear::he(2 * dims.word_dim, dims.lang_hidden, rng),
            lang2: Linear::he(dims.lang_hidden, dims.lang_out, rng),
            fuse: Linear::random(fuse_in, dims.sla_dim, (1.0 / fuse_in as f64).sqrt(), rng),
        }
    }

    pub fn word_dim(&self) -> usize {
        self.lang1.input_dim() / 2
    }

    pub fn mask_code_dim(&self) -> usize {
        self.conv3.out_channels()
    }

    pub fn lang_code_dim(&self) -> usize {
        self.lang2.output_dim()
    }

    pub fn sla_dim(&self) -> usize {
        self.fuse.output_dim()
    }

    /// Batched mask encoder. `masks` holds `batch * R * R` channels-last rows.
    fn encode_masks_batch(&self, masks: ArrayView2<f64>, batch: usize) -> Result<(Array2<f64>, MaskCache)> {
        let r = self.mask_resolution;
        if masks.dim() != (batch * r * r, 2) {
            return Err(Error::shape(
                "mask encoder",
                format!("({}, 2)", batch * r * r),
                format!("{:?}", masks.dim()),
            ));
        }
        let g1 = ConvGeometry {
            batch,
            height: r,
            width: r,
        };
        let (cols1, y1) = self.conv1.forward(masks, g1);
        let y1 = relu(y1);
        let g2 = g1.output();
        let (cols2, y2) = self.conv2.forward(y1.view(), g2);
        let y2 = relu(y2);
        let g3 = g2.output();
        let (cols3, y3) = self.conv3.forward(y2.view(), g3);
        let y3 = relu(y3);
        let positions = g3.output().height * g3.output().width;
        let code = y3
            .to_shape((batch, positions, self.mask_code_dim()))
            .expect("contiguous conv output")
            .mean_axis(Axis(1))
            .expect("non-empty spatial grid");
        Ok((
            code,
            MaskCache {
                geoms: [g1, g2, g3],
                cols: [cols1, cols2, cols3],
                acts: [y1, y2, y3],
            },
        ))
    }

    fn encode_language_batch(&self, lang: ArrayView2<f64>) -> Result<(Array2<f64>, LangCache)> {
        if lang.ncols() != self.lang1.input_dim() {
            return Err(Error::shape("language encoder", self.lang1.input_dim(), lang.ncols()));
        }
        let hidden = relu(self.lang1.forward(lang));
        let code = relu(self.lang2.forward(hidden.view()));
        Ok((
            code.clone(),
            LangCache {
                input: lang.to_owned(),
                hidden,
                code,
            },
        ))
    }

    /// Batched forward pass. `masks` may be empty when the mode ignores
    /// them, likewise `lang`.
    pub fn forward(
        &self,
        mode: AttentionMode,
        masks: ArrayView2<f64>,
        lang: ArrayView2<f64>,
        batch: usize,
    ) -> Result<(Array2<f64>, SlaCache)> {
        let mut cache = SlaCache {
            batch,
            ..Default::default()
        };
        if mode == AttentionMode::None {
            return Ok((Array2::zeros((batch, self.sla_dim())), cache));
        }
        let mask_code = if mode.uses_masks() {
            let (code, mc) = self.encode_masks_batch(masks, batch)?;
            cache.mask = Some(mc);
            code
        } else {
            Array2::zeros((batch, self.mask_code_dim()))
        };
        let lang_code = if mode.uses_language() {
            let (code, lc) = self.encode_language_batch(lang)?;
            cache.lang = Some(lc);
            code
        } else {
            Array2::zeros((batch, self.lang_code_dim()))
        };
        let fuse_in = concatenate![Axis(1), mask_code, lang_code];
        let a = self.fuse.forward(fuse_in.view());
        cache.fuse_in = Some(fuse_in);
        Ok((a, cache))
    }

    /// Accumulates parameter gradients given `da = dL/da`.
    pub fn backward(&self, cache: &SlaCache, da: ArrayView2<f64>, grad: &mut SlaParams) {
        let Some(fuse_in) = &cache.fuse_in else { return };
        let d_in = self.fuse.backward(fuse_in.view(), da, &mut grad.fuse);
        let split = self.mask_code_dim();
        if let Some(lc) = &cache.lang {
            let d_code = d_in.slice(s![.., split..]);
            let d_pre2 = relu_backward(lc.code.view(), d_code);
            let d_hidden = self.lang2.backward(lc.hidden.view(), d_pre2.view(), &mut grad.lang2);
            let d_pre1 = relu_backward(lc.hidden.view(), d_hidden.view());
            self.lang1.backward_params(lc.input.view(), d_pre1.view(), &mut grad.lang1);
        }
        if let Some(mc) = &cache.mask {
            let d_code = d_in.slice(s![.., ..split]);
            let out = mc.geoms[2].output();
            let positions = out.height * out.width;
            let c3 = self.mask_code_dim();
            let mut d_y3 = Array2::zeros((cache.batch * positions, c3));
            for b in 0..cache.batch {
                let row = d_code.row(b).mapv(|v| v / positions as f64);
                for p in 0..positions {
                    d_y3.row_mut(b * positions + p).assign(&row);
                }
            }
            let d3 = relu_backward(mc.acts[2].view(), d_y3.view());
            let d_y2 = self
                .conv3
                .backward(mc.cols[2].view(), d3.view(), mc.geoms[2], &mut grad.conv3, true)
                .expect("input gradient requested");
            let d2 = relu_backward(mc.acts[1].view(), d_y2.view());
            let d_y1 = self
                .conv2
                .backward(mc.cols[1].view(), d2.view(), mc.geoms[1], &mut grad.conv2, true)
                .expect("input gradient requested");
            let d1 = relu_backward(mc.acts[0].view(), d_y1.view());
            self.conv1
                .backward(mc.cols[0].view(), d1.view(), mc.geoms[0], &mut grad.conv1, false);
        }
    }

    /// Encodes one mask pair into the mask code.
    pub fn encode_masks(&self, mask: &MaskPair) -> Result<Array1<f64>> {
        if mask.resolution() != self.mask_resolution {
            return Err(Error::shape("mask resolution", self.mask_resolution, mask.resolution()));
        }
        let mut buf = Vec::with_capacity(2 * self.mask_resolution * self.mask_resolution);
        mask.write_channels_last(&mut buf);
        let m = Array2::from_shape_vec((buf.len() / 2, 2), buf).expect("two channels");
        let (code, _) = self.encode_masks_batch(m.view(), 1)?;
        Ok(code.row(0).to_owned())
    }

    /// Encodes `[s; o]` (subject first) into the language code.
    pub fn encode_language(&self, s: ArrayView1<f64>, o: ArrayView1<f64>) -> Result<Array1<f64>> {
        let d = self.word_dim();
        if s.len() != d || o.len() != d {
            return Err(Error::shape("word embedding", d, format!("({}, {})", s.len(), o.len())));
        }
        let x = concatenate![Axis(0), s, o].insert_axis(Axis(0));
        let (code, _) = self.encode_language_batch(x.view())?;
        Ok(code.row(0).to_owned())
    }

    /// Affine fusion of a mask code and a language code.
    pub fn fuse_sla(&self, mask_code: ArrayView1<f64>, lang_code: ArrayView1<f64>) -> Result<SlaVector> {
        if mask_code.len() != self.mask_code_dim() || lang_code.len() != self.lang_code_dim() {
            return Err(Error::shape(
                "sla fusion",
                format!("({}, {})", self.mask_code_dim(), self.lang_code_dim()),
                format!("({}, {})", mask_code.len(), lang_code.len()),
            ));
        }
        let x = concatenate![Axis(0), mask_code, lang_code].insert_axis(Axis(0));
        Ok(SlaVector(self.fuse.forward(x.view()).row(0).to_owned()))
    }

    /// Full single-pair forward pass.
    pub fn attend(
        &self,
        mode: AttentionMode,
        mask: &MaskPair,
        s: ArrayView1<f64>,
        o: ArrayView1<f64>,
    ) -> Result<SlaVector> {
        if mode == AttentionMode::None {
            return Ok(SlaVector(Array1::zeros(self.sla_dim())));
        }
        let mask_code = if mode.uses_masks() {
            self.encode_masks(mask)?
        } else {
            Array1::zeros(self.mask_code_dim())
        };
        let lang_code = if mode.uses_language() {
            self.encode_language(s, o)?
        } else {
            Array1::zeros(self.lang_code_dim())
        };
        self.fuse_sla(mask_code.view(), lang_code.view())
    }
}

impl Parameters for SlaParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.lang1.visit(&join(prefix, "lang1"), f);
        self.lang2.visit(&join(prefix, "lang2"), f);
        self.fuse.visit(&join(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        self.lang1.visit_mut(&join(prefix, "lang1"), f);
        self.lang2.visit_mut(&join(prefix, "lang2"), f);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }
}
