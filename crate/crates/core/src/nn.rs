//! Minimal dense building blocks with hand-written backward passes.
//!
//! Activations are row-major matrices with one row per sample (or per spatial
//! position for convolutional maps, channels last). Each layer's `backward`
//! accumulates parameter gradients into a same-shaped gradient struct and
//! returns the gradient with respect to its input.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Uniform access to named parameter tensors.
///
/// Visiting order is fixed per type, which is what the optimizer and the
/// checkpoint format rely on.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn fill_zero(&mut self) {
        self.visit_mut("", &mut |_, mut t| t.fill(0.0));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn normal_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Affine map `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Gaussian weights with the given standard deviation, zero bias.
    pub fn random<R: Rng>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: normal_matrix(input, output, std, rng),
            bias: Array1::zeros(output),
        }
    }

    /// He initialization for layers followed by a rectifier.
    pub fn he<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self::random(input, output, (2.0 / input as f64).sqrt(), rng)
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    /// Backward pass when the input gradient is not needed.
    pub fn backward_params(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

/// Bias-free linear map `y = x W`. Used for the hypernetworks so that a zero
/// conditioning vector yields exactly zero output.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Array2<f64>,
}

impl Projection {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
        }
    }

    pub fn random<R: Rng>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: normal_matrix(input, output, std, rng),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight)
    }

    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Projection) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        dy.dot(&self.weight.t())
    }
}

impl Parameters for Projection {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
    }
}

/// 3x3 convolution, stride 2, zero padding 1.
///
/// Maps are stored channels-last as `(batch * height * width, channels)`.
/// The weight matrix has one row per `(ky, kx, in_channel)` tap, in that
/// order, and one column per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Spatial geometry of one convolution application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeometry {
    pub fn output(&self) -> ConvGeometry {
        ConvGeometry {
            batch: self.batch,
            height: (self.height + 1) / 2,
            width: (self.width + 1) / 2,
        }
    }

    pub fn positions(&self) -> usize {
        self.batch * self.height * self.width
    }
}

impl Conv3x3 {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            weight: Array2::zeros((9 * in_channels, out_channels)),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn he<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let fan_in = 9 * in_channels;
        Self {
            weight: normal_matrix(fan_in, out_channels, (2.0 / fan_in as f64).sqrt(), rng),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.nrows() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    // For output position (oy, ox) and tap (ky, kx) the input pixel is
    // (2*oy + ky - 1, 2*ox + kx - 1).
    fn im2col(&self, x: ArrayView2<f64>, geom: ConvGeometry) -> Array2<f64> {
        let cin = self.in_channels();
        let out = geom.output();
        let mut cols = Array2::zeros((out.positions(), 9 * cin));
        for b in 0..geom.batch {
            for oy in 0..out.height {
                for ox in 0..out.width {
                    let row = (b * out.height + oy) * out.width + ox;
                    let mut dst = cols.row_mut(row);
                    for ky in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= geom.width as isize {
                                continue;
                            }
                            let src = (b * geom.height + iy as usize) * geom.width + ix as usize;
                            let tap = (ky * 3 + kx) * cin;
                            for c in 0..cin {
                                dst[tap + c] = x[[src, c]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: ArrayView2<f64>, geom: ConvGeometry) -> Array2<f64> {
        let cin = self.in_channels();
        let out = geom.output();
        let mut dx = Array2::zeros((geom.positions(), cin));
        for b in 0..geom.batch {
            for oy in 0..out.height {
                for ox in 0..out.width {
                    let row = (b * out.height + oy) * out.width + ox;
                    let src = dcols.row(row);
                    for ky in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= geom.width as isize {
                                continue;
                            }
                            let dst = (b * geom.height + iy as usize) * geom.width + ix as usize;
                            let tap = (ky * 3 + kx) * cin;
                            for c in 0..cin {
                                dx[[dst, c]] += src[tap + c];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns `(columns, output)`; the column matrix is needed by `backward`.
    pub fn forward(&self, x: ArrayView2<f64>, geom: ConvGeometry) -> (Array2<f64>, Array2<f64>) {
        let cols = self.im2col(x, geom);
        let y = cols.dot(&self.weight) + &self.bias;
        (cols, y)
    }

    pub fn backward(
        &self,
        cols: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        geom: ConvGeometry,
        grad: &mut Conv3x3,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        grad.weight += &cols.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        if need_input_grad {
            let dcols = dy.dot(&self.weight.t());
            Some(self.col2im(dcols.view(), geom))
        } else {
            None
        }
    }
}

impl Parameters for Conv3x3 {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

pub fn relu(x: Array2<f64>) -> Array2<f64> {
    x.mapv_into(|v| v.max(0.0))
}

/// Masks `dy` by the rectifier's output (`y > 0`).
pub fn relu_backward(y: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(&y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Numerically stable softmax of a single vector.
pub fn softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut e = x.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

pub fn log_sum_exp(x: ArrayView1<f64>) -> f64 {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
        dst.assign(&softmax(src));
    }
    out
}

/// Adam hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam optimizer state over a `Parameters` value, in visiting order.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let mut grad_tensors: Vec<Vec<f64>> = Vec::new();
        grads.visit("", &mut |_, g| grad_tensors.push(g.iter().copied().collect()));
        if self.first.is_empty() {
            self.first = grad_tensors.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut idx = 0;
        let first = &mut self.first;
        let second = &mut self.second;
        params.visit_mut("", &mut |_, mut p| {
            let g = &grad_tensors[idx];
            let m = &mut first[idx];
            let v = &mut second[idx];
            for (k, w) in p.iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            idx += 1;
        });
    }
}
