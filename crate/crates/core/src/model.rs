//! Small fixed convolutional segmenter with hand-derived backpropagation.
//!
//! Architecture (fixed on purpose, the experiments vary labels and losses,
//! not the network): 3x3 conv 3->8 + ReLU, 3x3 conv 8->8 + ReLU, 1x1 conv
//! 8->1 + sigmoid, all zero-padded "same". Parameters are f32; the same
//! code also runs on an f64 shadow copy for finite-difference checks.
//!
//! Accumulation orders are fixed (channel, kernel-row, kernel-column) and
//! every statistical reduction uses an f64 accumulator, so a seed fully
//! determines training.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::losses::{apl_f64, LossConfig, LossError};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{stack_25d, PredMap, SampleRecord, SoftMask, Tensor3D};

/// Float plumbing shared by the f32 production path and the f64 shadow path.
pub trait Scalar:
    Copy
    + PartialOrd
    + core::ops::Add<Output = Self>
    + core::ops::Sub<Output = Self>
    + core::ops::Mul<Output = Self>
    + core::ops::Div<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn is_finite_scalar(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn exp(self) -> Self {
        libm::expf(self)
    }
    fn is_finite_scalar(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn is_finite_scalar(self) -> bool {
        self.is_finite()
    }
}

/// Layer shapes of the fixed architecture.
pub const CONV1: (usize, usize, usize) = (3, 8, 3); // (in, out, kernel)
pub const CONV2: (usize, usize, usize) = (8, 8, 3);
pub const CONV3: (usize, usize, usize) = (8, 1, 1);

/// All trainable parameters. Weight layout is `[out][in][ky][kx]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub w3: Vec<T>,
    pub b3: Vec<T>,
}

pub type ModelParams = Network<f32>;

impl<T: Scalar> Network<T> {
    pub fn zeros() -> Self {
        Self {
            w1: vec![T::ZERO; CONV1.1 * CONV1.0 * CONV1.2 * CONV1.2],
            b1: vec![T::ZERO; CONV1.1],
            w2: vec![T::ZERO; CONV2.1 * CONV2.0 * CONV2.2 * CONV2.2],
            b2: vec![T::ZERO; CONV2.1],
            w3: vec![T::ZERO; CONV3.1 * CONV3.0],
            b3: vec![T::ZERO; CONV3.1],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    /// Flat mutable views in a fixed order, for the optimizer and the
    /// finite-difference sweep.
    pub fn tensors_mut(&mut self) -> [&mut Vec<T>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn tensors(&self) -> [&Vec<T>; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite_scalar()))
    }

    pub fn convert<U: Scalar>(&self) -> Network<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&x| U::from_f64(x.to_f64())).collect();
        Network {
            w1: conv(&self.w1),
            b1: conv(&self.b1),
            w2: conv(&self.w2),
            b2: conv(&self.b2),
            w3: conv(&self.w3),
            b3: conv(&self.b3),
        }
    }
}

/// Initial output-layer bias. Starts the sigmoid near a low foreground
/// prior so early steps refine features instead of collapsing the mean
/// output toward the sparse positive rate.
pub const OUTPUT_BIAS_PRIOR: f32 = -2.0;

impl ModelParams {
    /// He-style init: weights N(0, sqrt(2/fan_in)) from the seeded stream in
    /// layer order; hidden biases zero, output bias at the foreground prior.
    pub fn init_he(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut params = Self::zeros();
        for (weights, fan_in) in [
            (&mut params.w1, CONV1.0 * CONV1.2 * CONV1.2),
            (&mut params.w2, CONV2.0 * CONV2.2 * CONV2.2),
            (&mut params.w3, CONV3.0),
        ] {
            let std = libm::sqrt(2.0 / fan_in as f64);
            for w in weights.iter_mut() {
                *w = (std * rng.next_gaussian()) as f32;
            }
        }
        params.b3[0] = OUTPUT_BIAS_PRIOR;
        params
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelError {
    /// Input is not 3 x H x W, or planes disagree.
    ShapeMismatch,
    EmptyDataset,
    InvalidConfig(&'static str),
    /// Training loss became non-finite.
    Divergence { epoch: u32 },
    Loss(LossError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::ShapeMismatch => write!(f, "input shape mismatch"),
            ModelError::EmptyDataset => write!(f, "training split is empty"),
            ModelError::InvalidConfig(why) => write!(f, "invalid train config: {why}"),
            ModelError::Divergence { epoch } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}")
            }
            ModelError::Loss(e) => write!(f, "loss error: {e}"),
        }
    }
}

impl From<LossError> for ModelError {
    fn from(e: LossError) -> Self {
        ModelError::Loss(e)
    }
}

/// Zero-padded "same" 3x3 convolution. For every output pixel the
/// accumulation order is (in-channel, ky, kx), independent of the loop
/// blocking below.
fn conv3x3<T: Scalar>(
    input: &[T],
    in_ch: usize,
    h: usize,
    w: usize,
    weights: &[T],
    bias: &[T],
    out_ch: usize,
    output: &mut [T],
) {
    debug_assert_eq!(input.len(), in_ch * h * w);
    debug_assert_eq!(output.len(), out_ch * h * w);
    let plane = h * w;
    for o in 0..out_ch {
        let out_plane = &mut output[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for i in 0..in_ch {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wgt = weights[((o * in_ch + i) * 3 + ky) * 3 + kx];
                    // output rows y where the input row y+ky-1 exists
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (h + 1 - ky).min(h);
                    // output cols x where the input col x+kx-1 exists
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        let in_row = &in_plane[iy * w + x_lo + kx - 1..iy * w + x_hi + kx - 1];
                        let out_row = &mut out_plane[y * w + x_lo..y * w + x_hi];
                        for (out_v, in_v) in out_row.iter_mut().zip(in_row.iter()) {
                            *out_v = *out_v + wgt * *in_v;
                        }
                    }
                }
            }
        }
    }
}

/// 1x1 convolution (per-pixel channel mix).
fn conv1x1<T: Scalar>(
    input: &[T],
    in_ch: usize,
    plane: usize,
    weights: &[T],
    bias: &[T],
    out_ch: usize,
    output: &mut [T],
) {
    for o in 0..out_ch {
        let out_plane = &mut output[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for i in 0..in_ch {
            let wgt = weights[o * in_ch + i];
            let in_plane = &input[i * plane..(i + 1) * plane];
            for (out_v, in_v) in out_plane.iter_mut().zip(in_plane.iter()) {
                *out_v = *out_v + wgt * *in_v;
            }
        }
    }
}

fn relu_inplace<T: Scalar>(values: &mut [T]) {
    for v in values.iter_mut() {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
}

/// Output probabilities are clamped into the open unit interval so the
/// sigmoid can never saturate to an exact 0 or 1 in f32: an exactly
/// saturated pixel has a zero derivative everywhere and can never recover.
pub const PRED_CLAMP: f64 = 1e-6;

fn sigmoid<T: Scalar>(z: T) -> T {
    let p = T::ONE / (T::ONE + (T::ZERO - z).exp());
    let lo = T::from_f64(PRED_CLAMP);
    let hi = T::from_f64(1.0 - PRED_CLAMP);
    if p < lo {
        lo
    } else if hi < p {
        hi
    } else {
        p
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub height: usize,
    pub width: usize,
    input: Vec<T>,
    a1: Vec<T>,
    a2: Vec<T>,
    /// Post-sigmoid output plane.
    pub output: Vec<T>,
}

/// Forward pass on a raw channel-major 3 x H x W buffer.
pub fn forward_raw<T: Scalar>(
    params: &Network<T>,
    input: &[T],
    h: usize,
    w: usize,
) -> Result<ForwardCache<T>, ModelError> {
    if input.len() != CONV1.0 * h * w || h == 0 || w == 0 {
        return Err(ModelError::ShapeMismatch);
    }
    let plane = h * w;
    let mut a1 = vec![T::ZERO; CONV1.1 * plane];
    conv3x3(input, CONV1.0, h, w, &params.w1, &params.b1, CONV1.1, &mut a1);
    relu_inplace(&mut a1);
    let mut a2 = vec![T::ZERO; CONV2.1 * plane];
    conv3x3(&a1, CONV2.0, h, w, &params.w2, &params.b2, CONV2.1, &mut a2);
    relu_inplace(&mut a2);
    let mut z3 = vec![T::ZERO; CONV3.1 * plane];
    conv1x1(&a2, CONV3.0, plane, &params.w3, &params.b3, CONV3.1, &mut z3);
    for v in z3.iter_mut() {
        *v = sigmoid(*v);
    }
    Ok(ForwardCache {
        height: h,
        width: w,
        input: input.to_vec(),
        a1,
        a2,
        output: z3,
    })
}

/// Forward pass on a 3-slice input stack; the output plane is a [`PredMap`]
/// with the stack's spatial dimensions.
pub fn forward(params: &ModelParams, input: &Tensor3D) -> Result<(PredMap, ForwardCache<f32>), ModelError> {
    if input.depth() != 3 {
        return Err(ModelError::ShapeMismatch);
    }
    let cache = forward_raw(params, input.data(), input.height(), input.width())?;
    let pred = PredMap::new(cache.height, cache.width, cache.output.clone())
        .map_err(|_| ModelError::ShapeMismatch)?;
    Ok((pred, cache))
}

/// Gradient of a 3x3 conv layer: weight/bias gradients (f64-accumulated)
/// plus the gradient with respect to the layer input.
fn conv3x3_backward<T: Scalar>(
    input: &[T],
    in_ch: usize,
    h: usize,
    w: usize,
    weights: &[T],
    out_ch: usize,
    dout: &[T],
    dweights: &mut [T],
    dbias: &mut [T],
    dinput: &mut [T],
) {
    let plane = h * w;
    for o in 0..out_ch {
        let dout_plane = &dout[o * plane..(o + 1) * plane];
        let mut db = 0.0f64;
        for v in dout_plane.iter() {
            db += v.to_f64();
        }
        dbias[o] = T::from_f64(db);
        for i in 0..in_ch {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let din_plane = &mut dinput[i * plane..(i + 1) * plane];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let widx = ((o * in_ch + i) * 3 + ky) * 3 + kx;
                    let wgt = weights[widx];
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (h + 1 - ky).min(h);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    let mut dw = 0.0f64;
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        let shift = x_lo + kx - 1;
                        let in_row = &in_plane[iy * w + shift..iy * w + x_hi + kx - 1];
                        let dout_row = &dout_plane[y * w + x_lo..y * w + x_hi];
                        for (dout_v, in_v) in dout_row.iter().zip(in_row.iter()) {
                            dw += dout_v.to_f64() * in_v.to_f64();
                        }
                        let din_row = &mut din_plane[iy * w + shift..iy * w + x_hi + kx - 1];
                        for (din_v, dout_v) in din_row.iter_mut().zip(dout_row.iter()) {
                            *din_v = *din_v + wgt * *dout_v;
                        }
                    }
                    dweights[widx] = T::from_f64(dw);
                }
            }
        }
    }
}

/// Backpropagation through the fixed architecture given d(loss)/d(output).
/// Returns gradients shaped like the parameters.
pub fn backward<T: Scalar>(
    params: &Network<T>,
    cache: &ForwardCache<T>,
    dloss_dout: &[T],
) -> Result<Network<T>, ModelError> {
    let (h, w) = (cache.height, cache.width);
    let plane = h * w;
    if dloss_dout.len() != plane {
        return Err(ModelError::ShapeMismatch);
    }
    let mut grads = Network::<T>::zeros();

    // sigmoid: dz3 = dL/dout * out * (1 - out)
    let mut dz3 = vec![T::ZERO; plane];
    for p in 0..plane {
        let o = cache.output[p];
        dz3[p] = dloss_dout[p] * o * (T::ONE - o);
    }

    // conv3 (1x1): dw3[o][i] = sum_p dz3[p] * a2[i][p]; da2 = w3^T dz3
    let mut da2 = vec![T::ZERO; CONV3.0 * plane];
    {
        let mut db = 0.0f64;
        for v in dz3.iter() {
            db += v.to_f64();
        }
        grads.b3[0] = T::from_f64(db);
        for i in 0..CONV3.0 {
            let a2_plane = &cache.a2[i * plane..(i + 1) * plane];
            let da2_plane = &mut da2[i * plane..(i + 1) * plane];
            let wgt = params.w3[i];
            let mut dw = 0.0f64;
            for p in 0..plane {
                dw += dz3[p].to_f64() * a2_plane[p].to_f64();
                da2_plane[p] = wgt * dz3[p];
            }
            grads.w3[i] = T::from_f64(dw);
        }
    }

    // ReLU mask of layer 2 (a2 > 0 iff z2 > 0)
    let mut dz2 = da2;
    for (d, a) in dz2.iter_mut().zip(cache.a2.iter()) {
        if *a <= T::ZERO {
            *d = T::ZERO;
        }
    }

    let mut da1 = vec![T::ZERO; CONV2.0 * plane];
    conv3x3_backward(
        &cache.a1, CONV2.0, h, w, &params.w2, CONV2.1, &dz2, &mut grads.w2, &mut grads.b2,
        &mut da1,
    );

    let mut dz1 = da1;
    for (d, a) in dz1.iter_mut().zip(cache.a1.iter()) {
        if *a <= T::ZERO {
            *d = T::ZERO;
        }
    }

    let mut dinput = vec![T::ZERO; CONV1.0 * plane];
    conv3x3_backward(
        &cache.input, CONV1.0, h, w, &params.w1, CONV1.1, &dz1, &mut grads.w1, &mut grads.b1,
        &mut dinput,
    );

    Ok(grads)
}

/// Adam moment buffers, shaped like the parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Network<f32>,
    v: Network<f32>,
    step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self {
            m: Network::zeros(),
            v: Network::zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction; per-element arithmetic in f64.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Network<f32>, config: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(config.beta1, f64::from(t));
        let bc2 = 1.0 - libm::pow(config.beta2, f64::from(t));
        let p_tensors = params.tensors_mut();
        let g_tensors = grads.tensors();
        let m_tensors = self.m.tensors_mut();
        let v_tensors = self.v.tensors_mut();
        for k in 0..6 {
            let (p, g) = (&mut *p_tensors[k], g_tensors[k]);
            let (m, v) = (&mut *m_tensors[k], &mut *v_tensors[k]);
            for idx in 0..p.len() {
                let gi = f64::from(g[idx]);
                let mi = config.beta1 * f64::from(m[idx]) + (1.0 - config.beta1) * gi;
                let vi = config.beta2 * f64::from(v[idx]) + (1.0 - config.beta2) * gi * gi;
                m[idx] = mi as f32;
                v[idx] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let update = config.learning_rate * m_hat / (libm::sqrt(v_hat) + config.epsilon);
                p[idx] = (f64::from(p[idx]) - update) as f32;
            }
        }
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new()
    }
}

/// Which pixels the training loss is averaged over.
///
/// A mask head computes its loss on crops around proposed instances, never
/// on the whole frame; `AnnotationRoi` is the stand-in for that: the union
/// of dilated bounding boxes around the label's positive regions. It keeps
/// foreground and background roughly balanced inside the loss. Over the
/// `FullFrame`, the sparse foreground lets the passive term's constant
/// background votes sink the mean output until the f32 sigmoid saturates
/// to exact zero gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossSupport {
    FullFrame,
    AnnotationRoi,
}

/// Dilation of the annotation bounding boxes, in pixels.
pub const ROI_MARGIN: usize = 4;

/// Training schedule and optimizer constants.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub mirror_augment: bool,
    pub loss_support: LossSupport,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 30,
            batch_size: 2,
            seed: 0,
            mirror_augment: true,
            loss_support: LossSupport::AnnotationRoi,
        }
    }
}

/// Flat pixel indices of the union of dilated bounding boxes around the
/// label's positive 8-connected components, in row-major order. Empty when
/// the slice has no annotation.
pub fn annotation_roi_support(label: &SoftMask) -> Vec<usize> {
    let (h, w) = (label.height(), label.width());
    let positive: Vec<bool> = label.probs().iter().map(|&p| p > 0.0).collect();
    let components = crate::metrics::components_of(&positive, h, w);
    if components.is_empty() {
        return Vec::new();
    }
    let mut in_support = vec![false; h * w];
    for pixels in components {
        let mut y0 = usize::MAX;
        let mut y1 = 0usize;
        let mut x0 = usize::MAX;
        let mut x1 = 0usize;
        for &p in &pixels {
            let (y, x) = (p as usize / w, p as usize % w);
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
        let y0 = y0.saturating_sub(ROI_MARGIN);
        let x0 = x0.saturating_sub(ROI_MARGIN);
        let y1 = (y1 + ROI_MARGIN).min(h - 1);
        let x1 = (x1 + ROI_MARGIN).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                in_support[y * w + x] = true;
            }
        }
    }
    (0..h * w).filter(|&i| in_support[i]).collect()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig("learning rate must be finite and >= 0"));
        }
        if self.epochs == 0 {
            return Err(ModelError::InvalidConfig("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch size must be >= 1"));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Trained parameters plus the per-epoch mean training loss.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub loss_curve: Vec<f64>,
}

/// Mirror of one (stack, label) pair used for augmentation; both planes are
/// flipped together so the supervision stays aligned.
pub fn mirror_pair(input: &Tensor3D, label: &SoftMask) -> (Tensor3D, SoftMask) {
    let mut data = input.data().to_vec();
    let w = input.width();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    let mirrored =
        Tensor3D::new(input.depth(), input.height(), w, data).expect("mirror preserves shape");
    (mirrored, label.mirror_horizontal())
}

/// Deterministic mini-batch Adam training on (input stack, soft label)
/// samples. A seed fixes initialization, shuffling, and augmentation draws;
/// gradients are accumulated over each batch in sample order.
pub fn train(samples: &[SampleRecord], config: &TrainConfig) -> Result<TrainOutput, ModelError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    for s in samples {
        s.validate().map_err(|_| ModelError::ShapeMismatch)?;
    }
    let mut params = ModelParams::init_he(derive_seed(config.seed, 0));
    let mut schedule_rng = SplitMix64::new(derive_seed(config.seed, 1));
    let mut optimizer = OptimizerState::new();
    let mut loss_curve = Vec::with_capacity(config.epochs as usize);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..config.epochs {
        schedule_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut epoch_samples = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut batch_grads = Network::<f64>::zeros();
            let mut batch_samples = 0usize;
            for &idx in batch {
                let sample = &samples[idx];
                let mirror = config.mirror_augment && schedule_rng.next_bool(0.5);
                let (input, label) = if mirror {
                    mirror_pair(&sample.input, &sample.soft)
                } else {
                    (sample.input.clone(), sample.soft.clone())
                };
                let support: Vec<usize> = match config.loss_support {
                    LossSupport::FullFrame => (0..input.height() * input.width()).collect(),
                    LossSupport::AnnotationRoi => annotation_roi_support(&label),
                };
                if support.is_empty() {
                    // unannotated slice: a mask loss sees no region at all
                    continue;
                }
                let cache = forward_raw(&params, input.data(), input.height(), input.width())?;
                let preds: Vec<f64> = support.iter().map(|&i| f64::from(cache.output[i])).collect();
                let targets: Vec<f64> =
                    support.iter().map(|&i| f64::from(label.probs()[i])).collect();
                let loss = apl_f64(&config.loss, &preds, &targets)?;
                if !loss.value.is_finite() {
                    return Err(ModelError::Divergence { epoch });
                }
                epoch_loss += loss.value;
                epoch_samples += 1;
                batch_samples += 1;
                let mut dloss = vec![0.0f32; cache.output.len()];
                for (&i, &g) in support.iter().zip(loss.grad.iter()) {
                    dloss[i] = g as f32;
                }
                let grads = backward(&params, &cache, &dloss)?;
                for (acc, g) in batch_grads.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (a, gv) in acc.iter_mut().zip(g.iter()) {
                        *a += f64::from(*gv);
                    }
                }
            }
            if batch_samples == 0 {
                continue;
            }
            let scale = 1.0 / batch_samples as f64;
            let mut mean_grads = Network::<f32>::zeros();
            for (m, acc) in mean_grads.tensors_mut().into_iter().zip(batch_grads.tensors()) {
                for (mv, av) in m.iter_mut().zip(acc.iter()) {
                    *mv = (av * scale) as f32;
                }
            }
            optimizer.step(&mut params, &mean_grads, config);
        }
        if !params.all_finite() {
            return Err(ModelError::Divergence { epoch });
        }
        if epoch_samples == 0 {
            return Err(ModelError::EmptyDataset);
        }
        loss_curve.push(epoch_loss / epoch_samples as f64);
    }
    Ok(TrainOutput { params, loss_curve })
}

/// Per-slice prediction over a whole intensity volume (2.5D stacks).
pub fn predict_volume(params: &ModelParams, volume: &Tensor3D) -> Result<Vec<PredMap>, ModelError> {
    let mut out = Vec::with_capacity(volume.depth());
    for i in 0..volume.depth() {
        let stack = stack_25d(volume, i).map_err(|_| ModelError::ShapeMismatch)?;
        let (pred, _) = forward(params, &stack)?;
        out.push(pred);
    }
    Ok(out)
}

/// Relative error between an analytic and a finite-difference gradient
/// element. `scale` is the largest gradient magnitude in the vector being
/// checked: elements far below it are dominated by the cancellation noise
/// of the central difference, so the denominator is floored at 0.1% of the
/// scale instead of letting noise-to-noise ratios fail the check.
pub fn gradient_rel_err(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let floor = (1e-3 * scale).max(1e-8);
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn max_abs(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// End-to-end finite-difference check: analytic parameter gradients of the
/// configured loss (through the full network) against central differences
/// on an f64 shadow copy. Returns the maximum relative error over all
/// parameters.
pub fn network_gradient_max_rel_err(
    params: &ModelParams,
    input: &Tensor3D,
    target: &SoftMask,
    loss: &LossConfig,
    h_step: f64,
) -> Result<f64, ModelError> {
    if input.depth() != 3 {
        return Err(ModelError::ShapeMismatch);
    }
    let shadow: Network<f64> = params.convert();
    let input_f64: Vec<f64> = input.data().iter().map(|&v| f64::from(v)).collect();
    let targets: Vec<f64> = target.probs().iter().map(|&t| f64::from(t)).collect();
    let (h, w) = (input.height(), input.width());

    let eval = |net: &Network<f64>| -> Result<f64, ModelError> {
        let cache = forward_raw(net, &input_f64, h, w)?;
        Ok(apl_f64(loss, &cache.output, &targets)?.value)
    };

    let cache = forward_raw(&shadow, &input_f64, h, w)?;
    let loss_grad = apl_f64(loss, &cache.output, &targets)?;
    let analytic = backward(&shadow, &cache, &loss_grad.grad)?;

    let mut numeric = Network::<f64>::zeros();
    let mut probe = shadow.clone();
    for tensor_idx in 0..6 {
        let len = probe.tensors()[tensor_idx].len();
        for i in 0..len {
            let original = probe.tensors()[tensor_idx][i];
            probe.tensors_mut()[tensor_idx][i] = original + h_step;
            let plus = eval(&probe)?;
            probe.tensors_mut()[tensor_idx][i] = original - h_step;
            let minus = eval(&probe)?;
            probe.tensors_mut()[tensor_idx][i] = original;
            numeric.tensors_mut()[tensor_idx][i] = (plus - minus) / (2.0 * h_step);
        }
    }
    let scale = analytic
        .tensors()
        .iter()
        .chain(numeric.tensors().iter())
        .map(|t| max_abs(t.iter().copied()))
        .fold(0.0f64, f64::max);
    let mut max_err = 0.0f64;
    for (a_tensor, n_tensor) in analytic.tensors().into_iter().zip(numeric.tensors()) {
        for (&a, &n) in a_tensor.iter().zip(n_tensor.iter()) {
            max_err = max_err.max(gradient_rel_err(a, n, scale));
        }
    }
    Ok(max_err)
}

/// Finite-difference check of the loss gradient alone (d loss / d
/// prediction) on f64 planes. Returns the maximum relative error over
/// pixels.
///
/// Perturbing pixel i changes the plane mean only through that pixel's
/// term, so the central difference is evaluated on the single-pixel
/// contribution and scaled by 1/N. This is the same difference quotient,
/// minus the catastrophic cancellation of re-summing all other pixels.
pub fn loss_gradient_max_rel_err(
    loss: &LossConfig,
    preds: &[f64],
    targets: &[f64],
    h_step: f64,
) -> Result<f64, ModelError> {
    let base = apl_f64(loss, preds, targets)?;
    let inv_n = 1.0 / preds.len() as f64;
    let mut numeric = vec![0.0f64; preds.len()];
    for i in 0..preds.len() {
        let target = core::slice::from_ref(&targets[i]);
        let plus = apl_f64(loss, &[preds[i] + h_step], target)?.value;
        let minus = apl_f64(loss, &[preds[i] - h_step], target)?.value;
        numeric[i] = (plus - minus) / (2.0 * h_step) * inv_n;
    }
    let scale = max_abs(base.grad.iter().copied()).max(max_abs(numeric.iter().copied()));
    let mut max_err = 0.0f64;
    for (&a, &n) in base.grad.iter().zip(numeric.iter()) {
        max_err = max_err.max(gradient_rel_err(a, n, scale));
    }
    Ok(max_err)
}

/// Smallest |pre-activation| across both ReLU layers, on the f64 shadow.
///
/// A finite-difference sweep with step h is only meaningful when no ReLU
/// input sits within h * |dz/dparam| of its kink; fixtures for gradient
/// checks should be screened with this margin.
pub fn relu_kink_margin(params: &ModelParams, input: &Tensor3D) -> Result<f64, ModelError> {
    if input.depth() != 3 {
        return Err(ModelError::ShapeMismatch);
    }
    let shadow: Network<f64> = params.convert();
    let data: Vec<f64> = input.data().iter().map(|&v| f64::from(v)).collect();
    let (h, w) = (input.height(), input.width());
    let plane = h * w;
    let mut z1 = vec![0.0f64; CONV1.1 * plane];
    conv3x3(&data, CONV1.0, h, w, &shadow.w1, &shadow.b1, CONV1.1, &mut z1);
    let mut margin = f64::INFINITY;
    for &z in &z1 {
        margin = margin.min(z.abs());
    }
    let mut a1 = z1;
    relu_inplace(&mut a1);
    let mut z2 = vec![0.0f64; CONV2.1 * plane];
    conv3x3(&a1, CONV2.0, h, w, &shadow.w2, &shadow.b2, CONV2.1, &mut z2);
    for &z in &z2 {
        margin = margin.min(z.abs());
    }
    Ok(margin)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_input(h: usize, w: usize, seed: u64) -> Tensor3D {
        let mut rng = SplitMix64::new(seed);
        let data: Vec<f32> = (0..3 * h * w).map(|_| rng.next_f64() as f32).collect();
        Tensor3D::new(3, h, w, data).unwrap()
    }

    fn test_label(h: usize, w: usize, seed: u64) -> SoftMask {
        let mut rng = SplitMix64::new(seed);
        let data: Vec<f32> = (0..h * w).map(|_| rng.next_f64() as f32).collect();
        SoftMask::new(h, w, data).unwrap()
    }

    #[test]
    fn zero_weights_give_all_half_output() {
        let params = ModelParams::zeros();
        let input = test_input(8, 8, 1);
        let (pred, _) = forward(&params, &input).unwrap();
        assert!(pred.probs().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn output_dims_match_input_dims() {
        let params = ModelParams::init_he(3);
        let input = test_input(64, 64, 2);
        let (pred, _) = forward(&params, &input).unwrap();
        assert_eq!((pred.height(), pred.width()), (64, 64));
    }

    #[test]
    fn forward_is_bit_stable() {
        let params = ModelParams::init_he(5);
        let input = test_input(16, 16, 6);
        let (a, _) = forward(&params, &input).unwrap();
        let (b, _) = forward(&params, &input).unwrap();
        assert_eq!(a.probs(), b.probs());
    }

    #[test]
    fn forward_rejects_wrong_depth() {
        let params = ModelParams::zeros();
        let input = Tensor3D::zeros(2, 8, 8);
        assert_eq!(forward(&params, &input).unwrap_err(), ModelError::ShapeMismatch);
    }

    #[test]
    fn predictions_stay_in_unit_interval() {
        let params = ModelParams::init_he(9);
        let input = test_input(16, 16, 10);
        let (pred, _) = forward(&params, &input).unwrap();
        assert!(pred.probs().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn zero_upstream_gradient_zeroes_all_parameter_gradients() {
        let params = ModelParams::init_he(11);
        let input = test_input(8, 8, 12);
        let (_, cache) = forward(&params, &input).unwrap();
        let grads = backward(&params, &cache, &vec![0.0f32; 64]).unwrap();
        for t in grads.tensors() {
            assert!(t.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn backward_is_linear_in_upstream_gradient() {
        let params = ModelParams::init_he(13);
        let input = test_input(8, 8, 14);
        let (_, cache) = forward(&params, &input).unwrap();
        let mut rng = SplitMix64::new(15);
        let g: Vec<f32> = (0..64).map(|_| (rng.next_f64() - 0.5) as f32).collect();
        let g2: Vec<f32> = g.iter().map(|&v| 2.0 * v).collect();
        let grads1 = backward(&params, &cache, &g).unwrap();
        let grads2 = backward(&params, &cache, &g2).unwrap();
        for (t1, t2) in grads1.tensors().into_iter().zip(grads2.tensors()) {
            for (a, b) in t1.iter().zip(t2.iter()) {
                assert!((2.0 * a - b).abs() <= 1e-6 * b.abs().max(1e-12), "{a} {b}");
            }
        }
    }

    /// First seed pair whose ReLU inputs all sit comfortably away from the
    /// kink, so a +/-1e-4 parameter sweep never crosses one. The scan is
    /// deterministic, i.e. the fixture is fixed.
    fn kink_safe_fixture() -> (ModelParams, Tensor3D) {
        for seed in 0..2000u64 {
            let params = ModelParams::init_he(seed);
            let input = test_input(16, 16, seed + 10_000);
            let margin = relu_kink_margin(&params, &input).unwrap();
            if margin > 2e-3 {
                return (params, input);
            }
        }
        panic!("no kink-safe fixture found");
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let (params, input) = kink_safe_fixture();
        let label = test_label(16, 16, 19);
        let loss = LossConfig::new(1.0, 1.0, 1.0, true);
        let err = network_gradient_max_rel_err(&params, &input, &label, &loss, 1e-4).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn loss_gradients_match_finite_differences_interior() {
        let mut rng = SplitMix64::new(23);
        let preds: Vec<f64> = (0..256).map(|_| rng.next_range_f64(0.01, 0.99)).collect();
        let targets: Vec<f64> = (0..256).map(|_| rng.next_f64()).collect();
        for cfg in [
            LossConfig::new(1.0, 0.0, 0.0, false),
            LossConfig::new(0.0, 1.0, 1.0, true),
            LossConfig::new(1.0, 1.0, 1.0, true),
        ] {
            let err = loss_gradient_max_rel_err(&cfg, &preds, &targets, 1e-6).unwrap();
            assert!(err < 1e-6, "{cfg:?}: max relative error {err}");
        }
    }

    #[test]
    fn loss_gradients_near_clip_boundary() {
        // p_min large enough that the finite-difference probe stays inside
        // the smooth region around 10*p_min.
        let mut cfg = LossConfig::new(1.0, 1.0, 1.0, true);
        cfg.p_min = 1e-4;
        let preds = vec![10.0 * cfg.p_min, 1.0 - 10.0 * cfg.p_min, 0.5];
        let targets = vec![1.0, 0.0, 0.25];
        let err = loss_gradient_max_rel_err(&cfg, &preds, &targets, 1e-6).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let samples = tiny_dataset(4, 8);
        let config = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            seed: 7,
            ..TrainConfig::default()
        };
        let out = train(&samples, &config).unwrap();
        let init = ModelParams::init_he(derive_seed(7, 0));
        assert_eq!(out.params, init);
    }

    #[test]
    fn training_is_deterministic() {
        let samples = tiny_dataset(6, 8);
        let config = TrainConfig {
            epochs: 3,
            seed: 21,
            ..TrainConfig::default()
        };
        let a = train(&samples, &config).unwrap();
        let b = train(&samples, &config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_curve, b.loss_curve);
    }

    #[test]
    fn loss_decreases_on_clean_data() {
        let samples = tiny_dataset(8, 16);
        let config = TrainConfig {
            epochs: 30,
            seed: 3,
            mirror_augment: false,
            ..TrainConfig::default()
        };
        let out = train(&samples, &config).unwrap();
        let curve = &out.loss_curve;
        let non_increasing = curve
            .windows(2)
            .filter(|pair| pair[1] <= pair[0] + 1e-12)
            .count();
        assert!(
            non_increasing as f64 >= 0.9 * (curve.len() - 1) as f64,
            "only {non_increasing}/{} epochs non-increasing: {curve:?}",
            curve.len() - 1
        );
        assert!(curve.last().unwrap() < curve.first().unwrap());
    }

    #[test]
    fn train_rejects_empty_dataset() {
        let config = TrainConfig::default();
        assert_eq!(train(&[], &config).unwrap_err(), ModelError::EmptyDataset);
    }

    #[test]
    fn predict_volume_handles_single_slice() {
        let params = ModelParams::init_he(31);
        let volume = Tensor3D::zeros(1, 8, 8);
        let preds = predict_volume(&params, &volume).unwrap();
        assert_eq!(preds.len(), 1);
    }

    #[test]
    fn mirror_equivariance_with_mirrored_kernels() {
        // flipping input, label, and every kernel horizontally must leave
        // the loss unchanged (up to accumulation-order rounding)
        let params = ModelParams::init_he(37);
        let input = test_input(16, 16, 38);
        let label = test_label(16, 16, 39);
        let loss_cfg = LossConfig::new(0.0, 1.0, 0.0, false);

        let mut flipped = params.clone();
        for (weights, k) in [(&mut flipped.w1, CONV1.2), (&mut flipped.w2, CONV2.2)] {
            for kernel_row in weights.chunks_mut(k) {
                kernel_row.reverse();
            }
        }
        let (mirror_input, mirror_label) = mirror_pair(&input, &label);

        let (pred_a, _) = forward(&params, &input).unwrap();
        let la = crate::losses::apl(&loss_cfg, &pred_a, &label).unwrap();
        let (pred_b, _) = forward(&flipped, &mirror_input).unwrap();
        let lb = crate::losses::apl(&loss_cfg, &pred_b, &mirror_label).unwrap();
        assert!(
            (la.value - lb.value).abs() <= 1e-5 * la.value.abs().max(1.0),
            "{} vs {}",
            la.value,
            lb.value
        );
    }

    fn tiny_dataset(n: usize, size: usize) -> Vec<SampleRecord> {
        // bright square on dark background, label = the square
        let mut samples = Vec::new();
        for s in 0..n {
            let mut data = vec![0.1f32; 3 * size * size];
            let mut label = vec![0.0f32; size * size];
            let offset = s % (size / 2);
            for y in offset..offset + size / 4 {
                for x in offset..offset + size / 4 {
                    for c in 0..3 {
                        data[c * size * size + y * size + x] = 0.9;
                    }
                    label[y * size + x] = 1.0;
                }
            }
            samples.push(SampleRecord {
                volume_id: alloc::format!("v{s}"),
                slice_index: 0,
                input: Tensor3D::new(3, size, size, data).unwrap(),
                soft: SoftMask::new(size, size, label).unwrap(),
                gt: None,
                bone: crate::tensor::BinaryMask::new(size, size, vec![1; size * size]).unwrap(),
            });
        }
        samples
    }
}
