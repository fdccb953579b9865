//! Pixel-wise loss family for training against soft labels: cross-entropy,
//! reverse cross-entropy, MAE, their normalized variants, and the weighted
//! active-passive combination, each with analytic gradients with respect to
//! the prediction.
//!
//! All quantities that appear inside a logarithm are clipped to
//! `[p_min, 1 - p_min]` first, which bounds the reverse cross-entropy and
//! keeps every value finite. Plane losses are arithmetic means over pixels,
//! accumulated in f64 in index order; the reported gradient is the gradient
//! of that mean (it carries the 1/N factor).

use alloc::vec::Vec;
use core::fmt;

use crate::tensor::{PredMap, SoftMask};

/// Default clipping floor for probabilities inside logarithms.
pub const DEFAULT_P_MIN: f64 = 1e-20;

/// Weighted combination of loss terms plus shared numeric knobs.
///
/// `w_bce` weighs cross-entropy against the label binarized at 0.5,
/// `w_sce` cross-entropy against the soft label itself, and `w_rce` the
/// reverse cross-entropy (the passive term). With `normalize_terms` set,
/// every term is divided by its sum over the class targets before
/// weighting; `normalize_active` overrides that for the two cross-entropy
/// terms only.
///
/// The override exists because a fully normalized combination cannot train
/// a from-scratch segmenter on sparse weak labels: the normalized
/// cross-entropy gradient vanishes on confidently-wrong pixels while the
/// reverse term keeps voting the background down, so the output sinks into
/// saturation. An unnormalized active term restores the braking gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub w_bce: f64,
    pub w_sce: f64,
    pub w_rce: f64,
    pub normalize_terms: bool,
    /// `None` follows `normalize_terms`.
    pub normalize_active: Option<bool>,
    pub p_min: f64,
    pub num_classes: u32,
}

impl LossConfig {
    pub fn new(w_bce: f64, w_sce: f64, w_rce: f64, normalize_terms: bool) -> Self {
        Self {
            w_bce,
            w_sce,
            w_rce,
            normalize_terms,
            normalize_active: None,
            p_min: DEFAULT_P_MIN,
            num_classes: 2,
        }
    }

    /// Whether the active (cross-entropy) terms are normalized.
    pub fn active_normalized(&self) -> bool {
        self.normalize_active.unwrap_or(self.normalize_terms)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let weights = [self.w_bce, self.w_sce, self.w_rce];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LossError::InvalidConfig("weights must be finite and >= 0"));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(LossError::InvalidConfig("at least one weight must be > 0"));
        }
        if !(self.p_min > 0.0 && self.p_min < 0.5) {
            return Err(LossError::InvalidConfig("p_min must lie in (0, 0.5)"));
        }
        if self.num_classes != 2 {
            // The segmenter is a single-channel Bernoulli model; the class
            // sum in the normalizer runs over the targets {0, 1}.
            return Err(LossError::InvalidConfig(
                "only the binary case (num_classes = 2) is supported",
            ));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(1.0, 0.0, 0.0, false)
    }
}

/// Base loss selected by [`normalized`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseLoss {
    SoftCe,
    SoftRce,
    Mae,
}

/// Scalar loss (mean over pixels) plus its gradient plane.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValueAndGrad {
    pub value: f64,
    /// d(value)/d(prediction) per pixel, same layout as the prediction.
    pub grad: Vec<f64>,
    /// Pixels where a normalizer denominator vanished and the defined
    /// fallback (1/K with zero gradient) was used.
    pub degenerate_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LossError {
    DimMismatch,
    InvalidConfig(&'static str),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::DimMismatch => write!(f, "prediction and label dimensions differ"),
            LossError::InvalidConfig(why) => write!(f, "invalid loss config: {why}"),
        }
    }
}

#[inline]
fn clip(v: f64, p_min: f64) -> f64 {
    v.max(p_min).min(1.0 - p_min)
}

#[inline]
fn inside_clip(v: f64, p_min: f64) -> bool {
    v > p_min && v < 1.0 - p_min
}

/// Clipped prediction with its logs, shared by every cross-entropy term at
/// one pixel (the logs dominate the cost of the plane loops).
#[derive(Clone, Copy)]
struct PredTerms {
    cp: f64,
    cq: f64,
    lcp: f64,
    lcq: f64,
    inside_p: bool,
    inside_q: bool,
}

#[inline]
fn pred_terms(pred: f64, p_min: f64) -> PredTerms {
    let cp = clip(pred, p_min);
    let cq = clip(1.0 - pred, p_min);
    PredTerms {
        cp,
        cq,
        lcp: libm::log(cp),
        lcq: libm::log(cq),
        inside_p: inside_clip(pred, p_min),
        inside_q: inside_clip(1.0 - pred, p_min),
    }
}

#[inline]
fn ce_from(t: &PredTerms, target: f64) -> (f64, f64) {
    let value = -(target * t.lcp + (1.0 - target) * t.lcq);
    let mut grad = 0.0;
    if t.inside_p {
        grad -= target / t.cp;
    }
    if t.inside_q {
        grad += (1.0 - target) / t.cq;
    }
    (value, grad)
}

#[inline]
fn rce_from(log_target: f64, log_one_minus_target: f64, pred: f64) -> (f64, f64) {
    let value = -(pred * log_target + (1.0 - pred) * log_one_minus_target);
    (value, log_one_minus_target - log_target)
}

/// Per-pixel cross-entropy of the prediction against `target`:
/// `-[t*ln clip(p) + (1-t)*ln clip(1-p)]`, and its derivative in `p`.
///
/// The derivative is the exact derivative of the clipped expression, so it
/// is zero wherever the corresponding log argument sits in a clipped zone.
#[inline]
pub fn soft_ce_pixel(pred: f64, target: f64, p_min: f64) -> (f64, f64) {
    ce_from(&pred_terms(pred, p_min), target)
}

/// Per-pixel reverse cross-entropy `-[p*ln clip(t) + (1-p)*ln clip(1-t)]`.
/// Linear in the prediction; the derivative never needs clipping.
#[inline]
pub fn soft_rce_pixel(pred: f64, target: f64, p_min: f64) -> (f64, f64) {
    let lt = libm::log(clip(target, p_min));
    let l1t = libm::log(clip(1.0 - target, p_min));
    rce_from(lt, l1t, pred)
}

/// Per-pixel absolute error with the sign subgradient (0 at ties).
#[inline]
pub fn mae_pixel(pred: f64, target: f64) -> (f64, f64) {
    let d = pred - target;
    if d > 0.0 {
        (d, 1.0)
    } else if d < 0.0 {
        (-d, -1.0)
    } else {
        (0.0, 0.0)
    }
}

#[inline]
fn base_pixel(base: BaseLoss, pred: f64, target: f64, p_min: f64) -> (f64, f64) {
    match base {
        BaseLoss::SoftCe => soft_ce_pixel(pred, target, p_min),
        BaseLoss::SoftRce => soft_rce_pixel(pred, target, p_min),
        BaseLoss::Mae => mae_pixel(pred, target),
    }
}

/// Quotient rule for a normalized term `l / s`; a vanishing denominator
/// yields the defined fallback 1/K with zero gradient and raises the
/// degenerate flag.
#[inline]
fn quotient(l: f64, dl: f64, s: f64, ds: f64) -> (f64, f64, bool) {
    if s == 0.0 {
        return (0.5, 0.0, true);
    }
    let value = l / s;
    let grad = (dl * s - l * ds) / (s * s);
    (value, grad, false)
}

/// Per-pixel normalized loss: the base loss at the actual target divided by
/// its sum over the one-hot class targets {0, 1}. Returns
/// (value, derivative, denominator-degenerate flag).
#[inline]
pub fn normalized_pixel(base: BaseLoss, pred: f64, target: f64, p_min: f64) -> (f64, f64, bool) {
    let (l, dl) = base_pixel(base, pred, target, p_min);
    let (l0, dl0) = base_pixel(base, pred, 0.0, p_min);
    let (l1, dl1) = base_pixel(base, pred, 1.0, p_min);
    quotient(l, dl, l0 + l1, dl0 + dl1)
}

fn check_dims(pred: &PredMap, target: &SoftMask) -> Result<(), LossError> {
    if pred.height() == target.height() && pred.width() == target.width() {
        Ok(())
    } else {
        Err(LossError::DimMismatch)
    }
}

/// Mean-reduce a per-pixel kernel over paired f64 planes.
fn reduce_plane<F>(preds: &[f64], targets: &[f64], mut kernel: F) -> LossValueAndGrad
where
    F: FnMut(f64, f64) -> (f64, f64, bool),
{
    let n = preds.len();
    let inv_n = 1.0 / n as f64;
    let mut acc = 0.0f64;
    let mut grad = Vec::with_capacity(n);
    let mut degenerate = 0usize;
    for i in 0..n {
        let (v, g, deg) = kernel(preds[i], targets[i]);
        acc += v;
        grad.push(g * inv_n);
        degenerate += usize::from(deg);
    }
    LossValueAndGrad {
        value: acc * inv_n,
        grad,
        degenerate_pixels: degenerate,
    }
}

/// f64 plane evaluation used by the typed wrappers, the finite-difference
/// oracle, and the shadow training path. `normalize` selects the class-sum
/// normalization. Produces bit-identical results to mapping the per-pixel
/// kernels, with the prediction logs computed once per pixel.
pub fn eval_plane_f64(
    base: BaseLoss,
    normalize: bool,
    preds: &[f64],
    targets: &[f64],
    p_min: f64,
) -> Result<LossValueAndGrad, LossError> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(LossError::DimMismatch);
    }
    let out = match (base, normalize) {
        (BaseLoss::SoftCe, false) => reduce_plane(preds, targets, |p, t| {
            let (v, g) = ce_from(&pred_terms(p, p_min), t);
            (v, g, false)
        }),
        (BaseLoss::SoftCe, true) => reduce_plane(preds, targets, |p, t| {
            let terms = pred_terms(p, p_min);
            let (l, dl) = ce_from(&terms, t);
            let (l0, dl0) = ce_from(&terms, 0.0);
            let (l1, dl1) = ce_from(&terms, 1.0);
            quotient(l, dl, l0 + l1, dl0 + dl1)
        }),
        (BaseLoss::SoftRce, false) => reduce_plane(preds, targets, |p, t| {
            let (v, g) = soft_rce_pixel(p, t, p_min);
            (v, g, false)
        }),
        (BaseLoss::SoftRce, true) => {
            // class-target logs are constants over the plane
            let log_floor = libm::log(clip(0.0, p_min));
            let log_ceil = libm::log(clip(1.0, p_min));
            reduce_plane(preds, targets, |p, t| {
                let (l, dl) = soft_rce_pixel(p, t, p_min);
                let (l0, dl0) = rce_from(log_floor, log_ceil, p);
                let (l1, dl1) = rce_from(log_ceil, log_floor, p);
                quotient(l, dl, l0 + l1, dl0 + dl1)
            })
        }
        (BaseLoss::Mae, false) => reduce_plane(preds, targets, |p, t| {
            let (v, g) = mae_pixel(p, t);
            (v, g, false)
        }),
        (BaseLoss::Mae, true) => reduce_plane(preds, targets, |p, t| {
            let (l, dl) = mae_pixel(p, t);
            let (l0, dl0) = mae_pixel(p, 0.0);
            let (l1, dl1) = mae_pixel(p, 1.0);
            quotient(l, dl, l0 + l1, dl0 + dl1)
        }),
    };
    Ok(out)
}

fn to_f64(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| f64::from(v)).collect()
}

/// Soft cross-entropy of a prediction plane against a soft label plane.
pub fn soft_ce(pred: &PredMap, target: &SoftMask, p_min: f64) -> Result<LossValueAndGrad, LossError> {
    check_dims(pred, target)?;
    eval_plane_f64(BaseLoss::SoftCe, false, &to_f64(pred.probs()), &to_f64(target.probs()), p_min)
}

/// Soft reverse cross-entropy (prediction and target swapped inside the logs).
pub fn soft_rce(pred: &PredMap, target: &SoftMask, p_min: f64) -> Result<LossValueAndGrad, LossError> {
    check_dims(pred, target)?;
    eval_plane_f64(BaseLoss::SoftRce, false, &to_f64(pred.probs()), &to_f64(target.probs()), p_min)
}

/// Mean absolute error.
pub fn mae(pred: &PredMap, target: &SoftMask) -> Result<LossValueAndGrad, LossError> {
    check_dims(pred, target)?;
    eval_plane_f64(
        BaseLoss::Mae,
        false,
        &to_f64(pred.probs()),
        &to_f64(target.probs()),
        DEFAULT_P_MIN,
    )
}

/// Class-sum normalized variant of `base` (numerator at the actual target,
/// denominator summed over the one-hot targets).
pub fn normalized(
    base: BaseLoss,
    pred: &PredMap,
    target: &SoftMask,
    p_min: f64,
) -> Result<LossValueAndGrad, LossError> {
    check_dims(pred, target)?;
    eval_plane_f64(base, true, &to_f64(pred.probs()), &to_f64(target.probs()), p_min)
}

/// Active-passive combination on f64 planes:
/// `w_bce * CE(pred, binarize(target)) + w_sce * CE(pred, target) +
///  w_rce * RCE(pred, target)`, each term normalized when the config says so.
/// Zero-weight terms are skipped, so the combination is exactly linear in
/// the individual term results.
pub fn apl_f64(
    config: &LossConfig,
    preds: &[f64],
    targets: &[f64],
) -> Result<LossValueAndGrad, LossError> {
    config.validate()?;
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(LossError::DimMismatch);
    }
    let mut value = 0.0f64;
    let mut grad = alloc::vec![0.0f64; preds.len()];
    let mut degenerate = 0usize;
    let mut accumulate = |weight: f64, term: LossValueAndGrad| {
        value += weight * term.value;
        for (g, t) in grad.iter_mut().zip(term.grad.iter()) {
            *g += weight * t;
        }
        degenerate += term.degenerate_pixels;
    };
    if config.w_bce > 0.0 {
        let bin: Vec<f64> = targets
            .iter()
            .map(|&t| if t > 0.5 { 1.0 } else { 0.0 })
            .collect();
        let term =
            eval_plane_f64(BaseLoss::SoftCe, config.active_normalized(), preds, &bin, config.p_min)?;
        accumulate(config.w_bce, term);
    }
    if config.w_sce > 0.0 {
        let term = eval_plane_f64(
            BaseLoss::SoftCe,
            config.active_normalized(),
            preds,
            targets,
            config.p_min,
        )?;
        accumulate(config.w_sce, term);
    }
    if config.w_rce > 0.0 {
        let term =
            eval_plane_f64(BaseLoss::SoftRce, config.normalize_terms, preds, targets, config.p_min)?;
        accumulate(config.w_rce, term);
    }
    Ok(LossValueAndGrad {
        value,
        grad,
        degenerate_pixels: degenerate,
    })
}

/// Typed wrapper over [`apl_f64`].
pub fn apl(
    config: &LossConfig,
    pred: &PredMap,
    target: &SoftMask,
) -> Result<LossValueAndGrad, LossError> {
    check_dims(pred, target)?;
    apl_f64(config, &to_f64(pred.probs()), &to_f64(target.probs()))
}
