//! Per-pixel heatmap losses with analytic derivatives.
//!
//! Every scalar loss takes a prediction `p` and a probability-valued target
//! `t`, both in `[0, 1]`, and returns `(value, d value / d p)`. Predictions
//! are clamped to `[eps, 1 - eps]` before any logarithm; outside that band
//! the logarithm is flat, so its contribution to the derivative is zero.
//!
//! The central loss is `-t * |t - p|^r * ln p`: the target itself weights a
//! pixel by its closeness to the landmark, and `|t - p|^r` vanishes on a
//! perfect soft prediction while emphasising badly predicted pixels.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Error, Result};
use crate::heatmap::Heatmap;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    Central,
    CrossEntropy,
    WeightedCrossEntropy,
    Focal,
}

impl LossFamily {
    pub const ALL: [LossFamily; 4] = [
        LossFamily::Central,
        LossFamily::CrossEntropy,
        LossFamily::WeightedCrossEntropy,
        LossFamily::Focal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossFamily::Central => "central",
            LossFamily::CrossEntropy => "cross_entropy",
            LossFamily::WeightedCrossEntropy => "weighted_cross_entropy",
            LossFamily::Focal => "focal",
        }
    }
}

impl std::str::FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "central" => Ok(LossFamily::Central),
            "cross_entropy" | "ce" => Ok(LossFamily::CrossEntropy),
            "weighted_cross_entropy" | "wce" => Ok(LossFamily::WeightedCrossEntropy),
            "focal" => Ok(LossFamily::Focal),
            other => Err(invalid_config(format!("unknown loss family '{other}'"))),
        }
    }
}

impl std::fmt::Display for LossFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
    /// Per-pixel values only; `LossReport::reduced` then holds the sum.
    None,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            "none" => Ok(Reduction::None),
            other => Err(invalid_config(format!("unknown reduction '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub family: LossFamily,
    /// Central loss exponent.
    pub r: f64,
    /// Focal focusing exponent.
    pub gamma: f64,
    /// Positive-class weight of the weighted cross-entropy.
    pub alpha: f64,
    /// Positive-class weight of the focal loss; `None` weights both terms by 1.
    pub focal_alpha: Option<f64>,
    pub epsilon: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            family: LossFamily::Central,
            r: 2.0,
            gamma: 2.0,
            alpha: 0.75,
            focal_alpha: None,
            epsilon: DEFAULT_EPSILON,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn central(r: f64) -> Self {
        Self {
            r,
            ..Self::default()
        }
    }

    pub fn with_family(family: LossFamily) -> Self {
        Self {
            family,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 0.0) || !self.r.is_finite() {
            return Err(invalid_config(format!("r must be >= 0, got {}", self.r)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(invalid_config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid_config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if let Some(a) = self.focal_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(invalid_config(format!("focal alpha must be in [0, 1], got {a}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(invalid_config(format!(
                "epsilon must be in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Loss value and derivative for one pixel. Assumes a validated config.
    pub fn eval(&self, prediction: f64, target: f64) -> (f64, f64) {
        let eps = self.epsilon;
        match self.family {
            LossFamily::Central => central_eps(prediction, target, self.r, eps),
            LossFamily::CrossEntropy => weighted_ce_eps(prediction, target, 1.0, 1.0, eps),
            LossFamily::WeightedCrossEntropy => {
                weighted_ce_eps(prediction, target, self.alpha, 1.0 - self.alpha, eps)
            }
            LossFamily::Focal => focal_eps(prediction, target, self.gamma, self.focal_alpha, eps),
        }
    }
}

struct Clamped {
    p: f64,
    /// 1 inside the clamp band, 0 where the clamp is active.
    slope: f64,
}

fn clamp_prob(p: f64, eps: f64) -> Clamped {
    if p < eps {
        Clamped { p: eps, slope: 0.0 }
    } else if p > 1.0 - eps {
        Clamped {
            p: 1.0 - eps,
            slope: 0.0,
        }
    } else {
        Clamped { p, slope: 1.0 }
    }
}

/// `|d|^r` with `|d|^0 = 1` for every `d`, including zero.
fn pow_abs(d: f64, r: f64) -> f64 {
    if r == 0.0 {
        1.0
    } else {
        d.abs().powf(r)
    }
}

fn central_eps(p: f64, t: f64, r: f64, eps: f64) -> (f64, f64) {
    let c = clamp_prob(p, eps);
    let ln_p = c.p.ln();
    let d = t - p;
    let modulating = pow_abs(d, r);
    let value = -t * modulating * ln_p;
    // d/dp |t - p|^r = -r sign(d) |d|^(r-1); sign(0) = 0
    let dmod = if r == 0.0 || d == 0.0 {
        0.0
    } else {
        -r * d.signum() * d.abs().powf(r - 1.0)
    };
    let grad = -t * (dmod * ln_p + modulating * c.slope / c.p);
    (value, grad)
}

fn weighted_ce_eps(p: f64, t: f64, pos: f64, neg: f64, eps: f64) -> (f64, f64) {
    let c = clamp_prob(p, eps);
    let value = -(pos * t * c.p.ln() + neg * (1.0 - t) * (1.0 - c.p).ln());
    let grad = c.slope * (-pos * t / c.p + neg * (1.0 - t) / (1.0 - c.p));
    (value, grad)
}

fn focal_eps(p: f64, t: f64, gamma: f64, alpha: Option<f64>, eps: f64) -> (f64, f64) {
    let c = clamp_prob(p, eps);
    let (pos, neg) = alpha.map_or((1.0, 1.0), |a| (a, 1.0 - a));
    let q = 1.0 - c.p;
    let (ln_p, ln_q) = (c.p.ln(), q.ln());
    let value = -(pos * t * pow_abs(q, gamma) * ln_p + neg * (1.0 - t) * pow_abs(c.p, gamma) * ln_q);
    // derivatives of q^g ln p and p^g ln q with respect to p
    let d_pos = -deriv_pow(q, gamma) * ln_p + pow_abs(q, gamma) / c.p;
    let d_neg = deriv_pow(c.p, gamma) * ln_q - pow_abs(c.p, gamma) / q;
    let grad = -c.slope * (pos * t * d_pos + neg * (1.0 - t) * d_neg);
    (value, grad)
}

/// `d/dx x^g` for `x > 0`, zero when `g = 0`.
fn deriv_pow(x: f64, g: f64) -> f64 {
    if g == 0.0 {
        0.0
    } else {
        g * x.powf(g - 1.0)
    }
}

/// Central loss `-t |t - p|^r ln p` and its derivative with respect to `p`.
pub fn central_loss(prediction: f64, target: f64, r: f64) -> Result<(f64, f64)> {
    if !(r >= 0.0) {
        return Err(invalid_config(format!("r must be >= 0, got {r}")));
    }
    Ok(central_eps(prediction, target, r, DEFAULT_EPSILON))
}

/// Two-term binary cross-entropy with a soft target.
pub fn cross_entropy(prediction: f64, target: f64) -> (f64, f64) {
    weighted_ce_eps(prediction, target, 1.0, 1.0, DEFAULT_EPSILON)
}

/// Cross-entropy with `alpha` on the positive term and `1 - alpha` on the
/// negative term.
pub fn weighted_cross_entropy(prediction: f64, target: f64, alpha: f64) -> (f64, f64) {
    weighted_ce_eps(prediction, target, alpha, 1.0 - alpha, DEFAULT_EPSILON)
}

/// Focal loss `-[a t (1-p)^g ln p + (1-a)(1-t) p^g ln(1-p)]`; with
/// `alpha = None` both terms have weight 1. On hard targets this is the
/// usual `-a_t (1 - p_t)^g ln p_t`.
pub fn focal_loss(prediction: f64, target: f64, gamma: f64, alpha: Option<f64>) -> (f64, f64) {
    focal_eps(prediction, target, gamma, alpha, DEFAULT_EPSILON)
}

#[derive(Clone, Debug)]
pub struct LossReport {
    pub per_pixel: Vec<f64>,
    pub reduced: f64,
    /// Per-pixel derivative `d per_pixel[i] / d prediction[i]`.
    pub grad_wrt_prediction: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl LossReport {
    /// Derivative of `reduced` with respect to each prediction.
    pub fn reduced_grad(&self, reduction: Reduction) -> Vec<f64> {
        let scale = reduction_scale(reduction, self.per_pixel.len());
        self.grad_wrt_prediction.iter().map(|g| g * scale).collect()
    }
}

fn reduction_scale(reduction: Reduction, n: usize) -> f64 {
    match reduction {
        Reduction::Mean => 1.0 / n as f64,
        Reduction::Sum | Reduction::None => 1.0,
    }
}

/// Applies the configured loss at every pixel.
pub fn field_loss(prediction: &Heatmap, target: &Heatmap, config: &LossConfig) -> Result<LossReport> {
    config.validate()?;
    if (prediction.height(), prediction.width()) != (target.height(), target.width()) {
        return Err(Error::ShapeMismatch {
            expected: vec![target.height(), target.width()],
            actual: vec![prediction.height(), prediction.width()],
        });
    }
    let (per_pixel, grad): (Vec<f64>, Vec<f64>) = prediction
        .values()
        .iter()
        .zip(target.values())
        .map(|(&p, &t)| config.eval(p, t))
        .unzip();
    let reduced = reduce(&per_pixel, config.reduction);
    Ok(LossReport {
        per_pixel,
        reduced,
        grad_wrt_prediction: grad,
        height: target.height(),
        width: target.width(),
    })
}

fn reduce(values: &[f64], reduction: Reduction) -> f64 {
    let sum: f64 = values.iter().sum();
    match reduction {
        Reduction::Mean => sum / values.len() as f64,
        Reduction::Sum | Reduction::None => sum,
    }
}

/// Reduced loss over whole prediction/target tensors and the gradient of
/// the reduced value. Used by the training loop on `[N, L, H, W]` batches.
pub fn tensor_loss(prediction: &Tensor, target: &Tensor, config: &LossConfig) -> Result<(f64, Tensor)> {
    config.validate()?;
    if prediction.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: target.shape().to_vec(),
            actual: prediction.shape().to_vec(),
        });
    }
    let scale = reduction_scale(config.reduction, prediction.len());
    let mut values = Vec::with_capacity(prediction.len());
    let mut grad = Tensor::zeros(prediction.shape());
    for ((&p, &t), g) in prediction
        .data()
        .iter()
        .zip(target.data())
        .zip(grad.data_mut())
    {
        let (v, d) = config.eval(p, t);
        values.push(v);
        *g = d * scale;
    }
    Ok((reduce(&values, config.reduction), grad))
}
