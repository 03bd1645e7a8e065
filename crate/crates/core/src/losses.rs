//! Training objectives over softmax probabilities.
//!
//! Probabilities and targets share the layout (B, C, spatial...). Sums run
//! over every voxel of every sample ("global") unless a per-class
//! aggregation is requested. Each loss also returns its gradient with
//! respect to the probabilities so it can terminate an autodiff graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::tensor::Tensor;

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiceAggregation {
    /// One ratio over all voxels and classes jointly.
    Global,
    /// Ratio per class, then averaged over classes. Applies to the
    /// Tversky index as well.
    PerClassMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub dice_aggregation: DiceAggregation,
    /// Multiplier on the Dice overlap term. 1 keeps the overlap ratio
    /// without the usual factor of two; 2 gives the conventional soft Dice.
    pub dice_numerator_factor: f64,
    /// Include the extra 1/C factor in the cross-entropy mean.
    pub ce_class_factor: bool,
    pub ds_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            alpha: 0.3,
            beta: 0.7,
            dice_aggregation: DiceAggregation::Global,
            dice_numerator_factor: 1.0,
            ce_class_factor: true,
            ds_weights: default_ds_weights(),
        }
    }
}

pub fn default_ds_weights() -> Vec<f64> {
    vec![8.0 / 15.0, 4.0 / 15.0, 2.0 / 15.0, 1.0 / 15.0]
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("Tversky alpha and beta must be >= 0".into()));
        }
        let sum: f64 = self.ds_weights.iter().sum();
        if self.ds_weights.is_empty() || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("deep-supervision weights must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Indicator encoding (B, C, spatial...) of integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotTarget(Tensor);

impl OneHotTarget {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[1]
    }
}

/// One-hot encodes a batch of equally shaped label grids.
pub fn one_hot(labels: &[Grid3<u8>], num_classes: usize) -> Result<OneHotTarget> {
    let first = labels
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty label batch".into()))?;
    let s = first.shape();
    let inner = first.len();
    let mut data = vec![0.0; labels.len() * num_classes * inner];
    for (b, g) in labels.iter().enumerate() {
        if g.shape() != s {
            return Err(Error::shape(s, g.shape()));
        }
        for (j, &v) in g.data().iter().enumerate() {
            if v as usize >= num_classes {
                return Err(Error::LabelOutOfRange {
                    index: b * inner + j,
                    value: v as i64,
                    num_classes,
                });
            }
            data[(b * num_classes + v as usize) * inner + j] = 1.0;
        }
    }
    Ok(OneHotTarget(Tensor::from_vec(
        &[labels.len(), num_classes, s[0], s[1], s[2]],
        data,
    )?))
}

/// Loss value plus its gradient with respect to the probabilities.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    pub grad: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftDice,
    CrossEntropy,
    Dcce,
    Tversky,
    Hybrid,
}

struct Layout {
    b: usize,
    c: usize,
    inner: usize,
}

fn layout(p: &Tensor, y: &OneHotTarget) -> Result<Layout> {
    if p.shape() != y.0.shape() {
        return Err(Error::shape(y.0.shape(), p.shape()));
    }
    let s = p.shape();
    if s.len() < 2 {
        return Err(Error::shape("(B, C, ...)", s));
    }
    Ok(Layout {
        b: s[0],
        c: s[1],
        inner: s[2..].iter().product(),
    })
}

fn soft_dice_eval(p: &Tensor, y: &OneHotTarget, eps: f64, agg: DiceAggregation, factor: f64) -> Result<LossEval> {
    let l = layout(p, y)?;
    let (pd, yd) = (p.data(), y.0.data());
    let mut grad = Tensor::zeros(p.shape());
    // (overlap, denominator) per group: one group globally, or one per class
    let groups = match agg {
        DiceAggregation::Global => 1,
        DiceAggregation::PerClassMean => l.c,
    };
    let group_of = |c: usize| if groups == 1 { 0 } else { c };
    let mut num = vec![0.0; groups];
    let mut den = vec![0.0; groups];
    for b in 0..l.b {
        for c in 0..l.c {
            let off = (b * l.c + c) * l.inner;
            let g = group_of(c);
            for j in off..off + l.inner {
                num[g] += pd[j] * yd[j];
                den[g] += pd[j] + yd[j];
            }
        }
    }
    let ratios: Vec<f64> = (0..groups)
        .map(|g| (factor * num[g] + eps) / (den[g] + eps))
        .collect();
    let value = ratios.iter().sum::<f64>() / groups as f64;
    let gd = grad.data_mut();
    for b in 0..l.b {
        for c in 0..l.c {
            let off = (b * l.c + c) * l.inner;
            let g = group_of(c);
            let (a, d) = (factor * num[g] + eps, den[g] + eps);
            for j in off..off + l.inner {
                gd[j] = (factor * yd[j] * d - a) / (d * d) / groups as f64;
            }
        }
    }
    Ok(LossEval { value, grad })
}

fn cross_entropy_eval(p: &Tensor, y: &OneHotTarget, class_factor: bool) -> Result<LossEval> {
    let l = layout(p, y)?;
    let n = (l.b * l.inner) as f64;
    let scale = if class_factor { 1.0 / (n * l.c as f64) } else { 1.0 / n };
    let mut grad = Tensor::zeros(p.shape());
    let mut acc = 0.0;
    for ((g, &pv), &yv) in grad.data_mut().iter_mut().zip(p.data()).zip(y.0.data()) {
        if yv != 0.0 {
            acc += yv * pv.max(PROB_FLOOR).ln();
            if pv > PROB_FLOOR {
                *g = -scale * yv / pv;
            }
        }
    }
    Ok(LossEval {
        value: -scale * acc,
        grad,
    })
}

fn tversky_eval(p: &Tensor, y: &OneHotTarget, alpha: f64, beta: f64, eps: f64, agg: DiceAggregation) -> Result<LossEval> {
    let l = layout(p, y)?;
    let (pd, yd) = (p.data(), y.0.data());
    let groups = match agg {
        DiceAggregation::Global => 1,
        DiceAggregation::PerClassMean => l.c,
    };
    let group_of = |c: usize| if groups == 1 { 0 } else { c };
    let (mut tp, mut fp, mut fne) = (vec![0.0; groups], vec![0.0; groups], vec![0.0; groups]);
    for b in 0..l.b {
        for c in 0..l.c {
            let off = (b * l.c + c) * l.inner;
            let g = group_of(c);
            for j in off..off + l.inner {
                tp[g] += pd[j] * yd[j];
                fp[g] += pd[j] * (1.0 - yd[j]);
                fne[g] += (1.0 - pd[j]) * yd[j];
            }
        }
    }
    let num: Vec<f64> = tp.iter().map(|t| t + eps).collect();
    let den: Vec<f64> = (0..groups).map(|g| tp[g] + alpha * fp[g] + beta * fne[g] + eps).collect();
    let ti = (0..groups).map(|g| num[g] / den[g]).sum::<f64>() / groups as f64;
    let mut grad = Tensor::zeros(p.shape());
    let gd = grad.data_mut();
    for b in 0..l.b {
        for c in 0..l.c {
            let off = (b * l.c + c) * l.inner;
            let g = group_of(c);
            for j in off..off + l.inner {
                let yv = yd[j];
                let dden = yv + alpha * (1.0 - yv) - beta * yv;
                gd[j] = -(yv * den[g] - num[g] * dden) / (den[g] * den[g]) / groups as f64;
            }
        }
    }
    Ok(LossEval {
        value: 1.0 - ti,
        grad,
    })
}

fn combine(a: LossEval, sa: f64, b: LossEval, sb: f64) -> LossEval {
    let mut grad = a.grad;
    for (g, h) in grad.data_mut().iter_mut().zip(b.grad.data()) {
        *g = sa * *g + sb * h;
    }
    LossEval {
        value: sa * a.value + sb * b.value,
        grad,
    }
}

/// Value and probability gradient of any supported loss.
pub fn evaluate(kind: LossKind, p: &Tensor, y: &OneHotTarget, cfg: &LossConfig) -> Result<LossEval> {
    let dice = || soft_dice_eval(p, y, cfg.epsilon, cfg.dice_aggregation, cfg.dice_numerator_factor);
    let ce = || cross_entropy_eval(p, y, cfg.ce_class_factor);
    let tv = || tversky_eval(p, y, cfg.alpha, cfg.beta, cfg.epsilon, cfg.dice_aggregation);
    Ok(match kind {
        LossKind::SoftDice => dice()?,
        LossKind::CrossEntropy => ce()?,
        LossKind::Dcce => combine(dice()?, -1.0, ce()?, 1.0),
        LossKind::Tversky => tv()?,
        LossKind::Hybrid => combine(combine(dice()?, -1.0, ce()?, 1.0), 1.0, tv()?, 1.0),
    })
}

/// Overlap ratio `(sum p*y + eps) / (sum (p + y) + eps)`.
pub fn soft_dice(p: &Tensor, y: &OneHotTarget, eps: f64, aggregation: DiceAggregation) -> Result<f64> {
    Ok(soft_dice_eval(p, y, eps, aggregation, 1.0)?.value)
}

/// `-(1/N)(1/C) sum y log p` with N the voxel count over the batch.
pub fn cross_entropy(p: &Tensor, y: &OneHotTarget) -> Result<f64> {
    Ok(cross_entropy_eval(p, y, true)?.value)
}

/// `-soft_dice + cross_entropy`.
pub fn dcce(p: &Tensor, y: &OneHotTarget, cfg: &LossConfig) -> Result<f64> {
    Ok(evaluate(LossKind::Dcce, p, y, cfg)?.value)
}

/// `1 - TI` with `TI = (TP + eps) / (TP + alpha FP + beta FN + eps)`,
/// summed over all voxels and classes.
pub fn tversky_loss(p: &Tensor, y: &OneHotTarget, alpha: f64, beta: f64, eps: f64) -> Result<f64> {
    tversky_loss_aggregated(p, y, alpha, beta, eps, DiceAggregation::Global)
}

/// Tversky loss with the index taken globally or averaged over classes.
pub fn tversky_loss_aggregated(
    p: &Tensor,
    y: &OneHotTarget,
    alpha: f64,
    beta: f64,
    eps: f64,
    aggregation: DiceAggregation,
) -> Result<f64> {
    Ok(tversky_eval(p, y, alpha, beta, eps, aggregation)?.value)
}

/// `dcce + tversky_loss`.
pub fn hybrid_loss(p: &Tensor, y: &OneHotTarget, cfg: &LossConfig) -> Result<f64> {
    let tv = tversky_loss_aggregated(p, y, cfg.alpha, cfg.beta, cfg.epsilon, cfg.dice_aggregation)?;
    Ok(dcce(p, y, cfg)? + tv)
}

/// Weighted sum of per-level losses, level 1 (full resolution) first.
pub fn deep_supervised(level_losses: &[f64], ds_weights: &[f64]) -> Result<f64> {
    if level_losses.len() != ds_weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} level losses for {} deep-supervision weights",
            level_losses.len(),
            ds_weights.len()
        )));
    }
    Ok(level_losses.iter().zip(ds_weights).map(|(l, w)| l * w).sum())
}

/// Supervised hybrid loss plus, when a pseudo-labelled pair is given, its
/// hybrid loss, unweighted.
pub fn final_loss(
    supervised: (&Tensor, &OneHotTarget),
    pseudo: Option<(&Tensor, &OneHotTarget)>,
    cfg: &LossConfig,
) -> Result<f64> {
    let s = hybrid_loss(supervised.0, supervised.1, cfg)?;
    match pseudo {
        Some((p, y)) => Ok(s + hybrid_loss(p, y, cfg)?),
        None => Ok(s),
    }
}
