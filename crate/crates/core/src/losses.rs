//! Cross-entropy, soft Dice and edge losses and their scheduled sum.
//!
//! Probabilities and logits are `[B, C, H, W]`; label maps are flattened
//! `[B, H, W]` class indices. Dice and edge terms average over the
//! foreground classes `1..C`, pooling pixels of the whole batch per class.

use msunet_autograd::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SMOOTH: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_dice: f64,
    pub w_edge: f64,
    pub edge_start_epoch: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_ce: 0.5, w_dice: 0.5, w_edge: 0.1, edge_start_epoch: 50 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("w_ce", self.w_ce), ("w_dice", self.w_dice), ("w_edge", self.w_edge)] {
            if !(value >= 0.0) {
                return Err(Error::NegativeWeight { name, value });
            }
        }
        Ok(())
    }

    pub fn edge_active(&self, epoch: usize) -> bool {
        self.w_edge != 0.0 && epoch >= self.edge_start_epoch
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dice: f64,
    /// Zero whenever the edge term is switched off.
    pub edge: f64,
    pub total: f64,
}

fn check_labels(labels: &[u8], shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::Dimension(format!("expected [B, C, H, W], got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if labels.len() != b * h * w {
        return Err(Error::Dimension(format!("{} labels for {b}x{h}x{w} pixels", labels.len())));
    }
    if let Some(&v) = labels.iter().find(|&&v| v as usize >= c) {
        return Err(Error::LabelOutOfRange { value: v as usize, classes: c });
    }
    Ok((b, c, h, w))
}

/// Indicator `[B, C, H, W]` of `labels == c`.
pub fn one_hot<T: Scalar>(labels: &[u8], b: usize, c: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); b * c * hw];
    for n in 0..b {
        for (k, &l) in labels[n * hw..(n + 1) * hw].iter().enumerate() {
            out[(n * c + l as usize) * hw + k] = T::one();
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

/// 3x3 (Chebyshev radius 1) dilation of every `(H, W)` plane of a 0/1 mask.
pub fn dilate<T: Scalar>(mask: &Tensor<T>) -> Tensor<T> {
    let s = mask.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = vec![T::zero(); mask.len()];
    for (src, dst) in mask.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                if src[y * w + x] == T::zero() {
                    continue;
                }
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        dst[yy * w + xx] = T::one();
                    }
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Mean negative log-softmax probability of the true class.
pub fn cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, labels: &[u8]) -> Result<Var<'t, T>> {
    check_labels(labels, &logits.shape())?;
    let idx: Vec<usize> = labels.iter().map(|&v| v as usize).collect();
    Ok(logits.cross_entropy(&idx))
}

/// Per-class sums over batch and space, foreground classes only: `[C - 1]`.
fn class_sums<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let c = x.shape()[1];
    x.sum_axes(&[0, 2, 3]).reshape(&[c]).narrow(0, 1, c - 1)
}

/// `1 - mean_c (2 |X.Y| + eps) / (|X| + |Y| + eps)` over soft foreground masks.
pub fn dice_loss<'t, T: Scalar>(probs: Var<'t, T>, labels: &[u8]) -> Result<Var<'t, T>> {
    let (b, c, h, w) = check_labels(labels, &probs.shape())?;
    if c < 2 {
        return Err(Error::ClassCount("dice needs a foreground class".into()));
    }
    let y = probs.tape().constant(one_hot(labels, b, c, h, w));
    let inter = class_sums(probs.mul(y));
    let ys = class_sums(y);
    let eps = T::lit(SMOOTH);
    let num = inter.scale(T::lit(2.0)).add_scalar(eps);
    let den = class_sums(probs).add(ys).add_scalar(eps);
    Ok(num.div(den).mean().neg().add_scalar(T::one()))
}

/// Soft edge response of each probability plane, restricted to the
/// one-pixel dilation of that class's edge ground truth.
pub fn edge_score<'t, T: Scalar>(probs: Var<'t, T>, target: &Tensor<T>) -> Var<'t, T> {
    let region = probs.tape().constant(dilate(target));
    probs.sobel_magnitude().clamp(T::zero(), T::one()).mul(region)
}

/// `2 sum(t s) / (sum t^2 + sum s^2)` per foreground class, smoothed.
pub fn edge_coefficient<'t, T: Scalar>(target: Var<'t, T>, score: Var<'t, T>) -> Var<'t, T> {
    let eps = T::lit(SMOOTH);
    let num = class_sums(target.mul(score)).scale(T::lit(2.0)).add_scalar(eps);
    let den = class_sums(target.square()).add(class_sums(score.square())).add_scalar(eps);
    num.div(den)
}

pub fn edge_loss<'t, T: Scalar>(probs: Var<'t, T>, edge_labels: &[u8]) -> Result<Var<'t, T>> {
    let shape = probs.shape();
    let (b, c, h, w) = check_labels(edge_labels, &shape).map_err(|e| match e {
        Error::LabelOutOfRange { value, classes } => {
            Error::ClassCount(format!("edge label {value} but probabilities have {classes} classes"))
        }
        other => other,
    })?;
    if c < 2 {
        return Err(Error::ClassCount("edge loss needs a foreground class".into()));
    }
    let target = one_hot::<T>(edge_labels, b, c, h, w);
    let score = edge_score(probs, &target);
    let t = probs.tape().constant(target);
    Ok(edge_coefficient(t, score).mean().neg().add_scalar(T::one()))
}

/// Weighted composite objective. The edge term is only put on the tape
/// when it is active, so earlier epochs are exactly the two-term sum.
pub fn total_loss<'t, T: Scalar>(
    logits: Var<'t, T>,
    labels: &[u8],
    edge_labels: Option<&[u8]>,
    weights: &LossWeights,
    epoch: usize,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    weights.validate()?;
    let ce = cross_entropy(logits, labels)?;
    let probs = logits.softmax(1);
    let dice = dice_loss(probs, labels)?;
    let mut total = ce.scale(T::lit(weights.w_ce)).add(dice.scale(T::lit(weights.w_dice)));
    let mut edge_value = 0.0;
    if weights.edge_active(epoch) {
        let edges = edge_labels.ok_or_else(|| Error::Other("edge loss is active but no edge labels were given".into()))?;
        let edge = edge_loss(probs, edges)?;
        edge_value = edge.item().as_f64();
        total = total.add(edge.scale(T::lit(weights.w_edge)));
    }
    let breakdown =
        LossBreakdown { ce: ce.item().as_f64(), dice: dice.item().as_f64(), edge: edge_value, total: total.item().as_f64() };
    Ok((total, breakdown))
}
