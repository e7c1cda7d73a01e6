//! Scalar training losses: smooth-L1 localisation, cross-entropy
//! classification, the per-stage cascade loss and the IoU-family box losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox, Delta};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `0.5 x²` for `|x| < 1`, `|x| − 0.5` otherwise.
#[inline]
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Derivative of [`smooth_l1`]: `x` inside the unit interval, `sign(x)` outside.
#[inline]
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Sum of [`smooth_l1`] over the four delta components of `a − b`.
pub fn loc_loss(a: &Delta, b: &Delta) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| smooth_l1(x - y))
        .sum()
}

/// Cross-entropy `−ln p[label]` of a probability vector.
pub fn cls_loss(scores: &[f64], label: usize) -> Result<f64> {
    let p = scores.get(label).copied().ok_or_else(|| {
        Error::invalid(format!("label {label} out of range for {} classes", scores.len()))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Inputs of one cascade stage's loss for a single sample. Label 0 is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLossInput {
    pub class_scores: Vec<f64>,
    pub label: usize,
    pub pred_delta: Delta,
    pub target_delta: Delta,
    pub lambda: f64,
}

impl StageLossInput {
    pub fn validate(&self) -> Result<()> {
        if self.class_scores.is_empty() {
            return Err(Error::Empty("class scores"));
        }
        if self
            .class_scores
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0)
        {
            return Err(Error::invalid("class scores must be finite and nonnegative"));
        }
        let sum: f64 = self.class_scores.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("class scores sum to {sum}, expected 1")));
        }
        if self.label >= self.class_scores.len() {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                self.label,
                self.class_scores.len()
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `L_cls + λ·[label ≥ 1]·L_loc`: regression only counts for foreground samples.
pub fn stage_loss(input: &StageLossInput) -> Result<f64> {
    input.validate()?;
    let cls = cls_loss(&input.class_scores, input.label)?;
    if input.label == 0 {
        return Ok(cls);
    }
    Ok(cls + input.lambda * loc_loss(&input.pred_delta, &input.target_delta))
}

pub fn giou_loss(a: &BBox, b: &BBox) -> f64 {
    1.0 - geometry::giou(a, b)
}

pub fn diou_loss(a: &BBox, b: &BBox) -> f64 {
    1.0 - geometry::diou(a, b)
}

pub fn ciou_loss(a: &BBox, b: &BBox) -> f64 {
    1.0 - geometry::ciou(a, b)
}
