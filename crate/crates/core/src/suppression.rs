//! Duplicate suppression: greedy hard NMS, soft-NMS and score filtering.
//!
//! All routines are class-aware unless asked otherwise: detections of
//! different classes never suppress one another. Ties in score are broken by
//! the lower input index, so the output is a deterministic function of the
//! input sequence.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Suppression threshold for proposal-stage boxes.
pub const PROPOSAL_IOU_THR: f64 = 0.7;
/// Suppression threshold for the final detection head.
pub const DETECTION_IOU_THR: f64 = 0.5;
/// Minimum confidence kept before evaluation.
pub const SCORE_THR: f64 = 0.0001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: u32,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, class_id: u32) -> Self {
        Self {
            bbox,
            score,
            class_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bbox.is_valid() {
            let b = self.bbox;
            return Err(Error::InvalidBox {
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
            });
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::invalid(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftNmsMethod {
    /// `s · (1 − iou)` for neighbours above the IoU threshold.
    Linear,
    /// `s · exp(−iou² / σ)` for every neighbour.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftNmsParams {
    pub iou_thr: f64,
    pub sigma: f64,
    pub score_floor: f64,
    pub method: SoftNmsMethod,
    pub class_agnostic: bool,
}

impl Default for SoftNmsParams {
    fn default() -> Self {
        Self {
            iou_thr: DETECTION_IOU_THR,
            sigma: 0.5,
            score_floor: 0.0,
            method: SoftNmsMethod::Gaussian,
            class_agnostic: false,
        }
    }
}

impl SoftNmsParams {
    pub fn validate(&self) -> Result<()> {
        check_iou_thr(self.iou_thr)?;
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !self.score_floor.is_finite() || self.score_floor < 0.0 {
            return Err(Error::invalid(format!(
                "score floor must be >= 0, got {}",
                self.score_floor
            )));
        }
        Ok(())
    }
}

fn check_iou_thr(thr: f64) -> Result<()> {
    if thr > 0.0 && thr <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("iou threshold must lie in (0, 1], got {thr}")))
    }
}

fn same_group(a: &Detection, b: &Detection, class_agnostic: bool) -> bool {
    class_agnostic || a.class_id == b.class_id
}

/// Descending score, then ascending index.
fn by_score_then_index(dets: &[Detection], i: usize, j: usize) -> Ordering {
    dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j))
}

/// Class-aware greedy NMS. A detection is dropped when its IoU with an
/// already-kept detection of the same class is `>= iou_thr`.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Result<Vec<Detection>> {
    nms_with(dets, iou_thr, false)
}

pub fn nms_with(dets: &[Detection], iou_thr: f64, class_agnostic: bool) -> Result<Vec<Detection>> {
    check_iou_thr(iou_thr)?;
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| by_score_then_index(dets, i, j));

    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order[rank + 1..] {
            if !suppressed[j]
                && same_group(&dets[i], &dets[j], class_agnostic)
                && iou(&dets[i].bbox, &dets[j].bbox) >= iou_thr
            {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}

/// Soft-NMS: repeatedly select the highest-scoring remaining detection and
/// decay the scores of its overlapping neighbours. Detections whose score
/// falls below `score_floor` are discarded. Output is in selection order,
/// which is non-increasing in score.
pub fn soft_nms(dets: &[Detection], params: &SoftNmsParams) -> Result<Vec<Detection>> {
    params.validate()?;
    // (original index, current detection)
    let mut pool: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut out = Vec::with_capacity(pool.len());

    while !pool.is_empty() {
        let best = pool
            .iter()
            .enumerate()
            .min_by(|(_, (ia, a)), (_, (ib, b))| b.score.total_cmp(&a.score).then(ia.cmp(ib)))
            .map(|(pos, _)| pos)
            .expect("pool is non-empty");
        let (_, top) = pool.swap_remove(best);
        if top.score < params.score_floor {
            // Everything left scores lower still.
            break;
        }
        out.push(top);

        for (_, det) in pool.iter_mut() {
            if !same_group(&top, det, params.class_agnostic) {
                continue;
            }
            let overlap = iou(&top.bbox, &det.bbox);
            det.score *= match params.method {
                SoftNmsMethod::Linear if overlap > params.iou_thr => 1.0 - overlap,
                SoftNmsMethod::Linear => 1.0,
                SoftNmsMethod::Gaussian => (-(overlap * overlap) / params.sigma).exp(),
            };
        }
        pool.retain(|(_, d)| d.score >= params.score_floor);
    }
    Ok(out)
}

/// Keep detections with `score >= thr`, preserving order.
pub fn filter_by_score(dets: &[Detection], thr: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= thr).copied().collect()
}
