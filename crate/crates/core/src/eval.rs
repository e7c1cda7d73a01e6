//! COCO-style box evaluation: greedy matching, 101-point interpolated AP and
//! mAP averaged over IoU thresholds 0.50:0.05:0.95.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::coco::{Dataset, ResultRecord};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::suppression::Detection;

/// Recall sample points `0.00, 0.01, …, 1.00`.
pub const RECALL_POINTS: usize = 101;
/// Per-image detection cap used by COCO when one is requested.
pub const COCO_MAX_DETS: usize = 100;

/// Evenly spaced IoU thresholds from `min` to `max` inclusive.
pub fn iou_thresholds(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(min > 0.0 && max <= 1.0 && min <= max && step > 0.0) {
        return Err(Error::invalid(format!(
            "bad IoU range {min}:{step}:{max}; need 0 < min <= max <= 1 and step > 0"
        )));
    }
    let n = ((max - min) / step + 1e-9).floor() as usize + 1;
    // Rounded so the default range yields exactly 0.5, 0.55, …, 0.95.
    Ok((0..n)
        .map(|i| ((min + i as f64 * step) * 1e10).round() / 1e10)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    /// Keep at most this many top-scoring detections per image and class.
    pub max_dets: Option<usize>,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_thresholds: iou_thresholds(0.5, 0.95, 0.05).expect("static range"),
            max_dets: None,
        }
    }
}

impl EvalParams {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Empty("IoU thresholds"));
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::invalid("IoU thresholds must lie in (0, 1]"));
        }
        if self.max_dets == Some(0) {
            return Err(Error::invalid("max_dets must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchOutcome {
    TruePositive,
    FalsePositive,
    /// Matched a crowd region: counts as neither.
    Ignored,
}

/// Greedy matching of score-sorted detections within one image.
///
/// Each detection takes the highest-IoU unmatched non-crowd ground truth
/// with IoU `>= thr` (lowest index on ties). Failing that, a detection
/// covering a crowd region by at least `thr` of its own area is ignored.
pub fn match_sorted(dets: &[Detection], gts: &[BBox], crowd: &[bool], thr: f64) -> Vec<MatchOutcome> {
    debug_assert_eq!(gts.len(), crowd.len());
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if crowd[j] || used[j] {
                    continue;
                }
                let v = iou(&d.bbox, g);
                if v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
                return MatchOutcome::TruePositive;
            }
            let area = d.bbox.area();
            let in_crowd = gts.iter().zip(crowd).any(|(g, &c)| {
                c && area > 0.0 && d.bbox.intersection_area(g) / area >= thr
            });
            if in_crowd {
                MatchOutcome::Ignored
            } else {
                MatchOutcome::FalsePositive
            }
        })
        .collect()
}

/// Score-descending order with ties broken by input index.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// TP flags for `dets` against non-crowd `gts`, reported in input order.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_thr: f64) -> Vec<bool> {
    let order = score_order(dets);
    let sorted: Vec<Detection> = order.iter().map(|&i| dets[i]).collect();
    let outcomes = match_sorted(&sorted, gts, &vec![false; gts.len()], iou_thr);
    let mut flags = vec![false; dets.len()];
    for (&i, o) in order.iter().zip(outcomes) {
        flags[i] = o == MatchOutcome::TruePositive;
    }
    flags
}

/// 101-point interpolated AP of score-ordered TP flags.
///
/// Returns `None` when there is nothing to evaluate (no ground truth and no
/// detections); detections without ground truth score 0.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let total: f64 = (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / RECALL_POINTS as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub category_id: u32,
    pub name: String,
    pub num_gt: usize,
    pub num_dets: usize,
    /// One entry per IoU threshold; `None` when the class has nothing to score.
    pub ap_per_threshold: Vec<Option<f64>>,
    /// Mean over thresholds.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassResult>,
    /// Mean of the per-class APs over classes that have something to score.
    pub map: f64,
}

impl EvalResult {
    /// Mean over scored classes of the AP at threshold index `t`.
    pub fn map_at(&self, t: usize) -> f64 {
        mean(self.classes.iter().filter_map(|c| c.ap_per_threshold.get(t).copied().flatten()))
    }

    /// AP at the threshold closest to `thr`.
    pub fn map_at_iou(&self, thr: f64) -> Option<f64> {
        let (t, _) = self
            .iou_thresholds
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - thr).abs().total_cmp(&(b.1 - thr).abs()))?;
        Some(self.map_at(t))
    }

    /// Human-readable report, ordered by category id.
    pub fn to_table(&self) -> String {
        let first = self.iou_thresholds.first().copied().unwrap_or(0.0);
        let last = self.iou_thresholds.last().copied().unwrap_or(0.0);
        let range = format!("AP@[{first:.2}:{last:.2}]");
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>4}  {:<14} {:>6} {:>6}  {:>8}  {:>14}",
            "id", "category", "gts", "dets", format!("AP@{first:.2}"), range
        );
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:>4}  {:<14} {:>6} {:>6}  {:>8}  {:>14}",
                c.category_id,
                c.name,
                c.num_gt,
                c.num_dets,
                fmt(c.ap_per_threshold.first().copied().flatten()),
                fmt(c.ap)
            );
        }
        let _ = writeln!(s, "mAP@{:.0}:{:.0} {:.4}", first * 100.0, last * 100.0, self.map);
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Total order on detections: score descending, then image id, then box
/// coordinates. Equal keys are indistinguishable for evaluation, so results
/// do not depend on the input order.
fn detection_key(a: &ResultRecord, b: &ResultRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image_id.cmp(&b.image_id))
        .then_with(|| {
            a.bbox
                .iter()
                .zip(&b.bbox)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Per-class AP at each IoU threshold, averaged over thresholds and then
/// over classes.
pub fn map_50_95(results: &[ResultRecord], ds: &Dataset, params: &EvalParams) -> Result<EvalResult> {
    ds.validate()?;
    params.validate()?;
    if ds.images.is_empty() {
        return Err(Error::Empty("dataset has no images"));
    }
    let image_ids: HashSet<u64> = ds.images.iter().map(|im| im.id).collect();
    let cat_ids: HashSet<u32> = ds.categories.iter().map(|c| c.id).collect();
    for r in results {
        r.validate()?;
        if !image_ids.contains(&r.image_id) {
            return Err(Error::Integrity(format!("detection references unknown image id {}", r.image_id)));
        }
        if !cat_ids.contains(&r.category_id) {
            return Err(Error::Integrity(format!(
                "detection references unknown category id {}",
                r.category_id
            )));
        }
    }

    // (image, category) → ground truths and detections
    let mut gts: HashMap<(u64, u32), (Vec<BBox>, Vec<bool>)> = HashMap::new();
    for a in &ds.annotations {
        let e = gts.entry((a.image_id, a.category_id)).or_default();
        e.0.push(a.to_box());
        e.1.push(a.iscrowd);
    }
    let mut dets: HashMap<(u64, u32), Vec<&ResultRecord>> = HashMap::new();
    for r in results {
        dets.entry((r.image_id, r.category_id)).or_default().push(r);
    }
    for v in dets.values_mut() {
        v.sort_by(|a, b| detection_key(a, b));
        if let Some(cap) = params.max_dets {
            v.truncate(cap);
        }
    }

    let mut categories: Vec<_> = ds.categories.iter().collect();
    categories.sort_by_key(|c| c.id);
    let mut images: Vec<u64> = image_ids.into_iter().collect();
    images.sort_unstable();

    let empty_gt: (Vec<BBox>, Vec<bool>) = (Vec::new(), Vec::new());
    let mut classes = Vec::with_capacity(categories.len());
    for cat in categories {
        let num_gt = ds
            .annotations
            .iter()
            .filter(|a| a.category_id == cat.id && !a.iscrowd)
            .count();
        let num_dets = images
            .iter()
            .map(|im| dets.get(&(*im, cat.id)).map_or(0, Vec::len))
            .sum();
        let mut ap_per_threshold = Vec::with_capacity(params.iou_thresholds.len());
        for &thr in &params.iou_thresholds {
            let mut scored: Vec<(&ResultRecord, bool)> = Vec::new();
            for im in &images {
                let Some(ds_) = dets.get(&(*im, cat.id)) else {
                    continue;
                };
                let (g, crowd) = gts.get(&(*im, cat.id)).unwrap_or(&empty_gt);
                let sorted: Vec<Detection> = ds_.iter().map(|r| r.to_detection()).collect();
                for (r, o) in ds_.iter().zip(match_sorted(&sorted, g, crowd, thr)) {
                    if o != MatchOutcome::Ignored {
                        scored.push((r, o == MatchOutcome::TruePositive));
                    }
                }
            }
            scored.sort_by(|a, b| detection_key(a.0, b.0));
            let flags: Vec<bool> = scored.iter().map(|(_, f)| *f).collect();
            ap_per_threshold.push(average_precision(&flags, num_gt));
        }
        let ap = if ap_per_threshold.iter().all(Option::is_some) {
            Some(mean(ap_per_threshold.iter().flatten().copied()))
        } else {
            None
        };
        classes.push(ClassResult {
            category_id: cat.id,
            name: cat.name.clone(),
            num_gt,
            num_dets,
            ap_per_threshold,
            ap,
        });
    }
    let map = mean(classes.iter().filter_map(|c| c.ap));
    Ok(EvalResult {
        iou_thresholds: params.iou_thresholds.clone(),
        classes,
        map,
    })
}
