//! Multi-stage cascade: IoU-threshold label assignment, iterative box
//! refinement, inference with score fusion, and a seeded simulation of how
//! refinement shifts the proposal IoU distribution stage by stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode, encode, iou, BBox, Delta};
use crate::suppression::Detection;

/// Per-stage IoU thresholds used by the standard three-stage cascade.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.5, 0.6, 0.7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreFusion {
    /// Mean of every stage's class probabilities.
    #[default]
    Average,
    /// Probabilities of the final stage only.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub thresholds: Vec<f64>,
    pub score_fusion: ScoreFusion,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            score_fusion: ScoreFusion::Average,
        }
    }
}

impl CascadeConfig {
    /// Thresholds must be non-empty, inside `(0, 1)` and strictly increasing.
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Empty("cascade thresholds"));
        }
        for &u in &self.thresholds {
            if !(u > 0.0 && u < 1.0) {
                return Err(Error::invalid(format!("stage threshold {u} outside (0, 1)")));
            }
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "stage thresholds must strictly increase: {:?}",
                self.thresholds
            )));
        }
        Ok(())
    }
}

/// Label of one proposal under a stage's IoU criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// Ground-truth class, or 0 for background.
    pub label: u32,
    /// Index of the matched ground truth; `None` for background.
    pub gt_index: Option<usize>,
}

impl Assignment {
    pub const BACKGROUND: Assignment = Assignment {
        label: 0,
        gt_index: None,
    };

    pub fn is_foreground(&self) -> bool {
        self.gt_index.is_some()
    }
}

/// Index and IoU of the best-overlapping ground truth (lowest index on ties).
fn best_match(proposal: &BBox, gts: &[BBox]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gts.iter().enumerate() {
        let v = iou(proposal, g);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best
}

/// Match every proposal to its argmax-IoU ground truth; foreground when that
/// IoU is at least `u`.
pub fn assign_labels(proposals: &[BBox], gts: &[(BBox, u32)], u: f64) -> Result<Vec<Assignment>> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::invalid(format!("iou threshold {u} outside (0, 1)")));
    }
    if let Some((_, c)) = gts.iter().find(|(_, c)| *c == 0) {
        return Err(Error::invalid(format!("ground-truth class {c} collides with background")));
    }
    let boxes: Vec<BBox> = gts.iter().map(|(b, _)| *b).collect();
    Ok(proposals
        .iter()
        .map(|p| match best_match(p, &boxes) {
            Some((j, v)) if v >= u => Assignment {
                label: gts[j].1,
                gt_index: Some(j),
            },
            _ => Assignment::BACKGROUND,
        })
        .collect())
}

/// Apply one stage's regression deltas to its input boxes.
pub fn refine(proposals: &[BBox], deltas: &[Delta]) -> Result<Vec<BBox>> {
    if proposals.len() != deltas.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} proposals vs {} deltas",
            proposals.len(),
            deltas.len()
        )));
    }
    proposals
        .iter()
        .zip(deltas)
        .map(|(b, d)| decode(b, d))
        .collect()
}

/// One cascade stage: a classifier and a box regressor over the current boxes.
///
/// Methods take `&mut self` so heads may carry their own seeded noise.
pub trait StageHead {
    /// Class probability vector per box (index 0 is background).
    fn class_scores(&mut self, boxes: &[BBox]) -> Vec<Vec<f64>>;
    /// Regression delta per box.
    fn deltas(&mut self, boxes: &[BBox]) -> Vec<Delta>;
}

/// What a stage saw and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    /// Boxes after this stage's regression.
    pub boxes: Vec<BBox>,
    pub class_scores: Vec<Vec<f64>>,
    /// Argmax class per box.
    pub labels: Vec<u32>,
}

/// Run every stage in order, feeding each stage's refined boxes to the next.
pub fn cascade_trace(
    proposals: &[BBox],
    stages: &mut [&mut dyn StageHead],
    cfg: &CascadeConfig,
) -> Result<Vec<StageOutput>> {
    cfg.validate()?;
    if stages.len() != cfg.thresholds.len() {
        return Err(Error::invalid(format!(
            "{} stage heads for {} thresholds",
            stages.len(),
            cfg.thresholds.len()
        )));
    }
    let mut boxes = proposals.to_vec();
    let mut outputs = Vec::with_capacity(stages.len());
    for head in stages.iter_mut() {
        let scores = head.class_scores(&boxes);
        let deltas = head.deltas(&boxes);
        if scores.len() != boxes.len() {
            return Err(Error::ShapeMismatch(format!(
                "classifier returned {} score vectors for {} boxes",
                scores.len(),
                boxes.len()
            )));
        }
        boxes = refine(&boxes, &deltas)?;
        let labels = scores.iter().map(|s| argmax(s) as u32).collect();
        outputs.push(StageOutput {
            boxes: boxes.clone(),
            class_scores: scores,
            labels,
        });
    }
    Ok(outputs)
}

/// Cascade inference: refined boxes from the last stage, scored by the fused
/// class probabilities. One detection per proposal; suppression is left to
/// the caller.
pub fn cascade_inference(
    proposals: &[BBox],
    stages: &mut [&mut dyn StageHead],
    cfg: &CascadeConfig,
) -> Result<Vec<Detection>> {
    let trace = cascade_trace(proposals, stages, cfg)?;
    let last = trace.last().expect("validated non-empty cascade");
    let mut dets = Vec::with_capacity(proposals.len());
    for (i, bbox) in last.boxes.iter().enumerate() {
        let fused = match cfg.score_fusion {
            ScoreFusion::Last => last.class_scores[i].clone(),
            ScoreFusion::Average => {
                let n = last.class_scores[i].len();
                let mut acc = vec![0.0; n];
                for stage in &trace {
                    let s = &stage.class_scores[i];
                    if s.len() != n {
                        return Err(Error::ShapeMismatch(
                            "stages disagree on the number of classes".into(),
                        ));
                    }
                    acc.iter_mut().zip(s).for_each(|(a, v)| *a += v);
                }
                acc.iter_mut().for_each(|a| *a /= trace.len() as f64);
                acc
            }
        };
        let class = if fused.len() > 1 { 1 + argmax(&fused[1..]) } else { 0 };
        dets.push(Detection::new(*bbox, fused.get(class).copied().unwrap_or(0.0), class as u32));
    }
    Ok(dets)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Best IoU of each proposal against any ground truth (0 when none).
pub fn max_ious(proposals: &[BBox], gts: &[BBox]) -> Vec<f64> {
    proposals
        .iter()
        .map(|p| best_match(p, gts).map_or(0.0, |(_, v)| v))
        .collect()
}

/// Counts of max-IoU values over equal-width bins of `[0, 1]`; the value 1.0
/// lands in the top bin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouHistogram {
    pub counts: Vec<usize>,
}

impl IouHistogram {
    pub fn from_values(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        let mut counts = vec![0; bins];
        for &v in values {
            let k = ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
            counts[k] += 1;
        }
        Ok(Self { counts })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn edges(&self, k: usize) -> (f64, f64) {
        let n = self.bins() as f64;
        (k as f64 / n, (k + 1) as f64 / n)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn quality_distribution(proposals: &[BBox], gts: &[BBox], bins: usize) -> Result<IouHistogram> {
    if gts.is_empty() {
        return Err(Error::Empty("ground truths"));
    }
    IouHistogram::from_values(&max_ious(proposals, gts), bins)
}

/// Fraction of values at or above `thr` (0 for an empty slice).
pub fn fraction_at_least(values: &[f64], thr: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v >= thr).count() as f64 / values.len() as f64
}

/// Parameters of the refinement simulation.
///
/// Ground truths are random boxes; proposals are ground truths with gaussian
/// center jitter (relative to size) and log-normal size jitter. Each stage's
/// regressor observes the true delta through additive gaussian noise and
/// applies a per-component linear gain fitted by least squares on that
/// stage's positives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeSimulation {
    pub image_size: f64,
    pub num_gts: usize,
    pub proposals_per_gt: usize,
    pub center_jitter: f64,
    pub size_jitter: f64,
    pub feature_noise: f64,
    pub train_scenes: usize,
    pub bins: usize,
}

impl Default for CascadeSimulation {
    fn default() -> Self {
        Self {
            image_size: 512.0,
            num_gts: 8,
            proposals_per_gt: 32,
            center_jitter: 0.15,
            size_jitter: 0.2,
            feature_noise: 0.1,
            train_scenes: 4,
            bins: 10,
        }
    }
}

impl CascadeSimulation {
    pub fn validate(&self) -> Result<()> {
        if !(self.image_size >= 32.0) {
            return Err(Error::invalid("image size must be at least 32"));
        }
        if self.num_gts == 0 || self.proposals_per_gt == 0 || self.train_scenes == 0 {
            return Err(Error::invalid("simulation counts must be positive"));
        }
        for (name, v) in [
            ("center jitter", self.center_jitter),
            ("size jitter", self.size_jitter),
            ("feature noise", self.feature_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if self.bins == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        Ok(())
    }

    fn scene(&self, rng: &mut ChaCha8Rng) -> (Vec<BBox>, Vec<BBox>) {
        let s = self.image_size;
        let gts: Vec<BBox> = (0..self.num_gts)
            .map(|_| {
                let w = rng.random_range(0.05 * s..0.25 * s);
                let h = rng.random_range(0.05 * s..0.25 * s);
                let x = rng.random_range(0.0..s - w);
                let y = rng.random_range(0.0..s - h);
                BBox::from_xywh(x, y, w, h)
            })
            .collect();
        let mut proposals = Vec::with_capacity(self.num_gts * self.proposals_per_gt);
        for g in &gts {
            let (cx, cy) = g.center();
            for _ in 0..self.proposals_per_gt {
                let n: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
                proposals.push(BBox::from_center(
                    cx + self.center_jitter * g.width() * n[0],
                    cy + self.center_jitter * g.height() * n[1],
                    g.width() * (self.size_jitter * n[2]).exp(),
                    g.height() * (self.size_jitter * n[3]).exp(),
                ));
            }
        }
        (gts, proposals)
    }
}

/// Regressor that sees the true target delta through gaussian noise and
/// scales it by a fitted per-component gain. Classifier outputs
/// `[1 − q, q]` with `q` the best IoU.
#[derive(Debug, Clone)]
pub struct NoisyLinearHead {
    pub gain: [f64; 4],
    pub gts: Vec<BBox>,
    pub noise: f64,
    rng: ChaCha8Rng,
}

impl NoisyLinearHead {
    pub fn new(gain: [f64; 4], gts: Vec<BBox>, noise: f64, seed: u64) -> Self {
        Self {
            gain,
            gts,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn observe(&mut self, b: &BBox) -> Option<([f64; 4], [f64; 4])> {
        let (j, v) = best_match(b, &self.gts)?;
        if v <= 0.0 || !b.has_positive_size() {
            return None;
        }
        let target = encode(b, &self.gts[j]).ok()?.to_array();
        let noise = self.noise;
        let feature = target.map(|t| t + noise * self.rng.sample::<f64, _>(StandardNormal));
        Some((feature, target))
    }
}

impl StageHead for NoisyLinearHead {
    fn class_scores(&mut self, boxes: &[BBox]) -> Vec<Vec<f64>> {
        max_ious(boxes, &self.gts)
            .into_iter()
            .map(|q| vec![1.0 - q, q])
            .collect()
    }

    fn deltas(&mut self, boxes: &[BBox]) -> Vec<Delta> {
        boxes
            .iter()
            .map(|b| match self.observe(b) {
                Some((f, _)) => Delta::from_array(std::array::from_fn(|k| self.gain[k] * f[k])),
                None => Delta::ZERO,
            })
            .collect()
    }
}

/// Max-IoU statistics of the test proposals before the first stage and after each stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub thresholds: Vec<f64>,
    /// `gains[t]` is the fitted regressor gain of stage `t`.
    pub gains: Vec<[f64; 4]>,
    /// `ious[0]` are the input proposals, `ious[t + 1]` the output of stage `t`.
    pub ious: Vec<Vec<f64>>,
    pub histograms: Vec<IouHistogram>,
}

impl SimulationReport {
    /// Fraction of boxes with IoU `>= thr` at each point of the cascade.
    pub fn fractions_at_least(&self, thr: f64) -> Vec<f64> {
        self.ious.iter().map(|v| fraction_at_least(v, thr)).collect()
    }
}

/// Train one regressor per stage on fresh scenes and trace a held-out scene
/// through the trained cascade. Deterministic for a fixed seed.
pub fn simulate_cascade(cfg: &CascadeConfig, sim: &CascadeSimulation, seed: u64) -> Result<SimulationReport> {
    cfg.validate()?;
    sim.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Training: each stage fits on boxes produced by the already-trained earlier stages.
    let train: Vec<(Vec<BBox>, Vec<BBox>)> = (0..sim.train_scenes).map(|_| sim.scene(&mut rng)).collect();
    let mut gains: Vec<[f64; 4]> = Vec::with_capacity(cfg.thresholds.len());
    let mut train_boxes: Vec<Vec<BBox>> = train.iter().map(|(_, p)| p.clone()).collect();
    for (t, &u) in cfg.thresholds.iter().enumerate() {
        let mut sxy = [0.0; 4];
        let mut sxx = [0.0; 4];
        for (s, (gts, _)) in train.iter().enumerate() {
            let labelled: Vec<(BBox, u32)> = gts.iter().map(|g| (*g, 1)).collect();
            let assigned = assign_labels(&train_boxes[s], &labelled, u)?;
            let mut head = NoisyLinearHead::new([1.0; 4], gts.clone(), sim.feature_noise, rng.random());
            for (b, a) in train_boxes[s].iter().zip(&assigned) {
                if !a.is_foreground() {
                    continue;
                }
                if let Some((x, y)) = head.observe(b) {
                    for k in 0..4 {
                        sxy[k] += x[k] * y[k];
                        sxx[k] += x[k] * x[k];
                    }
                }
            }
        }
        let gain: [f64; 4] = std::array::from_fn(|k| if sxx[k] > 0.0 { sxy[k] / sxx[k] } else { 0.0 });
        gains.push(gain);
        for (s, (gts, _)) in train.iter().enumerate() {
            let mut head = NoisyLinearHead::new(gain, gts.clone(), sim.feature_noise, rng.random());
            let deltas = head.deltas(&train_boxes[s]);
            train_boxes[s] = refine(&train_boxes[s], &deltas)?;
        }
        debug_assert_eq!(gains.len(), t + 1);
    }

    // Held-out trace.
    let (gts, proposals) = sim.scene(&mut rng);
    let mut heads: Vec<NoisyLinearHead> = gains
        .iter()
        .map(|g| NoisyLinearHead::new(*g, gts.clone(), sim.feature_noise, rng.random()))
        .collect();
    let mut stage_refs: Vec<&mut dyn StageHead> = heads.iter_mut().map(|h| h as &mut dyn StageHead).collect();
    let trace = cascade_trace(&proposals, &mut stage_refs, cfg)?;

    let mut ious = vec![max_ious(&proposals, &gts)];
    ious.extend(trace.iter().map(|s| max_ious(&s.boxes, &gts)));
    let histograms = ious
        .iter()
        .map(|v| IouHistogram::from_values(v, sim.bins))
        .collect::<Result<_>>()?;
    Ok(SimulationReport {
        thresholds: cfg.thresholds.clone(),
        gains,
        ious,
        histograms,
    })
}
