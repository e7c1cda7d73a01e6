//! Geometric augmentations that move images and boxes together, plus
//! cutout, mixup and ground-truth box jitter.
//!
//! Box jitter models labelling noise: it only makes sense on training sets
//! whose ground truth is known to be noisy. On clean annotations it just
//! corrupts the labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{resize, Interpolation, Tensor};

/// An image with its annotations. `weights` carries per-box mixup weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(C, H, W)`.
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    pub labels: Vec<u32>,
    pub weights: Vec<f64>,
}

impl Sample {
    /// Sample with unit box weights.
    pub fn new(image: Tensor, boxes: Vec<BBox>, labels: Vec<u32>) -> Result<Self> {
        let weights = vec![1.0; boxes.len()];
        let s = Self {
            image,
            boxes,
            labels,
            weights,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        self.image.dims3()?;
        if self.boxes.len() != self.labels.len() || self.boxes.len() != self.weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} boxes, {} labels, {} weights",
                self.boxes.len(),
                self.labels.len(),
                self.weights.len()
            )));
        }
        let (w, h) = (self.width() as f64, self.height() as f64);
        for b in &self.boxes {
            if !b.is_valid() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                return Err(Error::InvalidBox {
                    x1: b.x1,
                    y1: b.y1,
                    x2: b.x2,
                    y2: b.y2,
                });
            }
        }
        Ok(())
    }

    fn with_geometry(&self, image: Tensor, boxes: Vec<BBox>) -> Sample {
        Sample {
            image,
            boxes,
            labels: self.labels.clone(),
            weights: self.weights.clone(),
        }
    }
}

/// Mirror left-right: `x → W − x`.
pub fn hflip(s: &Sample) -> Sample {
    let (c, h, w) = (s.image.shape()[0], s.height(), s.width());
    let image = Tensor::from_fn(&[c, h, w], |i| s.image.at3(i[0], i[1], w - 1 - i[2]));
    let wf = w as f64;
    let boxes = s
        .boxes
        .iter()
        .map(|b| BBox::new(wf - b.x2, b.y1, wf - b.x1, b.y2))
        .collect();
    s.with_geometry(image, boxes)
}

/// Mirror top-bottom: `y → H − y`.
pub fn vflip(s: &Sample) -> Sample {
    let (c, h, w) = (s.image.shape()[0], s.height(), s.width());
    let image = Tensor::from_fn(&[c, h, w], |i| s.image.at3(i[0], h - 1 - i[1], i[2]));
    let hf = h as f64;
    let boxes = s
        .boxes
        .iter()
        .map(|b| BBox::new(b.x1, hf - b.y2, b.x2, hf - b.y1))
        .collect();
    s.with_geometry(image, boxes)
}

/// One counter-clockwise quarter turn: `(x, y) → (y, W − x)`, output is `(C, W, H)`.
fn rotate_ccw(s: &Sample) -> Sample {
    let (c, _, w) = (s.image.shape()[0], s.height(), s.width());
    let out_h = w;
    let out_w = s.height();
    let image = Tensor::from_fn(&[c, out_h, out_w], |i| s.image.at3(i[0], i[2], w - 1 - i[1]));
    let wf = w as f64;
    let boxes = s
        .boxes
        .iter()
        .map(|b| BBox::new(b.y1, wf - b.x2, b.y2, wf - b.x1))
        .collect();
    s.with_geometry(image, boxes)
}

/// Rotate by `k · 90°` counter-clockwise, `k ∈ {1, 2, 3}`.
pub fn rotate90(s: &Sample, k: u32) -> Result<Sample> {
    if !(1..=3).contains(&k) {
        return Err(Error::invalid(format!("rotation count must be 1, 2 or 3, got {k}")));
    }
    let mut out = rotate_ccw(s);
    for _ in 1..k {
        out = rotate_ccw(&out);
    }
    Ok(out)
}

/// Pixel index range `[lo, hi)` covered by `[a, b)` along an axis of length `n`.
fn covered(a: f64, b: f64, n: usize) -> (usize, usize) {
    let lo = a.floor().clamp(0.0, n as f64) as usize;
    let hi = b.ceil().clamp(0.0, n as f64) as usize;
    (lo, hi.max(lo))
}

/// Fill every pixel touched by each rectangle with `fill`. Boxes are unchanged.
pub fn cutout(s: &Sample, rects: &[BBox], fill: f64) -> Result<Sample> {
    let (c, h, w) = s.image.dims3()?;
    let mut image = s.image.clone();
    for r in rects {
        if !r.is_valid() || r.x1 < 0.0 || r.y1 < 0.0 || r.x2 > w as f64 || r.y2 > h as f64 {
            return Err(Error::invalid(format!("cutout rect {r:?} outside the {w}x{h} image")));
        }
        let (x0, x1) = covered(r.x1, r.x2, w);
        let (y0, y1) = covered(r.y1, r.y2, h);
        for ch in 0..c {
            for y in y0..y1 {
                for x in x0..x1 {
                    *image.at3_mut(ch, y, x) = fill;
                }
            }
        }
    }
    Ok(s.with_geometry(image, s.boxes.clone()))
}

/// Blend two same-sized images as `lam·a + (1 − lam)·b` and keep both box
/// sets, weighting `a`'s boxes by `lam` and `b`'s by `1 − lam`.
pub fn mixup(a: &Sample, b: &Sample, lam: f64) -> Result<Sample> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::invalid(format!("mixup weight {lam} outside [0, 1]")));
    }
    let image = a.image.zip_with(&b.image, |x, y| lam * x + (1.0 - lam) * y)?;
    let mut boxes = a.boxes.clone();
    boxes.extend_from_slice(&b.boxes);
    let mut labels = a.labels.clone();
    labels.extend_from_slice(&b.labels);
    let weights = a
        .weights
        .iter()
        .map(|w| w * lam)
        .chain(b.weights.iter().map(|w| w * (1.0 - lam)))
        .collect();
    Ok(Sample {
        image,
        boxes,
        labels,
        weights,
    })
}

/// Bilinear resize to `(width, height)`; boxes scale by the same factors.
pub fn multiscale_resize(s: &Sample, width: usize, height: usize) -> Result<Sample> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    let image = resize(&s.image, height, width, Interpolation::Bilinear)?;
    let fx = width as f64 / s.width() as f64;
    let fy = height as f64 / s.height() as f64;
    let boxes = s
        .boxes
        .iter()
        .map(|b| BBox::new(b.x1 * fx, b.y1 * fy, b.x2 * fx, b.y2 * fy))
        .collect();
    Ok(s.with_geometry(image, boxes))
}

/// Perturb every corner by uniform noise in `±magnitude · side`, then re-sort
/// corners. Deterministic for a seed; `magnitude = 0` returns the input.
pub fn bbox_jitter(boxes: &[BBox], magnitude: f64, seed: u64) -> Result<Vec<BBox>> {
    if !magnitude.is_finite() || magnitude < 0.0 {
        return Err(Error::invalid(format!("jitter magnitude must be >= 0, got {magnitude}")));
    }
    if magnitude == 0.0 {
        return Ok(boxes.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(boxes
        .iter()
        .map(|b| {
            let (w, h) = (b.width(), b.height());
            let mut u = || rng.random_range(-magnitude..=magnitude);
            BBox::new(b.x1 + u() * w, b.y1 + u() * h, b.x2 + u() * w, b.y2 + u() * h).sorted()
        })
        .collect())
}

/// [`bbox_jitter`] on a sample's boxes, clipped back into the image.
pub fn jitter_sample(s: &Sample, magnitude: f64, seed: u64) -> Result<Sample> {
    let (w, h) = (s.width() as f64, s.height() as f64);
    let boxes = bbox_jitter(&s.boxes, magnitude, seed)?
        .into_iter()
        .map(|b| b.clip(w, h))
        .collect();
    Ok(s.with_geometry(s.image.clone(), boxes))
}

/// One step of a configurable augmentation chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
// Field-less steps are empty struct variants so stray keys are still rejected.
pub enum Transform {
    Hflip {},
    Vflip {},
    Rotate90 { k: u32 },
    /// Flip left-right with probability `p`.
    RandomHflip { p: f64 },
    /// Flip top-bottom with probability `p`.
    RandomVflip { p: f64 },
    /// Rotate by a uniformly drawn `k ∈ {0, 1, 2, 3}` quarter turns.
    RandomRotate90 {},
    Cutout { rects: Vec<[f64; 4]>, fill: f64 },
    Resize { width: usize, height: usize },
    BboxJitter { magnitude: f64 },
}

/// Apply a chain of transforms. All randomness comes from `seed`.
pub fn apply_chain(s: &Sample, chain: &[Transform], seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = s.clone();
    for t in chain {
        cur = match t {
            Transform::Hflip {} => hflip(&cur),
            Transform::Vflip {} => vflip(&cur),
            Transform::Rotate90 { k } => rotate90(&cur, *k)?,
            Transform::RandomHflip { p } | Transform::RandomVflip { p } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::invalid(format!("flip probability {p} outside [0, 1]")));
                }
                let hit = rng.random::<f64>() < *p;
                match (hit, t) {
                    (false, _) => cur,
                    (true, Transform::RandomHflip { .. }) => hflip(&cur),
                    (true, _) => vflip(&cur),
                }
            }
            Transform::RandomRotate90 {} => match rng.random_range(0..4u32) {
                0 => cur,
                k => rotate90(&cur, k)?,
            },
            Transform::Cutout { rects, fill } => {
                let rects: Vec<BBox> = rects.iter().map(|r| BBox::new(r[0], r[1], r[2], r[3])).collect();
                cutout(&cur, &rects, *fill)?
            }
            Transform::Resize { width, height } => multiscale_resize(&cur, *width, *height)?,
            Transform::BboxJitter { magnitude } => jitter_sample(&cur, *magnitude, rng.random())?,
        };
    }
    Ok(cur)
}
