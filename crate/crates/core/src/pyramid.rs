//! Feature-pyramid bookkeeping: level strides, anchor tiling, scale-based
//! level assignment, and the fuse/redistribute neck that collapses all levels
//! into one map and spreads it back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{resize, Interpolation, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevel {
    pub name: String,
    pub stride: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidSpec {
    pub levels: Vec<PyramidLevel>,
    /// Anchor base size is `stride · scale`.
    pub scales: Vec<f64>,
    /// Height / width.
    pub ratios: Vec<f64>,
}

impl Default for PyramidSpec {
    /// C2–C5 at strides 4, 8, 16, 32 with scale 8 and ratios 0.5, 1, 2.
    fn default() -> Self {
        let levels = [("C2", 4), ("C3", 8), ("C4", 16), ("C5", 32)]
            .into_iter()
            .map(|(name, stride)| PyramidLevel {
                name: name.into(),
                stride,
            })
            .collect();
        Self {
            levels,
            scales: vec![8.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

/// Box scale `√(wh)` that maps onto the stride-16 level.
pub const CANONICAL_SCALE: f64 = 224.0;
const CANONICAL_LOG2_STRIDE: i64 = 4;

impl PyramidSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Empty("pyramid levels"));
        }
        let first = self.levels[0].stride;
        if first == 0 || !first.is_power_of_two() {
            return Err(Error::invalid(format!("base stride {first} must be a power of two")));
        }
        if self.levels.windows(2).any(|w| w[1].stride != 2 * w[0].stride) {
            return Err(Error::invalid("pyramid strides must double from level to level"));
        }
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(Error::Empty("anchor scales or ratios"));
        }
        if self
            .scales
            .iter()
            .chain(&self.ratios)
            .any(|v| !v.is_finite() || *v <= 0.0)
        {
            return Err(Error::invalid("anchor scales and ratios must be positive"));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Tile anchors over every level. Cell `(i, j)` is centered at
/// `((j + 0.5)·s, (i + 0.5)·s)`; order is row-major over cells, then ratio,
/// then scale.
pub fn gen_anchors(spec: &PyramidSpec, image_w: u32, image_h: u32) -> Result<Vec<Vec<BBox>>> {
    spec.validate()?;
    if image_w == 0 || image_h == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    Ok(spec
        .levels
        .iter()
        .map(|level| {
            let s = level.stride;
            let (cols, rows) = (image_w.div_ceil(s), image_h.div_ceil(s));
            let mut boxes = Vec::with_capacity((rows * cols) as usize * spec.anchors_per_cell());
            let sf = s as f64;
            for i in 0..rows {
                for j in 0..cols {
                    let cx = (j as f64 + 0.5) * sf;
                    let cy = (i as f64 + 0.5) * sf;
                    for &r in &spec.ratios {
                        for &scale in &spec.scales {
                            let base = sf * scale;
                            let w = base / r.sqrt();
                            let h = base * r.sqrt();
                            boxes.push(BBox::from_center(cx, cy, w, h));
                        }
                    }
                }
            }
            boxes
        })
        .collect())
}

/// Level responsible for a box of this size: `4 + ⌊log2(√(wh) / 224)⌋` in
/// log2-stride units, clamped to the available levels. Zero-area boxes go to
/// the finest level.
pub fn assign_level(b: &BBox, spec: &PyramidSpec) -> Result<usize> {
    spec.validate()?;
    let area = b.area();
    if !(area > 0.0) {
        return Ok(0);
    }
    let target = CANONICAL_LOG2_STRIDE + (area.sqrt() / CANONICAL_SCALE).log2().floor() as i64;
    let base = spec.levels[0].stride.trailing_zeros() as i64;
    let last = spec.levels.len() as i64 - 1;
    Ok((target - base).clamp(0, last) as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    /// `(C, H, W)`.
    pub tensor: Tensor,
    pub stride: u32,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, stride: u32) -> Result<Self> {
        tensor.dims3()?;
        Ok(Self { tensor, stride })
    }

    fn hw(&self) -> (usize, usize) {
        let s = self.tensor.shape();
        (s[1], s[2])
    }
}

/// Upsampling is bilinear, downsampling nearest.
fn resize_to(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, sh, sw) = t.dims3()?;
    let mode = if h * w >= sh * sw {
        Interpolation::Bilinear
    } else {
        Interpolation::Nearest
    };
    resize(t, h, w, mode)
}

fn check_channels(maps: &[FeatureMap]) -> Result<usize> {
    let c = maps[0].tensor.dims3()?.0;
    for m in maps {
        let (mc, _, _) = m.tensor.dims3()?;
        if mc != c {
            return Err(Error::ShapeMismatch(format!(
                "channel mismatch across levels: {c} vs {mc}"
            )));
        }
    }
    Ok(c)
}

/// Index of the level whose resolution the fused map takes.
pub fn fusion_level(num_levels: usize) -> usize {
    num_levels / 2
}

/// Resize every level to the middle level's resolution and average.
pub fn fuse_levels(maps: &[FeatureMap]) -> Result<FeatureMap> {
    if maps.len() < 2 {
        return Err(Error::invalid("fusion needs at least two levels"));
    }
    check_channels(maps)?;
    let mid = &maps[fusion_level(maps.len())];
    let (h, w) = mid.hw();
    let mut acc = Tensor::zeros(mid.tensor.shape());
    for m in maps {
        acc = acc.add(&resize_to(&m.tensor, h, w)?)?;
    }
    let n = maps.len() as f64;
    Ok(FeatureMap {
        tensor: acc.map(|v| v / n),
        stride: mid.stride,
    })
}

/// Resize the fused map back to every level and add it residually.
pub fn redistribute(fused: &FeatureMap, originals: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
    if originals.is_empty() {
        return Err(Error::Empty("pyramid levels"));
    }
    let c = check_channels(originals)?;
    if fused.tensor.dims3()?.0 != c {
        return Err(Error::ShapeMismatch("fused map channel count differs from levels".into()));
    }
    originals
        .iter()
        .map(|m| {
            let (h, w) = m.hw();
            Ok(FeatureMap {
                tensor: m.tensor.add(&resize_to(&fused.tensor, h, w)?)?,
                stride: m.stride,
            })
        })
        .collect()
}
