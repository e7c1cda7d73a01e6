//! Axis-aligned boxes, the IoU family, and the box-delta regression encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound on `|dw|`, `|dh|` applied by [`decode`]: `ln(1000 / 16)`.
pub const DEFAULT_SIZE_CLAMP: f64 = 4.135_166_556_742_356;

/// Axis-aligned rectangle in pixel coordinates, corner convention.
///
/// The constructor does not validate; degenerate boxes (zero width or height)
/// are representable because clipping and augmentation legitimately produce
/// them. Use [`BBox::try_new`] when the input comes from outside.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    #[inline]
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Validating constructor: corners must be finite and ordered.
    pub fn try_new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self::new(x1, y1, x2, y2);
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    /// From COCO `[x, y, w, h]`.
    #[inline]
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    /// From center and size.
    #[inline]
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    #[inline]
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x2 >= self.x1
            && self.y2 >= self.y1
    }

    /// True when both sides are strictly positive.
    #[inline]
    pub fn has_positive_size(&self) -> bool {
        self.width() > 0.0 && self.height() > 0.0
    }

    /// Box with corners re-sorted so that `x1 <= x2` and `y1 <= y2`.
    #[inline]
    pub fn sorted(&self) -> Self {
        Self::new(
            self.x1.min(self.x2),
            self.y1.min(self.y2),
            self.x1.max(self.x2),
            self.y1.max(self.y2),
        )
    }

    /// Area of the overlap with `other` (zero when disjoint).
    #[inline]
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Smallest box containing both.
    #[inline]
    pub fn enclosing(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }

    pub fn clip(&self, w: f64, h: f64) -> BBox {
        clip(self, w, h)
    }
}

/// Regression target `(dx, dy, dw, dh)` of a box relative to a reference box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Delta {
    pub const ZERO: Delta = Delta::new(0.0, 0.0, 0.0, 0.0);

    #[inline]
    pub const fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    #[inline]
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    #[inline]
    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn area(b: &BBox) -> f64 {
    b.area()
}

/// Intersection over union. Zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU: `iou - (|C| - |A ∪ B|) / |C|` with `C` the enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let union = a.area() + b.area() - a.intersection_area(b);
    let enclosing = a.enclosing(b).area();
    if enclosing <= 0.0 {
        return iou(a, b);
    }
    // |C| ≥ |A ∪ B|; clamp the rounding when one box contains the other.
    iou(a, b) - ((enclosing - union) / enclosing).max(0.0)
}

/// Distance IoU: `iou - ρ²(centers) / c²` with `c` the enclosing diagonal.
pub fn diou(a: &BBox, b: &BBox) -> f64 {
    let iou = iou(a, b);
    match center_penalty(a, b) {
        Some(p) => iou - p,
        None => iou,
    }
}

/// Complete IoU: DIoU minus the aspect-ratio consistency term `α·v`.
pub fn ciou(a: &BBox, b: &BBox) -> f64 {
    let iou = iou(a, b);
    let Some(penalty) = center_penalty(a, b) else {
        return iou;
    };
    let v = aspect_consistency(a, b);
    let denom = (1.0 - iou) + v;
    let alpha = if denom > 0.0 { v / denom } else { 0.0 };
    iou - penalty - alpha * v
}

fn center_penalty(a: &BBox, b: &BBox) -> Option<f64> {
    let c = a.enclosing(b);
    let diag2 = c.width().powi(2) + c.height().powi(2);
    if diag2 <= 0.0 {
        return None;
    }
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    Some(((ax - bx).powi(2) + (ay - by).powi(2)) / diag2)
}

// v = 4/π² (atan(w_b/h_b) − atan(w_a/h_a))²; atan2 keeps zero-height boxes finite.
fn aspect_consistency(a: &BBox, b: &BBox) -> f64 {
    let d = b.width().atan2(b.height()) - a.width().atan2(a.height());
    4.0 / (std::f64::consts::PI * std::f64::consts::PI) * d * d
}

/// Regression target of `g` relative to `b` using center/size parameters:
/// `dx = (gx − bx)/bw`, `dy = (gy − by)/bh`, `dw = ln(gw/bw)`, `dh = ln(gh/bh)`.
pub fn encode(b: &BBox, g: &BBox) -> Result<Delta> {
    if !(b.is_valid() && b.has_positive_size()) {
        return Err(degenerate(b, "reference box must have positive width and height"));
    }
    if !(g.is_valid() && g.has_positive_size()) {
        return Err(degenerate(g, "target box must have positive width and height"));
    }
    let (bw, bh) = (b.width(), b.height());
    let (bx, by) = b.center();
    let (gx, gy) = g.center();
    Ok(Delta {
        dx: (gx - bx) / bw,
        dy: (gy - by) / bh,
        dw: (g.width() / bw).ln(),
        dh: (g.height() / bh).ln(),
    })
}

/// Inverse of [`encode`] with `dw`, `dh` clamped to [`DEFAULT_SIZE_CLAMP`].
pub fn decode(b: &BBox, d: &Delta) -> Result<BBox> {
    decode_clamped(b, d, DEFAULT_SIZE_CLAMP)
}

/// Inverse of [`encode`] with `dw`, `dh` clamped to `[-max_log, max_log]`.
///
/// Corners are offset from the reference corners, so a zero delta returns
/// the reference box bit for bit.
pub fn decode_clamped(b: &BBox, d: &Delta, max_log: f64) -> Result<BBox> {
    if !(b.is_valid() && b.has_positive_size()) {
        return Err(degenerate(b, "reference box must have positive width and height"));
    }
    if !d.is_finite() {
        return Err(Error::invalid(format!("non-finite delta {d:?}")));
    }
    if !(max_log > 0.0) {
        return Err(Error::invalid(format!("size clamp must be positive, got {max_log}")));
    }
    let (bw, bh) = (b.width(), b.height());
    let w = bw * d.dw.clamp(-max_log, max_log).exp();
    let h = bh * d.dh.clamp(-max_log, max_log).exp();
    let sx = d.dx * bw;
    let sy = d.dy * bh;
    Ok(BBox::new(
        b.x1 + sx + 0.5 * (bw - w),
        b.y1 + sy + 0.5 * (bh - h),
        b.x2 + sx - 0.5 * (bw - w),
        b.y2 + sy - 0.5 * (bh - h),
    ))
}

/// Clamp a box into `[0, w] × [0, h]`. May return a zero-area box.
pub fn clip(b: &BBox, w: f64, h: f64) -> BBox {
    BBox::new(
        b.x1.clamp(0.0, w),
        b.y1.clamp(0.0, h),
        b.x2.clamp(0.0, w),
        b.y2.clamp(0.0, h),
    )
}

fn degenerate(b: &BBox, reason: &'static str) -> Error {
    Error::DegenerateBox {
        x1: b.x1,
        y1: b.y1,
        x2: b.x2,
        y2: b.y2,
        reason,
    }
}
