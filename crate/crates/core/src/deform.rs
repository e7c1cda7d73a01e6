//! Deformable convolution and deformable RoI pooling, with analytic
//! gradients.
//!
//! Sampling is bilinear with zero padding: neighbours outside the map
//! contribute nothing. Offsets are stored as a `(2·K·K, H_out, W_out)` tensor
//! where channel `2·t` holds the y-offset and `2·t + 1` the x-offset of kernel
//! tap `t = ky·K + kx`.
//!
//! These are straightforward direct loops. Every output position is computed
//! independently, so callers may partition output positions across threads.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// One of the (up to four) integer neighbours touched by a bilinear sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub y: usize,
    pub x: usize,
    pub weight: f64,
}

/// Bilinear corner weights around `(x, y)` together with their derivatives
/// with respect to `x` and `y`. Out-of-range corners are omitted.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    taps: [(usize, usize, f64, f64, f64); 4],
    len: usize,
}

impl Stencil {
    fn new(h: usize, w: usize, x: f64, y: f64) -> Self {
        let mut s = Stencil {
            taps: [(0, 0, 0.0, 0.0, 0.0); 4],
            len: 0,
        };
        if !(x.is_finite() && y.is_finite()) || x < -1.0 || y < -1.0 || x >= w as f64 || y >= h as f64 {
            return s;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        // (dy, dx, weight, d weight / dx, d weight / dy)
        let corners = [
            (0, 0, (1.0 - fy) * (1.0 - fx), -(1.0 - fy), -(1.0 - fx)),
            (0, 1, (1.0 - fy) * fx, 1.0 - fy, -fx),
            (1, 0, fy * (1.0 - fx), -fy, 1.0 - fx),
            (1, 1, fy * fx, fy, fx),
        ];
        for (dy, dx, wgt, gx, gy) in corners {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                s.taps[s.len] = (yy as usize, xx as usize, wgt, gx, gy);
                s.len += 1;
            }
        }
        s
    }

    fn iter(&self) -> impl Iterator<Item = &(usize, usize, f64, f64, f64)> {
        self.taps[..self.len].iter()
    }

    fn value(&self, map: &Tensor, c: usize) -> f64 {
        self.iter().map(|&(y, x, w, _, _)| w * map.at3(c, y, x)).sum()
    }

    /// `(d/dx, d/dy)` of the sampled value of channel `c`.
    fn spatial_grad(&self, map: &Tensor, c: usize) -> (f64, f64) {
        self.iter().fold((0.0, 0.0), |(ax, ay), &(y, x, _, gx, gy)| {
            let v = map.at3(c, y, x);
            (ax + gx * v, ay + gy * v)
        })
    }
}

/// Bilinearly interpolated channel vector of a `(C, H, W)` map at `(x, y)`.
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    let (c, h, w) = map.dims3()?;
    let st = Stencil::new(h, w, x, y);
    Ok((0..c).map(|ch| st.value(map, ch)).collect())
}

/// Derivatives of [`bilinear_sample`].
///
/// At integral coordinates the derivative is the one-sided derivative from
/// the right (the cell starting at the integer is used).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    pub d_dx: Vec<f64>,
    pub d_dy: Vec<f64>,
    /// Sensitivity of every channel's sample to each touched map pixel; the
    /// same weights apply to all channels.
    pub d_map: Vec<Tap>,
}

pub fn bilinear_sample_grad(map: &Tensor, x: f64, y: f64) -> Result<SampleGrad> {
    let (c, h, w) = map.dims3()?;
    let st = Stencil::new(h, w, x, y);
    let (d_dx, d_dy) = (0..c).map(|ch| st.spatial_grad(map, ch)).unzip();
    let d_map = st
        .iter()
        .map(|&(y, x, weight, _, _)| Tap { y, x, weight })
        .collect();
    Ok(SampleGrad { d_dx, d_dy, d_map })
}

/// Geometry of a deformable convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn infer(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (c_in, height, width) = input.dims3()?;
        let [c_out, wc_in, kh, kw] = weight.shape()[..] else {
            return Err(Error::ShapeMismatch(format!(
                "weight must be (Cout, Cin, K, K), got {:?}",
                weight.shape()
            )));
        };
        if wc_in != c_in {
            return Err(Error::ShapeMismatch(format!(
                "weight expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if kh != kw {
            return Err(Error::ShapeMismatch(format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        let k = kh;
        let span_h = height + 2 * pad;
        let span_w = width + 2 * pad;
        if span_h < k || span_w < k {
            return Err(Error::ShapeMismatch("kernel larger than padded input".into()));
        }
        if !(span_h - k).is_multiple_of(stride) || !(span_w - k).is_multiple_of(stride) {
            return Err(Error::ShapeMismatch(format!(
                "(size + 2·pad − K) not divisible by stride {stride}"
            )));
        }
        Ok(Self {
            c_in,
            c_out,
            kernel: k,
            height,
            width,
            out_h: (span_h - k) / stride + 1,
            out_w: (span_w - k) / stride + 1,
            stride,
            pad,
        })
    }

    pub fn offset_shape(&self) -> [usize; 3] {
        [2 * self.kernel * self.kernel, self.out_h, self.out_w]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.c_out, self.out_h, self.out_w]
    }

    fn check_offsets(&self, offsets: &Tensor) -> Result<()> {
        if offsets.shape() != self.offset_shape() {
            return Err(Error::ShapeMismatch(format!(
                "offsets must be {:?}, got {:?}",
                self.offset_shape(),
                offsets.shape()
            )));
        }
        Ok(())
    }

    /// Sampling location `(x, y)` of tap `(ky, kx)` at output `(oy, ox)`.
    #[inline]
    fn position(&self, offsets: &Tensor, oy: usize, ox: usize, ky: usize, kx: usize) -> (f64, f64) {
        let t = ky * self.kernel + kx;
        let dy = offsets.at3(2 * t, oy, ox);
        let dx = offsets.at3(2 * t + 1, oy, ox);
        let y = (oy * self.stride + ky) as f64 - self.pad as f64 + dy;
        let x = (ox * self.stride + kx) as f64 - self.pad as f64 + dx;
        (x, y)
    }
}

/// Zero offsets for a given convolution geometry.
pub fn zero_offsets(geom: &ConvGeometry) -> Tensor {
    Tensor::zeros(&geom.offset_shape())
}

/// `out[co, oy, ox] = Σ_{ci, ky, kx} weight[co, ci, ky, kx] · input_ci(p + tap + Δ)`
/// where `p = (oy·s − pad, ox·s − pad)` and samples are bilinear.
pub fn deform_conv2d(
    input: &Tensor,
    weight: &Tensor,
    offsets: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::infer(input, weight, stride, pad)?;
    g.check_offsets(offsets)?;
    let k = g.kernel;
    let mut out = Tensor::zeros(&g.output_shape());
    let mut cols = vec![0.0; g.c_in * k * k];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for ky in 0..k {
                for kx in 0..k {
                    let (x, y) = g.position(offsets, oy, ox, ky, kx);
                    let st = Stencil::new(g.height, g.width, x, y);
                    for ci in 0..g.c_in {
                        cols[(ci * k + ky) * k + kx] = st.value(input, ci);
                    }
                }
            }
            for co in 0..g.c_out {
                let wrow = &weight.data()[co * cols.len()..(co + 1) * cols.len()];
                let v: f64 = wrow.iter().zip(&cols).map(|(a, b)| a * b).sum();
                *out.at3_mut(co, oy, ox) = v;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub offsets: Tensor,
}

/// Gradients of `Σ grad_out ⊙ deform_conv2d(input, weight, offsets)` with
/// respect to all three operands.
pub fn deform_conv2d_grad(
    input: &Tensor,
    weight: &Tensor,
    offsets: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<DeformConvGrads> {
    let g = ConvGeometry::infer(input, weight, stride, pad)?;
    g.check_offsets(offsets)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient must be {:?}, got {:?}",
            g.output_shape(),
            grad_out.shape()
        )));
    }
    let k = g.kernel;
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_offsets = Tensor::zeros(offsets.shape());

    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for ky in 0..k {
                for kx in 0..k {
                    let (x, y) = g.position(offsets, oy, ox, ky, kx);
                    let st = Stencil::new(g.height, g.width, x, y);
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for ci in 0..g.c_in {
                        // Upstream sensitivity of this sample: Σ_co g_out · w.
                        let mut coeff = 0.0;
                        let sample = st.value(input, ci);
                        for co in 0..g.c_out {
                            let go = grad_out.at3(co, oy, ox);
                            let widx = [co, ci, ky, kx];
                            coeff += go * weight.get(&widx);
                            let o = d_weight.offset(&widx);
                            d_weight.data_mut()[o] += go * sample;
                        }
                        if coeff == 0.0 {
                            continue;
                        }
                        for &(yy, xx, wgt, _, _) in st.iter() {
                            *d_input.at3_mut(ci, yy, xx) += coeff * wgt;
                        }
                        let (sx, sy) = st.spatial_grad(input, ci);
                        gx += coeff * sx;
                        gy += coeff * sy;
                    }
                    let t = ky * k + kx;
                    *d_offsets.at3_mut(2 * t, oy, ox) += gy;
                    *d_offsets.at3_mut(2 * t + 1, oy, ox) += gx;
                }
            }
        }
    }
    Ok(DeformConvGrads {
        input: d_input,
        weight: d_weight,
        offsets: d_offsets,
    })
}

/// Side length of the fixed sampling sub-grid inside each pooling bin.
pub const ROI_SAMPLES_PER_SIDE: usize = 2;

/// Deformable RoI pooling.
///
/// The RoI (in feature-map pixel coordinates, the same continuous frame the
/// bilinear sampler uses) is split into `bins_h × bins_w` bins; bin `(i, j)`
/// is shifted by `(offsets[0, i, j], offsets[1, i, j])` = `(Δy, Δx)` in
/// feature pixels and averaged over a 2×2 grid of bilinear samples.
pub fn deform_roi_pool(
    features: &Tensor,
    roi: &BBox,
    bins: (usize, usize),
    offsets: Option<&Tensor>,
) -> Result<Tensor> {
    let (c, h, w) = features.dims3()?;
    let (bh, bw) = bins;
    if bh == 0 || bw == 0 {
        return Err(Error::invalid("bin counts must be positive"));
    }
    if !(roi.is_valid() && roi.has_positive_size()) {
        return Err(Error::DegenerateBox {
            x1: roi.x1,
            y1: roi.y1,
            x2: roi.x2,
            y2: roi.y2,
            reason: "RoI must have positive width and height",
        });
    }
    if let Some(o) = offsets {
        if o.shape() != [2, bh, bw] {
            return Err(Error::ShapeMismatch(format!(
                "RoI offsets must be [2, {bh}, {bw}], got {:?}",
                o.shape()
            )));
        }
    }
    let bin_h = roi.height() / bh as f64;
    let bin_w = roi.width() / bw as f64;
    let n = ROI_SAMPLES_PER_SIDE;
    let mut out = Tensor::zeros(&[c, bh, bw]);
    for i in 0..bh {
        for j in 0..bw {
            let (dy, dx) = offsets.map_or((0.0, 0.0), |o| (o.at3(0, i, j), o.at3(1, i, j)));
            let y0 = roi.y1 + i as f64 * bin_h + dy;
            let x0 = roi.x1 + j as f64 * bin_w + dx;
            let mut acc = vec![0.0; c];
            for sy in 0..n {
                for sx in 0..n {
                    let y = y0 + (sy as f64 + 0.5) * bin_h / n as f64;
                    let x = x0 + (sx as f64 + 0.5) * bin_w / n as f64;
                    let st = Stencil::new(h, w, x, y);
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += st.value(features, ch);
                    }
                }
            }
            for (ch, a) in acc.into_iter().enumerate() {
                *out.at3_mut(ch, i, j) = a / (n * n) as f64;
            }
        }
    }
    Ok(out)
}
