//! Central finite-difference checks of the deformable-sampling gradients on
//! random small instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{bilinear_sample, bilinear_sample_grad, deform_conv2d, deform_conv2d_grad, ConvGeometry};
use crate::error::Result;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// One deformable convolution problem.
#[derive(Debug, Clone)]
pub struct ConvInstance {
    pub input: Tensor,
    pub weight: Tensor,
    pub offsets: Tensor,
    pub grad_out: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvInstance {
    /// Random instance no larger than `(Cout, Cin, H, W) = (2, 3, 8, 8)`.
    /// Offsets are chosen so every sampling coordinate has a fractional
    /// part in `[0.1, 0.9]`, away from the kinks of bilinear interpolation.
    pub fn random(rng: &mut impl Rng) -> Result<Self> {
        let c_out = rng.random_range(1..=2);
        let c_in = rng.random_range(1..=3);
        let h = rng.random_range(4..=8);
        let w = rng.random_range(4..=8);
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
        let mut uniform = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let input = uniform(&[c_in, h, w]);
        let weight = uniform(&[c_out, c_in, k, k]);
        let geom = ConvGeometry::infer(&input, &weight, 1, pad)?;
        let grad_out = uniform(&geom.output_shape());
        let offsets = Tensor::from_fn(&geom.offset_shape(), |_| {
            let whole = rng.random_range(-1..=1) as f64;
            whole + rng.random_range(0.1..0.9)
        });
        Ok(Self {
            input,
            weight,
            offsets,
            grad_out,
            stride: 1,
            pad,
        })
    }

    /// `Σ grad_out ⊙ deform_conv2d(...)`.
    pub fn objective(&self, input: &Tensor, weight: &Tensor, offsets: &Tensor) -> Result<f64> {
        let out = deform_conv2d(input, weight, offsets, self.stride, self.pad)?;
        Ok(out.data().iter().zip(self.grad_out.data()).map(|(a, b)| a * b).sum())
    }
}

/// Maximum relative error per operand.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub conv_input: f64,
    pub conv_weight: f64,
    pub conv_offsets: f64,
    pub sample_xy: f64,
    pub sample_map: f64,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        [self.conv_input, self.conv_weight, self.conv_offsets, self.sample_xy, self.sample_map]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn fd_sweep(t: &Tensor, analytic: &Tensor, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut probe = t.clone();
    for i in 0..t.len() {
        let v = t.data()[i];
        probe.data_mut()[i] = v + FD_STEP;
        let hi = f(&probe)?;
        probe.data_mut()[i] = v - FD_STEP;
        let lo = f(&probe)?;
        probe.data_mut()[i] = v;
        worst = worst.max(rel_err(analytic.data()[i], (hi - lo) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}

/// Check one convolution instance; returns `(input, weight, offsets)` errors.
pub fn check_conv(inst: &ConvInstance) -> Result<(f64, f64, f64)> {
    let g = deform_conv2d_grad(&inst.input, &inst.weight, &inst.offsets, inst.stride, inst.pad, &inst.grad_out)?;
    let e_in = fd_sweep(&inst.input, &g.input, |x| inst.objective(x, &inst.weight, &inst.offsets))?;
    let e_w = fd_sweep(&inst.weight, &g.weight, |w| inst.objective(&inst.input, w, &inst.offsets))?;
    let e_off = fd_sweep(&inst.offsets, &g.offsets, |o| inst.objective(&inst.input, &inst.weight, o))?;
    Ok((e_in, e_w, e_off))
}

/// Check the single-point sampler at a random fractional location; returns
/// `(coordinate, map)` errors.
pub fn check_sample(rng: &mut impl Rng) -> Result<(f64, f64)> {
    let (c, h, w) = (rng.random_range(1..=3), rng.random_range(2..=8), rng.random_range(2..=8));
    let map = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
    let x = rng.random_range(-1..w as i64) as f64 + rng.random_range(0.1..0.9);
    let y = rng.random_range(-1..h as i64) as f64 + rng.random_range(0.1..0.9);
    let g = bilinear_sample_grad(&map, x, y)?;
    let mut e_xy: f64 = 0.0;
    for ch in 0..c {
        let fx = (bilinear_sample(&map, x + FD_STEP, y)?[ch] - bilinear_sample(&map, x - FD_STEP, y)?[ch]) / (2.0 * FD_STEP);
        let fy = (bilinear_sample(&map, x, y + FD_STEP)?[ch] - bilinear_sample(&map, x, y - FD_STEP)?[ch]) / (2.0 * FD_STEP);
        e_xy = e_xy.max(rel_err(g.d_dx[ch], fx)).max(rel_err(g.d_dy[ch], fy));
    }
    // d sample / d map is the same tap weight for every channel.
    let mut dense = Tensor::zeros(&[1, h, w]);
    for t in &g.d_map {
        *dense.at3_mut(0, t.y, t.x) += t.weight;
    }
    let plane = Tensor::from_fn(&[1, h, w], |i| map.at3(0, i[1], i[2]));
    let e_map = fd_sweep(&plane, &dense, |m| Ok(bilinear_sample(m, x, y)?[0]))?;
    Ok((e_xy, e_map))
}

/// Run `instances` seeded convolution and sampler checks.
pub fn run(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = GradCheckReport {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let inst = ConvInstance::random(&mut rng)?;
        let (a, b, c) = check_conv(&inst)?;
        r.conv_input = r.conv_input.max(a);
        r.conv_weight = r.conv_weight.max(b);
        r.conv_offsets = r.conv_offsets.max(c);
        let (d, e) = check_sample(&mut rng)?;
        r.sample_xy = r.sample_xy.max(d);
        r.sample_map = r.sample_map.max(e);
    }
    Ok(r)
}
