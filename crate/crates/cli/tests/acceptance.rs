//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the report is printed by a plain
//! `cargo test`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use detcore::augment::{hflip, rotate90, vflip, Sample};
use detcore::blocks::{attention_weights, context_pool, single_head_attention, AttentionParams, GcbParams};
use detcore::cascade::{simulate_cascade, CascadeConfig, CascadeSimulation};
use detcore::coco::{Annotation, Category, Dataset, Image, ResultRecord};
use detcore::deform::{bilinear_sample, bilinear_sample_grad, deform_conv2d, deform_conv2d_grad, zero_offsets, ConvGeometry};
use detcore::eval::{map_50_95, EvalParams};
use detcore::geometry::{decode, diou, encode, giou, iou};
use detcore::losses::{smooth_l1, smooth_l1_grad};
use detcore::sampling::instance_balanced_sample;
use detcore::schedule::{lr_at, ScheduleConfig};
use detcore::suppression::{nms, soft_nms, Detection, SoftNmsMethod, SoftNmsParams};
use detcore::{BBox, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_box(r: &mut impl Rng, min_side: f64, max_side: f64) -> BBox {
    let w = r.random_range(min_side..max_side);
    let h = r.random_range(min_side..max_side);
    BBox::from_xywh(r.random_range(0.0..500.0), r.random_range(0.0..500.0), w, h)
}

// 1 ────────────────────────────────────────────────────────────────────────

fn geometry_round_trip() -> Outcome {
    let mut r = rng(1);
    let pairs: Vec<(BBox, BBox)> = (0..10_000)
        .map(|_| (random_box(&mut r, 2.0, 100.0), random_box(&mut r, 2.0, 100.0)))
        .collect();
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for (b, g) in &pairs {
        let d = encode(b, g).map_err(|e| e.to_string())?;
        let back = decode(b, &d).map_err(|e| e.to_string())?;
        for (u, v) in [(back.x1, g.x1), (back.y1, g.y1), (back.x2, g.x2), (back.y2, g.y2)] {
            worst = worst.max((u - v).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(worst < 1e-9, || format!("max abs error {worst:e}"))?;
    ensure(secs < 1.0, || format!("took {secs:.3} s"))?;
    Ok(format!("max abs error {worst:.2e} over 10^4 pairs in {secs:.3} s"))
}

// 2 ────────────────────────────────────────────────────────────────────────

fn iou_family_order() -> Outcome {
    let mut r = rng(2);
    let mut violations = 0;
    for _ in 0..10_000 {
        // Small canvas so most pairs overlap.
        let a = BBox::from_xywh(r.random_range(0.0..50.0), r.random_range(0.0..50.0), r.random_range(0.5..60.0), r.random_range(0.5..60.0));
        let b = BBox::from_xywh(r.random_range(0.0..50.0), r.random_range(0.0..50.0), r.random_range(0.5..60.0), r.random_range(0.5..60.0));
        let v = iou(&a, &b);
        if giou(&a, &b) > v || diou(&a, &b) > v {
            violations += 1;
        }
    }
    ensure(violations == 0, || format!("{violations} ordering violations"))?;
    let g = giou(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(2.0, 0.0, 3.0, 1.0));
    ensure((g + 1.0 / 3.0).abs() <= 1e-12, || format!("giou example gave {g}"))?;
    Ok(format!("0 violations over 10^4 pairs; giou example {g:.15}"))
}

// 3 ────────────────────────────────────────────────────────────────────────

fn smooth_l1_exactness() -> Outcome {
    for (x, want) in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5)] {
        let got = smooth_l1(x);
        ensure(got == want, || format!("f({x}) = {got}, want {want}"))?;
    }
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut points = 0;
    let mut k = 0;
    while points < 100 {
        let x = -3.0 + 6.0 * (k as f64 + 0.5) / 103.0;
        k += 1;
        if (x.abs() - 1.0).abs() < 1e-3 {
            continue;
        }
        let fd = (smooth_l1(x + h) - smooth_l1(x - h)) / (2.0 * h);
        let a = smooth_l1_grad(x);
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-12));
        points += 1;
    }
    ensure(worst < 1e-6, || format!("derivative rel err {worst:e}"))?;
    Ok(format!("exact at 0, 0.5, 2; derivative rel err {worst:.2e} at 100 points"))
}

// 4 ────────────────────────────────────────────────────────────────────────

/// Greedy hard NMS straight from the definition: keep the best remaining
/// detection, delete every same-class detection overlapping it by >= thr.
fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut remaining: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (ib, b) = remaining[best];
            let (ii, d) = remaining[i];
            if d.score > b.score || (d.score == b.score && ii < ib) {
                best = i;
            }
        }
        let (_, top) = remaining.remove(best);
        kept.push(top);
        remaining.retain(|(_, d)| d.class_id != top.class_id || iou(&top.bbox, &d.bbox) < thr);
    }
    kept
}

fn soft_nms_oracle(dets: &[Detection], p: &SoftNmsParams) -> Vec<Detection> {
    let mut remaining: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (ib, b) = remaining[best];
            let (ii, d) = remaining[i];
            if d.score > b.score || (d.score == b.score && ii < ib) {
                best = i;
            }
        }
        let (_, top) = remaining.remove(best);
        if top.score < p.score_floor {
            break;
        }
        kept.push(top);
        for (_, d) in remaining.iter_mut() {
            if d.class_id != top.class_id {
                continue;
            }
            let o = iou(&top.bbox, &d.bbox);
            let factor = match p.method {
                SoftNmsMethod::Linear => {
                    if o > p.iou_thr {
                        1.0 - o
                    } else {
                        1.0
                    }
                }
                SoftNmsMethod::Gaussian => (-(o * o) / p.sigma).exp(),
            };
            d.score *= factor;
        }
        remaining.retain(|(_, d)| d.score >= p.score_floor);
    }
    kept
}

fn suppression_oracle() -> Outcome {
    let mut r = rng(4);
    for scene in 0..200 {
        let n = r.random_range(0..=200);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                // Coarse scores force ties; a small canvas forces overlaps.
                let score = (r.random_range(0..40) as f64 + 1.0) / 40.0;
                let b = BBox::from_xywh(r.random_range(0.0..80.0), r.random_range(0.0..80.0), r.random_range(2.0..40.0), r.random_range(2.0..40.0));
                Detection::new(b, score, r.random_range(1..=3))
            })
            .collect();
        let thr = r.random_range(0.2..0.8);
        let hard = nms(&dets, thr).map_err(|e| e.to_string())?;
        ensure(hard == nms_oracle(&dets, thr), || format!("hard NMS mismatch in scene {scene}"))?;
        for method in [SoftNmsMethod::Linear, SoftNmsMethod::Gaussian] {
            let p = SoftNmsParams {
                iou_thr: thr,
                sigma: 0.5,
                score_floor: 0.001,
                method,
                class_agnostic: false,
            };
            let soft = soft_nms(&dets, &p).map_err(|e| e.to_string())?;
            ensure(soft == soft_nms_oracle(&dets, &p), || format!("soft NMS ({method:?}) mismatch in scene {scene}"))?;
        }
    }
    let fixture = [
        Detection::new(BBox::new(0.0, 0.0, 3.0, 1.0), 0.9, 1),
        Detection::new(BBox::new(1.0, 0.0, 4.0, 1.0), 0.8, 1),
    ];
    let p = SoftNmsParams {
        iou_thr: 0.3,
        method: SoftNmsMethod::Linear,
        ..Default::default()
    };
    let out = soft_nms(&fixture, &p).map_err(|e| e.to_string())?;
    ensure(out.len() == 2 && out[1].score == 0.4, || format!("linear fixture gave {out:?}"))?;
    Ok("hard and soft NMS identical to greedy oracles on 200 scenes; 0.8 -> 0.4".into())
}

// 5 ────────────────────────────────────────────────────────────────────────

fn direct_conv(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co_n, k) = (weight.shape()[0], weight.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[co_n, oh, ow]);
    for co in 0..co_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..ci_n {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                acc += weight.get(&[co, ci, ky, kx]) * input.get(&[ci, y as usize, x as usize]);
                            }
                        }
                    }
                }
                out.set(&[co, oy, ox], acc);
            }
        }
    }
    out
}

fn uniform(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn fd_max_rel(x: &Tensor, analytic: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let hi = f(&p);
        p.data_mut()[i] -= 2.0 * h;
        let lo = f(&p);
        worst = worst.max(rel(analytic.data()[i], (hi - lo) / (2.0 * h)));
    }
    worst
}

fn deformable_kernels() -> Outcome {
    let t = Instant::now();
    let mut r = rng(5);
    let mut conv_err: f64 = 0.0;
    for _ in 0..20 {
        let (ci, co, h, w) = (r.random_range(1..=3), r.random_range(1..=2), r.random_range(3..=8), r.random_range(3..=8));
        let k = [1, 3][r.random_range(0..2)];
        let pad = r.random_range(0..=k / 2);
        let stride = if (h + 2 * pad - k) % 2 == 0 && (w + 2 * pad - k) % 2 == 0 { r.random_range(1..=2) } else { 1 };
        let input = uniform(&mut r, &[ci, h, w]);
        let weight = uniform(&mut r, &[co, ci, k, k]);
        let g = ConvGeometry::infer(&input, &weight, stride, pad).map_err(|e| e.to_string())?;
        let got = deform_conv2d(&input, &weight, &zero_offsets(&g), stride, pad).map_err(|e| e.to_string())?;
        conv_err = conv_err.max(got.max_abs_diff(&direct_conv(&input, &weight, stride, pad)).map_err(|e| e.to_string())?);
    }
    ensure(conv_err <= 1e-6, || format!("zero-offset conv differs by {conv_err:e}"))?;

    let mut grad_err: f64 = 0.0;
    for _ in 0..20 {
        let (ci, co, h, w) = (r.random_range(1..=3), r.random_range(1..=2), r.random_range(4..=8), r.random_range(4..=8));
        let input = uniform(&mut r, &[ci, h, w]);
        let weight = uniform(&mut r, &[co, ci, 3, 3]);
        let g = ConvGeometry::infer(&input, &weight, 1, 1).map_err(|e| e.to_string())?;
        // Sampling positions keep a fractional part in [0.1, 0.9].
        let offsets = Tensor::from_fn(&g.offset_shape(), |_| r.random_range(-1..=1) as f64 + r.random_range(0.1..0.9));
        let upstream = uniform(&mut r, &g.output_shape());
        let loss = |x: &Tensor, wt: &Tensor, o: &Tensor| -> f64 {
            let out = deform_conv2d(x, wt, o, 1, 1).expect("valid shapes");
            out.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
        };
        let grads = deform_conv2d_grad(&input, &weight, &offsets, 1, 1, &upstream).map_err(|e| e.to_string())?;
        grad_err = grad_err
            .max(fd_max_rel(&input, &grads.input, |x| loss(x, &weight, &offsets)))
            .max(fd_max_rel(&weight, &grads.weight, |wt| loss(&input, wt, &offsets)))
            .max(fd_max_rel(&offsets, &grads.offsets, |o| loss(&input, &weight, o)));

        let x = r.random_range(-1..w as i64) as f64 + r.random_range(0.1..0.9);
        let y = r.random_range(-1..h as i64) as f64 + r.random_range(0.1..0.9);
        let sg = bilinear_sample_grad(&input, x, y).map_err(|e| e.to_string())?;
        let hstep = 1e-6;
        for c in 0..ci {
            let s = |x: f64, y: f64| bilinear_sample(&input, x, y).expect("3-d map")[c];
            let fx = (s(x + hstep, y) - s(x - hstep, y)) / (2.0 * hstep);
            let fy = (s(x, y + hstep) - s(x, y - hstep)) / (2.0 * hstep);
            grad_err = grad_err.max(rel(sg.d_dx[c], fx)).max(rel(sg.d_dy[c], fy));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(grad_err < 1e-4, || format!("gradient rel err {grad_err:e}"))?;
    ensure(secs < 30.0, || format!("took {secs:.1} s"))?;
    Ok(format!("conv diff {conv_err:.1e}; gradient rel err {grad_err:.2e} on 20 instances in {secs:.2} s"))
}

// 6 ────────────────────────────────────────────────────────────────────────

fn cascade_quality() -> Outcome {
    let cfg = CascadeConfig::default();
    let sim = CascadeSimulation::default();
    let mut good = 0;
    for seed in 0..100 {
        let report = simulate_cascade(&cfg, &sim, seed).map_err(|e| e.to_string())?;
        let f = report.fractions_at_least(0.7);
        if f.windows(2).all(|w| w[1] >= w[0]) {
            good += 1;
        }
    }
    ensure(good >= 95, || format!("non-decreasing in only {good}/100 trials"))?;
    Ok(format!("fraction IoU >= 0.7 non-decreasing in {good}/100 trials"))
}

// 7 ────────────────────────────────────────────────────────────────────────

fn attention_and_context() -> Outcome {
    let mut r = rng(7);
    let (c, n) = (6, 20);
    let x = uniform(&mut r, &[c, n]);
    let p = AttentionParams::random(c, 0.5, 7);
    let a = attention_weights(&x, &p).map_err(|e| e.to_string())?;
    let row_err = a.iter().map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    ensure(row_err <= 1e-6, || format!("row sum off by {row_err:e}"))?;

    let out = single_head_attention(&x, &p).map_err(|e| e.to_string())?;
    let col = |i: usize| -> Vec<f64> { (0..c).map(|ch| x.get(&[ch, i])).collect() };
    let matvec = |m: &[f64], v: &[f64]| -> Vec<f64> { (0..c).map(|i| (0..c).map(|k| m[i * c + k] * v[k]).sum()).collect() };
    let mut loop_err: f64 = 0.0;
    for i in 0..n {
        let q = matvec(&p.query, &col(i));
        let logits: Vec<f64> = (0..n)
            .map(|j| {
                let k = matvec(&p.key, &col(j));
                q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt()
            })
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for ch in 0..c {
            let mut acc = 0.0;
            for (j, ej) in e.iter().enumerate() {
                acc += ej / z * matvec(&p.value, &col(j))[ch];
            }
            loop_err = loop_err.max((acc - out.get(&[ch, i])).abs());
        }
    }
    ensure(loop_err <= 1e-9, || format!("per-position loop differs by {loop_err:e}"))?;

    let map = uniform(&mut r, &[5, 4, 7]);
    let mut gp = GcbParams::random(5, 2, 0.3, 9);
    gp.key_weight = vec![0.0; 5];
    let (_, pooled) = context_pool(&map, &gp).map_err(|e| e.to_string())?;
    let mut pool_err: f64 = 0.0;
    for (ch, v) in pooled.iter().enumerate() {
        let mean = (0..4).flat_map(|y| (0..7).map(move |x| (y, x))).map(|(y, x)| map.at3(ch, y, x)).sum::<f64>() / 28.0;
        pool_err = pool_err.max((v - mean).abs());
    }
    ensure(pool_err <= 1e-9, || format!("uniform-key pooling differs from mean by {pool_err:e}"))?;
    Ok(format!("row err {row_err:.1e}, loop err {loop_err:.1e}, pooling err {pool_err:.1e}"))
}

// 8 ────────────────────────────────────────────────────────────────────────

/// Box with quarter-pixel coordinates so every IoU is computed exactly.
fn quarter_box(r: &mut ChaCha8Rng, w: usize, h: usize) -> BBox {
    let mut q = |hi: usize| r.random_range(0..=4 * hi) as f64 / 4.0;
    let (a, b, c, d) = (q(w), q(h), q(w), q(h));
    BBox::new(a.min(c), b.min(d), a.max(c), b.max(d))
}

fn box_dist(a: &[BBox], b: &[BBox]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p.x1 - q.x1).abs().max((p.y1 - q.y1).abs()).max((p.x2 - q.x2).abs()).max((p.y2 - q.y2).abs()))
        .fold(0.0, f64::max)
}

fn pairwise_iou(b: &[BBox]) -> Vec<f64> {
    b.iter().flat_map(|p| b.iter().map(move |q| iou(p, q))).collect()
}

fn augmentation_algebra() -> Outcome {
    let mut r = rng(8);
    for _ in 0..50 {
        let (w, h) = (r.random_range(3..=17), r.random_range(3..=17));
        let image = uniform(&mut r, &[3, h, w]);
        let n = r.random_range(1..=6);
        let boxes: Vec<BBox> = (0..n).map(|_| quarter_box(&mut r, w, h)).collect();
        let s = Sample::new(image, boxes, (0..n as u32).collect()).map_err(|e| e.to_string())?;
        let base = pairwise_iou(&s.boxes);

        for (name, twice) in [("hflip", hflip(&hflip(&s))), ("vflip", vflip(&vflip(&s)))] {
            ensure(twice.image == s.image, || format!("{name} twice changed the image"))?;
            let d = box_dist(&twice.boxes, &s.boxes);
            ensure(d <= 1e-12, || format!("{name} twice moved boxes by {d:e}"))?;
        }
        let mut turned = s.clone();
        for k in 1..=4 {
            turned = rotate90(&turned, 1).map_err(|e| e.to_string())?;
            if k < 4 {
                ensure(pairwise_iou(&turned.boxes) == base, || format!("IoU changed after {k} quarter turns"))?;
            }
        }
        ensure(turned.image == s.image, || "four quarter turns changed the image".into())?;
        let d = box_dist(&turned.boxes, &s.boxes);
        ensure(d <= 1e-12, || format!("four quarter turns moved boxes by {d:e}"))?;
        for (name, t) in [("hflip", hflip(&s)), ("vflip", vflip(&s))] {
            ensure(pairwise_iou(&t.boxes) == base, || format!("IoU changed under {name}"))?;
        }
    }
    Ok("flip involutions and 4-cycle bit-exact; IoU invariant on 50 samples".into())
}

// 9 ────────────────────────────────────────────────────────────────────────

fn dataset(images: &[(u32, u32, u64)], anns: &[(u64, u32, [f64; 4], bool)], cats: &[u32]) -> Dataset {
    Dataset {
        images: images
            .iter()
            .map(|&(w, h, id)| Image {
                id,
                width: w,
                height: h,
                file_name: format!("{id}.png"),
            })
            .collect(),
        annotations: anns
            .iter()
            .enumerate()
            .map(|(i, &(image_id, category_id, bbox, iscrowd))| Annotation {
                id: i as u64 + 1,
                image_id,
                category_id,
                bbox,
                iscrowd,
            })
            .collect(),
        categories: cats
            .iter()
            .map(|&id| Category {
                id,
                name: format!("class{id}"),
            })
            .collect(),
    }
}

fn sampler_balance() -> Outcome {
    let images: Vec<(u32, u32, u64)> = (0..11).map(|i| (10, 10, i)).collect();
    let anns: Vec<(u64, u32, [f64; 4], bool)> = (0..11)
        .map(|i| (i, if i < 10 { 1 } else { 2 }, [0.0, 0.0, 5.0, 5.0], false))
        .collect();
    let ds = dataset(&images, &anns, &[1, 2]);
    let draws = instance_balanced_sample(&ds, 100_000, 9).map_err(|e| e.to_string())?;
    let rare = draws.iter().filter(|&&i| i == 10).count() as f64 / draws.len() as f64;
    let common = 1.0 - rare;
    ensure((0.45..=0.55).contains(&rare) && (0.45..=0.55).contains(&common), || {
        format!("class proportions {common:.4} / {rare:.4}")
    })?;
    Ok(format!("class proportions {common:.4} / {rare:.4} over 10^5 draws"))
}

// 10 ───────────────────────────────────────────────────────────────────────

/// Evaluator written directly from the COCO protocol (single area range,
/// no detection cap): per class and threshold, greedy matching per image,
/// crowd matches ignored, 101-point interpolated precision.
fn brute_force_eval(ds: &Dataset, dets: &[ResultRecord], thresholds: &[f64]) -> (BTreeMap<u32, Vec<Option<f64>>>, f64) {
    let xyxy = |b: [f64; 4]| (b[0], b[1], b[0] + b[2], b[1] + b[3]);
    let overlap = |d: [f64; 4], g: [f64; 4], crowd: bool| {
        let (a, b) = (xyxy(d), xyxy(g));
        let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
        let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
        let inter = iw * ih;
        let ad = d[2] * d[3];
        let union = if crowd { ad } else { ad + g[2] * g[3] - inter };
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    };
    let mut per_class = BTreeMap::new();
    for cat in &ds.categories {
        let npig = ds.annotations.iter().filter(|a| a.category_id == cat.id && !a.iscrowd).count();
        let mut aps = Vec::new();
        for &t in thresholds {
            let mut scored: Vec<(f64, bool)> = Vec::new();
            for im in &ds.images {
                // Non-crowd first, as the reference protocol orders them.
                let mut gts: Vec<&Annotation> = ds.annotations.iter().filter(|a| a.image_id == im.id && a.category_id == cat.id).collect();
                gts.sort_by_key(|a| a.iscrowd);
                let mut ds_: Vec<&ResultRecord> = dets.iter().filter(|d| d.image_id == im.id && d.category_id == cat.id).collect();
                ds_.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                let mut taken = vec![false; gts.len()];
                for d in ds_ {
                    let mut best_iou = t;
                    let mut m: Option<usize> = None;
                    for (g, gt) in gts.iter().enumerate() {
                        if taken[g] && !gt.iscrowd {
                            continue;
                        }
                        if let Some(mm) = m {
                            if !gts[mm].iscrowd && gt.iscrowd {
                                break;
                            }
                        }
                        let v = overlap(d.bbox, gt.bbox, gt.iscrowd);
                        if v < best_iou {
                            continue;
                        }
                        best_iou = v;
                        m = Some(g);
                    }
                    match m {
                        Some(g) if gts[g].iscrowd => {}
                        Some(g) => {
                            taken[g] = true;
                            scored.push((d.score, true));
                        }
                        None => scored.push((d.score, false)),
                    }
                }
            }
            if npig == 0 {
                aps.push(if scored.is_empty() { None } else { Some(0.0) });
                continue;
            }
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let (mut tp, mut fp) = (0.0, 0.0);
            let mut rc = Vec::new();
            let mut pr = Vec::new();
            for &(_, hit) in &scored {
                if hit {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
                rc.push(tp / npig as f64);
                pr.push(tp / (tp + fp));
            }
            for i in (1..pr.len()).rev() {
                if pr[i] > pr[i - 1] {
                    pr[i - 1] = pr[i];
                }
            }
            let mut sum = 0.0;
            for k in 0..101 {
                let thr = k as f64 / 100.0;
                if let Some(i) = rc.iter().position(|&v| v >= thr) {
                    sum += pr[i];
                }
            }
            aps.push(Some(sum / 101.0));
        }
        per_class.insert(cat.id, aps);
    }
    let class_means: Vec<f64> = per_class
        .values()
        .filter(|v| v.iter().all(Option::is_some))
        .map(|v| v.iter().flatten().sum::<f64>() / v.len() as f64)
        .collect();
    let map = if class_means.is_empty() { 0.0 } else { class_means.iter().sum::<f64>() / class_means.len() as f64 };
    (per_class, map)
}

fn random_fixture(r: &mut ChaCha8Rng) -> (Dataset, Vec<ResultRecord>) {
    let cats = [1, 2, 3];
    let images: Vec<(u32, u32, u64)> = (0..3).map(|i| (200, 200, 10 + i)).collect();
    let mut anns = Vec::new();
    let mut dets = Vec::new();
    for &(_, _, id) in &images {
        for &c in &cats {
            for _ in 0..r.random_range(0..5) {
                let g = [r.random_range(0.0..150.0), r.random_range(0.0..150.0), r.random_range(5.0..50.0), r.random_range(5.0..50.0)];
                let crowd = r.random_bool(0.1);
                anns.push((id, c, g, crowd));
                for _ in 0..r.random_range(0..3) {
                    let j = |r: &mut ChaCha8Rng, v: f64, s: f64| v + s * r.random_range(-0.3..0.3);
                    dets.push(ResultRecord {
                        image_id: id,
                        category_id: c,
                        bbox: [j(r, g[0], g[2]), j(r, g[1], g[3]), g[2] * r.random_range(0.7..1.3), g[3] * r.random_range(0.7..1.3)],
                        score: r.random(),
                    });
                }
            }
            for _ in 0..r.random_range(0..3) {
                dets.push(ResultRecord {
                    image_id: id,
                    category_id: c,
                    bbox: [r.random_range(0.0..150.0), r.random_range(0.0..150.0), r.random_range(5.0..50.0), r.random_range(5.0..50.0)],
                    score: r.random(),
                });
            }
        }
    }
    (dataset(&images, &anns, &cats), dets)
}

fn evaluator() -> Outcome {
    let one = dataset(&[(200, 200, 1)], &[(1, 1, [0.0, 0.0, 100.0, 100.0], false)], &[1]);
    let rec = |bbox| ResultRecord {
        image_id: 1,
        category_id: 1,
        bbox,
        score: 1.0,
    };
    let params = EvalParams::default();
    let perfect = map_50_95(&[rec([0.0, 0.0, 100.0, 100.0])], &one, &params).map_err(|e| e.to_string())?;
    ensure(perfect.map == 1.0, || format!("perfect detections gave {}", perfect.map))?;
    let shifted = map_50_95(&[rec([0.0, 0.0, 72.0, 100.0])], &one, &params).map_err(|e| e.to_string())?;
    ensure(shifted.map == 0.5, || format!("IoU-0.72 fixture gave {}", shifted.map))?;

    let mut r = rng(10);
    for trial in 0..20 {
        let (ds, dets) = random_fixture(&mut r);
        let got = map_50_95(&dets, &ds, &params).map_err(|e| e.to_string())?;
        let (want, want_map) = brute_force_eval(&ds, &dets, &params.iou_thresholds);
        for c in &got.classes {
            ensure(want[&c.category_id] == c.ap_per_threshold, || {
                format!("trial {trial} class {}: {:?} vs {:?}", c.category_id, c.ap_per_threshold, want[&c.category_id])
            })?;
        }
        ensure(got.map == want_map, || format!("trial {trial}: mAP {} vs {want_map}", got.map))?;
    }
    Ok("perfect 1.0, IoU-0.72 fixture 0.5, 20/20 random fixtures identical to brute force".into())
}

// 11 ───────────────────────────────────────────────────────────────────────

fn schedule() -> Outcome {
    let cfg = ScheduleConfig::default();
    let first_iter = |epoch: u64| (epoch - 1) * cfg.iters_per_epoch;
    let checks = [
        (cfg.warmup_iters, 0.005),
        (first_iter(8) - 1, 0.005),
        (first_iter(8), 0.0005),
        (first_iter(11) - 1, 0.0005),
        (first_iter(11), 0.0001),
        (first_iter(12), 0.0001),
    ];
    for (iter, want) in checks {
        let got = lr_at(iter, &cfg);
        ensure(got == want, || format!("lr_at({iter}) = {got}, want {want}"))?;
    }
    Ok("0.005 / 0.0005 / 0.0001 at epochs 1 / 8 / 11 exactly".into())
}

// 12 ───────────────────────────────────────────────────────────────────────

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_detcore"))
        .args(args)
        .output()
        .map_err(|e| format!("cannot spawn detcore: {e}"))?;
    if !out.status.success() {
        return Err(format!("detcore {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), String> {
    std::fs::write(path, bytes).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name);
    let (ds, dets) = random_fixture(&mut rng(12));
    write(&p("ann.json"), serde_json::to_string(&ds).unwrap().as_bytes())?;
    write(&p("dets.json"), serde_json::to_string(&dets).unwrap().as_bytes())?;

    let one = dataset(&[(12, 9, 1)], &[(1, 1, [1.0, 2.0, 5.0, 4.0], false), (1, 2, [6.0, 0.0, 3.0, 3.0], false)], &[1, 2]);
    write(&p("one.json"), serde_json::to_string(&one).unwrap().as_bytes())?;
    let mut ppm = b"P6\n12 9\n255\n".to_vec();
    ppm.extend((0..12 * 9 * 3).map(|i| (i * 7 % 256) as u8));
    write(&p("img.ppm"), &ppm)?;
    write(
        &p("cfg.json"),
        br#"{"augment": {"chain": [{"op": "random_hflip", "p": 0.5}, {"op": "random_rotate90"},
             {"op": "bbox_jitter", "magnitude": 0.1}, {"op": "resize", "width": 20, "height": 15}]},
             "cascade": {"simulation": {"num_gts": 4, "proposals_per_gt": 16}}}"#,
    )?;

    let s = |path: std::path::PathBuf| path.to_string_lossy().into_owned();
    let (ann, det, one_ann, img, cfg) = (s(p("ann.json")), s(p("dets.json")), s(p("one.json")), s(p("img.ppm")), s(p("cfg.json")));
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("eval", vec!["eval".into(), "--ann".into(), ann.clone(), "--dets".into(), det.clone(), "--json".into()]),
        ("nms", vec!["nms".into(), "--dets".into(), det.clone()]),
        ("soft nms", vec!["nms".into(), "--dets".into(), det.clone(), "--soft".into(), "--method".into(), "gaussian".into()]),
        ("anchors", vec!["anchors".into(), "--width".into(), "64".into(), "--height".into(), "48".into()]),
        ("simulate-cascade", vec!["simulate-cascade".into(), "--config".into(), cfg.clone(), "--seed".into(), "3".into()]),
        ("lr-dump", vec!["lr-dump".into(), "--iters".into(), "2000".into(), "--iters-per-epoch".into(), "100".into()]),
        ("gradcheck", vec!["gradcheck".into(), "--instances".into(), "3".into(), "--seed".into(), "5".into()]),
    ];
    for (name, args) in &commands {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let a = run_cli(&args)?;
        let b = run_cli(&args)?;
        ensure(!a.is_empty() && a == b, || format!("{name} output differs between runs"))?;
    }
    let mut outputs = Vec::new();
    for run in 0..2 {
        let (oi, oa) = (s(p(&format!("out{run}.png"))), s(p(&format!("out{run}.json"))));
        run_cli(&["augment", "--image", &img, "--ann", &one_ann, "--config", &cfg, "--seed", "17", "--out-image", &oi, "--out-ann", &oa])?;
        let image = std::fs::read(&oi).map_err(|e| e.to_string())?;
        // File names differ by construction; compare everything else.
        let json = std::fs::read_to_string(&oa).map_err(|e| e.to_string())?.replace(&format!("out{run}.png"), "out.png");
        outputs.push((image, json));
    }
    ensure(outputs[0] == outputs[1], || "augment output differs between runs".into())?;
    Ok(format!("{} subcommand invocations byte-identical across runs", commands.len() + 1))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("geometry round-trip", geometry_round_trip),
        ("IoU-family order", iou_family_order),
        ("smooth-L1 exactness", smooth_l1_exactness),
        ("suppression oracle", suppression_oracle),
        ("deformable kernels", deformable_kernels),
        ("cascade quality", cascade_quality),
        ("attention / context block", attention_and_context),
        ("augmentation algebra", augmentation_algebra),
        ("sampler balance", sampler_balance),
        ("evaluator", evaluator),
        ("schedule", schedule),
        ("CLI determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("acceptance {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("acceptance {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
