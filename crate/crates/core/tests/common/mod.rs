//! Reference implementations shared by the integration tests and the
//! acceptance harness. Each one is written from the definition, with plain
//! loops and no calls into the code under test.

#![allow(dead_code)]

use gcdet::assign::{assign_targets, detection_loss, detection_loss_with_grad, AssignConfig, LossConfig};
use gcdet::detector::{decode_cell, Anchor, ScaleOutput};
use gcdet::nn::Module;
use gcdet::{gc_forward, Detection, GcBlock, GcConfig, GroundTruth, GtBox, Mode, RawPredictions, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let inter = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0) * (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 { inter / union } else { 0.0 }
}

pub fn det(img: &str, class_id: usize, confidence: f64, bbox: [f64; 4]) -> Detection {
    Detection { bbox, class_id, confidence, image_id: img.into() }
}

pub fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let x = rng.gen_range(0.0..80.0);
    let y = rng.gen_range(0.0..80.0);
    [x, y, x + rng.gen_range(4.0..30.0), y + rng.gen_range(4.0..30.0)]
}

pub fn jitter(b: [f64; 4], s: f64, rng: &mut ChaCha8Rng) -> [f64; 4] {
    let mut o = b;
    for v in &mut o {
        *v += rng.gen_range(-s..=s);
    }
    o[2] = o[2].max(o[0] + 1.0);
    o[3] = o[3].max(o[1] + 1.0);
    o
}

/// Random scene: a few images, GT boxes, noisy copies of some GT, duplicates
/// and pure false positives. Confidences are continuous so there are no ties.
pub fn random_instance(seed: u64) -> (Vec<Detection>, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.gen_range(1..4);
    let mut gts = GroundTruth::new();
    let mut dets = Vec::new();
    for i in 0..rng.gen_range(1..5) {
        let id = format!("im{i}");
        let boxes: Vec<GtBox> = (0..rng.gen_range(0..6))
            .map(|_| GtBox { class_id: rng.gen_range(0..classes), bbox: random_box(&mut rng) })
            .collect();
        for g in &boxes {
            for _ in 0..rng.gen_range(0..3) {
                let c = if rng.gen_bool(0.85) { g.class_id } else { rng.gen_range(0..classes + 1) };
                let b = jitter(g.bbox, rng.gen_range(0.0..8.0), &mut rng);
                dets.push(det(&id, c, rng.gen_range(0.0..1.0), b));
            }
        }
        for _ in 0..rng.gen_range(0..4) {
            let b = random_box(&mut rng);
            dets.push(det(&id, rng.gen_range(0..classes), rng.gen_range(0.0..1.0), b));
        }
        gts.insert(id, boxes);
    }
    (dets, gts)
}

/// Greedy matching in confidence order, one GT per detection.
pub fn reference_tp(dets: &[&Detection], gts: &GroundTruth, class_id: usize, t: f64) -> Vec<bool> {
    let mut used: Vec<(String, usize)> = Vec::new();
    let mut out = Vec::new();
    for d in dets {
        let mut best = None;
        let mut best_iou = -1.0;
        for (j, g) in gts[&d.image_id].iter().enumerate() {
            if g.class_id != class_id || used.contains(&(d.image_id.clone(), j)) {
                continue;
            }
            let v = box_iou(&d.bbox, &g.bbox);
            if v >= t && v > best_iou {
                best = Some(j);
                best_iou = v;
            }
        }
        if let Some(j) = best {
            used.push((d.image_id.clone(), j));
        }
        out.push(best.is_some());
    }
    out
}

pub fn reference_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut pts = Vec::new();
    let mut hits = 0.0;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1.0;
        }
        pts.push((hits / n_gt as f64, hits / (k + 1) as f64));
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = pts.iter().filter(|(rr, _)| *rr >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max);
        total += p;
    }
    total / 101.0
}

pub struct Reference {
    pub map50: f64,
    pub map50_95: f64,
    pub f1: f64,
    /// Per ground-truth class: AP at each grid threshold.
    pub class_aps: Vec<(usize, Vec<f64>)>,
}

pub fn reference_eval(dets: &[Detection], gts: &GroundTruth) -> Reference {
    let mut classes: Vec<usize> = gts.values().flatten().map(|g| g.class_id).collect();
    classes.sort();
    classes.dedup();
    let grid: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let (mut s50, mut s5095) = (0.0, 0.0);
    let mut f1_data = Vec::new();
    let mut class_aps = Vec::new();
    for &c in &classes {
        let n_gt = gts.values().flatten().filter(|g| g.class_id == c).count();
        let mut cd: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        cd.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        let aps: Vec<f64> = grid.iter().map(|&t| reference_ap(&reference_tp(&cd, gts, c, t), n_gt)).collect();
        s50 += aps[0];
        s5095 += aps.iter().sum::<f64>() / 10.0;
        class_aps.push((c, aps.clone()));
        let tp = reference_tp(&cd, gts, c, 0.5);
        f1_data.push((cd.iter().map(|d| d.confidence).collect::<Vec<_>>(), tp, n_gt));
    }
    let mut f1 = 0.0f64;
    for th in dets.iter().map(|d| d.confidence) {
        let mut sum = 0.0;
        for (conf, tp, n_gt) in &f1_data {
            let kept = conf.iter().filter(|&&c| c >= th).count();
            let hits = tp.iter().zip(conf).filter(|(&t, &c)| t && c >= th).count() as f64;
            if hits > 0.0 {
                let (p, r) = (hits / kept as f64, hits / *n_gt as f64);
                sum += 2.0 * p * r / (p + r);
            }
        }
        if !f1_data.is_empty() {
            f1 = f1.max(sum / f1_data.len() as f64);
        }
    }
    let n = classes.len().max(1) as f64;
    Reference { map50: s50 / n, map50_95: s5095 / n, f1, class_aps }
}

pub fn reference_nms(dets: &[Detection], t: f64) -> Vec<Detection> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut out = Vec::new();
    while !alive.is_empty() {
        let mut top = alive[0];
        for &i in &alive {
            if dets[i].confidence > dets[top].confidence {
                top = i;
            }
        }
        let keep = &dets[top];
        alive.retain(|&i| {
            i != top
                && !(dets[i].image_id == keep.image_id
                    && dets[i].class_id == keep.class_id
                    && box_iou(&dets[i].bbox, &keep.bbox) > t)
        });
        out.push(keep.clone());
    }
    out
}


/// `|a - b|` relative to the larger magnitude, floored so gradients that are
/// zero up to rounding do not blow the ratio up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// GC block with every weight non-trivial, the final conv included.
pub fn perturbed_gc_block(c: usize, r: usize, seed: u64) -> GcBlock<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GcBlock::new(GcConfig::new(c, r).unwrap(), &mut rng);
    let w = &mut b.weights;
    for v in w.expand_weight.value.iter_mut().chain(&mut w.expand_bias.value) {
        *v = rng.gen_range(-0.8..0.8);
    }
    for v in w.norm_scale.value.iter_mut() {
        *v = rng.gen_range(0.5..1.5);
    }
    for v in w.norm_shift.value.iter_mut() {
        *v = rng.gen_range(-0.3..0.3);
    }
    b
}

/// Position-by-position evaluation of the block from its definition.
pub fn gc_loop_oracle(x: &Tensor<f64>, b: &GcBlock<f64>) -> Tensor<f64> {
    let w8 = &b.weights;
    let [n, c, h, w] = x.shape();
    let width = b.cfg.bottleneck();
    let mut out = x.clone();
    for ni in 0..n {
        let mut logits = Vec::new();
        for y in 0..h {
            for xx in 0..w {
                let mut s = w8.mask_bias.value[0];
                for ci in 0..c {
                    s += w8.mask_weight.value[ci] * x.get(ni, ci, y, xx);
                }
                logits.push(s);
            }
        }
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        let alpha: Vec<f64> = logits.iter().map(|l| l.exp() / denom).collect();
        let mut ctx = vec![0.0; c];
        for (ci, cv) in ctx.iter_mut().enumerate() {
            for y in 0..h {
                for xx in 0..w {
                    *cv += alpha[y * w + xx] * x.get(ni, ci, y, xx);
                }
            }
        }
        let z: Vec<f64> = (0..width)
            .map(|k| w8.reduce_bias.value[k] + (0..c).map(|ci| w8.reduce_weight.value[k * c + ci] * ctx[ci]).sum::<f64>())
            .collect();
        let mean = z.iter().sum::<f64>() / width as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
        let hid: Vec<f64> = (0..width)
            .map(|k| ((z[k] - mean) / (var + 1e-5).sqrt() * w8.norm_scale.value[k] + w8.norm_shift.value[k]).max(0.0))
            .collect();
        for ci in 0..c {
            let t = w8.expand_bias.value[ci] + (0..width).map(|k| w8.expand_weight.value[ci * width + k] * hid[k]).sum::<f64>();
            for y in 0..h {
                for xx in 0..w {
                    let v = out.get(ni, ci, y, xx) + t;
                    out.set(ni, ci, y, xx, v);
                }
            }
        }
    }
    out
}

/// Worst relative error of the GC backward pass (input and every weight)
/// against central differences with step `1e-4` on a `(1, c, 3, 3)` input.
pub fn gc_gradient_error(c: usize, ratio: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let block = perturbed_gc_block(c, ratio, seed);
    let x = Tensor::from_fn([1, c, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let r = Tensor::from_fn([1, c, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let objective = |b: &GcBlock<f64>, x: &Tensor<f64>| -> f64 {
        let y = gc_forward(x, &b.cfg, &b.weights).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = block.forward(&x, Mode::Train).unwrap();
    let mut trained = block.clone();
    let gx = trained.backward(cache.unwrap(), &r);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let fd = (objective(&block, &xp) - objective(&block, &xm)) / (2.0 * h);
        worst = worst.max(rel_err(fd, gx.data()[i]));
    }
    let mut named = Vec::new();
    trained.params("gc", &mut named);
    let grads: Vec<(String, Vec<f64>)> =
        named.into_iter().map(|(n, p)| (n, p.grad().expect("gradient").to_vec())).collect();
    assert_eq!(grads.len(), 8);
    for (name, g) in &grads {
        for (j, &gj) in g.iter().enumerate() {
            let bump = |d: f64| {
                let mut m = block.clone();
                let mut ps = Vec::new();
                m.params_mut("gc", &mut ps);
                ps.into_iter().find(|(n, _)| n == name).unwrap().1.value[j] += d;
                objective(&m, &x)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            worst = worst.max(rel_err(fd, gj));
        }
    }
    worst
}

/// Random single-scale head output with `nc` classes and `rm` bins per side.
pub fn random_raw(h: usize, w: usize, nc: usize, rm: usize, seed: u64, spread: f64) -> RawPredictions<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = move |_| rng.gen_range(-spread..spread);
    let scale = ScaleOutput {
        stride: 8,
        cls: Tensor::from_fn([1, nc, h, w], &mut draw),
        dfl: Tensor::from_fn([1, 4 * rm, h, w], &mut draw),
    };
    RawPredictions::new(vec![scale], nc, rm).unwrap()
}

/// Worst relative error of the loss gradient with respect to every raw
/// output, central differences with step `1e-5`.
pub fn loss_gradient_error(seed: u64) -> f64 {
    let raw = random_raw(6, 6, 2, 8, seed, 1.5);
    let gts = vec![
        GtBox { class_id: 0, bbox: [3.0, 5.0, 30.0, 27.0] },
        GtBox { class_id: 1, bbox: [20.0, 14.0, 45.0, 44.0] },
    ];
    let cfg = LossConfig::default();
    let a = assign_targets(&raw, &[gts], &AssignConfig::default()).unwrap();
    let (_, grad) = detection_loss_with_grad(&raw, &a, &cfg).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for field in 0..2 {
        let pick = |r: &RawPredictions<f64>| if field == 0 { r.scales[0].cls.clone() } else { r.scales[0].dfl.clone() };
        let g = pick(&grad);
        for i in 0..g.len() {
            let bump = |d: f64| {
                let mut r = raw.clone();
                let t = if field == 0 { &mut r.scales[0].cls } else { &mut r.scales[0].dfl };
                t.data_mut()[i] += d;
                detection_loss(&r, &a, &cfg).unwrap().total
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            worst = worst.max(rel_err(fd, g.data()[i]));
        }
    }
    worst
}

/// Worst relative error of `decode_cell` against the softmax expectation of
/// each side's bins, over every cell of a random 5x5 output.
pub fn decode_error(seed: u64) -> f64 {
    let rm = 16;
    let raw = random_raw(5, 5, 2, rm, seed, 3.0);
    let s = &raw.scales[0];
    let mut worst: f64 = 0.0;
    for y in 0..5 {
        for x in 0..5 {
            let a = Anchor { scale: 0, y, x, stride: 8.0, cx: x as f64 * 8.0 + 4.0, cy: y as f64 * 8.0 + 4.0 };
            let got = decode_cell(&raw, 0, &a);
            for side in 0..4 {
                let logits: Vec<f64> = (0..rm).map(|k| s.dfl.get(0, side * rm + k, y, x)).collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                let e: f64 = logits.iter().enumerate().map(|(k, l)| k as f64 * l.exp() / z).sum();
                let want = match side {
                    0 => a.cx - 8.0 * e,
                    1 => a.cy - 8.0 * e,
                    2 => a.cx + 8.0 * e,
                    _ => a.cy + 8.0 * e,
                };
                worst = worst.max((got[side] - want).abs() / want.abs().max(1.0));
            }
        }
    }
    worst
}
