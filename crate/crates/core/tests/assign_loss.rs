use gcdet::assign::{assign_targets, ciou, detection_loss, detection_loss_with_grad, AssignConfig, LossConfig};
use gcdet::detector::ScaleOutput;
use gcdet::{iou, GtBox, RawPredictions, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RM: usize = 8;
const NC: usize = 2;

fn single_scale(h: usize, w: usize, seed: u64, spread: f64) -> RawPredictions<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = move |_| if spread > 0.0 { rng.gen_range(-spread..spread) } else { 0.0 };
    let scale = ScaleOutput {
        stride: 8,
        cls: Tensor::from_fn([1, NC, h, w], &mut draw),
        dfl: Tensor::from_fn([1, 4 * RM, h, w], &mut draw),
    };
    RawPredictions::new(vec![scale], NC, RM).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn oracle_decode(raw: &RawPredictions<f64>, y: usize, x: usize) -> [f64; 4] {
    let s = &raw.scales[0];
    let st = s.stride as f64;
    let (cx, cy) = ((x as f64 + 0.5) * st, (y as f64 + 0.5) * st);
    let mut d = [0.0; 4];
    for (side, dv) in d.iter_mut().enumerate() {
        let l: Vec<f64> = (0..RM).map(|k| s.dfl.get(0, side * RM + k, y, x)).collect();
        let z: f64 = l.iter().map(|v| v.exp()).sum();
        *dv = st * l.iter().enumerate().map(|(k, v)| k as f64 * v.exp() / z).sum::<f64>();
    }
    [cx - d[0], cy - d[1], cx + d[2], cy + d[3]]
}

struct OracleAssign {
    gt: Vec<Option<usize>>,
    score: Vec<f64>,
}

/// Literal application of the assignment rules over every (cell, box) pair.
fn oracle_assign(raw: &RawPredictions<f64>, gts: &[GtBox], cfg: &AssignConfig) -> OracleAssign {
    let s = &raw.scales[0];
    let (h, w) = (s.cls.h(), s.cls.w());
    let cells = h * w;
    let mut metric = vec![vec![None; cells]; gts.len()];
    let mut ious = vec![vec![0.0; cells]; gts.len()];
    for (g, gt) in gts.iter().enumerate() {
        for c in 0..cells {
            let (y, x) = (c / w, c % w);
            let (cx, cy) = ((x as f64 + 0.5) * 8.0, (y as f64 + 0.5) * 8.0);
            let b = gt.bbox;
            let inside = cx - b[0] > 1e-9 && cy - b[1] > 1e-9 && b[2] - cx > 1e-9 && b[3] - cy > 1e-9;
            if !inside {
                continue;
            }
            let o = iou(&oracle_decode(raw, y, x), &b);
            let p = sigmoid(s.cls.get(0, gt.class_id, y, x));
            ious[g][c] = o;
            metric[g][c] = Some(p.powf(cfg.alpha) * o.powf(cfg.beta));
        }
    }
    // selected[g][c]: fewer than topk candidates rank ahead of c
    let mut claims: Vec<Vec<usize>> = vec![Vec::new(); cells];
    for g in 0..gts.len() {
        for c in 0..cells {
            let Some(m) = metric[g][c] else { continue };
            let ahead = (0..cells)
                .filter(|&o| matches!(metric[g][o], Some(mo) if mo > m || (mo == m && o < c)))
                .count();
            if ahead < cfg.topk {
                claims[c].push(g);
            }
        }
    }
    let mut gt = vec![None; cells];
    for c in 0..cells {
        let mut best: Option<usize> = None;
        for &g in &claims[c] {
            if best.is_none_or(|b| ious[g][c] > ious[b][c]) {
                best = Some(g);
            }
        }
        gt[c] = best;
    }
    let mut score = vec![0.0; cells];
    for c in 0..cells {
        let Some(g) = gt[c] else { continue };
        let members: Vec<usize> = (0..cells).filter(|&o| gt[o] == Some(g)).collect();
        let max_m = members.iter().map(|&o| metric[g][o].unwrap()).fold(0.0, f64::max);
        let max_i = members.iter().map(|&o| ious[g][o]).fold(0.0, f64::max);
        score[c] = metric[g][c].unwrap() * max_i / (max_m + 1e-9);
    }
    OracleAssign { gt, score }
}

fn overlapping_pair() -> Vec<GtBox> {
    vec![
        GtBox {
            class_id: 0,
            bbox: [2.0, 3.0, 25.0, 22.0],
        },
        GtBox {
            class_id: 1,
            bbox: [9.0, 6.0, 31.0, 30.0],
        },
    ]
}

#[test]
fn assignment_matches_enumeration_oracle() {
    for seed in 0..30 {
        let raw = single_scale(4, 4, seed, 2.0);
        let gts = overlapping_pair();
        for topk in [1, 3, 10] {
            let cfg = AssignConfig {
                topk,
                ..AssignConfig::default()
            };
            let a = assign_targets(&raw, std::slice::from_ref(&gts), &cfg).unwrap();
            let o = oracle_assign(&raw, &gts, &cfg);
            assert_eq!(a.gt_index, o.gt, "seed {seed} topk {topk}");
            for (x, y) in a.target_score.iter().zip(&o.score) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }
}

#[test]
fn assignment_invariants() {
    let raw = single_scale(8, 8, 3, 2.0);
    let gts = overlapping_pair();
    let a = assign_targets(&raw, std::slice::from_ref(&gts), &AssignConfig::default()).unwrap();
    assert!(a.num_positives() > 0);
    for (k, g) in a.gt_index.iter().enumerate() {
        if let Some(g) = g {
            assert_eq!(a.target_class[k], gts[*g].class_id);
            assert_eq!(a.target_box[k], gts[*g].bbox);
            assert!(a.target_dist[k].iter().all(|&d| (0.0..=RM as f64 - 1.01 + 1e-12).contains(&d)));
        }
    }
}

#[test]
fn dominant_candidate_is_positive() {
    // one box containing only the center of cell (1, 1)
    let mut raw = single_scale(4, 4, 0, 0.0);
    let gt = GtBox {
        class_id: 1,
        bbox: [10.0, 9.0, 14.0, 15.0],
    };
    let s = &mut raw.scales[0];
    s.cls.set(0, 1, 1, 1, 8.0);
    let a = assign_targets(&raw, &[vec![gt]], &AssignConfig::default()).unwrap();
    let mask = a.positive_mask(0);
    assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
    assert!(mask[4 + 1]);
}

/// Two-bin logits whose softmax expectation is `t`.
fn encode(t: f64) -> Vec<f64> {
    let lo = t.floor() as usize;
    let wr = t - lo as f64;
    let mut v = vec![-60.0; RM];
    v[lo] = (1.0 - wr).max(1e-30).ln();
    if lo + 1 < RM {
        v[lo + 1] = wr.max(1e-30).ln();
    }
    v
}

#[test]
fn perfect_fit_limit() {
    let gt = GtBox {
        class_id: 0,
        bbox: [4.0, 6.0, 26.0, 23.0],
    };
    let mut raw = single_scale(4, 4, 0, 0.0);
    let s = &mut raw.scales[0];
    for y in 0..4 {
        for x in 0..4 {
            let (cx, cy) = (x as f64 * 8.0 + 4.0, y as f64 * 8.0 + 4.0);
            let b = gt.bbox;
            let inside = cx > b[0] && cx < b[2] && cy > b[1] && cy < b[3];
            for c in 0..NC {
                let hi = inside && c == 0;
                s.cls.set(0, c, y, x, if hi { 30.0 } else { -30.0 });
            }
            let d = [cx - b[0], cy - b[1], b[2] - cx, b[3] - cy];
            for side in 0..4 {
                for (k, l) in encode((d[side] / 8.0).clamp(0.0, RM as f64 - 1.01)).into_iter().enumerate() {
                    s.dfl.set(0, side * RM + k, y, x, l);
                }
            }
        }
    }
    let a = assign_targets(&raw, &[vec![gt]], &AssignConfig::default()).unwrap();
    assert!(a.num_positives() >= 4);
    let l = detection_loss(&raw, &a, &LossConfig::default()).unwrap();
    assert!(l.box_loss < 1e-3, "{l:?}");
    assert!(l.cls_loss < 1e-2, "{l:?}");
}

fn oracle_ciou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0) * (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let (wa, ha, wb, hb) = (a[2] - a[0], a[3] - a[1], b[2] - b[0], b[3] - b[1]);
    let iou = inter / (wa * ha + wb * hb - inter);
    let rho2 = ((a[0] + a[2]) / 2.0 - (b[0] + b[2]) / 2.0).powi(2) + ((a[1] + a[3]) / 2.0 - (b[1] + b[3]) / 2.0).powi(2);
    let c2 = (a[2].max(b[2]) - a[0].min(b[0])).powi(2) + (a[3].max(b[3]) - a[1].min(b[1])).powi(2);
    let v = 4.0 / std::f64::consts::PI.powi(2) * ((wb / hb).atan() - (wa / ha).atan()).powi(2);
    let alpha = if v == 0.0 { 0.0 } else { v / (v - iou + 1.0) };
    iou - rho2 / c2 - alpha * v
}

/// Loss recomputed with plain loops from the assignment's targets.
fn oracle_loss(raw: &RawPredictions<f64>, a: &gcdet::Assignment) -> (f64, f64, f64) {
    let s = &raw.scales[0];
    let (h, w) = (s.cls.h(), s.cls.w());
    let (mut bx, mut df, mut cl, mut pos, mut tsum) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            for c in 0..NC {
                let z = s.cls.get(0, c, y, x);
                let t = if a.gt_index[k].is_some() && a.target_class[k] == c {
                    a.target_score[k]
                } else {
                    0.0
                };
                let p = sigmoid(z);
                cl += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            }
            if a.gt_index[k].is_none() {
                continue;
            }
            pos += 1.0;
            tsum += a.target_score[k];
            bx += 1.0 - oracle_ciou(oracle_decode(raw, y, x), a.target_box[k]);
            let mut side_sum = 0.0;
            for side in 0..4 {
                let l: Vec<f64> = (0..RM).map(|j| s.dfl.get(0, side * RM + j, y, x)).collect();
                let lse = l.iter().map(|v| v.exp()).sum::<f64>().ln();
                let t = a.target_dist[k][side];
                let lo = t.floor() as usize;
                let wl = (lo + 1) as f64 - t;
                side_sum += -(wl * (l[lo] - lse) + (1.0 - wl) * (l[lo + 1] - lse));
            }
            df += side_sum / 4.0;
        }
    }
    (bx / pos, cl / tsum.max(1.0), df / pos)
}

#[test]
fn loss_matches_loop_oracle() {
    for seed in 0..10 {
        let raw = single_scale(8, 8, 100 + seed, 1.5);
        let gts = vec![
            GtBox {
                class_id: 0,
                bbox: [5.0, 7.0, 40.0, 33.0],
            },
            GtBox {
                class_id: 1,
                bbox: [30.0, 20.0, 60.0, 58.0],
            },
        ];
        let a = assign_targets(&raw, &[gts], &AssignConfig::default()).unwrap();
        assert!(a.num_positives() > 0);
        let l = detection_loss(&raw, &a, &LossConfig::default()).unwrap();
        let (b, c, d) = oracle_loss(&raw, &a);
        for (got, want) in [(l.box_loss, b), (l.cls_loss, c), (l.dfl_loss, d)] {
            assert!((got - want).abs() <= 1e-5 * want.abs(), "{got} vs {want}");
        }
        assert!((l.total - (7.5 * b + 0.5 * c + 1.5 * d)).abs() <= 1e-9 * l.total);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let raw = single_scale(6, 6, 77, 1.5);
    let gts = vec![
        GtBox {
            class_id: 0,
            bbox: [3.0, 5.0, 30.0, 27.0],
        },
        GtBox {
            class_id: 1,
            bbox: [20.0, 14.0, 45.0, 44.0],
        },
    ];
    let cfg = LossConfig::default();
    let a = assign_targets(&raw, &[gts], &AssignConfig::default()).unwrap();
    let (_, grad) = detection_loss_with_grad(&raw, &a, &cfg).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (si, field) in [(0usize, 0usize), (0, 1)] {
        let len = if field == 0 { raw.scales[si].cls.len() } else { raw.scales[si].dfl.len() };
        for i in 0..len {
            let bump = |d: f64| {
                let mut r = raw.clone();
                let t = if field == 0 { &mut r.scales[si].cls } else { &mut r.scales[si].dfl };
                t.data_mut()[i] += d;
                detection_loss(&r, &a, &cfg).unwrap().total
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let g = if field == 0 { grad.scales[si].cls.data()[i] } else { grad.scales[si].dfl.data()[i] };
            let err = (fd - g).abs() / fd.abs().max(1e-3);
            worst = worst.max(err);
        }
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
}

#[test]
fn assignment_translates_with_content() {
    let (h, w) = (6, 6);
    let base = single_scale(h, w, 21, 1.5);
    let mut shifted = base.clone();
    let s0 = &base.scales[0];
    let s1 = &mut shifted.scales[0];
    for y in 0..h {
        for x in 1..w {
            for c in 0..NC {
                s1.cls.set(0, c, y, x, s0.cls.get(0, c, y, x - 1));
            }
            for c in 0..4 * RM {
                s1.dfl.set(0, c, y, x, s0.dfl.get(0, c, y, x - 1));
            }
        }
    }
    let gts = vec![
        GtBox {
            class_id: 0,
            bbox: [1.0, 2.0, 22.0, 30.0],
        },
        GtBox {
            class_id: 1,
            bbox: [6.0, 12.0, 30.0, 40.0],
        },
    ];
    let moved: Vec<GtBox> = gts
        .iter()
        .map(|g| GtBox {
            class_id: g.class_id,
            bbox: [g.bbox[0] + 8.0, g.bbox[1], g.bbox[2] + 8.0, g.bbox[3]],
        })
        .collect();
    let cfg = AssignConfig::default();
    let m0 = assign_targets(&base, &[gts], &cfg).unwrap().positive_mask(0);
    let m1 = assign_targets(&shifted, &[moved], &cfg).unwrap().positive_mask(0);
    assert!(m0.iter().any(|&v| v));
    for y in 0..h {
        assert!(!m0[y * w + w - 1]);
        for x in 0..w - 1 {
            assert_eq!(m0[y * w + x], m1[y * w + x + 1], "cell ({y}, {x})");
        }
    }
}

fn boxes() -> impl Strategy<Value = [f64; 4]> {
    (-20.0..20.0f64, -20.0..20.0f64, 0.1..15.0f64, 0.1..15.0f64).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

proptest! {
    #[test]
    fn ciou_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let (ab, ba) = (ciou(&a, &b), ciou(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= iou(&a, &b) + 1e-15);
        // distance penalty < 1, aspect penalty <= 1/2
        prop_assert!(ab > -1.5 && ab <= 1.0);
        prop_assert!((ciou(&a, &a) - 1.0).abs() < 1e-12);
        prop_assert!((ab - oracle_ciou(a, b)).abs() < 1e-12);
    }

    #[test]
    fn loss_terms_non_negative(seed in 0u64..1000, x0 in 0.0..30.0f64, y0 in 0.0..30.0f64, w in 4.0..30.0f64, h in 4.0..30.0f64) {
        let raw = single_scale(8, 8, seed, 3.0);
        let gt = GtBox { class_id: (seed % 2) as usize, bbox: [x0, y0, x0 + w, y0 + h] };
        let a = assign_targets(&raw, &[vec![gt]], &AssignConfig::default()).unwrap();
        let l = detection_loss(&raw, &a, &LossConfig::default()).unwrap();
        prop_assert!(l.box_loss >= 0.0 && l.cls_loss >= 0.0 && l.dfl_loss >= 0.0);
        prop_assert!(l.is_finite());
    }
}
