use gcdet::detector::{decode_cell, softmax, Anchor, STRIDES};
use gcdet::{
    build_detector, decode_boxes, gc_param_count, Checkpoint, Detector, DetectorConfig, Error, ModelSize, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(n: usize, side: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, 3, side, side], |_| rng.gen_range(0.0..1.0))
}

fn params(size: ModelSize, gc: bool) -> usize {
    build_detector(DetectorConfig::new(size, gc), 0).unwrap().count_params()
}

#[test]
fn gc_block_count_and_widths() {
    let off = build_detector(DetectorConfig::new(ModelSize::L, false), 0).unwrap();
    assert_eq!(off.gc_blocks().len(), 0);
    let on = build_detector(DetectorConfig::new(ModelSize::L, true), 0).unwrap();
    let widths: Vec<usize> = on.gc_blocks().iter().map(|g| g.channels()).collect();
    assert_eq!(widths, [512, 256, 512, 512]);
}

#[test]
fn param_counts_match_reference_table() {
    let expected = [
        (ModelSize::S, 11.13e6, 11.24e6),
        (ModelSize::M, 25.84e6, 26.03e6),
        (ModelSize::L, 43.61e6, 43.85e6),
    ];
    for (size, base, with_gc) in expected {
        let (b, g) = (params(size, false), params(size, true));
        assert!((b as f64 / base - 1.0).abs() <= 0.01, "{size} baseline {b}");
        assert!((g as f64 / with_gc - 1.0).abs() <= 0.01, "{size} +GC {g}");
        let delta = (g - b) as f64;
        assert!((0.05e6..=0.35e6).contains(&delta), "{size} delta {delta}");
    }
}

#[test]
fn gc_delta_is_sum_of_block_counts() {
    for size in ModelSize::ALL {
        let on = build_detector(DetectorConfig::new(size, true), 1).unwrap();
        let off = build_detector(DetectorConfig::new(size, false), 1).unwrap();
        let sum: usize = on.gc_blocks().iter().map(|g| gc_param_count(g.channels(), 8)).sum();
        assert_eq!(on.count_params() - off.count_params(), sum);
    }
}

#[test]
fn flop_overhead_is_small_and_positive() {
    for size in ModelSize::ALL {
        let on = build_detector(DetectorConfig::new(size, true), 0).unwrap();
        let off = build_detector(DetectorConfig::new(size, false), 0).unwrap();
        let (a, b) = (on.estimate_flops(1024), off.estimate_flops(1024));
        assert!(a > b && (a - b) < 0.01 * b, "{size}: {a} vs {b}");
        // FLOPs scale with input area
        let r = off.estimate_flops(640) / off.estimate_flops(320);
        assert!((r - 4.0).abs() < 1e-9);
    }
}

#[test]
fn flops_at_640_match_reference_profile() {
    // The reference profiler reports 28.6 / 79.1 / 165.4 GFLOPs at 640.
    for (size, g) in [(ModelSize::S, 28.6e9), (ModelSize::M, 79.1e9), (ModelSize::L, 165.4e9)] {
        let f = build_detector(DetectorConfig::new(size, false), 0).unwrap().estimate_flops(640);
        assert!((f / g - 1.0).abs() < 0.05, "{size}: {f}");
    }
}

#[test]
fn same_seed_same_weights() {
    let a = build_detector(DetectorConfig::new(ModelSize::S, true), 42).unwrap();
    let b = build_detector(DetectorConfig::new(ModelSize::S, true), 42).unwrap();
    let c = build_detector(DetectorConfig::new(ModelSize::S, true), 43).unwrap();
    let va: Vec<_> = a.all_params().iter().map(|(n, p)| (n.clone(), p.value.clone())).collect();
    let vb: Vec<_> = b.all_params().iter().map(|(n, p)| (n.clone(), p.value.clone())).collect();
    let vc: Vec<_> = c.all_params().iter().map(|(n, p)| (n.clone(), p.value.clone())).collect();
    assert_eq!(va, vb);
    assert_ne!(va, vc);
}

#[test]
fn gc_identity_at_init() {
    let on = build_detector(DetectorConfig::new(ModelSize::S, true), 5).unwrap();
    let off = build_detector(DetectorConfig::new(ModelSize::S, false), 5).unwrap();
    for s in 0..2 {
        let x = random_images(1, 64, s);
        assert_eq!(on.forward_raw(&x).unwrap(), off.forward_raw(&x).unwrap());
    }
}

#[test]
fn output_scales() {
    let det = build_detector(DetectorConfig::new(ModelSize::S, true), 0).unwrap();
    let raw = det.forward_raw(&random_images(2, 96, 0)).unwrap();
    let grids: Vec<_> = raw.scales.iter().map(|s| (s.stride, s.cls.h(), s.dfl.w())).collect();
    assert_eq!(grids, [(8, 12, 12), (16, 6, 6), (32, 3, 3)]);
    assert_eq!(raw.scales[0].cls.c(), 9);
    assert_eq!(raw.scales[2].dfl.c(), 64);
    assert_eq!(raw.batch(), 2);
}

#[test]
fn shape_error_names_dimension() {
    let det = build_detector(DetectorConfig::new(ModelSize::S, false), 0).unwrap();
    let x = Tensor::<f32>::zeros([1, 3, 64, 100]);
    match det.forward_raw(&x) {
        Err(Error::Shape(m)) => assert!(m.contains("width 100"), "{m}"),
        other => panic!("expected shape error, got {other:?}"),
    }
    let x = Tensor::<f32>::zeros([1, 3, 100, 100]);
    assert!(matches!(det.forward_raw(&x), Err(Error::Shape(m)) if m.contains("height 100")));
}

#[test]
fn invalid_size_is_config_error() {
    assert!(matches!("XL".parse::<ModelSize>(), Err(Error::Config(_))));
    let cfg = DetectorConfig::new(ModelSize::S, false).with_classes(0);
    assert!(matches!(build_detector(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn decode_matches_loop_oracle() {
    let det = build_detector(DetectorConfig::new(ModelSize::S, false).with_classes(2), 0).unwrap();
    let mut raw = det.forward_raw(&random_images(1, 32, 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for s in &mut raw.scales {
        s.dfl.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
    }
    let s = &raw.scales[0];
    assert_eq!((s.cls.h(), s.cls.w()), (4, 4));
    for y in 0..2 {
        for x in 0..2 {
            let a = Anchor {
                scale: 0,
                y,
                x,
                stride: 8.0,
                cx: x as f64 * 8.0 + 4.0,
                cy: y as f64 * 8.0 + 4.0,
            };
            let b = decode_cell(&raw, 0, &a);
            for side in 0..4 {
                let logits: Vec<f64> = (0..16).map(|k| s.dfl.get(0, side * 16 + k, y, x) as f64).collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                let mut e = 0.0;
                for (k, l) in logits.iter().enumerate() {
                    e += k as f64 * (l - m).exp() / z;
                }
                let d = 8.0 * e;
                let want = match side {
                    0 => a.cx - d,
                    1 => a.cy - d,
                    2 => a.cx + d,
                    _ => a.cy + d,
                };
                assert!((b[side] - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
        }
    }
    assert!((softmax(&[0.0, 0.0]).iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn decode_threshold_monotone() {
    let det = build_detector(DetectorConfig::new(ModelSize::S, false), 3).unwrap();
    let mut raw = det.forward_raw(&random_images(1, 64, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for s in &mut raw.scales {
        s.cls.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-4.0..4.0));
    }
    let mut prev = usize::MAX;
    for t in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
        let n = decode_boxes(&raw, t).len();
        assert!(n <= prev);
        prev = n;
    }
    let all = decode_boxes(&raw, 0.0);
    assert_eq!(all.len(), 64 + 16 + 4);
    assert!(all.iter().all(|d| d.bbox[0] >= 0.0 && d.bbox[2] <= 64.0 && d.bbox[0] <= d.bbox[2]));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let det = build_detector(DetectorConfig::new(ModelSize::S, true), 11).unwrap();
    let x = random_images(1, 32, 2);
    let before = det.forward_raw(&x).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    det.to_checkpoint().save(&path).unwrap();
    let loaded = Detector::<f32>::load_expecting(&path, det.config()).unwrap();
    assert_eq!(loaded.forward_raw(&x).unwrap(), before);

    let other = DetectorConfig::new(ModelSize::S, false);
    assert!(matches!(Detector::<f32>::load_expecting(&path, &other), Err(Error::Checkpoint(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    bytes[0] = b'G';
    bytes.truncate(bytes.len() - 1);
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn strides_fixed() {
    assert_eq!(STRIDES, [8, 16, 32]);
}
