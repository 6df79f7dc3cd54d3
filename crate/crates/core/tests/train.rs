use gcdet::train::{param_groups, Sgd, BEST_CHECKPOINT, HISTORY_CSV, LAST_CHECKPOINT, MOMENTUM_PREFIX};
use gcdet::{
    build_detector, lr_schedule, run_training_on, synth_generate, Checkpoint, Detector, DetectorConfig, Error,
    ImageSample, ModelSize, SynthConfig, Tensor, TrainConfig,
};

fn synth(n: usize, seed: u64) -> Vec<ImageSample> {
    synth_generate(&SynthConfig { num_images: n, image_size: 64, seed, ..Default::default() }).unwrap()
}

fn small_cfg(gc: bool) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        // constant, moderate rate: early steps raise the classification term
        // while the box targets are still poor
        lr0: 0.005,
        lrf: 1.0,
        warmup_epochs: 0.0,
        image_size: 64,
        detector: DetectorConfig::new(ModelSize::S, gc).with_classes(3),
        ..Default::default()
    }
}

#[test]
fn lr_schedule_shape() {
    let cfg = TrainConfig { epochs: 10, warmup_epochs: 3.0, ..Default::default() };
    let lr: Vec<f64> = (0..10).map(|e| lr_schedule(&cfg, e).unwrap()).collect();
    assert!((lr[0] - 0.001).abs() < 1e-15);
    assert!((lr[3] - 0.01).abs() < 1e-15);
    assert!((lr[9] - 0.0001).abs() < 1e-15);
    assert!(lr[..4].windows(2).all(|w| w[1] > w[0]));
    assert!(lr[3..].windows(2).all(|w| w[1] < w[0]));
    assert!(lr_schedule(&cfg, 10).is_err());
    let short = TrainConfig { epochs: 2, warmup_epochs: 3.0, ..Default::default() };
    assert!(lr_schedule(&short, 1).unwrap() < short.lr0);
    let one = TrainConfig { epochs: 1, warmup_epochs: 0.0, ..Default::default() };
    assert_eq!(lr_schedule(&one, 0).unwrap(), one.lr0);
}

#[test]
fn parameter_groups() {
    let det = build_detector(DetectorConfig::new(ModelSize::S, true), 0).unwrap();
    let g = param_groups(&det);
    let total = det.all_params().len();
    assert_eq!(g.decay.len() + g.no_decay.len() + g.buffers.len(), total);
    assert!(g.decay.iter().all(|n| n.ends_with(".weight")));
    assert!(g.decay.iter().all(|n| !n.contains(".bn.")));
    assert!(g.no_decay.iter().any(|n| n.ends_with("bn.weight")));
    assert!(g.no_decay.iter().any(|n| n.ends_with(".bias")));
    // GC layer-norm affine terms are not decayed
    assert!(g.no_decay.iter().any(|n| n.contains("channel_add.1.weight")));
    assert!(g.decay.iter().any(|n| n.contains("channel_add.0.weight")));
    assert!(g.buffers.iter().all(|n| n.contains("running_")));
    assert!(!g.buffers.is_empty());
}

#[test]
fn sgd_update_rule() {
    let mut det = build_detector(DetectorConfig::new(ModelSize::S, false), 0).unwrap();
    let name_w = "backbone.stem.conv.weight";
    let name_b = "backbone.stem.bn.bias";
    let set = |det: &mut Detector<f32>, g: f32| {
        for (n, p) in det.all_params_mut() {
            if n == name_w || n == name_b {
                p.grad_mut().iter_mut().for_each(|v| *v = g);
            }
        }
    };
    let get = |det: &Detector<f32>, name: &str| det.all_params().into_iter().find(|(n, _)| n == name).unwrap().1.value[0];
    let (w0, b0) = (get(&det, name_w), get(&det, name_b));
    let mut opt = Sgd::new(0.9, 0.01);
    let (lr, s) = (0.1f32, 2.0f32);
    set(&mut det, 0.5);
    opt.step(&mut det, lr as f64, s as f64);
    let vw = s * 0.5 + 0.01 * w0;
    let vb = s * 0.5;
    let (w1, b1) = (get(&det, name_w), get(&det, name_b));
    assert!((w1 - (w0 - lr * vw)).abs() < 1e-7);
    assert!((b1 - (b0 - lr * vb)).abs() < 1e-7);
    det.zero_grad();
    set(&mut det, -1.0);
    opt.step(&mut det, lr as f64, s as f64);
    let vw2 = 0.9 * vw - s + 0.01 * w1;
    assert!((get(&det, name_w) - (w1 - lr * vw2)).abs() < 1e-6);
    // running statistics are never touched by the optimizer
    let rm = "backbone.stem.bn.running_mean";
    let before = get(&det, rm);
    opt.step(&mut det, 1.0, 1.0);
    assert_eq!(get(&det, rm), before);
    let state = opt.state_arrays(&det);
    assert!(state.iter().all(|a| a.name.starts_with(MOMENTUM_PREFIX) && !a.name.contains("running_")));
}

#[test]
fn short_run_lowers_loss_and_writes_artifacts() {
    let data = synth(16, 1);
    let val = synth(4, 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(true);
    let out = run_training_on(&cfg, &data, &val, Some(dir.path())).unwrap();
    let h = &out.history.epochs;
    assert_eq!(h.len(), 2);
    assert!(h.iter().all(|r| r.total.is_finite() && r.total > 0.0));
    assert!(h[1].total < h[0].total, "{h:?}");
    for f in [BEST_CHECKPOINT, LAST_CHECKPOINT, HISTORY_CSV] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join(HISTORY_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,box,cls,dfl,total,val_mAP50,lr"));

    // last checkpoint reproduces the final weights exactly and carries optimizer state
    let last = Checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert!(last.arrays.iter().any(|a| a.name.starts_with(MOMENTUM_PREFIX)));
    let restored = Detector::<f32>::load_expecting(&dir.path().join(LAST_CHECKPOINT), &cfg.detector).unwrap();
    let x = Tensor::full([1, 3, 64, 64], 0.3f32);
    assert_eq!(restored.forward_raw(&x).unwrap(), out.detector.forward_raw(&x).unwrap());
    assert_eq!(last.meta["epoch"], 2);
}

#[test]
fn training_is_deterministic() {
    let data = synth(8, 3);
    let mut cfg = small_cfg(false);
    cfg.epochs = 1;
    let a = run_training_on(&cfg, &data, &data[..2], None).unwrap();
    let b = run_training_on(&cfg, &data, &data[..2], None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
}

#[test]
fn bad_runs_are_reported() {
    let data = synth(4, 5);
    let mut cfg = small_cfg(false);
    assert!(matches!(run_training_on(&cfg, &[], &data, None), Err(Error::Empty(_))));
    cfg.epochs = 0;
    assert!(matches!(run_training_on(&cfg, &data, &data, None), Err(Error::Config(_))));
    cfg.epochs = 3;
    cfg.image_size = 50;
    assert!(matches!(run_training_on(&cfg, &data, &data, None), Err(Error::Config(_))));
    cfg.image_size = 64;
    cfg.lr0 = 1e12;
    cfg.grad_clip = 1e12;
    cfg.batch_size = 2;
    match run_training_on(&cfg, &data, &data, None) {
        Err(Error::Diverged { .. }) => {}
        Err(e) => panic!("expected divergence, got {e}"),
        Ok(o) => panic!("expected divergence, got {:?}", o.history),
    }
}
