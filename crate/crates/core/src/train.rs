//! SGD training loop: warmup plus linear-decay learning rate, momentum with
//! weight decay on convolution weights only, gradient-norm clipping,
//! per-epoch validation and best/last checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{compute_loss, AssignConfig, LossBreakdown, LossConfig};
use crate::data::{ground_truth, letterbox, to_batch, ImageSample};
use crate::detector::{Checkpoint, Detector, DetectorConfig, NamedArray, INPUT_MULTIPLE};
use crate::error::{Error, Result};
use crate::eval::{default_iou_grid, detect, evaluate_detections, write_file, EVAL_CONF, EVAL_IOU};
use crate::nn::{Mode, ParamKind};

pub const MOMENTUM_PREFIX: &str = "optimizer.momentum.";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_CSV: &str = "history.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`.
    pub lrf: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    /// Learning rate at the start of warmup as a fraction of `lr0`.
    pub warmup_start: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Square network input side; samples of other sizes are letterboxed.
    pub image_size: usize,
    /// Multiply gradients by the batch size before clipping.
    pub scale_grad_by_batch: bool,
    pub eval_conf: f64,
    pub eval_iou: f64,
    pub detector: DetectorConfig,
    pub assign: AssignConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr0: 0.01,
            lrf: 0.01,
            momentum: 0.937,
            weight_decay: 5e-4,
            warmup_epochs: 3.0,
            warmup_start: 0.1,
            grad_clip: 10.0,
            seed: 0,
            image_size: 1024,
            scale_grad_by_batch: true,
            eval_conf: EVAL_CONF,
            eval_iou: EVAL_IOU,
            detector: DetectorConfig::default(),
            assign: AssignConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.warmup_epochs >= 0.0 && self.grad_clip > 0.0) {
            return bad("weight_decay and warmup_epochs must be >= 0, grad_clip > 0".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(INPUT_MULTIPLE) {
            return bad(format!("image_size {} is not a multiple of {INPUT_MULTIPLE}", self.image_size));
        }
        self.detector.validate()
    }
}

/// Learning rate of `epoch`: linear warmup from `warmup_start * lr0` to `lr0`
/// over `warmup_epochs`, then linear decay reaching `lrf * lr0` at the last
/// epoch.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Invalid(format!(
            "epoch {epoch} outside 0..{} for the learning-rate schedule",
            cfg.epochs
        )));
    }
    let e = epoch as f64;
    let w = cfg.warmup_epochs;
    if e < w {
        return Ok(cfg.lr0 * (cfg.warmup_start + (1.0 - cfg.warmup_start) * e / w));
    }
    let span = (cfg.epochs - 1) as f64 - w;
    if span <= 0.0 {
        return Ok(cfg.lr0);
    }
    Ok(cfg.lr0 * (1.0 - (1.0 - cfg.lrf) * (e - w) / span))
}

/// Which arrays take weight decay, which are optimized without it, and which
/// are running statistics left to the normalization layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGroups {
    pub decay: Vec<String>,
    pub no_decay: Vec<String>,
    pub buffers: Vec<String>,
}

pub fn param_groups(det: &Detector<f32>) -> ParamGroups {
    let mut g = ParamGroups::default();
    for (name, p) in det.all_params() {
        match (p.learnable(), p.decays()) {
            (false, _) => g.buffers.push(name),
            (true, true) => g.decay.push(name),
            (true, false) => g.no_decay.push(name),
        }
    }
    g
}

/// SGD with classical momentum: `v = mu * v + (g + wd * w)`, `w -= lr * v`,
/// where the decay term applies to convolution weights only.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// L2 norm of all learnable gradients.
    pub fn grad_norm(det: &Detector<f32>) -> f64 {
        det.all_params()
            .iter()
            .filter(|(_, p)| p.learnable())
            .filter_map(|(_, p)| p.grad())
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn step(&mut self, det: &mut Detector<f32>, lr: f64, grad_scale: f64) {
        let params = det.all_params_mut();
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        }
        let (mu, wd) = (self.momentum as f32, self.weight_decay as f32);
        let (lr, s) = (lr as f32, grad_scale as f32);
        for ((_, p), v) in params.into_iter().zip(&mut self.velocity) {
            if !p.learnable() {
                continue;
            }
            let decay = if p.decays() { wd } else { 0.0 };
            let grad: Vec<f32> = p.grad().map_or_else(|| vec![0.0; p.len()], |g| g.to_vec());
            for ((w, vel), g) in p.value.iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = mu * *vel + s * g + decay * *w;
                *w -= lr * *vel;
            }
        }
    }

    pub fn state_arrays(&self, det: &Detector<f32>) -> Vec<NamedArray> {
        det.all_params()
            .into_iter()
            .zip(&self.velocity)
            .filter(|((_, p), _)| p.learnable())
            .map(|((name, p), v)| NamedArray {
                name: format!("{MOMENTUM_PREFIX}{name}"),
                shape: p.shape.clone(),
                kind: ParamKind::Buffer,
                values: v.iter().map(|&x| x as f64).collect(),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub box_loss: f64,
    pub cls_loss: f64,
    pub dfl_loss: f64,
    pub total: f64,
    pub val_map50: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,box,cls,dfl,total,val_mAP50,lr\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.8}",
                r.epoch, r.box_loss, r.cls_loss, r.dfl_loss, r.total, r.val_map50, r.lr
            );
        }
        s
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().fold(None, |b: Option<&EpochRecord>, r| match b {
            Some(b) if b.val_map50 >= r.val_map50 => Some(b),
            _ => Some(r),
        })
    }
}

pub struct TrainOutcome {
    /// Weights after the final epoch.
    pub detector: Detector<f32>,
    pub best: Checkpoint,
    pub history: TrainHistory,
    /// Where `best.ckpt`, `last.ckpt` and `history.csv` were written.
    pub out_dir: Option<PathBuf>,
}

fn prepare(samples: &[ImageSample], size: usize) -> Vec<ImageSample> {
    samples.iter().map(|s| letterbox(s, size)).collect()
}

/// mAP50 of `det` on `samples` with the given NMS settings.
pub fn validate_map50(det: &Detector<f32>, samples: &[ImageSample], conf: f64, iou: f64, batch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut dets = Vec::new();
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let (x, _) = to_batch(&refs)?;
        let ids: Vec<String> = chunk.iter().map(|s| s.source_id.clone()).collect();
        dets.extend(detect(det, &x, &ids, conf, iou)?);
    }
    Ok(evaluate_detections(&dets, &ground_truth(samples), &default_iou_grid())?.map50)
}

fn checkpoint_meta(cfg: &TrainConfig, rec: &EpochRecord) -> serde_json::Value {
    serde_json::json!({ "epoch": rec.epoch, "val_mAP50": rec.val_map50, "train": cfg })
}

/// Trains on in-memory samples. If `out_dir` is given, `best.ckpt`,
/// `last.ckpt` (with optimizer momentum) and `history.csv` are written there
/// after every epoch.
pub fn run_training_on(
    cfg: &TrainConfig,
    train: &[ImageSample],
    val: &[ImageSample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set has no samples".into()));
    }
    let train = prepare(train, cfg.image_size);
    let val = prepare(val, cfg.image_size);
    let mut det = Detector::<f32>::new(cfg.detector.clone(), cfg.seed)?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg, epoch)?;
        order.shuffle(&mut order_rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&ImageSample> = idx.iter().map(|&i| &train[i]).collect();
            let (x, gts) = to_batch(&refs)?;
            let diverged = |detail: String| Error::Diverged {
                epoch,
                batch: bi,
                detail,
            };
            let (raw, cache) = det
                .forward(&x, Mode::Train)
                .map_err(|e| diverged(format!("forward: {e}")))?;
            let (loss, grad) = compute_loss(&raw, &gts, &cfg.assign, &cfg.loss).map_err(|e| diverged(e.to_string()))?;
            det.backward(cache.expect("train-mode cache"), &grad);
            let scale = if cfg.scale_grad_by_batch { refs.len() as f64 } else { 1.0 };
            let norm = Sgd::grad_norm(&det) * scale;
            if !norm.is_finite() {
                return Err(diverged(format!("gradient norm {norm}")));
            }
            let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
            opt.step(&mut det, lr, scale * clip);
            det.zero_grad();
            sum.box_loss += loss.box_loss;
            sum.cls_loss += loss.cls_loss;
            sum.dfl_loss += loss.dfl_loss;
            sum.total += loss.total;
            batches += 1;
        }
        let k = batches as f64;
        let val_map50 = validate_map50(&det, &val, cfg.eval_conf, cfg.eval_iou, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            box_loss: sum.box_loss / k,
            cls_loss: sum.cls_loss / k,
            dfl_loss: sum.dfl_loss / k,
            total: sum.total / k,
            val_map50,
            lr,
        };
        history.epochs.push(rec);

        let mut ck = det.to_checkpoint();
        ck.meta = checkpoint_meta(cfg, &rec);
        if best.as_ref().is_none_or(|(m, _)| val_map50 > *m) {
            if let Some(dir) = out_dir {
                ck.save(&dir.join(BEST_CHECKPOINT))?;
            }
            best = Some((val_map50, ck.clone()));
        }
        if let Some(dir) = out_dir {
            ck.arrays.extend(opt.state_arrays(&det));
            ck.save(&dir.join(LAST_CHECKPOINT))?;
            write_file(&dir.join(HISTORY_CSV), history.to_csv().as_bytes())?;
        }
    }
    Ok(TrainOutcome {
        detector: det,
        best: best.expect("at least one epoch").1,
        history,
        out_dir: out_dir.map(Path::to_path_buf),
    })
}

/// Paths feeding [`run_training`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    /// Dataset root holding `images/` and `labels/`.
    pub data_dir: PathBuf,
    /// Directory holding `train.txt` / `val.txt`; defaults to `data_dir`.
    pub manifest_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// Loads the manifest splits and trains, writing outputs under `out_dir`.
pub fn run_training(cfg: &TrainConfig, paths: &DataPaths) -> Result<TrainOutcome> {
    let mdir = paths.manifest_dir.as_deref().unwrap_or(&paths.data_dir);
    let manifest = crate::data::SplitManifest::load(mdir)?;
    let nc = cfg.detector.num_classes;
    let train = crate::data::load_subset(&paths.data_dir, nc, &manifest.train)?;
    let val = crate::data::load_subset(&paths.data_dir, nc, &manifest.val)?;
    run_training_on(cfg, &train, &val, Some(&paths.out_dir))
}
