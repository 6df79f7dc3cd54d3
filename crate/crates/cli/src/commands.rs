use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gcdet::data::{ground_truth, list_ids, load_subset, DEFAULT_CLASS_NAMES};
use gcdet::eval::{default_iou_grid, detect, export_pr_curves, format_predictions};
use gcdet::train::DataPaths;
use gcdet::{
    benchmark_inference, build_augmented_trainset, build_detector, evaluate_detections, letterbox, load_dataset,
    run_training, save_dataset, split_ids, synth_generate, to_batch, Checkpoint, Detection, Detector, DetectorConfig,
    EvalReport, ImageSample, SplitManifest, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Command, Common, Format, ModelArgs, SplitName};

const DETECT_BATCH: usize = 8;

fn prepare(common: &Common) -> Result<(RunConfig, u64)> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    let seed = cfg.apply_seed(common.seed);
    Ok((cfg, seed))
}

fn apply_model(det: &mut DetectorConfig, m: &ModelArgs) {
    if let Some(s) = m.size {
        det.size = s;
    }
    if let Some(g) = m.gc {
        det.gc_enabled = g;
    }
    if let Some(n) = m.num_classes {
        det.num_classes = n;
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<(Detector<f32>, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let det = Detector::from_checkpoint(&ck)?;
    Ok((det, ck))
}

/// Flag, then the training size recorded in the checkpoint, then the config.
fn input_size(flag: Option<usize>, ck: &Checkpoint, cfg: &RunConfig) -> usize {
    flag.or_else(|| ck.meta["train"]["image_size"].as_u64().map(|v| v as usize))
        .unwrap_or(cfg.train.image_size)
}

fn run_detection(det: &Detector<f32>, samples: &[ImageSample], conf: f64, iou: f64) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for chunk in samples.chunks(DETECT_BATCH) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let (x, _) = to_batch(&refs)?;
        let ids: Vec<String> = chunk.iter().map(|s| s.source_id.clone()).collect();
        out.extend(detect(det, &x, &ids, conf, iou)?);
    }
    Ok(out)
}

/// Maps a box from the letterboxed square back to the original image.
fn unletterbox(b: [f64; 4], width: usize, height: usize, target: usize) -> [f64; 4] {
    let t = target as f64;
    let scale = (t / width as f64).min(t / height as f64);
    let nw = ((width as f64 * scale).round() as usize).clamp(1, target);
    let nh = ((height as f64 * scale).round() as usize).clamp(1, target);
    let (px, py) = (((target - nw) / 2) as f64, ((target - nh) / 2) as f64);
    let (sx, sy) = (width as f64 / nw as f64, height as f64 / nh as f64);
    [
        ((b[0] - px) * sx).clamp(0.0, width as f64),
        ((b[1] - py) * sy).clamp(0.0, height as f64),
        ((b[2] - px) * sx).clamp(0.0, width as f64),
        ((b[3] - py) * sy).clamp(0.0, height as f64),
    ]
}

#[derive(Serialize)]
struct ReportRow {
    size: String,
    gc: bool,
    params: usize,
    flops: f64,
    input_size: usize,
}

#[derive(Serialize)]
struct ModelReport {
    input_size: usize,
    num_classes: usize,
    rows: Vec<ReportRow>,
}

fn report_text(r: &ModelReport) -> String {
    let mut s = format!(
        "{:<8} {:<8} {:>12} {:>11}  (input {}x{})\n",
        "Model", "Variant", "Params (M)", "FLOPs (G)", r.input_size, r.input_size
    );
    for row in &r.rows {
        let variant = if row.gc { "+GC" } else { "baseline" };
        s.push_str(&format!(
            "{:<8} {:<8} {:>12.2} {:>11.1}\n",
            row.size,
            variant,
            row.params as f64 / 1e6,
            row.flops / 1e9
        ));
    }
    s
}

fn split_ids_of(m: &SplitManifest, which: SplitName) -> &[String] {
    match which {
        SplitName::Train => &m.train,
        SplitName::Val => &m.val,
        SplitName::Test => &m.test,
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Split {
            common,
            data,
            out,
            ratios,
        } => {
            let (cfg, seed) = prepare(&common)?;
            let ratios = match ratios {
                Some(r) => [r[0], r[1], r[2]],
                None => cfg.split.ratios,
            };
            let ids = list_ids(&data)?;
            let m = split_ids(&ids, ratios, seed)?;
            let out = out.unwrap_or(data);
            m.save(&out)?;
            println!(
                "split {} ids into train {} / val {} / test {} -> {}",
                ids.len(),
                m.train.len(),
                m.val.len(),
                m.test.len(),
                out.display()
            );
        }
        Command::Augment {
            common,
            data,
            manifest,
            out,
            num_classes,
        } => {
            let (cfg, seed) = prepare(&common)?;
            let nc = num_classes.unwrap_or(cfg.train.detector.num_classes);
            let m = SplitManifest::load(manifest.as_deref().unwrap_or(&data))?;
            let train = load_subset(&data, nc, &m.train)?;
            let doubled = build_augmented_trainset(&train, seed, &cfg.augment)?;
            save_dataset(&out, &doubled)?;
            for ids in [&m.val, &m.test] {
                save_dataset(&out, &load_subset(&data, nc, ids)?)?;
            }
            let manifest = SplitManifest {
                train: doubled.iter().map(|s| s.source_id.clone()).collect(),
                ..m
            };
            manifest.save(&out)?;
            println!("train {} -> {} images in {}", train.len(), doubled.len(), out.display());
        }
        Command::Synth {
            common,
            out,
            num_images,
            num_classes,
            class_weights,
            image_size,
        } => {
            let (mut cfg, _) = prepare(&common)?;
            let s = &mut cfg.synth;
            if let Some(v) = num_images {
                s.num_images = v;
            }
            if let Some(v) = num_classes {
                s.num_classes = v;
            }
            if let Some(v) = class_weights {
                s.class_weights = v;
            }
            if let Some(v) = image_size {
                s.image_size = v;
            }
            let samples = synth_generate(s)?;
            save_dataset(&out, &samples)?;
            let boxes: usize = samples.iter().map(|x| x.boxes.len()).sum();
            println!("wrote {} images with {boxes} boxes to {}", samples.len(), out.display());
        }
        Command::Train {
            common,
            model,
            data,
            manifest,
            out,
            epochs,
            batch_size,
            lr0,
            image_size,
        } => {
            let (mut cfg, _) = prepare(&common)?;
            let t = &mut cfg.train;
            apply_model(&mut t.detector, &model);
            if let Some(v) = epochs {
                t.epochs = v;
            }
            if let Some(v) = batch_size {
                t.batch_size = v;
            }
            if let Some(v) = lr0 {
                t.lr0 = v;
            }
            if let Some(v) = image_size {
                t.image_size = v;
            }
            t.validate()?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write(&out.join("config.toml"), &cfg.to_toml()?)?;
            let paths = DataPaths {
                data_dir: data,
                manifest_dir: manifest,
                out_dir: out.clone(),
            };
            let outcome = run_training(&cfg.train, &paths)?;
            for r in &outcome.history.epochs {
                println!(
                    "epoch {:>3}  box {:.4}  cls {:.4}  dfl {:.4}  total {:.4}  val mAP50 {:.4}  lr {:.6}",
                    r.epoch, r.box_loss, r.cls_loss, r.dfl_loss, r.total, r.val_map50, r.lr
                );
            }
            if let Some(b) = outcome.history.best() {
                println!("best epoch {} (val mAP50 {:.4}); checkpoints in {}", b.epoch, b.val_map50, out.display());
            }
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            manifest,
            split,
            out,
            conf,
            iou,
            image_size,
            time_runs,
        } => {
            let (cfg, _) = prepare(&common)?;
            let (det, ck) = load_checkpoint(&checkpoint)?;
            let size = input_size(image_size, &ck, &cfg);
            let m = SplitManifest::load(manifest.as_deref().unwrap_or(&data))?;
            let samples: Vec<ImageSample> = load_subset(&data, det.config().num_classes, split_ids_of(&m, split))?
                .iter()
                .map(|s| letterbox(s, size))
                .collect();
            if samples.is_empty() {
                bail!("the {split:?} split is empty");
            }
            let dets = run_detection(&det, &samples, conf.unwrap_or(cfg.eval.conf), iou.unwrap_or(cfg.eval.iou))?;
            let mut report = evaluate_detections(&dets, &ground_truth(&samples), &default_iou_grid())?;
            report.params = Some(det.count_params());
            report.flops = Some(det.estimate_flops(size));
            if time_runs > 0 {
                let refs: Vec<&ImageSample> = samples.iter().take(DETECT_BATCH).collect();
                let (x, _) = to_batch(&refs)?;
                let t = benchmark_inference(&det, &x, cfg.eval.warmup, time_runs, cfg.eval.predict_conf, cfg.eval.predict_iou)?;
                report.inference_ms = Some(t.median_ms);
            }
            let json = report.to_json()?;
            match out {
                Some(p) => {
                    write(&p, &json)?;
                    println!(
                        "mAP50 {:.4}  mAP50-95 {:.4}  F1 {:.4} -> {}",
                        report.map50,
                        report.map50_95,
                        report.f1,
                        p.display()
                    );
                }
                None => println!("{json}"),
            }
        }
        Command::Predict {
            common,
            checkpoint,
            data,
            out,
            conf,
            iou,
            image_size,
        } => {
            let (cfg, _) = prepare(&common)?;
            let (det, ck) = load_checkpoint(&checkpoint)?;
            let size = input_size(image_size, &ck, &cfg);
            let originals = load_dataset(&data, usize::MAX)?;
            let boxed: Vec<ImageSample> = originals.iter().map(|s| letterbox(s, size)).collect();
            let conf = conf.unwrap_or(cfg.eval.predict_conf);
            let iou = iou.unwrap_or(cfg.eval.predict_iou);
            let mut dets = run_detection(&det, &boxed, conf, iou)?;
            for d in &mut dets {
                let img = &originals
                    .iter()
                    .find(|s| s.source_id == d.image_id)
                    .expect("detections name loaded images")
                    .image;
                d.bbox = unletterbox(d.bbox, img.width, img.height, size);
            }
            write(&out, &format_predictions(&dets)?)?;
            println!("{} detections on {} images -> {}", dets.len(), originals.len(), out.display());
        }
        Command::Bench {
            common,
            model,
            checkpoint,
            image_size,
            images,
            warmup,
            runs,
            out,
        } => {
            let (mut cfg, seed) = prepare(&common)?;
            let (det, size) = match checkpoint {
                Some(p) => {
                    let (det, ck) = load_checkpoint(&p)?;
                    let size = input_size(image_size, &ck, &cfg);
                    (det, size)
                }
                None => {
                    apply_model(&mut cfg.train.detector, &model);
                    let det = build_detector(cfg.train.detector.clone(), seed)?;
                    (det, image_size.unwrap_or(cfg.train.image_size))
                }
            };
            if images == 0 {
                bail!("--images must be at least 1");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn([images, 3, size, size], |_| rng.gen_range(0.0f32..1.0));
            let t = benchmark_inference(
                &det,
                &x,
                warmup.unwrap_or(cfg.eval.warmup),
                runs.unwrap_or(cfg.eval.runs),
                cfg.eval.predict_conf,
                cfg.eval.predict_iou,
            )?;
            let c = det.config();
            println!(
                "{} {} at {size}x{size}: median {:.2} ms / image, IQR {:.2} ms over {} runs ({})",
                c.size,
                if c.gc_enabled { "+GC" } else { "baseline" },
                t.median_ms,
                t.iqr_ms,
                t.runs,
                t.hardware
            );
            if let Some(p) = out {
                write(&p, &serde_json::to_string_pretty(&t)?)?;
            }
        }
        Command::Report {
            common,
            sizes,
            input_size,
            num_classes,
            format,
            json,
        } => {
            let (cfg, seed) = prepare(&common)?;
            let nc = num_classes.unwrap_or(cfg.train.detector.num_classes);
            let mut rows = Vec::new();
            for size in sizes {
                for gc in [false, true] {
                    let dc = DetectorConfig {
                        size,
                        gc_enabled: gc,
                        num_classes: nc,
                        ..cfg.train.detector.clone()
                    };
                    let det = build_detector(dc, seed)?;
                    if input_size == 0 || input_size % 32 != 0 {
                        bail!("--input-size {input_size} is not a positive multiple of 32");
                    }
                    rows.push(ReportRow {
                        size: size.to_string(),
                        gc,
                        params: det.count_params(),
                        flops: det.estimate_flops(input_size),
                        input_size,
                    });
                }
            }
            let report = ModelReport {
                input_size,
                num_classes: nc,
                rows,
            };
            let as_json = serde_json::to_string_pretty(&report)?;
            match format {
                Format::Text => print!("{}", report_text(&report)),
                Format::Json => println!("{as_json}"),
            }
            if let Some(p) = json {
                write(&p, &as_json)?;
            }
        }
        Command::PlotPr {
            common,
            report,
            out,
            class_names,
        } => {
            prepare(&common)?;
            let r = EvalReport::load(&report)?;
            let names = class_names.unwrap_or_else(|| DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect());
            let written: Vec<PathBuf> = export_pr_curves(&r, &out, &names)?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
