//! IoU, class-wise NMS, AP/mAP with a 101-point precision envelope, max-F1,
//! report and curve emission, and inference timing.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{decode_image, Detector};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const EVAL_CONF: f64 = 0.001;
pub const EVAL_IOU: f64 = 0.7;
pub const PREDICT_CONF: f64 = 0.25;
pub const PREDICT_IOU: f64 = 0.45;
pub const RECALL_POINTS: usize = 101;

/// A decoded detection, pixel `xyxy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub class_id: usize,
    pub confidence: f64,
    pub image_id: String,
}

/// A ground-truth box, pixel `xyxy`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: [f64; 4],
}

/// Ground truth keyed by image id. Images without boxes should still be
/// present so their detections count as false positives.
pub type GroundTruth = BTreeMap<String, Vec<GtBox>>;

pub fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Class-wise greedy suppression within each image. Candidates are visited
/// by descending confidence (ties: lower input index); a candidate is dropped
/// when its IoU with an already kept box of the same image and class exceeds
/// `iou_thresh`. Survivors are returned in visiting order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    let mut out = Vec::new();
    for i in order {
        let d = &dets[i];
        let group = kept.entry((d.image_id.as_str(), d.class_id)).or_default();
        if group.iter().all(|&k| iou(&dets[k].bbox, &d.bbox) <= iou_thresh) {
            group.push(i);
            out.push(d.clone());
        }
    }
    out
}

/// Total order used before matching, so reports do not depend on input order.
fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| {
            a.bbox
                .iter()
                .zip(&b.bbox)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then(a.class_id.cmp(&b.class_id))
}

/// True-positive flags for the confidence-sorted detections of one class.
fn match_class(sorted: &[&Detection], gts: &GroundTruth, class_id: usize, thresh: f64) -> Vec<bool> {
    let mut used: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    sorted
        .iter()
        .map(|d| {
            let boxes = &gts[&d.image_id];
            let taken = used
                .entry(d.image_id.as_str())
                .or_insert_with(|| vec![false; boxes.len()]);
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in boxes.iter().enumerate() {
                if g.class_id != class_id || taken[j] {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Precision envelope sampled at recall `0, 0.01, ..., 1` from cumulative
/// true-positive flags.
fn envelope(tp: &[bool], num_gt: usize) -> Vec<f64> {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    (0..RECALL_POINTS)
        .map(|i| {
            let r = i as f64 / (RECALL_POINTS - 1) as f64;
            let k = recall.partition_point(|&v| v < r);
            precision.get(k).copied().unwrap_or(0.0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub num_gt: usize,
    pub num_detections: usize,
    pub ap50: f64,
    pub ap50_95: f64,
    /// AP at every threshold of the IoU grid, in grid order.
    pub ap_per_iou: Vec<f64>,
    /// `(recall, precision)` envelope at IoU 0.5 on the 101 recall points.
    pub pr_curve: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub warmup: usize,
    pub runs: usize,
    /// Milliseconds per image, one value per timed run.
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub hardware: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_grid: Vec<f64>,
    pub classes: Vec<ClassReport>,
    pub map50: f64,
    pub map50_95: f64,
    pub f1: f64,
    /// Confidence threshold at which `f1` is attained.
    pub f1_confidence: f64,
    pub params: Option<usize>,
    pub flops: Option<f64>,
    pub inference_ms: Option<f64>,
}

/// `{0.5, 0.55, ..., 0.95}`
pub fn default_iou_grid() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Best class-macro F1 at IoU 0.5 over all confidence cut-offs.
fn best_f1(per_class: &[(Vec<&Detection>, Vec<bool>, usize)]) -> (f64, f64) {
    let mut cuts: Vec<f64> = per_class
        .iter()
        .flat_map(|(d, _, _)| d.iter().map(|x| x.confidence))
        .collect();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let mut best = (0.0, 0.0);
    for &t in &cuts {
        let mut sum = 0.0;
        for (dets, tp, num_gt) in per_class {
            let kept = dets.partition_point(|d| d.confidence >= t);
            let hits = tp[..kept].iter().filter(|&&v| v).count() as f64;
            if kept == 0 || hits == 0.0 {
                continue;
            }
            let p = hits / kept as f64;
            let r = hits / *num_gt as f64;
            sum += 2.0 * p * r / (p + r);
        }
        let f1 = sum / per_class.len() as f64;
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    best
}

/// Matches `dets` (already NMS-filtered) against `gts` at every threshold of
/// `iou_grid` (which must contain 0.5) and summarizes AP, mAP and F1 over the
/// classes present in the ground truth.
pub fn evaluate_detections(dets: &[Detection], gts: &GroundTruth, iou_grid: &[f64]) -> Result<EvalReport> {
    let i50 = iou_grid
        .iter()
        .position(|&t| (t - 0.5).abs() < 1e-12)
        .ok_or_else(|| Error::Invalid("IoU grid must contain 0.5".into()))?;
    if let Some(t) = iou_grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Invalid(format!("IoU threshold {t} outside [0, 1]")));
    }
    for d in dets {
        if !gts.contains_key(&d.image_id) {
            return Err(Error::UnknownImage(d.image_id.clone()));
        }
    }
    let mut num_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for g in gts.values().flatten() {
        *num_gt.entry(g.class_id).or_default() += 1;
    }
    let mut classes = Vec::new();
    let mut f1_inputs = Vec::new();
    for (&c, &n) in &num_gt {
        let mut cd: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        cd.sort_by(|a, b| detection_order(a, b));
        let mut ap_per_iou = Vec::with_capacity(iou_grid.len());
        let mut pr_curve = Vec::new();
        let mut tp50 = Vec::new();
        for (ti, &t) in iou_grid.iter().enumerate() {
            let tp = match_class(&cd, gts, c, t);
            let env = envelope(&tp, n);
            ap_per_iou.push(env.iter().sum::<f64>() / RECALL_POINTS as f64);
            if ti == i50 {
                pr_curve = env
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| (i as f64 / (RECALL_POINTS - 1) as f64, p))
                    .collect();
                tp50 = tp;
            }
        }
        classes.push(ClassReport {
            class_id: c,
            num_gt: n,
            num_detections: cd.len(),
            ap50: ap_per_iou[i50],
            ap50_95: ap_per_iou.iter().sum::<f64>() / ap_per_iou.len() as f64,
            ap_per_iou,
            pr_curve,
        });
        f1_inputs.push((cd, tp50, n));
    }
    let mean = |f: fn(&ClassReport) -> f64| {
        if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(f).sum::<f64>() / classes.len() as f64
        }
    };
    let (map50, map50_95) = (mean(|c| c.ap50), mean(|c| c.ap50_95));
    let (f1, f1_confidence) = if f1_inputs.is_empty() { (0.0, 0.0) } else { best_f1(&f1_inputs) };
    Ok(EvalReport {
        iou_grid: iou_grid.to_vec(),
        classes,
        map50,
        map50_95,
        f1,
        f1_confidence,
        params: None,
        flops: None,
        inference_ms: None,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// `class_id,recall,precision` rows of every class curve.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("class_id,recall,precision\n");
        for c in &self.classes {
            for (r, p) in &c.pr_curve {
                let _ = writeln!(s, "{},{r:.2},{p:.6}", c.class_id);
            }
        }
        s
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn plot_curves(path: &Path, title: &str, curves: &[(String, &[(f64, f64)])]) -> Result<()> {
    use plotters::prelude::*;

    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(44)
            .build_cartesian_2d(0.0..1.0, 0.0..1.0)?;
        chart.configure_mesh().x_desc("Recall").y_desc("Precision").draw()?;
        for (i, (name, pts)) in curves.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        if curves.len() > 1 {
            chart.configure_series_labels().background_style(WHITE.mix(0.8)).draw()?;
        }
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::Invalid(format!("plotting {}: {e}", path.display())))
}

/// Writes `pr_curves.csv`, `pr_all.svg` and one `pr_class<id>.svg` per class,
/// returning the paths written.
pub fn export_pr_curves(report: &EvalReport, dir: &Path, class_names: &[String]) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = |id: usize| {
        class_names
            .get(id)
            .cloned()
            .unwrap_or_else(|| format!("class {id}"))
    };
    let mut written = Vec::new();
    let csv = dir.join("pr_curves.csv");
    write_file(&csv, report.pr_csv().as_bytes())?;
    written.push(csv);
    let all: Vec<(String, &[(f64, f64)])> = report
        .classes
        .iter()
        .map(|c| (format!("{} AP50 {:.3}", name(c.class_id), c.ap50), c.pr_curve.as_slice()))
        .collect();
    let p = dir.join("pr_all.svg");
    plot_curves(&p, &format!("mAP50 {:.3}", report.map50), &all)?;
    written.push(p);
    for (c, curve) in report.classes.iter().zip(&all) {
        let p = dir.join(format!("pr_class{}.svg", c.class_id));
        plot_curves(&p, &curve.0, std::slice::from_ref(curve))?;
        written.push(p);
    }
    Ok(written)
}

/// One `image_id class conf x1 y1 x2 y2` line per detection.
pub fn format_predictions(dets: &[Detection]) -> Result<String> {
    let mut s = String::new();
    for d in dets {
        if d.image_id.is_empty() || d.image_id.contains(char::is_whitespace) {
            return Err(Error::Invalid(format!("image id `{}` is empty or contains whitespace", d.image_id)));
        }
        let b = d.bbox;
        let _ = writeln!(
            s,
            "{} {} {:.6} {:.3} {:.3} {:.3} {:.3}",
            d.image_id, d.class_id, d.confidence, b[0], b[1], b[2], b[3]
        );
    }
    Ok(s)
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", f.len())));
        }
        let class_id = f[1].parse().map_err(|_| bad(format!("bad class id `{}`", f[1])))?;
        let mut v = [0.0; 5];
        for (k, s) in f[2..].iter().enumerate() {
            v[k] = s.parse().map_err(|_| bad(format!("bad number `{s}`")))?;
        }
        out.push(Detection {
            image_id: f[0].to_string(),
            class_id,
            confidence: v[0],
            bbox: [v[1], v[2], v[3], v[4]],
        });
    }
    Ok(out)
}

/// Forward, decode and NMS for a batch; `ids[n]` names batch element `n`.
pub fn detect<T: Scalar>(
    det: &Detector<T>,
    images: &Tensor<T>,
    ids: &[String],
    conf_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Detection>> {
    if ids.len() != images.n() {
        return Err(Error::Invalid(format!("{} ids for a batch of {}", ids.len(), images.n())));
    }
    let raw = det.forward_raw(images)?;
    let mut out = Vec::new();
    for (n, id) in ids.iter().enumerate() {
        out.extend(nms(&decode_image(&raw, n, conf_thresh, id), iou_thresh));
    }
    Ok(out)
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn hardware_description() -> String {
    let model = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{model}; {threads} logical CPUs; {} {}", std::env::consts::OS, std::env::consts::ARCH)
}

/// Times forward + decode + NMS one image at a time. `warmup` passes over
/// all images are discarded; each of the `runs` timed passes contributes one
/// per-image mean in milliseconds.
pub fn benchmark_inference<T: Scalar>(
    det: &Detector<T>,
    images: &Tensor<T>,
    warmup: usize,
    runs: usize,
    conf_thresh: f64,
    iou_thresh: f64,
) -> Result<TimingStats> {
    if runs == 0 {
        return Err(Error::Invalid("benchmark needs at least one run".into()));
    }
    if images.n() == 0 {
        return Err(Error::Empty("benchmark images".into()));
    }
    let singles: Vec<Tensor<T>> = (0..images.n())
        .map(|n| Tensor::from_vec([1, images.c(), images.h(), images.w()], images.sample(n).to_vec()))
        .collect::<Result<_>>()?;
    let id = [String::from("0")];
    let pass = || -> Result<()> {
        for img in &singles {
            std::hint::black_box(detect(det, img, &id, conf_thresh, iou_thresh)?);
        }
        Ok(())
    };
    for _ in 0..warmup {
        pass()?;
    }
    let mut samples_ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        pass()?;
        samples_ms.push(t0.elapsed().as_secs_f64() * 1e3 / singles.len() as f64);
    }
    let mut sorted = samples_ms.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(TimingStats {
        warmup,
        runs,
        median_ms: quantile(&sorted, 0.5),
        iqr_ms: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
        samples_ms,
        hardware: hardware_description(),
    })
}
