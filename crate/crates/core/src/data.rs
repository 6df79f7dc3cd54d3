//! Normalized-box dataset I/O, seeded splitting, photometric augmentation,
//! letterboxing, batching, and a synthetic shape dataset.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{write_file, GroundTruth, GtBox};
use crate::tensor::Tensor;

/// Annotation classes of the pediatric wrist X-ray dataset, in id order.
pub const DEFAULT_CLASS_NAMES: [&str; 9] = [
    "boneanomaly",
    "bonelesion",
    "foreignbody",
    "fracture",
    "metal",
    "periostealreaction",
    "pronatorsign",
    "softtissue",
    "text",
];

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const LETTERBOX_FILL: u8 = 114;

/// 8-bit RGB image stored channel-major, `(3, height, width)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self {
            width,
            height,
            data: vec![fill; 3 * width * height],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn from_rgb(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::new(w, h, 0);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p[c]);
            }
        }
        out
    }

    pub fn to_rgb(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Rgb([0, 1, 2].map(|c| self.get(c, y as usize, x as usize)))
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::from_rgb(&image::open(path)?.to_rgb8()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(self.to_rgb().save(path)?)
    }
}

/// One labelled box, center format, normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxLabel {
    /// Clips the box to the unit square. `None` if nothing is left.
    pub fn clipped(self) -> Option<Self> {
        let x1 = (self.cx - self.w / 2.0).clamp(0.0, 1.0);
        let y1 = (self.cy - self.h / 2.0).clamp(0.0, 1.0);
        let x2 = (self.cx + self.w / 2.0).clamp(0.0, 1.0);
        let y2 = (self.cy + self.h / 2.0).clamp(0.0, 1.0);
        (x2 > x1 && y2 > y1).then(|| Self {
            class_id: self.class_id,
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        })
    }

    pub fn within_unit(&self) -> bool {
        let e = 1e-12;
        self.cx - self.w / 2.0 >= -e
            && self.cx + self.w / 2.0 <= 1.0 + e
            && self.cy - self.h / 2.0 >= -e
            && self.cy + self.h / 2.0 <= 1.0 + e
    }

    pub fn to_pixels(&self, width: usize, height: usize) -> GtBox {
        let (w, h) = (width as f64, height as f64);
        GtBox {
            class_id: self.class_id,
            bbox: [
                (self.cx - self.w / 2.0) * w,
                (self.cy - self.h / 2.0) * h,
                (self.cx + self.w / 2.0) * w,
                (self.cy + self.h / 2.0) * h,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image: Image,
    pub boxes: Vec<BoxLabel>,
    pub source_id: String,
}

impl ImageSample {
    pub fn gt_boxes(&self) -> Vec<GtBox> {
        self.boxes
            .iter()
            .map(|b| b.to_pixels(self.image.width, self.image.height))
            .collect()
    }
}

/// Parses one label file; `path` is used in error messages only.
pub fn parse_labels(text: &str, path: &Path, num_classes: usize) -> Result<Vec<BoxLabel>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        if fields.len() != 5 {
            return Err(parse_err(format!(
                "expected 5 fields `class cx cy w h`, found {}",
                fields.len()
            )));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("class id `{}` is not a non-negative integer", fields[0])))?;
        if class_id >= num_classes {
            return Err(Error::ClassRange {
                path: path.to_path_buf(),
                line: line_no,
                class_id,
                num_classes,
            });
        }
        let mut v = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| parse_err(format!("`{f}` is not a finite number")))?;
        }
        if v[2] < 0.0 || v[3] < 0.0 {
            return Err(parse_err("negative box size".into()));
        }
        let label = BoxLabel {
            class_id,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        };
        out.extend(label.clipped());
    }
    Ok(out)
}

pub fn format_labels(boxes: &[BoxLabel]) -> String {
    boxes
        .iter()
        .map(|b| format!("{} {:.6} {:.6} {:.6} {:.6}\n", b.class_id, b.cx, b.cy, b.w, b.h))
        .collect()
}

/// Image files of `<dir>/images`, sorted by stem.
fn image_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let images = dir.join("images");
    let rd = fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(&images, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path));
            }
        }
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Invalid(format!("duplicate image id `{}`", w[0].0)));
    }
    Ok(out)
}

/// Ids of every image under `<dir>/images`, sorted.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    Ok(image_files(dir)?.into_iter().map(|(id, _)| id).collect())
}

/// Loads `<dir>/images/*` with labels from `<dir>/labels/<stem>.txt`;
/// a missing label file means no boxes. Samples are sorted by id.
pub fn load_dataset(dir: &Path, num_classes: usize) -> Result<Vec<ImageSample>> {
    load_ids(dir, num_classes, None)
}

/// [`load_dataset`] restricted to `ids` (kept in the given order).
pub fn load_subset(dir: &Path, num_classes: usize, ids: &[String]) -> Result<Vec<ImageSample>> {
    load_ids(dir, num_classes, Some(ids))
}

fn load_ids(dir: &Path, num_classes: usize, ids: Option<&[String]>) -> Result<Vec<ImageSample>> {
    let files = image_files(dir)?;
    let selected: Vec<&(String, PathBuf)> = match ids {
        None => files.iter().collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                files
                    .iter()
                    .find(|(s, _)| s == id)
                    .ok_or_else(|| Error::Invalid(format!("no image for id `{id}` in {}", dir.display())))
            })
            .collect::<Result<_>>()?,
    };
    selected
        .into_iter()
        .map(|(id, path)| {
            let label_path = dir.join("labels").join(format!("{id}.txt"));
            let boxes = match fs::read_to_string(&label_path) {
                Ok(text) => parse_labels(&text, &label_path, num_classes)?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(Error::io(&label_path, e)),
            };
            Ok(ImageSample {
                image: Image::open(path)?,
                boxes,
                source_id: id.clone(),
            })
        })
        .collect()
}

/// Writes `images/<id>.png` and `labels/<id>.txt` for every sample.
pub fn save_dataset(dir: &Path, samples: &[ImageSample]) -> Result<()> {
    for s in samples {
        s.image.save(&dir.join("images").join(format!("{}.png", s.source_id)))?;
        let lp = dir.join("labels").join(format!("{}.txt", s.source_id));
        write_file(&lp, format_labels(&s.boxes).as_bytes())?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

pub const MANIFEST_FILES: [&str; 3] = ["train.txt", "val.txt", "test.txt"];
const MANIFEST_META: &str = "split.json";

/// Seeded partition of `ids`. The ids are sorted, shuffled with `seed`, and
/// cut into `floor(n * r_train)` training ids, `floor(n * r_val)` validation
/// ids and the remainder for test.
pub fn split_ids(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if ids.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    if ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::Invalid(format!("split ratios must be positive, got {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split ratios sum to {sum}, expected 1")));
    }
    let mut order = ids.to_vec();
    order.sort();
    if let Some(w) = order.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Invalid(format!("duplicate id `{}`", w[0])));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len() as f64;
    let n_train = (n * ratios[0]).floor() as usize;
    let n_val = (n * ratios[1]).floor() as usize;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(SplitManifest {
        train: order,
        val,
        test,
        seed,
        ratios,
    })
}

pub fn split_dataset(samples: &[ImageSample], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    let ids: Vec<String> = samples.iter().map(|s| s.source_id.clone()).collect();
    split_ids(&ids, ratios, seed)
}

impl SplitManifest {
    pub fn lists(&self) -> [&Vec<String>; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// Writes `train.txt`, `val.txt`, `test.txt` (one id per line) and
    /// `split.json` holding the seed and ratios.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, ids) in MANIFEST_FILES.iter().zip(self.lists()) {
            let body: String = ids.iter().map(|id| format!("{id}\n")).collect();
            write_file(&dir.join(name), body.as_bytes())?;
        }
        let meta = serde_json::json!({ "seed": self.seed, "ratios": self.ratios });
        write_file(&dir.join(MANIFEST_META), serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut lists = Vec::new();
        for name in MANIFEST_FILES {
            let p = dir.join(name);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            lists.push(
                text.lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect::<Vec<_>>(),
            );
        }
        let (seed, ratios) = match fs::read_to_string(dir.join(MANIFEST_META)) {
            Ok(s) => {
                #[derive(Deserialize)]
                struct Meta {
                    seed: u64,
                    ratios: [f64; 3],
                }
                let m: Meta = serde_json::from_str(&s)?;
                (m.seed, m.ratios)
            }
            Err(_) => (0, [0.0; 3]),
        };
        let test = lists.pop().expect("three lists");
        let val = lists.pop().expect("three lists");
        let train = lists.pop().expect("three lists");
        Ok(Self {
            train,
            val,
            test,
            seed,
            ratios,
        })
    }
}

/// `clip(round(alpha * p + beta), 0, 255)` per pixel.
pub fn augment_blend(img: &Image, alpha: f64, beta: f64) -> Image {
    Image {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .map(|&p| (alpha * p as f64 + beta).round().clamp(0.0, 255.0) as u8)
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            alpha_min: 0.8,
            alpha_max: 1.2,
            beta_min: -20.0,
            beta_max: 20.0,
        }
    }
}

/// The originals followed by one contrast/brightness copy of each, with
/// `alpha ~ U[alpha_min, alpha_max]`, `beta ~ U[beta_min, beta_max]` and id
/// `<id>_aug`.
pub fn build_augmented_trainset(train: &[ImageSample], seed: u64, cfg: &AugmentConfig) -> Result<Vec<ImageSample>> {
    if train.is_empty() {
        return Err(Error::Empty("augmentation needs at least one training image".into()));
    }
    if !(cfg.alpha_min > 0.0 && cfg.alpha_min <= cfg.alpha_max && cfg.beta_min <= cfg.beta_max) {
        return Err(Error::Invalid(format!("bad augmentation ranges {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = train.to_vec();
    for s in train {
        let alpha = rng.gen_range(cfg.alpha_min..=cfg.alpha_max);
        let beta = rng.gen_range(cfg.beta_min..=cfg.beta_max);
        out.push(ImageSample {
            image: augment_blend(&s.image, alpha, beta),
            boxes: s.boxes.clone(),
            source_id: format!("{}_aug", s.source_id),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_images: usize,
    pub num_classes: usize,
    /// Relative class frequencies; empty means uniform.
    pub class_weights: Vec<f64>,
    pub image_size: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Box side range as a fraction of the image side.
    pub min_box_frac: f64,
    pub max_box_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 100,
            num_classes: 3,
            class_weights: Vec::new(),
            image_size: 64,
            min_boxes: 1,
            max_boxes: 4,
            min_box_frac: 0.2,
            max_box_frac: 0.45,
            seed: 0,
        }
    }
}

/// Shape drawn for a class; cycles for class ids beyond the last shape, with
/// the brightness band changing every cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthShape {
    Rectangle,
    Ellipse,
    Triangle,
    Cross,
}

impl SynthShape {
    pub const ALL: [SynthShape; 4] = [SynthShape::Rectangle, SynthShape::Ellipse, SynthShape::Triangle, SynthShape::Cross];

    pub fn for_class(c: usize) -> Self {
        Self::ALL[c % Self::ALL.len()]
    }

    /// Whether pixel center `(u, v)` in box-relative `[0, 1]` coordinates is covered.
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            SynthShape::Rectangle => true,
            SynthShape::Ellipse => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            SynthShape::Triangle => (u - 0.5).abs() <= v / 2.0,
            SynthShape::Cross => (u - 0.5).abs() <= 0.17 || (v - 0.5).abs() <= 0.17,
        }
    }
}

fn overlap_frac(a: &[usize; 4], b: &[usize; 4]) -> f64 {
    let iw = a[2].min(b[2]).saturating_sub(a[0].max(b[0]));
    let ih = a[3].min(b[3]).saturating_sub(a[1].max(b[1]));
    let inter = (iw * ih) as f64;
    let small = ((a[2] - a[0]) * (a[3] - a[1])).min((b[2] - b[0]) * (b[3] - b[1])) as f64;
    inter / small
}

/// Noise-background images with 1..=max_boxes bright shapes; every box lies
/// fully inside its image. Deterministic in `cfg.seed`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<ImageSample>> {
    if cfg.num_images == 0 || cfg.num_classes == 0 {
        return Err(Error::Invalid("synthetic dataset needs at least one image and one class".into()));
    }
    if cfg.image_size < 16 {
        return Err(Error::Invalid(format!("synthetic image size {} is below 16", cfg.image_size)));
    }
    if cfg.min_boxes == 0 || cfg.min_boxes > cfg.max_boxes {
        return Err(Error::Invalid("need 1 <= min_boxes <= max_boxes".into()));
    }
    if !(cfg.min_box_frac > 0.0 && cfg.min_box_frac <= cfg.max_box_frac && cfg.max_box_frac <= 1.0) {
        return Err(Error::Invalid("need 0 < min_box_frac <= max_box_frac <= 1".into()));
    }
    let weights = if cfg.class_weights.is_empty() {
        vec![1.0; cfg.num_classes]
    } else {
        cfg.class_weights.clone()
    };
    if weights.len() != cfg.num_classes {
        return Err(Error::Invalid(format!(
            "{} class weights for {} classes",
            weights.len(),
            cfg.num_classes
        )));
    }
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::Invalid(format!("class weights {weights:?}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.image_size;
    let lo = ((cfg.min_box_frac * size as f64).round() as usize).max(2);
    let hi = ((cfg.max_box_frac * size as f64).round() as usize).clamp(lo, size);
    let digits = (cfg.num_images - 1).to_string().len().max(4);

    let mut out = Vec::with_capacity(cfg.num_images);
    for i in 0..cfg.num_images {
        let mut img = Image::new(size, size, 0);
        for p in img.data.iter_mut().take(size * size) {
            *p = rng.gen_range(30..=90);
        }
        let (first, rest) = img.data.split_at_mut(size * size);
        rest[..size * size].copy_from_slice(first);
        rest[size * size..].copy_from_slice(first);

        let count = rng.gen_range(cfg.min_boxes..=cfg.max_boxes);
        let mut placed: Vec<[usize; 4]> = Vec::new();
        let mut boxes = Vec::new();
        for _ in 0..count {
            let class_id = dist.sample(&mut rng);
            let mut slot = None;
            for _ in 0..30 {
                let (w, h) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
                let (x0, y0) = (rng.gen_range(0..=size - w), rng.gen_range(0..=size - h));
                let b = [x0, y0, x0 + w, y0 + h];
                if placed.iter().all(|p| overlap_frac(p, &b) < 0.2) {
                    slot = Some(b);
                    break;
                }
            }
            let Some(b) = slot else { continue };
            placed.push(b);
            let shape = SynthShape::for_class(class_id);
            let band = (class_id / SynthShape::ALL.len()) as i32;
            let base = 235 - 25 * (band % 4);
            let level = (base + rng.gen_range(-10..=10)).clamp(120, 255) as u8;
            let (w, h) = ((b[2] - b[0]) as f64, (b[3] - b[1]) as f64);
            for y in b[1]..b[3] {
                for x in b[0]..b[2] {
                    let u = (x - b[0]) as f64 / (w - 1.0).max(1.0);
                    let v = (y - b[1]) as f64 / (h - 1.0).max(1.0);
                    if shape.covers(u, v) {
                        for c in 0..3 {
                            img.set(c, y, x, level);
                        }
                    }
                }
            }
            let s = size as f64;
            boxes.push(BoxLabel {
                class_id,
                cx: (b[0] + b[2]) as f64 / (2.0 * s),
                cy: (b[1] + b[3]) as f64 / (2.0 * s),
                w: w / s,
                h: h / s,
            });
        }
        out.push(ImageSample {
            image: img,
            boxes,
            source_id: format!("synth_{i:0digits$}"),
        });
    }
    Ok(out)
}

/// Resizes keeping aspect ratio and pads to a `target x target` square,
/// centering the image; boxes are mapped into the new frame.
pub fn letterbox(sample: &ImageSample, target: usize) -> ImageSample {
    let (w, h) = (sample.image.width, sample.image.height);
    if w == target && h == target {
        return sample.clone();
    }
    let scale = (target as f64 / w as f64).min(target as f64 / h as f64);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, target);
    let nh = ((h as f64 * scale).round() as usize).clamp(1, target);
    let resized = image::imageops::resize(
        &sample.image.to_rgb(),
        nw as u32,
        nh as u32,
        image::imageops::FilterType::Triangle,
    );
    let (px, py) = ((target - nw) / 2, (target - nh) / 2);
    let mut canvas = image::RgbImage::from_pixel(target as u32, target as u32, image::Rgb([LETTERBOX_FILL; 3]));
    image::imageops::replace(&mut canvas, &resized, px as i64, py as i64);
    let t = target as f64;
    let boxes = sample
        .boxes
        .iter()
        .filter_map(|b| {
            BoxLabel {
                class_id: b.class_id,
                cx: (b.cx * nw as f64 + px as f64) / t,
                cy: (b.cy * nh as f64 + py as f64) / t,
                w: b.w * nw as f64 / t,
                h: b.h * nh as f64 / t,
            }
            .clipped()
        })
        .collect();
    ImageSample {
        image: Image::from_rgb(&canvas),
        boxes,
        source_id: sample.source_id.clone(),
    }
}

/// Stacks same-sized samples into an `(N, 3, H, W)` tensor scaled to
/// `[0, 1]`, with the pixel-space ground truth of each image.
pub fn to_batch(samples: &[&ImageSample]) -> Result<(Tensor<f32>, Vec<Vec<GtBox>>)> {
    let first = samples.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    let (w, h) = (first.image.width, first.image.height);
    let mut data = Vec::with_capacity(samples.len() * 3 * w * h);
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.image.width, s.image.height) != (w, h) {
            return Err(Error::Shape(format!(
                "image `{}` is {}x{}, batch expects {w}x{h}",
                s.source_id, s.image.width, s.image.height
            )));
        }
        data.extend(s.image.data.iter().map(|&p| p as f32 / 255.0));
        gts.push(s.gt_boxes());
    }
    Ok((Tensor::from_vec([samples.len(), 3, h, w], data)?, gts))
}

pub fn ground_truth(samples: &[ImageSample]) -> GroundTruth {
    samples.iter().map(|s| (s.source_id.clone(), s.gt_boxes())).collect()
}
