//! Samples, the synthetic shape dataset, dataset files and augmentation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::{bilinear_taps, read_tensor, write_tensor, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: i32 = 255;
pub const IMAGE_SUFFIX: &str = ".img.fbt";
pub const LABEL_SUFFIX: &str = ".lbl.fbt";

/// An RGB image `[3, H, W]` in `[0, 1]` with its label map `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub labels: Tensor<i32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, labels: Tensor<i32>) -> Result<Self> {
        let id = id.into();
        match (image.shape(), labels.shape()) {
            ([3, h, w], [lh, lw]) if h == lh && w == lw => Ok(Sample { id, image, labels }),
            _ => Err(Error::Ingestion(format!(
                "sample {id}: image {:?} and labels {:?} do not describe one 3-channel picture",
                image.shape(),
                labels.shape()
            ))),
        }
    }

    pub fn height(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.labels.shape()[1]
    }

    /// Checks that every label is a class below `num_classes` or the ignore index.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .data()
            .iter()
            .find(|&&v| v != IGNORE_INDEX && (v < 0 || v as usize >= num_classes))
        {
            Some(v) => Err(Error::Ingestion(format!(
                "sample {}: label {v} is neither below {num_classes} nor {IGNORE_INDEX}",
                self.id
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
    /// Amplitude of uniform per-shape colour jitter.
    pub jitter: f64,
    pub seed: u64,
}

pub const SYNTHETIC_KEYS: [&str; 8] = [
    "num_classes",
    "height",
    "width",
    "min_shapes",
    "max_shapes",
    "noise",
    "jitter",
    "seed",
];

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 5,
            height: 64,
            width: 64,
            min_shapes: 2,
            max_shapes: 5,
            noise: 0.05,
            jitter: 0.08,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Reads `<prefix><key>` for every synthetic key present in `kv`.
    pub fn apply_kv(&mut self, kv: &KvMap, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        kv.read_into(&key("num_classes"), &mut self.num_classes)?;
        kv.read_into(&key("height"), &mut self.height)?;
        kv.read_into(&key("width"), &mut self.width)?;
        kv.read_into(&key("min_shapes"), &mut self.min_shapes)?;
        kv.read_into(&key("max_shapes"), &mut self.max_shapes)?;
        kv.read_into(&key("noise"), &mut self.noise)?;
        kv.read_into(&key("jitter"), &mut self.jitter)?;
        kv.read_into(&key("seed"), &mut self.seed)?;
        Ok(())
    }

    pub fn to_kv(&self, prefix: &str) -> KvMap {
        let mut kv = KvMap::new();
        kv.set(format!("{prefix}num_classes"), self.num_classes);
        kv.set(format!("{prefix}height"), self.height);
        kv.set(format!("{prefix}width"), self.width);
        kv.set(format!("{prefix}min_shapes"), self.min_shapes);
        kv.set(format!("{prefix}max_shapes"), self.max_shapes);
        kv.set(format!("{prefix}noise"), self.noise);
        kv.set(format!("{prefix}jitter"), self.jitter);
        kv.set(format!("{prefix}seed"), self.seed);
        kv
    }

    /// Parses a standalone spec file with unprefixed keys.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        kv.check_known(&SYNTHETIC_KEYS)?;
        let mut spec = SyntheticSpec::default();
        spec.apply_kv(&kv, "")?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("a synthetic dataset needs at least two classes"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("synthetic canvas must be at least 8x8"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("min_shapes exceeds max_shapes"));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::config("noise and jitter must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Base colour of a class. Class 0 is the grey background.
pub fn class_colour(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 4] = [[0.85, 0.25, 0.2], [0.25, 0.75, 0.3], [0.25, 0.35, 0.9], [0.9, 0.85, 0.25]];
    match class {
        0 => [0.5, 0.5, 0.5],
        1..=4 => PALETTE[class - 1],
        _ => {
            // golden-angle hues for further classes
            let h = ((class - 1) as f64 * 0.618_033_988_75).fract() * 6.0;
            let (s, v) = (0.7, 0.85);
            let f = h.fract();
            let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
            match h as usize {
                0 => [v, t, p],
                1 => [q, v, p],
                2 => [p, v, t],
                3 => [p, q, v],
                4 => [t, p, v],
                _ => [v, p, q],
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Stripe,
    Triangle,
}

/// Shape drawn for a foreground class; classes beyond four reuse the kinds.
pub fn class_shape(class: usize) -> ShapeKind {
    [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Stripe, ShapeKind::Triangle][(class - 1) % 4]
}

/// Pixel-centre membership test of one placed shape.
fn shape_mask(kind: ShapeKind, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Box<dyn Fn(f64, f64) -> bool> {
    let side = h.min(w) as f64;
    let (hf, wf) = (h as f64, w as f64);
    match kind {
        ShapeKind::Rectangle => {
            let rh = rng.random_range(0.15 * side..0.45 * side);
            let rw = rng.random_range(0.15 * side..0.45 * side);
            let y0 = rng.random_range(0.0..(hf - rh).max(1.0));
            let x0 = rng.random_range(0.0..(wf - rw).max(1.0));
            Box::new(move |y, x| y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw)
        }
        ShapeKind::Ellipse => {
            let a = rng.random_range(0.08 * side..0.22 * side);
            let b = rng.random_range(0.08 * side..0.22 * side);
            let cy = rng.random_range(0.0..hf);
            let cx = rng.random_range(0.0..wf);
            Box::new(move |y, x| ((y - cy) / a).powi(2) + ((x - cx) / b).powi(2) <= 1.0)
        }
        ShapeKind::Stripe => {
            let thickness = rng.random_range(0.06 * side..0.12 * side);
            let theta = rng.random_range(0.0..PI);
            let (s, c) = theta.sin_cos();
            let offset = rng.random_range(0.2..0.8) * (hf * s.abs() + wf * c.abs()) + (0.0f64).min(wf * c);
            Box::new(move |y, x| (x * c + y * s - offset).abs() <= thickness / 2.0)
        }
        ShapeKind::Triangle => {
            let r = rng.random_range(0.12 * side..0.25 * side);
            let cy = rng.random_range(r..(hf - r).max(r + 1.0));
            let cx = rng.random_range(r..(wf - r).max(r + 1.0));
            let rot = rng.random_range(0.0..2.0 * PI);
            let v: Vec<(f64, f64)> = (0..3)
                .map(|k| {
                    let a = rot + k as f64 * 2.0 * PI / 3.0;
                    (cy + r * a.sin(), cx + r * a.cos())
                })
                .collect();
            Box::new(move |y, x| {
                let edge = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
                d.iter().all(|&e| e >= 0.0) || d.iter().all(|&e| e <= 0.0)
            })
        }
    }
}

/// Deterministic generator for sample `index`, independent of how many
/// samples are requested.
pub fn synthetic_sample(spec: &SyntheticSpec, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut image = vec![0.0f64; 3 * plane];
    let mut labels = vec![0i32; plane];

    // low-frequency grey texture
    let grey = 0.5 + spec.jitter * rng.random_range(-1.0..1.0);
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.05..0.35),
                rng.random_range(0.05..0.35),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves
                .iter()
                .map(|&(fy, fx, p)| 0.06 * (fy * y as f64 + fx * x as f64 + p).sin())
                .sum();
            for c in 0..3 {
                image[c * plane + y * w + x] = grey + t;
            }
        }
    }

    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    for _ in 0..count {
        let class = rng.random_range(1..spec.num_classes);
        let base = class_colour(class);
        let colour: Vec<f64> = base
            .iter()
            .map(|&b| b + spec.jitter * rng.random_range(-1.0..1.0))
            .collect();
        let inside = shape_mask(class_shape(class), h, w, &mut rng);
        for y in 0..h {
            for x in 0..w {
                if inside(y as f64 + 0.5, x as f64 + 0.5) {
                    labels[y * w + x] = class as i32;
                    for c in 0..3 {
                        image[c * plane + y * w + x] = colour[c];
                    }
                }
            }
        }
    }

    let pixels = image
        .into_iter()
        .map(|v| {
            let n = if spec.noise > 0.0 {
                spec.noise * rng.random_range(-1.0..1.0)
            } else {
                0.0
            };
            (v + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    Sample {
        id: format!("{index:06}"),
        image: Tensor::new(vec![3, h, w], pixels).expect("image buffer"),
        labels: Tensor::new(vec![h, w], labels).expect("label buffer"),
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..n).map(|i| synthetic_sample(spec, i)).collect())
}

pub fn save_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for s in samples {
        write_tensor(dir.join(format!("{}{IMAGE_SUFFIX}", s.id)), &s.image)?;
        write_tensor(dir.join(format!("{}{LABEL_SUFFIX}", s.id)), &s.labels)?;
    }
    Ok(())
}

/// Loads every `<id>.img.fbt` / `<id>.lbl.fbt` pair, sorted by id. Other
/// files are ignored; a file without its partner is an error.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut pairs: BTreeMap<String, (bool, bool)> = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(IMAGE_SUFFIX) {
            pairs.entry(id.to_string()).or_default().0 = true;
        } else if let Some(id) = name.strip_suffix(LABEL_SUFFIX) {
            pairs.entry(id.to_string()).or_default().1 = true;
        }
    }
    let orphans: Vec<String> = pairs
        .iter()
        .filter(|(_, &(img, lbl))| !(img && lbl))
        .map(|(id, &(img, _))| format!("{id} (missing {})", if img { "labels" } else { "image" }))
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Ingestion(format!("unpaired files: {}", orphans.join(", "))));
    }
    pairs
        .keys()
        .map(|id| {
            let image = read_tensor::<f32>(dir.join(format!("{id}{IMAGE_SUFFIX}")))?;
            let labels = read_tensor::<i32>(dir.join(format!("{id}{LABEL_SUFFIX}")))?;
            Sample::new(id.clone(), image, labels)
        })
        .collect()
}

/// Deterministic split by sorted id: the first `train_fraction` of the
/// samples train, the rest validate.
pub fn split_train_val(mut samples: Vec<Sample>, train_fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let cut = ((samples.len() as f64 * train_fraction).round() as usize).min(samples.len());
    let val = samples.split_off(cut);
    (samples, val)
}

/// Pixel counts per class, followed by the ignore count.
pub fn class_histogram(samples: &[Sample], num_classes: usize) -> Vec<u64> {
    let mut hist = vec![0u64; num_classes + 1];
    for s in samples {
        for &v in s.labels.data() {
            if v == IGNORE_INDEX {
                hist[num_classes] += 1;
            } else if (0..num_classes as i32).contains(&v) {
                hist[v as usize] += 1;
            }
        }
    }
    hist
}

fn resize_image(image: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if (h, w) == (oh, ow) {
        return image.clone();
    }
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let src = image.data();
    let mut out = Vec::with_capacity(3 * oh * ow);
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for r in &rows {
            for q in &cols {
                let at = |y: usize, x: usize| plane[y * w + x] as f64;
                let (fy, fx) = (r.frac, q.frac);
                let top = at(r.lo, q.lo) * (1.0 - fx) + at(r.lo, q.hi) * fx;
                let bottom = at(r.hi, q.lo) * (1.0 - fx) + at(r.hi, q.hi) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Tensor::new(vec![3, oh, ow], out).expect("resized image")
}

/// Nearest source index for output index `i` under half-pixel alignment.
fn nearest(i: usize, src: usize, dst: usize) -> usize {
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

fn resize_labels(labels: &Tensor<i32>, oh: usize, ow: usize) -> Tensor<i32> {
    let (h, w) = (labels.shape()[0], labels.shape()[1]);
    if (h, w) == (oh, ow) {
        return labels.clone();
    }
    let data = labels.data();
    Tensor::from_fn(vec![oh, ow], |k| {
        let (i, j) = (k / ow, k % ow);
        data[nearest(i, h, oh) * w + nearest(j, w, ow)]
    })
}

/// Bilinear image / nearest-label resize to an explicit extent.
pub fn resize(sample: &Sample, oh: usize, ow: usize) -> Sample {
    Sample {
        id: sample.id.clone(),
        image: resize_image(&sample.image, oh, ow),
        labels: resize_labels(&sample.labels, oh, ow),
    }
}

/// Extent after scaling the smaller side to `base`, keeping the aspect ratio.
pub fn short_side_extent(h: usize, w: usize, base: usize) -> (usize, usize) {
    let scale = |long: usize, short: usize| ((long as f64 * base as f64 / short as f64).round() as usize).max(1);
    if h <= w {
        (base, scale(w, h))
    } else {
        (scale(h, w), base)
    }
}

/// Deterministic evaluation resize: smaller side to `base`.
pub fn eval_resize(sample: &Sample, base: usize) -> Sample {
    let (oh, ow) = short_side_extent(sample.height(), sample.width(), base);
    resize(sample, oh, ow)
}

/// Crop `size`×`size` at (`top`, `left`), padding beyond the sample with
/// image 0 and the ignore label.
pub fn crop(sample: &Sample, top: usize, left: usize, size: usize) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let inside = |i: usize, j: usize| top + i < h && left + j < w;
    let image = Tensor::from_fn(vec![3, size, size], |k| {
        let (c, i, j) = (k / (size * size), (k / size) % size, k % size);
        if inside(i, j) {
            sample.image.data()[(c * h + top + i) * w + left + j]
        } else {
            0.0
        }
    });
    let labels = Tensor::from_fn(vec![size, size], |k| {
        let (i, j) = (k / size, k % size);
        if inside(i, j) {
            sample.labels.data()[(top + i) * w + left + j]
        } else {
            IGNORE_INDEX
        }
    });
    Sample {
        id: sample.id.clone(),
        image,
        labels,
    }
}

pub fn hflip(sample: &Sample) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    Sample {
        id: sample.id.clone(),
        image: Tensor::from_fn(vec![3, h, w], |k| {
            let (row, j) = (k / w, k % w);
            sample.image.data()[row * w + (w - 1 - j)]
        }),
        labels: Tensor::from_fn(vec![h, w], |k| {
            let (i, j) = (k / w, k % w);
            sample.labels.data()[i * w + (w - 1 - j)]
        }),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub base_size: usize,
    pub crop_size: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip: bool,
}

impl AugmentConfig {
    pub fn toy() -> Self {
        AugmentConfig {
            base_size: 72,
            crop_size: 64,
            scale_min: 0.5,
            scale_max: 2.0,
            flip: true,
        }
    }

    pub fn paper_scale() -> Self {
        AugmentConfig {
            base_size: 520,
            crop_size: 480,
            ..AugmentConfig::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_size == 0 || self.crop_size == 0 {
            return Err(Error::config("base and crop sizes must be positive"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::config("scale range must satisfy 0 < min <= max"));
        }
        Ok(())
    }
}

/// The random choices of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    /// Crop origin as fractions of the free range in `[0, 1]`.
    pub top: f64,
    pub left: f64,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let scale = if cfg.scale_min < cfg.scale_max {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        AugmentDraw {
            scale,
            top: rng.random(),
            left: rng.random(),
            flip: cfg.flip && rng.random_bool(0.5),
        }
    }
}

/// Resize to base, rescale, crop (padding as needed) and optionally flip.
pub fn apply_augment(sample: &Sample, cfg: &AugmentConfig, draw: &AugmentDraw) -> Sample {
    let based = eval_resize(sample, cfg.base_size);
    let oh = ((based.height() as f64 * draw.scale).round() as usize).max(1);
    let ow = ((based.width() as f64 * draw.scale).round() as usize).max(1);
    let scaled = resize(&based, oh, ow);
    let free = |extent: usize, frac: f64| (extent.saturating_sub(cfg.crop_size) as f64 * frac).round() as usize;
    let cropped = crop(&scaled, free(oh, draw.top), free(ow, draw.left), cfg.crop_size);
    if draw.flip {
        hflip(&cropped)
    } else {
        cropped
    }
}

pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let draw = AugmentDraw::sample(cfg, rng);
    apply_augment(sample, cfg, &draw)
}

/// Independent stream for sample `index` in `epoch`.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Stacks equally sized samples into `[B, 3, H, W]` images and `[B, H, W]` labels.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<i32>)> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<Tensor<i32>> = samples.iter().map(|s| s.labels.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&labels)?))
}

/// Nearest-neighbour label downsampling of `[B, H, W]` by an integer factor,
/// reading the pixel at `i·f + f/2`.
pub fn downsample_labels(labels: &Tensor<i32>, factor: usize) -> Result<Tensor<i32>> {
    let [b, h, w] = labels.shape()[..] else {
        return Err(Error::shape("label batch", labels.shape(), &[0, 0, 0]));
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::config(format!("label extent {h}x{w} is not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let data = labels.data();
    Ok(Tensor::from_fn(vec![b, oh, ow], |k| {
        let (bi, i, j) = (k / (oh * ow), (k / ow) % oh, k % ow);
        data[(bi * h + i * factor + factor / 2) * w + j * factor + factor / 2]
    }))
}

/// Pads a sample on the bottom and right to extents divisible by `multiple`.
pub fn pad_to_multiple(sample: &Sample, multiple: usize) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return sample.clone();
    }
    let image = Tensor::from_fn(vec![3, ph, pw], |k| {
        let (c, i, j) = (k / (ph * pw), (k / pw) % ph, k % pw);
        if i < h && j < w {
            sample.image.data()[(c * h + i) * w + j]
        } else {
            0.0
        }
    });
    let labels = Tensor::from_fn(vec![ph, pw], |k| {
        let (i, j) = (k / pw, k % pw);
        if i < h && j < w {
            sample.labels.data()[i * w + j]
        } else {
            IGNORE_INDEX
        }
    });
    Sample {
        id: sample.id.clone(),
        image,
        labels,
    }
}
