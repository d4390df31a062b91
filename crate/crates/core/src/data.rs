//! Synthetic shapes corpus, PPM/PGM I/O and the training augmentations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::tensor::{kernels, Tensor};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Smallest visible area of every shape in a generated image.
pub const MIN_SHAPE_PIXELS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub size: usize,
    /// Background plus up to three shape classes (circle, rectangle, triangle).
    pub num_classes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            train: 64,
            val: 16,
            test: 16,
            size: 64,
            num_classes: 4,
            noise_sigma: 0.08,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.num_classes) {
            return Err(param_err!("num_classes must lie in [2, 4], got {}", self.num_classes));
        }
        if self.size < 32 {
            return Err(param_err!("image size must be ≥ 32, got {}", self.size));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(param_err!("noise_sigma must be finite and ≥ 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn count(&self, split: &str) -> Result<usize> {
        match split {
            "train" => Ok(self.train),
            "val" => Ok(self.val),
            "test" => Ok(self.test),
            other => Err(param_err!("unknown split {other:?}")),
        }
    }
}

/// An RGB image in `[0, 1]` (shape `1×3×H×W`) with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Triangle([(f64, f64); 3]),
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            Shape::Triangle(v) => {
                let cross = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let d = [cross(v[0], v[1]), cross(v[1], v[2]), cross(v[2], v[0])];
                d.iter().all(|&s| s >= 0.0) || d.iter().all(|&s| s <= 0.0)
            }
        }
    }

    fn random(class: u8, size: f64, rng: &mut ChaCha8Rng) -> Shape {
        let margin = 2.0;
        match class {
            1 => {
                let r = rng.gen_range(0.1..0.2) * size;
                Shape::Circle {
                    cy: rng.gen_range(margin..size - margin),
                    cx: rng.gen_range(margin..size - margin),
                    r,
                }
            }
            2 => {
                let (h, w) = (rng.gen_range(0.15..0.4) * size, rng.gen_range(0.15..0.4) * size);
                let y0 = rng.gen_range(0.0..size - h);
                let x0 = rng.gen_range(0.0..size - w);
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + h,
                    x1: x0 + w,
                }
            }
            _ => {
                let span = rng.gen_range(0.25..0.45) * size;
                let (y0, x0) = (rng.gen_range(0.0..size - span), rng.gen_range(0.0..size - span));
                let mut v = [(0.0, 0.0); 3];
                for p in &mut v {
                    *p = (y0 + rng.gen_range(0.0..span), x0 + rng.gen_range(0.0..span));
                }
                Shape::Triangle(v)
            }
        }
    }
}

/// Mean colour of each class; shapes and background are jittered around it.
const CLASS_TINT: [[f64; 3]; 4] = [
    [0.45, 0.45, 0.45],
    [0.80, 0.30, 0.25],
    [0.30, 0.70, 0.30],
    [0.30, 0.35, 0.80],
];

fn rng_for(seed: u64, split: &str, index: usize) -> Result<ChaCha8Rng> {
    let split_id = SPLITS
        .iter()
        .position(|s| *s == split)
        .ok_or_else(|| param_err!("unknown split {split:?}"))? as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split_id << 32) | index as u64);
    Ok(rng)
}

/// Deterministic sample `index` of `split`.
pub fn generate_sample(spec: &DatasetSpec, split: &str, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, split, index)?;
    let n = spec.size;
    let size = n as f64;
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| param_err!("noise distribution: {e}"))?;
    loop {
        let mut classes: Vec<u8> = (1..spec.num_classes as u8).collect();
        // Random painter order so any shape may be partly occluded.
        for i in (1..classes.len()).rev() {
            classes.swap(i, rng.gen_range(0..=i));
        }
        let shapes: Vec<(u8, Shape)> = classes.iter().map(|&c| (c, Shape::random(c, size, &mut rng))).collect();
        let mut labels = vec![0u8; n * n];
        for (y, row) in labels.chunks_mut(n).enumerate() {
            for (x, l) in row.iter_mut().enumerate() {
                for (c, s) in &shapes {
                    if s.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        *l = *c;
                    }
                }
            }
        }
        let mut hist = vec![0usize; spec.num_classes];
        for &l in &labels {
            hist[l as usize] += 1;
        }
        if hist[1..].iter().any(|&h| h < MIN_SHAPE_PIXELS) || hist[0] * 2 <= n * n {
            continue;
        }

        let mut tints = [[0.0; 3]; 4];
        for (c, tint) in tints.iter_mut().enumerate().take(spec.num_classes) {
            for (ch, v) in tint.iter_mut().enumerate() {
                *v = CLASS_TINT[c][ch] + rng.gen_range(-0.12..0.12);
            }
        }
        let plane = n * n;
        let mut image = vec![0.0; 3 * plane];
        for ch in 0..3 {
            for p in 0..plane {
                let v = tints[labels[p] as usize][ch] + noise.sample(&mut rng);
                image[ch * plane + p] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
        return Ok(Sample {
            image: Tensor::new(vec![1, 3, n, n], image)?,
            labels: LabelMap::new(n, n, labels)?,
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: String,
    pub spec: DatasetSpec,
    pub items: Vec<ManifestItem>,
}

fn manifest_path(root: &Path, split: &str) -> PathBuf {
    root.join(format!("{split}.json"))
}

/// Writes every split under `root` with one manifest per split.
pub fn generate(spec: &DatasetSpec, root: &Path) -> Result<()> {
    spec.validate()?;
    for split in SPLITS {
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut items = Vec::new();
        for i in 0..spec.count(split)? {
            let sample = generate_sample(spec, split, i)?;
            let image = format!("{split}/{i:04}.ppm");
            let label = format!("{split}/{i:04}_labels.pgm");
            write_ppm(&root.join(&image), &sample.image)?;
            write_pgm(&root.join(&label), &sample.labels)?;
            items.push(ManifestItem { image, label });
        }
        let manifest = Manifest {
            split: split.to_string(),
            spec: spec.clone(),
            items,
        };
        let path = manifest_path(root, split);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_manifest(root: &Path, split: &str) -> Result<Manifest> {
    let path = manifest_path(root, split);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Loads a split and checks labels against `num_classes`.
pub fn load_split(root: &Path, split: &str, num_classes: usize) -> Result<Vec<Sample>> {
    let manifest = read_manifest(root, split)?;
    manifest
        .items
        .iter()
        .map(|item| {
            let image = read_ppm(&root.join(&item.image))?;
            let labels = read_pgm(&root.join(&item.label))?;
            let (_, _, h, w) = image.dims4()?;
            if (h, w) != (labels.height(), labels.width()) {
                return Err(Error::Data(format!(
                    "{}: image is {}×{} but labels are {}×{}",
                    item.image,
                    h,
                    w,
                    labels.height(),
                    labels.width()
                )));
            }
            labels.validate(num_classes, IGNORE_LABEL)?;
            Ok(Sample { image, labels })
        })
        .collect()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `1×3×H×W` image in `[0, 1]` as binary P6.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(shape_err!("ppm needs a 1×3×H×W image, got {:?}", image.shape()));
    }
    let plane = h * w;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..plane {
        for ch in 0..3 {
            bytes.push(to_byte(image.data()[ch * plane + p]));
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit plane as binary P5.
pub fn write_pgm_bytes(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    if data.len() != height * width {
        return Err(shape_err!("pgm {}×{} needs {} bytes, got {}", height, width, height * width, data.len()));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    write_pgm_bytes(path, labels.height(), labels.width(), labels.data())
}

/// Parses a binary PNM header; returns `(width, height, offset of pixel data)`.
fn parse_header(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != magic {
        return Err(bad(&format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header field {s:?}")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad(&format!("only 8-bit files are supported, maxval {max}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    Ok((w, h, i + 1))
}

fn read_raster(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, offset) = parse_header(&bytes, magic, path)?;
    let need = w * h * channels;
    if w == 0 || h == 0 || bytes.len() < offset + need {
        return Err(Error::Data(format!(
            "{}: expected {need} pixel bytes for {w}×{h}",
            path.display()
        )));
    }
    Ok((w, h, bytes[offset..offset + need].to_vec()))
}

/// Reads a P6 file into a `1×3×H×W` tensor in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let (w, h, raster) = read_raster(path, "P6", 3)?;
    let plane = w * h;
    Tensor::new(
        vec![1, 3, h, w],
        (0..3 * plane)
            .map(|i| raster[(i % plane) * 3 + i / plane] as f64 / 255.0)
            .collect(),
    )
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let (w, h, raster) = read_raster(path, "P5", 1)?;
    LabelMap::new(h, w, raster)
}

/// Channel normalisation with mean 0.5 and std 0.5.
pub fn normalize(image: &Tensor) -> Tensor {
    Tensor::from_fn(image.shape(), |i| (image.data()[i] - 0.5) / 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            brightness: 0.2,
            contrast: 0.2,
            flip_prob: 0.5,
            scale_min: 0.5,
            scale_max: 2.0,
        }
    }
}

/// One concrete draw of the augmentation pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub brightness: f64,
    pub contrast: f64,
    pub flip: bool,
    pub scale: f64,
    /// Offset of the crop window in the scaled image, or of the scaled image
    /// inside the padded canvas when it is smaller than the output.
    pub offset_y: usize,
    pub offset_x: usize,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            brightness: 0.0,
            contrast: 0.0,
            flip: false,
            scale: 1.0,
            offset_y: 0,
            offset_x: 0,
        }
    }

    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let brightness = rng.gen_range(-cfg.brightness..=cfg.brightness);
        let contrast = rng.gen_range(-cfg.contrast..=cfg.contrast);
        let flip = rng.gen::<f64>() < cfg.flip_prob;
        let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
        let (sh, sw) = scaled_size(height, width, scale);
        let offset_y = rng.gen_range(0..=sh.abs_diff(height));
        let offset_x = rng.gen_range(0..=sw.abs_diff(width));
        AugmentParams {
            brightness,
            contrast,
            flip,
            scale,
            offset_y,
            offset_x,
        }
    }
}

fn scaled_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let f = |v: usize| ((v as f64 * scale).round() as usize).max(1);
    (f(h), f(w))
}

/// Distortion, flip, rescale, crop/pad back to the input size. Returns an
/// image still in `[0, 1]` (padding 0) and labels padded with the ignore
/// value; call [`normalize`] afterwards.
pub fn augment_with(sample: &Sample, p: &AugmentParams) -> Result<Sample> {
    let (_, _, h, w) = sample.image.dims4()?;
    let img = sample.image.data();
    let plane = h * w;
    let mut image = Tensor::from_fn(sample.image.shape(), |i| {
        let x = if p.flip {
            let (c, y, x) = (i / plane, (i % plane) / w, i % w);
            img[c * plane + y * w + (w - 1 - x)]
        } else {
            img[i]
        };
        (x * (1.0 + p.contrast) + (p.brightness - 0.5 * p.contrast)).clamp(0.0, 1.0)
    });
    let mut labels = if p.flip {
        sample.labels.flip_horizontal()
    } else {
        sample.labels.clone()
    };

    let (sh, sw) = scaled_size(h, w, p.scale);
    if (sh, sw) != (h, w) {
        image = kernels::bilinear_resize(&image, sh, sw)?;
        labels = LabelMap::new(sh, sw, kernels::nearest_resize_u8(labels.data(), h, w, sh, sw))?;
    }

    let mut out_img = Tensor::zeros(&[1, 3, h, w]);
    let mut out_lbl = LabelMap::filled(h, w, IGNORE_LABEL);
    // Source window start and destination start per axis.
    let axis = |scaled: usize, full: usize, offset: usize| {
        if scaled >= full {
            (offset.min(scaled - full), 0)
        } else {
            (0, offset.min(full - scaled))
        }
    };
    let (sy0, dy0) = axis(sh, h, p.offset_y);
    let (sx0, dx0) = axis(sw, w, p.offset_x);
    let (ch, cw) = (sh.min(h), sw.min(w));
    let splane = sh * sw;
    for y in 0..ch {
        for x in 0..cw {
            let (sy, sx, dy, dx) = (sy0 + y, sx0 + x, dy0 + y, dx0 + x);
            for c in 0..3 {
                out_img.data_mut()[c * plane + dy * w + dx] = image.data()[c * splane + sy * sw + sx];
            }
            out_lbl.data_mut()[dy * w + dx] = labels.data()[sy * sw + sx];
        }
    }
    Ok(Sample {
        image: out_img,
        labels: out_lbl,
    })
}

/// Draws parameters from `rng` and applies them.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    if !cfg.enabled {
        return Ok(sample.clone());
    }
    let params = AugmentParams::sample(cfg, sample.labels.height(), sample.labels.width(), rng);
    augment_with(sample, &params)
}
