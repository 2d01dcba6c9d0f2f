//! Paired RGB/IR samples: on-disk layout, splitting, augmentation, weather
//! corruption and a synthetic generator.
//!
//! A dataset directory holds `rgb/<id>.png` (8-bit RGB), `ir/<id>.png`
//! (8- or 16-bit grayscale) and `gt/<id>.png` (0/255 mask).

mod augment;
pub mod png_io;
mod synth;
mod weather;

pub use augment::{augment_train, AugmentDraw};
pub use synth::{generate_synthetic, ImageRecord, Manifest, SynthConfig, SynthDataset, MANIFEST_FILE};
pub use weather::{weather_corrupt, WeatherKind};

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::resize_bilinear;
use crate::tensor::Tensor;
use png_io::{quantize, read_png, write_png_u8};

pub const RGB_DIR: &str = "rgb";
pub const IR_DIR: &str = "ir";
pub const GT_DIR: &str = "gt";

/// One registered triplet, each a single-sample NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub rgb: Tensor<f32>,
    pub ir: Tensor<f32>,
    pub gt: Tensor<f32>,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, rgb: Tensor<f32>, ir: Tensor<f32>, gt: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        let [_, rc, h, w] = rgb.shape();
        if rgb.batch() != 1 || rc != 3 {
            return Err(Error::Shape(format!("sample `{id}`: rgb must be 1x3xHxW, got {:?}", rgb.shape())));
        }
        for (name, t) in [("ir", &ir), ("gt", &gt)] {
            if t.shape() != [1, 1, h, w] {
                return Err(Error::Shape(format!(
                    "sample `{id}`: {name} must be 1x1x{h}x{w}, got {:?}",
                    t.shape()
                )));
            }
        }
        if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract(format!("sample `{id}`: ground truth is not binary")));
        }
        Ok(Self { id, rgb, ir, gt })
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn gt_mask(&self) -> Vec<u8> {
        self.gt.data().iter().map(|&v| u8::from(v > 0.5)).collect()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.gt.data().iter().filter(|&&v| v > 0.5).count() as f64 / self.gt.len() as f64
    }
}

/// Stacks samples into `(rgb, ir, gt)` batches.
pub fn collate(samples: &[&SamplePair]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let rgb: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.rgb).collect();
    let ir: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.ir).collect();
    let gt: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.gt).collect();
    Ok((Tensor::stack(&rgb)?, Tensor::stack(&ir)?, Tensor::stack(&gt)?))
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut ids = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

fn planar(raw: &png_io::RawImage, want: usize, path: &Path) -> Result<Tensor<f32>> {
    // Alpha and surplus channels are dropped; grayscale is kept as-is.
    let c = raw.channels;
    let usable = matches!((want, c), (3, 3 | 4) | (1, 1 | 2));
    if !usable {
        return Err(Error::Data(format!(
            "{}: expected {} channel(s), found {c}",
            path.display(),
            want
        )));
    }
    let (h, w) = (raw.height, raw.width);
    Ok(Tensor::from_fn([1, want, h, w], |[_, ch, y, x]| raw.samples[(y * w + x) * c + ch]))
}

/// Loads every triplet under `root`, ids sorted. With `size`, images whose
/// dimensions differ are resized bilinearly (masks are re-thresholded).
pub fn load_dataset(root: &Path, size: Option<usize>) -> Result<Vec<SamplePair>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset directory {} does not exist", root.display())));
    }
    let rgb_ids = png_ids(&root.join(RGB_DIR))?;
    let ir_ids = png_ids(&root.join(IR_DIR))?;
    let gt_ids = png_ids(&root.join(GT_DIR))?;
    let all: BTreeSet<&String> = rgb_ids.iter().chain(&ir_ids).chain(&gt_ids).collect();
    let mut orphans = Vec::new();
    for id in &all {
        let missing: Vec<&str> = [(RGB_DIR, &rgb_ids), (IR_DIR, &ir_ids), (GT_DIR, &gt_ids)]
            .iter()
            .filter(|(_, set)| !set.contains(*id))
            .map(|(d, _)| *d)
            .collect();
        if !missing.is_empty() {
            orphans.push(format!("{id} (missing {})", missing.join(", ")));
        }
    }
    if !orphans.is_empty() {
        return Err(Error::Data(format!("incomplete triplets: {}", orphans.join("; "))));
    }

    let mut pairs = Vec::with_capacity(rgb_ids.len());
    for id in &rgb_ids {
        let file = format!("{id}.png");
        let rgb_path = root.join(RGB_DIR).join(&file);
        let ir_path = root.join(IR_DIR).join(&file);
        let gt_path = root.join(GT_DIR).join(&file);
        let mut rgb = planar(&read_png(&rgb_path)?, 3, &rgb_path)?;
        let mut ir = planar(&read_png(&ir_path)?, 1, &ir_path)?;
        let mut gt_raw = planar(&read_png(&gt_path)?, 1, &gt_path)?;
        if let Some(s) = size {
            rgb = resize_to(rgb, s)?;
            ir = resize_to(ir, s)?;
            gt_raw = resize_to(gt_raw, s)?;
        }
        if ir.shape()[2..] != rgb.shape()[2..] || gt_raw.shape()[2..] != rgb.shape()[2..] {
            return Err(Error::Data(format!(
                "sample `{id}`: rgb {:?}, ir {:?} and gt {:?} differ in size",
                rgb.shape(),
                ir.shape(),
                gt_raw.shape()
            )));
        }
        let gt = gt_raw.map(|v| if v >= 128.0 / 255.0 { 1.0 } else { 0.0 });
        pairs.push(SamplePair::new(id.clone(), rgb, ir, gt)?);
    }
    Ok(pairs)
}

/// Reads one RGB image and its IR partner as `1x3xHxW` and `1x1xHxW`
/// tensors, resized like [`load_dataset`] when `size` is given.
pub fn load_inputs(rgb_path: &Path, ir_path: &Path, size: Option<usize>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut rgb = planar(&read_png(rgb_path)?, 3, rgb_path)?;
    let mut ir = planar(&read_png(ir_path)?, 1, ir_path)?;
    if let Some(s) = size {
        rgb = resize_to(rgb, s)?;
        ir = resize_to(ir, s)?;
    }
    if ir.shape()[2..] != rgb.shape()[2..] {
        return Err(Error::Data(format!(
            "{} is {:?} but {} is {:?}",
            rgb_path.display(),
            rgb.shape(),
            ir_path.display(),
            ir.shape()
        )));
    }
    Ok((rgb, ir))
}

fn resize_to(t: Tensor<f32>, s: usize) -> Result<Tensor<f32>> {
    if t.height() == s && t.width() == s {
        Ok(t)
    } else {
        resize_bilinear(&t, s, s)
    }
}

/// Writes the three PNGs of every pair beneath `root`.
pub fn save_dataset(root: &Path, pairs: &[SamplePair]) -> Result<()> {
    for d in [RGB_DIR, IR_DIR, GT_DIR] {
        let p = root.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for pair in pairs {
        let (h, w) = (pair.height(), pair.width());
        let plane = h * w;
        let rgb = pair.rgb.data();
        let mut inter = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                inter.push(quantize(rgb[c * plane + i]));
            }
        }
        let file = format!("{}.png", pair.id);
        write_png_u8(&root.join(RGB_DIR).join(&file), w, h, 3, &inter)?;
        let ir: Vec<u8> = pair.ir.data().iter().map(|&v| quantize(v)).collect();
        write_png_u8(&root.join(IR_DIR).join(&file), w, h, 1, &ir)?;
        let gt: Vec<u8> = pair.gt.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
        write_png_u8(&root.join(GT_DIR).join(&file), w, h, 1, &gt)?;
    }
    Ok(())
}

/// Fractions of the default train/validation/test protocol.
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.70, 0.10, 0.20);

/// Seeded shuffle then contiguous cut into train/val/test. Validation and
/// test sizes are rounded to nearest; train takes the rest.
pub fn split<T>(items: Vec<T>, fractions: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Contract("cannot split an empty dataset".into()));
    }
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let n = items.len();
    let n_val = (n as f64 * b).round() as usize;
    let n_test = ((n as f64 * c).round() as usize).min(n - n_val);
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<T> {
        order[range].iter().map(|&i| slots[i].take().expect("index used once")).collect()
    };
    let train = take(0..n_train);
    let val = take(n_train..n_train + n_val);
    let test = take(n_train + n_val..n);
    Ok((train, val, test))
}
