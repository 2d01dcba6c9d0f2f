//! Procedural RGB/IR line scenes.
//!
//! Each scene is a value-noise background crossed edge to edge by a few
//! sagging cables. In RGB the cables are dark and anti-aliased; in IR they
//! are bright over a dim, blurred background, contrast-compressed and then
//! shifted by a random sub-pixel translation to mimic registration error.
//! One weather corruption is applied to RGB only.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::weather::{weather_corrupt, WeatherKind};
use super::{save_dataset, SamplePair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

const MIN_POSITIVE: f64 = 0.002;
const MAX_POSITIVE: f64 = 0.05;
const IR_CONTRAST: f32 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_images: usize,
    pub image_size: usize,
    pub lines_per_image: (usize, usize),
    pub line_width_px: (f64, f64),
    pub ir_misalignment_px: (f64, f64),
    pub weather: Vec<WeatherKind>,
    pub weather_severity: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 400,
            image_size: 256,
            lines_per_image: (1, 4),
            line_width_px: (1.0, 3.0),
            ir_misalignment_px: (0.0, 4.0),
            weather: WeatherKind::ALL.to_vec(),
            weather_severity: (0.2, 0.8),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(format!("synth config: {msg}")));
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return bad(format!("image_size {} must be a positive multiple of 32", self.image_size));
        }
        let (l0, l1) = self.lines_per_image;
        if l0 == 0 || l0 > l1 {
            return bad(format!("lines_per_image {:?} must satisfy 1 <= lo <= hi", self.lines_per_image));
        }
        let (w0, w1) = self.line_width_px;
        if !(w0 > 0.0 && w0 <= w1) {
            return bad(format!("line_width_px {:?} must satisfy 0 < lo <= hi", self.line_width_px));
        }
        let (m0, m1) = self.ir_misalignment_px;
        if !(m0 >= 0.0 && m0 <= m1 && m1.is_finite()) {
            return bad(format!("ir_misalignment_px {:?} must satisfy 0 <= lo <= hi", self.ir_misalignment_px));
        }
        if self.weather.is_empty() {
            return bad("weather set is empty".into());
        }
        let (s0, s1) = self.weather_severity;
        if !(0.0 <= s0 && s0 <= s1 && s1 <= 1.0) {
            return bad(format!("weather_severity {:?} must lie in [0, 1]", self.weather_severity));
        }
        Ok(())
    }
}

/// Per-image draws recorded in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub weather: WeatherKind,
    pub severity: f64,
    pub misalignment_px: f64,
    pub shift_dy: f64,
    pub shift_dx: f64,
    pub lines: usize,
    pub positive_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub images: Vec<ImageRecord>,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub pairs: Vec<SamplePair>,
    pub manifest: Manifest,
}

impl SynthDataset {
    /// Writes the PNG triplets and `manifest.json` beneath `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        save_dataset(root, &self.pairs)?;
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut pairs = Vec::with_capacity(config.num_images);
    let mut images = Vec::with_capacity(config.num_images);
    for i in 0..config.num_images {
        let (pair, record) = generate_one(config, i)?;
        pairs.push(pair);
        images.push(record);
    }
    Ok(SynthDataset {
        pairs,
        manifest: Manifest {
            config: config.clone(),
            images,
        },
    })
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
fn value_noise<R: Rng>(rng: &mut R, size: usize, cells: usize) -> Vec<f32> {
    let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen()).collect();
    let at = |gy: usize, gx: usize| lattice[gy * (cells + 1) + gx];
    let step = cells as f32 / size as f32;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = (y as f32 + 0.5) * step;
        let gy = (fy as usize).min(cells - 1);
        let ty = smooth(fy - gy as f32);
        for x in 0..size {
            let fx = (x as f32 + 0.5) * step;
            let gx = (fx as usize).min(cells - 1);
            let tx = smooth(fx - gx as f32);
            let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
            let bot = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn fractal_noise<R: Rng>(rng: &mut R, size: usize) -> Vec<f32> {
    let mut acc = vec![0.0f32; size * size];
    for (cells, amp) in [(4, 0.5f32), (8, 0.3), (16, 0.2)] {
        for (a, v) in acc.iter_mut().zip(value_noise(rng, size, cells.min(size))) {
            *a += amp * v;
        }
    }
    acc
}

/// A sagging cable as a dense polyline in pixel-centre coordinates.
struct Cable {
    points: Vec<(f64, f64)>,
    width: f64,
    rgb_value: f32,
    ir_value: f32,
}

fn draw_cable<R: Rng>(rng: &mut R, size: usize, width: (f64, f64)) -> Cable {
    let s = size as f64;
    let theta = if rng.gen_bool(0.7) {
        rng.gen_range(-0.45..0.45)
    } else {
        rng.gen_range(0.0..std::f64::consts::PI)
    };
    let (dy, dx) = (f64::sin(theta), f64::cos(theta));
    let (py, px) = (rng.gen_range(0.2 * s..0.8 * s), rng.gen_range(0.2 * s..0.8 * s));
    // Parameter range keeping the chord inside a one-pixel margin.
    let (lo, hi) = (-1.0, s);
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for (p, d) in [(py, dy), (px, dx)] {
        if d.abs() > 1e-9 {
            let (a, b) = ((lo - p) / d, (hi - p) / d);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    let sag = rng.gen_range(0.0..0.08 * s) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let (ny, nx) = (dx, -dy);
    let steps = 96;
    let points = (0..=steps)
        .map(|k| {
            let u = k as f64 / steps as f64;
            let t = t0 + (t1 - t0) * u;
            let bow = sag * 4.0 * u * (1.0 - u);
            (py + t * dy + bow * ny, px + t * dx + bow * nx)
        })
        .collect();
    Cable {
        points,
        width: uniform(rng, width),
        rgb_value: rng.gen_range(0.05..0.3),
        ir_value: rng.gen_range(0.85..1.0),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vy, vx) = (b.0 - a.0, b.1 - a.1);
    let (wy, wx) = (p.0 - a.0, p.1 - a.1);
    let len2 = vy * vy + vx * vx;
    let t = if len2 > 0.0 { ((wy * vy + wx * vx) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (ey, ex) = (wy - t * vy, wx - t * vx);
    (ey * ey + ex * ex).sqrt()
}

/// Anti-aliased coverage `clamp(w/2 + 1/2 - d, 0, 1)` of one cable.
fn coverage(cable: &Cable, size: usize) -> Vec<f32> {
    let mut dist = vec![f64::INFINITY; size * size];
    let reach = cable.width / 2.0 + 1.0;
    for seg in cable.points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let y0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
        let y1 = (a.0.max(b.0) + reach).ceil().min(size as f64 - 1.0);
        let x0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
        let x1 = (a.1.max(b.1) + reach).ceil().min(size as f64 - 1.0);
        if y1 < 0.0 || x1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let d = segment_distance((y as f64, x as f64), a, b);
                let slot = &mut dist[y * size + x];
                if d < *slot {
                    *slot = d;
                }
            }
        }
    }
    dist.iter()
        .map(|&d| (cable.width / 2.0 + 0.5 - d).clamp(0.0, 1.0) as f32)
        .collect()
}

fn box_blur3(src: &[f32], size: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    let clampi = |v: isize| v.clamp(0, size as isize - 1) as usize;
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    acc += src[clampi(y as isize + dy) * size + clampi(x as isize + dx)];
                }
            }
            out[y * size + x] = acc / 9.0;
        }
    }
    out
}

/// Content moves by `(dy, dx)`; samples outside the source replicate the edge.
fn translate(src: &[f32], size: usize, dy: f64, dx: f64) -> Vec<f32> {
    if dy == 0.0 && dx == 0.0 {
        return src.to_vec();
    }
    let max = (size - 1) as f64;
    let mut out = Vec::with_capacity(src.len());
    for y in 0..size {
        for x in 0..size {
            let sy = (y as f64 - dy).clamp(0.0, max);
            let sx = (x as f64 - dx).clamp(0.0, max);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(size - 1), (x0 + 1).min(size - 1));
            let (ty, tx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            let top = src[y0 * size + x0] * (1.0 - tx) + src[y0 * size + x1] * tx;
            let bot = src[y1 * size + x0] * (1.0 - tx) + src[y1 * size + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn generate_one(config: &SynthConfig, index: usize) -> Result<(SamplePair, ImageRecord)> {
    let size = config.image_size;
    let plane = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);

    let base: f32 = rng.gen_range(0.45..0.75);
    let texture = fractal_noise(&mut rng, size);
    let lum: Vec<f32> = texture.iter().map(|t| (base + 0.35 * (t - 0.5)).clamp(0.0, 1.0)).collect();
    let tint: [f32; 3] = [rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1)];
    let grain = value_noise(&mut rng, size, (size / 4).max(1));

    let mut attempt = 0;
    let (cables, covers, cover) = loop {
        attempt += 1;
        let n = rng.gen_range(config.lines_per_image.0..=config.lines_per_image.1);
        let mut cables: Vec<Cable> = (0..n).map(|_| draw_cable(&mut rng, size, config.line_width_px)).collect();
        let mut covers: Vec<Vec<f32>> = cables.iter().map(|c| coverage(c, size)).collect();
        let union = |covers: &[Vec<f32>]| -> Vec<f32> {
            (0..plane)
                .map(|i| covers.iter().map(|c| c[i]).fold(0.0f32, f32::max))
                .collect()
        };
        let mut cover = union(&covers);
        let frac = |cover: &[f32]| cover.iter().filter(|&&v| v > 0.5).count() as f64 / plane as f64;
        while frac(&cover) > MAX_POSITIVE && cables.len() > 1 {
            cables.pop();
            covers.pop();
            cover = union(&covers);
        }
        let f = frac(&cover);
        if (MIN_POSITIVE..=MAX_POSITIVE).contains(&f) {
            break (cables, covers, cover);
        }
        if attempt >= 64 {
            return Err(Error::Contract(format!(
                "cannot keep the positive fraction within [{MIN_POSITIVE}, {MAX_POSITIVE}] at size {size}"
            )));
        }
    };

    // Strongest cable per pixel decides the cable colour.
    let owner: Vec<Option<usize>> = (0..plane)
        .map(|i| {
            covers
                .iter()
                .enumerate()
                .filter(|(_, c)| c[i] > 0.0)
                .max_by(|a, b| a.1[i].total_cmp(&b.1[i]))
                .map(|(k, _)| k)
        })
        .collect();

    let mut rgb = Tensor::<f32>::zeros([1, 3, size, size]);
    for c in 0..3 {
        let dst = &mut rgb.data_mut()[c * plane..(c + 1) * plane];
        for i in 0..plane {
            let bg = (lum[i] * tint[c] + 0.05 * (grain[i] - 0.5)).clamp(0.0, 1.0);
            let a = cover[i];
            dst[i] = match owner[i] {
                Some(k) => bg * (1.0 - a) + cables[k].rgb_value * a,
                None => bg,
            };
        }
    }

    let ir_bg = box_blur3(&lum.iter().map(|l| 0.25 + 0.15 * l).collect::<Vec<_>>(), size);
    let ir_scene: Vec<f32> = (0..plane)
        .map(|i| {
            let a = cover[i];
            let v = match owner[i] {
                Some(k) => ir_bg[i] * (1.0 - a) + cables[k].ir_value * a,
                None => ir_bg[i],
            };
            0.5 + IR_CONTRAST * (v - 0.5)
        })
        .collect();
    let magnitude = uniform(&mut rng, config.ir_misalignment_px);
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let (shift_dy, shift_dx) = if magnitude > 0.0 {
        (magnitude * phi.sin(), magnitude * phi.cos())
    } else {
        (0.0, 0.0)
    };
    let ir_data = translate(&ir_scene, size, shift_dy, shift_dx);
    let ir = Tensor::from_vec([1, 1, size, size], ir_data)?;

    let weather = config.weather[rng.gen_range(0..config.weather.len())];
    let severity = uniform(&mut rng, config.weather_severity);
    let rgb = weather_corrupt(&rgb, weather, severity, &mut rng)?;

    let gt = Tensor::from_vec([1, 1, size, size], cover.iter().map(|&a| if a > 0.5 { 1.0 } else { 0.0 }).collect())?;
    let id = format!("img_{index:05}");
    let pair = SamplePair::new(id.clone(), rgb, ir, gt)?;
    let record = ImageRecord {
        id,
        weather,
        severity,
        misalignment_px: magnitude,
        shift_dy,
        shift_dx,
        lines: cables.len(),
        positive_fraction: pair.positive_fraction(),
    };
    Ok((pair, record))
}
