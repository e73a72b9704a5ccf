//! Seeded synthetic segmentation scenes with a known complexity tag.
//!
//! Simple scenes: a few large smooth regions (argmax of per-class 3×3 random
//! fields, bilinearly upsampled) plus strong sensor noise, σ = 0.1.
//! Complex scenes: many small regions (per-class fields on an `H/4` grid),
//! thin 1–2 px line structures, a high-frequency sinusoidal texture whose
//! orientation depends on the class, and weak sensor noise, σ = 0.02.
//!
//! Every sample is generated from its own stream seeded with
//! `mix(global_seed, index)` (splitmix64 finalizer, see [`crate::rng`]), so a
//! sample depends only on `(global_seed, index)` and never on batch layout.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use ndtensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DarnError, Result};
use crate::metrics::Mask;
use crate::rng;

pub const SIMPLE_NOISE: f64 = 0.1;
pub const COMPLEX_NOISE: f64 = 0.02;
const SIMPLE_GRID: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    Simple,
    Complex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub complex_fraction: f64,
    /// Spread of the class palette around mid-gray.
    pub palette_amplitude: f64,
    /// Amplitude of the class-oriented texture in complex scenes.
    pub texture_amplitude: f64,
}

impl SynthConfig {
    pub fn new(size: usize, in_channels: usize, num_classes: usize, complex_fraction: f64) -> Self {
        SynthConfig {
            height: size,
            width: size,
            in_channels,
            num_classes,
            complex_fraction,
            palette_amplitude: 0.15,
            texture_amplitude: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height, self.width);
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(DarnError::Geometry(format!(
                "scene extents {h}x{w} must be positive multiples of 16"
            )));
        }
        if self.in_channels == 0 || !(1..=255).contains(&self.num_classes) {
            return Err(DarnError::config(format!(
                "need in_channels >= 1 and 1 <= num_classes <= 255, got {} and {}",
                self.in_channels, self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.complex_fraction) {
            return Err(DarnError::config(format!(
                "complex_fraction {} outside [0, 1]",
                self.complex_fraction
            )));
        }
        if !(0.0..=0.5).contains(&self.palette_amplitude) || !(0.0..=0.5).contains(&self.texture_amplitude) {
            return Err(DarnError::config("palette/texture amplitudes must lie in [0, 0.5]"));
        }
        Ok(())
    }

    /// Mean color of class `k` in channel `ch`.
    pub fn palette(&self, k: usize, ch: usize) -> f64 {
        let phase = 2.0 * PI * (k as f64 / self.num_classes as f64 + ch as f64 / self.in_channels as f64);
        0.5 + self.palette_amplitude * phase.cos()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    /// `[B, Cin, H, W]` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Mask,
    pub tags: Vec<Tag>,
    pub seeds: Vec<u64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> SampleBatch {
        SampleBatch {
            images: self.images.select(indices),
            labels: self.labels.select(indices),
            tags: indices.iter().map(|&i| self.tags[i]).collect(),
            seeds: indices.iter().map(|&i| self.seeds[i]).collect(),
        }
    }
}

/// Generates samples `start..start + count` of the stream defined by `global_seed`.
pub fn generate(cfg: &SynthConfig, global_seed: u64, start: u64, count: usize) -> Result<SampleBatch> {
    cfg.validate()?;
    let (h, w, c) = (cfg.height, cfg.width, cfg.in_channels);
    let mut images = Vec::with_capacity(count * c * h * w);
    let mut labels = Vec::with_capacity(count * h * w);
    let mut tags = Vec::with_capacity(count);
    let mut seeds = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let seed = rng::mix(global_seed, start + i);
        let (img, lab, tag) = sample(cfg, seed);
        images.extend(img);
        labels.extend(lab);
        tags.push(tag);
        seeds.push(seed);
    }
    Ok(SampleBatch {
        images: Tensor::from_vec(vec![count, c, h, w], images),
        labels: Mask::new([count, h, w], labels)?,
        tags,
        seeds,
    })
}

/// Argmax over `K` random per-class fields on a `grid×grid` lattice,
/// bilinearly interpolated to `h×w` (cell centres, edges clamped).
fn region_labels(r: &mut ChaCha8Rng, k: usize, grid: usize, h: usize, w: usize) -> Vec<u8> {
    let fields: Vec<f64> = (0..k * grid * grid).map(|_| r.gen::<f64>()).collect();
    let coord = |i: usize, n: usize| {
        let f = ((i as f64 + 0.5) * grid as f64 / n as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
        let i0 = (f.floor() as usize).min(grid - 1);
        (i0, (i0 + 1).min(grid - 1), f - i0 as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let (y0, y1, ty) = coord(i, h);
        for j in 0..w {
            let (x0, x1, tx) = coord(j, w);
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..k {
                let f = &fields[c * grid * grid..];
                let top = f[y0 * grid + x0] * (1.0 - tx) + f[y0 * grid + x1] * tx;
                let bot = f[y1 * grid + x0] * (1.0 - tx) + f[y1 * grid + x1] * tx;
                let v = top * (1.0 - ty) + bot * ty;
                if v > best.1 {
                    best = (c, v);
                }
            }
            out.push(best.0 as u8);
        }
    }
    out
}

/// Paints straight 1–2 px wide lines with random classes.
fn draw_lines(r: &mut ChaCha8Rng, labels: &mut [u8], k: usize, h: usize, w: usize) {
    let n = r.gen_range(3..=6);
    for _ in 0..n {
        let class = r.gen_range(0..k) as u8;
        let (cy, cx) = (r.gen::<f64>() * h as f64, r.gen::<f64>() * w as f64);
        let angle = r.gen::<f64>() * PI;
        let half = if r.gen::<bool>() { 0.5 } else { 1.0 };
        let (ny, nx) = (angle.cos(), -angle.sin());
        for i in 0..h {
            for j in 0..w {
                let d = (i as f64 + 0.5 - cy) * ny + (j as f64 + 0.5 - cx) * nx;
                if d.abs() < half {
                    labels[i * w + j] = class;
                }
            }
        }
    }
}

fn sample(cfg: &SynthConfig, seed: u64) -> (Vec<f64>, Vec<u8>, Tag) {
    let (h, w, c, k) = (cfg.height, cfg.width, cfg.in_channels, cfg.num_classes);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let tag = if rng::open_unit(&mut r) < cfg.complex_fraction {
        Tag::Complex
    } else {
        Tag::Simple
    };
    let (labels, sigma) = match tag {
        Tag::Simple => (region_labels(&mut r, k, SIMPLE_GRID, h, w), SIMPLE_NOISE),
        Tag::Complex => {
            let mut l = region_labels(&mut r, k, (h / 4).max(2), h, w);
            draw_lines(&mut r, &mut l, k, h, w);
            (l, COMPLEX_NOISE)
        }
    };
    let texture: Vec<f64> = match tag {
        Tag::Simple => vec![0.0; h * w],
        Tag::Complex => {
            let freq = r.gen_range(0.25..0.45);
            let phase = r.gen::<f64>() * 2.0 * PI;
            (0..h * w)
                .map(|p| {
                    let (i, j) = ((p / w) as f64, (p % w) as f64);
                    let theta = PI * labels[p] as f64 / k as f64;
                    let u = i * theta.cos() + j * theta.sin();
                    cfg.texture_amplitude * (2.0 * PI * freq * u + phase).sin()
                })
                .collect()
        }
    };
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let mut image = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for p in 0..h * w {
            let v = cfg.palette(labels[p] as usize, ch) + texture[p] + noise.sample(&mut r);
            image.push(v.clamp(0.0, 1.0));
        }
    }
    (image, labels, tag)
}

/// Fraction of horizontally or vertically adjacent pixel pairs whose labels differ.
pub fn boundary_density(labels: &[u8], h: usize, w: usize) -> f64 {
    let mut diff = 0usize;
    let mut pairs = 0usize;
    for i in 0..h {
        for j in 0..w {
            if j + 1 < w {
                pairs += 1;
                diff += (labels[i * w + j] != labels[i * w + j + 1]) as usize;
            }
            if i + 1 < h {
                pairs += 1;
                diff += (labels[i * w + j] != labels[(i + 1) * w + j]) as usize;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        diff as f64 / pairs as f64
    }
}

// ------------------------------------------------------------ DSYN files

const MAGIC: &[u8; 4] = b"DSYN";
const VERSION: u16 = 1;

/// Writes `batch` as `DSYN`: magic, version u16, `(count, H, W, Cin, K)` as
/// u32, images f32, labels u8, tags u8 (0 simple, 1 complex); little-endian.
pub fn write_dsyn(path: &Path, batch: &SampleBatch, num_classes: usize) -> Result<()> {
    let s = batch.images.shape();
    let mut buf = Vec::with_capacity(26 + batch.images.numel() * 4 + batch.labels.data.len() + batch.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [s[0], s[2], s[3], s[1], num_classes] {
        let v = u32::try_from(v).map_err(|_| DarnError::Format(format!("extent {v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in batch.images.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf.extend_from_slice(&batch.labels.data);
    buf.extend(batch.tags.iter().map(|t| (*t == Tag::Complex) as u8));
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a `DSYN` file; returns the batch (seeds zeroed) and `K`.
pub fn read_dsyn(path: &Path) -> Result<(SampleBatch, usize)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| DarnError::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 26 || &bytes[..4] != MAGIC {
        return Err(bad("missing DSYN header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let dims: Vec<usize> = (0..5)
        .map(|i| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let (n, h, w, c, k) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
    let n_img = n * c * h * w;
    let n_lab = n * h * w;
    if bytes.len() != 26 + 4 * n_img + n_lab + n {
        return Err(bad("size does not match header"));
    }
    let mut off = 26;
    let images: Vec<f64> = bytes[off..off + 4 * n_img]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    off += 4 * n_img;
    let labels = bytes[off..off + n_lab].to_vec();
    off += n_lab;
    if labels.iter().any(|&l| l as usize >= k) {
        return Err(bad("label outside 0..K"));
    }
    let tags = bytes[off..]
        .iter()
        .map(|&t| match t {
            0 => Ok(Tag::Simple),
            1 => Ok(Tag::Complex),
            _ => Err(bad("invalid tag byte")),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        SampleBatch {
            images: Tensor::from_vec(vec![n, c, h, w], images),
            labels: Mask::new([n, h, w], labels)?,
            tags,
            seeds: vec![0; n],
        },
        k,
    ))
}
