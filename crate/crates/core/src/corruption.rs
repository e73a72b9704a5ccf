//! Eight image corruptions in four categories, each with five severities.
//!
//! Severity `s ∈ 1..=5` maps linearly onto the parameter range of the
//! corruption: `lo·(1 − t) + hi·t` with `t = (s − 1)/4`, which hits both
//! endpoints exactly. Random corruptions draw from one stream per
//! `(seed, name)` regardless of severity, so stronger severities perturb a
//! superset of what weaker ones do.

use ndtensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DarnError, Result};
use crate::rng;

pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Noise,
    Blur,
    Digital,
    Weather,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Noise => "noise",
            Category::Blur => "blur",
            Category::Digital => "digital",
            Category::Weather => "weather",
        }
    }
}

/// One corruption and its parameter range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionDef {
    pub category: Category,
    pub name: &'static str,
    /// Parameter at severity 1.
    pub lo: f64,
    /// Parameter at severity 5.
    pub hi: f64,
}

pub const CATALOG: [CorruptionDef; 8] = [
    CorruptionDef { category: Category::Noise, name: "gaussian_noise", lo: 0.02, hi: 0.2 },
    CorruptionDef { category: Category::Noise, name: "impulse_noise", lo: 0.01, hi: 0.15 },
    CorruptionDef { category: Category::Blur, name: "gaussian_blur", lo: 0.5, hi: 3.0 },
    CorruptionDef { category: Category::Blur, name: "motion_blur", lo: 2.0, hi: 10.0 },
    CorruptionDef { category: Category::Digital, name: "contrast", lo: 0.8, hi: 0.3 },
    CorruptionDef { category: Category::Digital, name: "pixelate", lo: 2.0, hi: 8.0 },
    CorruptionDef { category: Category::Weather, name: "fog", lo: 0.1, hi: 0.6 },
    CorruptionDef { category: Category::Weather, name: "brightness", lo: 0.05, hi: 0.4 },
];

pub fn lookup(name: &str) -> Result<&'static CorruptionDef> {
    CATALOG
        .iter()
        .find(|d| d.name == name)
        .ok_or_else(|| DarnError::UnknownCorruption(name.to_string()))
}

impl CorruptionDef {
    pub fn param(&self, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(DarnError::Domain(format!("severity {severity} outside 1..=5")));
        }
        let t = (severity - 1) as f64 / 4.0;
        Ok(self.lo * (1.0 - t) + self.hi * t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub category: Category,
    pub name: String,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(name: &str, severity: u8) -> Result<Self> {
        let def = lookup(name)?;
        def.param(severity)?;
        Ok(CorruptionSpec {
            category: def.category,
            name: name.to_string(),
            severity,
        })
    }
}

/// Applies `spec` to `[B, C, H, W]` images in `[0, 1]`; output is clamped to `[0, 1]`.
pub fn corrupt(images: &Tensor, spec: &CorruptionSpec, seed: u64) -> Result<Tensor> {
    let def = lookup(&spec.name)?;
    apply(images, def.name, def.param(spec.severity)?, seed)
}

/// Applies the named corruption with an explicit parameter value.
pub fn apply(images: &Tensor, name: &str, param: f64, seed: u64) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(DarnError::Geometry(format!("corruption expects [B, C, H, W], got {s:?}")));
    }
    let mut r = rng::stream(seed, name);
    let mut out = match name {
        "gaussian_noise" | "impulse_noise" => images.clone(),
        "gaussian_blur" => blur_separable(images, &gaussian_kernel(param)),
        "motion_blur" => motion_blur(images, param),
        "contrast" => contrast(images, param),
        "pixelate" => pixelate(images, param),
        "fog" => fog(images, param, &mut r),
        "brightness" => images.map(|x| x + param),
        other => return Err(DarnError::UnknownCorruption(other.to_string())),
    };
    match name {
        "gaussian_noise" => {
            for v in out.data_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *v += param * z;
            }
        }
        "impulse_noise" => {
            for v in out.data_mut() {
                let u: f64 = r.gen();
                let salt: bool = r.gen();
                if u < param {
                    *v = if salt { 1.0 } else { 0.0 };
                }
            }
        }
        _ => {}
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Correlates rows (or columns when `vertical`) with `kernel` placed at
/// `offsets`, clamping indices at the borders.
fn filter_axis(images: &Tensor, kernel: &[f64], offsets: &[isize], vertical: bool) -> Tensor {
    let s = images.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let x = images.data();
    let mut out = vec![0.0; x.len()];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (&k, &o) in kernel.iter().zip(offsets) {
                    let (ii, jj) = if vertical {
                        ((i as isize + o).clamp(0, h as isize - 1) as usize, j)
                    } else {
                        (i, (j as isize + o).clamp(0, w as isize - 1) as usize)
                    };
                    acc += k * x[base + ii * w + jj];
                }
                out[base + i * w + j] = acc;
            }
        }
    }
    Tensor::from_vec(s.to_vec(), out)
}

fn blur_separable(images: &Tensor, kernel: &[f64]) -> Tensor {
    let r = (kernel.len() / 2) as isize;
    let offsets: Vec<isize> = (-r..=r).collect();
    let tmp = filter_axis(images, kernel, &offsets, false);
    filter_axis(&tmp, kernel, &offsets, true)
}

/// Horizontal box average over `round(length)` pixels.
fn motion_blur(images: &Tensor, length: f64) -> Tensor {
    let n = length.round().max(1.0) as isize;
    let offsets: Vec<isize> = (0..n).map(|i| i - n / 2).collect();
    let kernel = vec![1.0 / n as f64; n as usize];
    filter_axis(images, &kernel, &offsets, false)
}

/// Scales each image plane's deviation from its mean by `scale`.
fn contrast(images: &Tensor, scale: f64) -> Tensor {
    let s = images.shape();
    let hw = s[2] * s[3];
    let mut out = images.clone();
    for plane in out.data_mut().chunks_mut(hw.max(1)) {
        let mean = plane.iter().sum::<f64>() / hw as f64;
        for v in plane {
            *v = (*v - mean) * scale + mean;
        }
    }
    out
}

/// Averages blocks of pixels whose coordinates share `floor(coord / factor)`.
/// A factor of 1 is the identity.
fn pixelate(images: &Tensor, factor: f64) -> Tensor {
    let s = images.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    if h == 0 || w == 0 {
        return images.clone();
    }
    let block = |i: usize| (i as f64 / factor).floor() as usize;
    let (bh, bw) = (block(h - 1) + 1, block(w - 1) + 1);
    let x = images.data();
    let mut out = vec![0.0; x.len()];
    let mut sums = vec![0.0; bh * bw];
    let mut counts = vec![0usize; bh * bw];
    for p in 0..planes {
        sums.iter_mut().for_each(|v| *v = 0.0);
        counts.iter_mut().for_each(|v| *v = 0);
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let b = block(i) * bw + block(j);
                sums[b] += x[base + i * w + j];
                counts[b] += 1;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let b = block(i) * bw + block(j);
                out[base + i * w + j] = sums[b] / counts[b] as f64;
            }
        }
    }
    Tensor::from_vec(s.to_vec(), out)
}

/// Adds `alpha` times a smooth haze field in `[0, 1]` shared by all channels.
fn fog(images: &Tensor, alpha: f64, r: &mut impl Rng) -> Tensor {
    let s = images.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    const GRID: usize = 4;
    let mut out = images.clone();
    let data = out.data_mut();
    for n in 0..b {
        let coarse: Vec<f64> = (0..GRID * GRID).map(|_| r.gen::<f64>()).collect();
        for i in 0..h {
            let fy = (i as f64 + 0.5) / h as f64 * (GRID - 1) as f64;
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(GRID - 1);
            for j in 0..w {
                let fx = (j as f64 + 0.5) / w as f64 * (GRID - 1) as f64;
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(GRID - 1);
                let top = coarse[y0 * GRID + x0] * (1.0 - tx) + coarse[y0 * GRID + x1] * tx;
                let bot = coarse[y1 * GRID + x0] * (1.0 - tx) + coarse[y1 * GRID + x1] * tx;
                let haze = top * (1.0 - ty) + bot * ty;
                for ch in 0..c {
                    data[((n * c + ch) * h + i) * w + j] += alpha * haze;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints_are_exact() {
        for d in CATALOG {
            assert_eq!(d.param(1).unwrap(), d.lo);
            assert_eq!(d.param(5).unwrap(), d.hi);
        }
        assert!(lookup("gaussian_noise").unwrap().param(0).is_err());
        assert!(lookup("snow").is_err());
    }

    #[test]
    fn kernel_is_normalized() {
        for s in [0.5, 1.0, 3.0] {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len() % 2, 1);
        }
    }
}
