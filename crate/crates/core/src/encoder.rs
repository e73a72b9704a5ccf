//! Frozen random-convolution stand-in for a pretrained backbone.
//!
//! Four stages, each `conv3×3/2 → relu → conv3×3/1 → relu`, yield features
//! at strides 2, 4, 8 and 16. The stride-2 convolutions pad one trailing
//! row/column only, so every stage halves its input exactly.

use ndtensor::{Tape, Tensor, Var};

use crate::error::{DarnError, Result};
use crate::params::{Bound, Init, ParamSet};

pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: [usize; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

/// Four-level pyramid, shallowest (highest resolution) first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
    pub image_size: (usize, usize),
}

/// Pyramid levels recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub levels: [Var; 4],
    pub image_size: (usize, usize),
}

impl FeaturePyramid {
    pub fn batch(&self) -> usize {
        self.levels[0].shape()[0]
    }

    pub fn select(&self, indices: &[usize]) -> FeaturePyramid {
        FeaturePyramid {
            levels: self.levels.clone().map(|t| t.select(indices)),
            image_size: self.image_size,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> PyramidVars {
        PyramidVars {
            levels: self.levels.clone().map(|t| tape.constant(t)),
            image_size: self.image_size,
        }
    }

    pub fn concat(parts: &[FeaturePyramid]) -> Result<FeaturePyramid> {
        let first = parts
            .first()
            .ok_or_else(|| DarnError::config("empty pyramid list"))?;
        let mut levels = Vec::with_capacity(4);
        for l in 0..4 {
            let ts: Vec<Tensor> = parts.iter().map(|p| p.levels[l].clone()).collect();
            levels.push(Tensor::stack(&ts)?);
        }
        let levels: [Tensor; 4] = levels.try_into().expect("four levels");
        Ok(FeaturePyramid {
            levels,
            image_size: first.image_size,
        })
    }
}

impl PyramidVars {
    pub fn values(&self, tape: &Tape) -> FeaturePyramid {
        FeaturePyramid {
            levels: self.levels.map(|v| tape.value(v).clone()),
            image_size: self.image_size,
        }
    }
}

fn stage_name(stage: usize, layer: &str, part: &str) -> String {
    format!("encoder.s{}.{layer}.{part}", stage + 1)
}

/// Closed-form parameter count of the four-stage stack.
pub fn encoder_param_count(in_channels: usize, widths: [usize; 4]) -> usize {
    let mut cin = in_channels;
    let mut total = 0;
    for w in widths {
        total += 9 * cin * w + w + 9 * w * w + w;
        cin = w;
    }
    total
}

/// Seeded He-normal weights, zero biases, all flagged frozen.
pub fn build_encoder(seed: u64, in_channels: usize, widths: [usize; 4]) -> Result<Encoder> {
    if in_channels == 0 || widths.contains(&0) {
        return Err(DarnError::config(format!(
            "encoder needs positive widths, got in_channels={in_channels}, widths={widths:?}"
        )));
    }
    let mut params = ParamSet::new();
    let mut cin = in_channels;
    for (s, &w) in widths.iter().enumerate() {
        params.declare(seed, &stage_name(s, "down", "w"), vec![w, cin, 3, 3], Init::HeNormal);
        params.declare(seed, &stage_name(s, "down", "b"), vec![w], Init::Zeros);
        params.declare(seed, &stage_name(s, "conv", "w"), vec![w, w, 3, 3], Init::HeNormal);
        params.declare(seed, &stage_name(s, "conv", "b"), vec![w], Init::Zeros);
        cin = w;
    }
    params.set_trainable("encoder.", false);
    Ok(Encoder {
        config: EncoderConfig {
            in_channels,
            widths,
        },
        params,
    })
}

impl Encoder {
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Runs the stack on an image variable. `params` must contain the
    /// `encoder.*` entries (constants in frozen mode, leaves otherwise).
    pub fn forward(&self, tape: &mut Tape, params: &Bound, images: Var) -> Result<PyramidVars> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(DarnError::Geometry(format!(
                "encoder expects [B, {}, H, W], got {s:?}",
                self.config.in_channels
            )));
        }
        let (h, w) = (s[2], s[3]);
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(DarnError::Geometry(format!(
                "image extents {h}x{w} must be positive multiples of 16"
            )));
        }
        let mut x = images;
        let mut levels = Vec::with_capacity(4);
        for stage in 0..4 {
            let dw = params.get(&stage_name(stage, "down", "w"))?;
            let db = params.get(&stage_name(stage, "down", "b"))?;
            x = tape.conv2d_padded(x, dw, Some(db), 2, (0, 1))?;
            x = tape.relu(x)?;
            let cw = params.get(&stage_name(stage, "conv", "w"))?;
            let cb = params.get(&stage_name(stage, "conv", "b"))?;
            x = tape.conv2d(x, cw, Some(cb), 1, 1)?;
            x = tape.relu(x)?;
            levels.push(x);
        }
        Ok(PyramidVars {
            levels: levels.try_into().expect("four stages"),
            image_size: (h, w),
        })
    }

    /// Frozen inference on concrete images, processed in chunks of `chunk` samples.
    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        const CHUNK: usize = 64;
        let b = images.shape().first().copied().unwrap_or(0);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < b {
            let idx: Vec<usize> = (start..(start + CHUNK).min(b)).collect();
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, true);
            let x = tape.constant(images.select(&idx));
            let pyr = self.forward(&mut tape, &bound, x)?;
            parts.push(pyr.values(&tape));
            start += CHUNK;
        }
        if parts.is_empty() {
            return Err(DarnError::Geometry("cannot encode an empty batch".into()));
        }
        FeaturePyramid::concat(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_halve_per_level() {
        let enc = build_encoder(42, 3, DEFAULT_WIDTHS).unwrap();
        let pyr = enc.encode(&Tensor::full(vec![1, 3, 32, 32], 0.5)).unwrap();
        let shapes: Vec<&[usize]> = pyr.levels.iter().map(|t| t.shape()).collect();
        assert_eq!(
            shapes,
            vec![&[1, 16, 16, 16][..], &[1, 32, 8, 8], &[1, 64, 4, 4], &[1, 128, 2, 2]]
        );
    }

    #[test]
    fn rejects_bad_extents_and_widths() {
        let enc = build_encoder(1, 3, [2, 2, 2, 2]).unwrap();
        assert!(enc.encode(&Tensor::zeros(vec![1, 3, 24, 32])).is_err());
        assert!(enc.encode(&Tensor::zeros(vec![1, 2, 32, 32])).is_err());
        assert!(build_encoder(1, 3, [4, 0, 4, 4]).is_err());
    }

    #[test]
    fn zero_input_gives_zero_pyramid() {
        let enc = build_encoder(7, 3, [4, 4, 4, 4]).unwrap();
        let pyr = enc.encode(&Tensor::zeros(vec![2, 3, 16, 16])).unwrap();
        assert!(pyr.levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }
}
