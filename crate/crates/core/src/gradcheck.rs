//! Finite-difference suite covering every tape operator family and the full
//! decoder plus composite loss with frozen dropout noise.

use ndtensor::{grad_check, Reduction, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::decoder::{self, DecoderConfig, DropoutMask, Mode, ReplayNoise, RngNoise, RecordingNoise};
use crate::encoder::PyramidVars;
use crate::error::Result;
use crate::metrics::Mask;
use crate::objectives::{self, LossWeights};
use crate::params::Bound;
use crate::rng;

/// Largest accepted `|analytic − numeric| / max(1, |analytic|)`.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn randn(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(r)).collect())
}

/// Normal draws pushed at least `gap` away from zero, keeping ReLU kinks out
/// of the difference stencil.
fn randn_off_zero(r: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    randn(r, shape).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect())
}

/// `Σ y ⊙ w` with fixed pseudo-random `w`, so that every output element
/// carries a distinct cotangent.
fn project(tape: &mut Tape, y: Var, seed: u64) -> ndtensor::Result<Var> {
    let w = randn(&mut rng::stream(seed, "projection"), tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.reduce_all(p, Reduction::Sum)
}

/// Planted fault: the named case's output gets its backward scaled.
#[derive(Clone, Copy, Debug)]
pub struct Fault {
    pub case: &'static str,
    pub factor: f64,
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> ndtensor::Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: OpFn,
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng::stream(seed, "gradcheck");
    let mut cases: Vec<OpCase> = Vec::new();
    let mut add = |name, inputs, f: OpFn| cases.push(OpCase { name, inputs, f });

    add(
        "conv2d",
        vec![randn(&mut r, &[2, 3, 5, 5]), randn(&mut r, &[4, 3, 3, 3]), randn(&mut r, &[4])],
        Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
    );
    add(
        "conv2d_stride2",
        vec![randn(&mut r, &[2, 2, 6, 6]), randn(&mut r, &[3, 2, 3, 3]), randn(&mut r, &[3])],
        Box::new(|t, v| t.conv2d_padded(v[0], v[1], Some(v[2]), 2, (0, 1))),
    );
    add(
        "linear",
        vec![randn(&mut r, &[4, 8]), randn(&mut r, &[5, 8]), randn(&mut r, &[5])],
        Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
    );
    add(
        "relu",
        vec![randn_off_zero(&mut r, &[3, 7], 1e-3)],
        Box::new(|t, v| t.relu(v[0])),
    );
    add("sigmoid", vec![randn(&mut r, &[3, 7])], Box::new(|t, v| t.sigmoid(v[0])));
    add(
        "log",
        vec![uniform(&mut r, &[3, 7], 0.2, 2.0)],
        Box::new(|t, v| t.log(v[0])),
    );
    add(
        "neg_add_mul_const",
        vec![randn(&mut r, &[3, 7])],
        Box::new(|t, v| {
            let y = t.neg(v[0])?;
            let y = t.add_const(y, 0.7)?;
            t.mul_const(y, -1.3)
        }),
    );
    add(
        "binary",
        vec![randn(&mut r, &[2, 6]), uniform(&mut r, &[2, 6], 0.5, 2.0)],
        Box::new(|t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let m = t.mul(d, v[1])?;
            t.div(m, v[1])
        }),
    );
    add(
        "broadcast",
        vec![randn(&mut r, &[2, 3])],
        Box::new(|t, v| t.broadcast(v[0], &[2, 3, 4, 5])),
    );
    add("gap", vec![randn(&mut r, &[2, 3, 4, 5])], Box::new(|t, v| t.gap(v[0])));
    add(
        "resize_bilinear",
        vec![randn(&mut r, &[2, 2, 3, 5])],
        Box::new(|t, v| t.resize_bilinear(v[0], 7, 4)),
    );
    add(
        "adaptive_avg_pool",
        vec![randn(&mut r, &[2, 2, 8, 8])],
        Box::new(|t, v| t.adaptive_avg_pool(v[0], 2, 2)),
    );
    add(
        "concat_channels",
        vec![randn(&mut r, &[2, 2, 3, 3]), randn(&mut r, &[2, 3, 3, 3])],
        Box::new(|t, v| t.concat_channels(&[v[0], v[1]])),
    );
    add(
        "reduce",
        vec![randn(&mut r, &[3, 4, 5])],
        Box::new(|t, v| {
            let a = t.mean(v[0], &[1])?;
            let b = t.var(v[0], &[0, 2])?;
            let c = t.sum(v[0], &[2])?;
            let (a, b, c) = (t.sum(a, &[0, 1])?, t.sum(b, &[0])?, t.var(c, &[0, 1])?);
            let ab = t.add(a, b)?;
            t.add(ab, c)
        }),
    );
    add(
        "softmax",
        vec![randn(&mut r, &[2, 4, 3, 3])],
        Box::new(|t, v| {
            let a = t.softmax(v[0])?;
            let b = t.log_softmax(v[0])?;
            t.add(a, b)
        }),
    );
    let index: Vec<usize> = (0..2 * 9).map(|_| r.gen_range(0..4)).collect();
    add(
        "gather_channels",
        vec![randn(&mut r, &[2, 4, 3, 3])],
        Box::new(move |t, v| t.gather_channels(v[0], &index)),
    );
    cases
}

fn run_op_case(case: &OpCase, seed: u64, fault: Option<Fault>) -> Result<CaseReport> {
    let scale = fault.filter(|f| f.case == case.name).map(|f| f.factor);
    let res = grad_check(
        |tape, vars| {
            let y = (case.f)(tape, vars)?;
            let y = match scale {
                Some(s) => tape.corrupt_backward(y, s),
                None => y,
            };
            project(tape, y, seed)
        },
        &case.inputs,
        EPS,
    )?;
    Ok(CaseReport {
        name: case.name,
        max_rel_error: res.max_rel_error,
        coordinates: res.coordinates,
    })
}

/// Small decoder used by the composite cases.
fn tiny_decoder() -> DecoderConfig {
    DecoderConfig::new([4, 6, 8, 8], 6, 3)
}

fn tiny_pyramid(seed: u64, b: usize, size: usize, cfg: &DecoderConfig) -> [Tensor; 4] {
    let mut r = rng::stream(seed, "pyramid");
    let mut level = |l: usize| {
        let s = size >> (l + 1);
        randn(&mut r, &[b, cfg.feature_widths[l], s, s]).map(f64::abs)
    };
    [level(0), level(1), level(2), level(3)]
}

fn tiny_mask(seed: u64, b: usize, size: usize, k: usize) -> Mask {
    let mut r = rng::stream(seed, "mask");
    let data = (0..b * size * size).map(|_| r.gen_range(0..k as u8)).collect();
    Mask::new([b, size, size], data).expect("consistent shape")
}

/// Scalar total loss of a train-mode decode; `vars` holds the decoder
/// parameters followed by the four pyramid levels.
fn decode_loss(
    tape: &mut Tape,
    vars: &[Var],
    names: &[String],
    cfg: &DecoderConfig,
    size: usize,
    target: &Mask,
    noise: &[Tensor],
    scale: Option<f64>,
) -> Result<Var> {
    let n = names.len();
    let bound = Bound::from_vars(names.to_vec(), vars[..n].to_vec());
    let pyr = PyramidVars {
        levels: [vars[n], vars[n + 1], vars[n + 2], vars[n + 3]],
        image_size: (size, size),
    };
    let mut replay = ReplayNoise::new(noise.to_vec());
    let out = decoder::decode(tape, &pyr, &bound, cfg, Mode::Train, &mut replay)?;
    let logits = match scale {
        Some(s) => tape.corrupt_backward(out.logits, s),
        None => out.logits,
    };
    let w = LossWeights::default();
    Ok(objectives::total_loss(tape, logits, target, out.complexity, &w)?.total)
}

fn run_decode_case(name: &'static str, cfg: DecoderConfig, seed: u64, fault: Option<Fault>) -> Result<CaseReport> {
    const B: usize = 2;
    const SIZE: usize = 16;
    let params = decoder::build_decoder_params(&cfg, seed)?;
    let names: Vec<String> = params.iter().map(|e| e.name.clone()).collect();
    let mut inputs: Vec<Tensor> = params.iter().map(|e| e.value.clone()).collect();
    inputs.extend(tiny_pyramid(seed, B, SIZE, &cfg));
    let target = tiny_mask(seed, B, SIZE, cfg.num_classes);

    // Record one set of dropout draws, then replay it for every evaluation.
    let mut recorder = RecordingNoise::new(RngNoise(rng::stream(seed, "gradcheck-noise")));
    {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let levels = inputs[names.len()..].to_vec();
        let pyr = PyramidVars {
            levels: [0, 1, 2, 3].map(|l| tape.constant(levels[l].clone())),
            image_size: (SIZE, SIZE),
        };
        decoder::decode(&mut tape, &pyr, &bound, &cfg, Mode::Train, &mut recorder)?;
    }
    let noise = recorder.recorded;
    let scale = fault.filter(|f| f.case == name).map(|f| f.factor);
    let res = grad_check(
        |tape, vars| {
            decode_loss(tape, vars, &names, &cfg, SIZE, &target, &noise, scale).map_err(to_tensor_err)
        },
        &inputs,
        EPS,
    )?;
    Ok(CaseReport {
        name,
        max_rel_error: res.max_rel_error,
        coordinates: res.coordinates,
    })
}

/// Gradient of the relaxed dropout output with respect to activations and rate.
fn run_adm_case(seed: u64, fault: Option<Fault>) -> Result<CaseReport> {
    let mut r = rng::stream(seed, "adm");
    let x = randn(&mut r, &[2, 3, 4, 4]);
    let p = uniform(&mut r, &[2], 0.15, 0.45);
    let u = uniform(&mut r, &[2, 3, 4, 4], 0.02, 0.98);
    let scale = fault.filter(|f| f.case == "adm_apply").map(|f| f.factor);
    let res = grad_check(
        |tape, v| {
            let mask = DropoutMask {
                u: u.clone(),
                mode: Mode::Train,
            };
            let y = decoder::adm_apply(tape, v[0], v[1], &mask, 0.5).map_err(to_tensor_err)?;
            let y = match scale {
                Some(s) => tape.corrupt_backward(y, s),
                None => y,
            };
            project(tape, y, seed)
        },
        &[x, p],
        EPS,
    )?;
    Ok(CaseReport {
        name: "adm_apply",
        max_rel_error: res.max_rel_error,
        coordinates: res.coordinates,
    })
}

fn to_tensor_err(e: crate::DarnError) -> ndtensor::TensorError {
    match e {
        crate::DarnError::Tensor(t) => t,
        other => ndtensor::TensorError::Domain {
            op: "decoder",
            detail: other.to_string(),
        },
    }
}

/// Names of every case, in report order.
pub fn case_names() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = op_cases(0).iter().map(|c| c.name).collect();
    v.extend(["adm_apply", "decode_full", "decode_fixed_dropout"]);
    v
}

/// Runs every case. `fault` plants a scaled backward in the named case.
pub fn run_suite(seed: u64, fault: Option<Fault>) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    for case in op_cases(seed) {
        out.push(run_op_case(&case, seed, fault)?);
    }
    out.push(run_adm_case(seed, fault)?);
    out.push(run_decode_case("decode_full", tiny_decoder(), seed, fault)?);
    let mut fixed = tiny_decoder();
    fixed.tcp = false;
    fixed.adm = false;
    fixed.dcg = false;
    out.push(run_decode_case("decode_fixed_dropout", fixed, seed, fault)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let names = case_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }
}
