//! Complexity-adaptive segmentation decoder.
//!
//! A complexity head reads the shallowest feature map and emits one score
//! `c ∈ (0, 1)` per sample. The score sets
//!
//! * the dropout rate `p(c) = p_max·(1 − c) + p_min·c` of the dropout layer in
//!   front of the classifier (relaxed with a concrete/binary-concrete mask so
//!   that `∂loss/∂p` exists), and
//! * a per-sample gate factor `α·(1 − c) + c` that scales squeeze-excitation
//!   channel attention on the three deeper feature maps.
//!
//! The fusion path is UPerNet-shaped: pyramid pooling on the deepest map,
//! top-down lateral 1×1 + upsample + add down to the shallowest resolution,
//! a 3×3 fuse, dropout, a 1×1 classifier and bilinear upsampling to the
//! input size.
//!
//! The interpolants are written in lerp form so that the endpoints and the
//! midpoint come out exact in floating point: `p(1) = 0.1`, gate(0.5) = 0.65.

use ndtensor::{Tape, Tensor, Var};
use rand::RngCore;

use crate::encoder::PyramidVars;
use crate::error::{DarnError, Result};
use crate::params::{Bound, Init, ParamSet};
use crate::rng;

pub const TCP_CONV_CHANNELS: usize = 64;
pub const TCP_HIDDEN: usize = 32;
pub const PPM_SCALES: [usize; 3] = [1, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Relaxed stochastic dropout masks.
    Train,
    /// Dropout is the identity.
    Eval,
}

/// Which feature map feeds the pyramid pooling module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PpmSource {
    /// Deepest map (standard UPerNet).
    Deepest,
    /// Shallowest map; the deepest level then gets an ordinary lateral.
    Shallowest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Channel widths of the four pyramid levels, shallowest first.
    pub feature_widths: [usize; 4],
    pub width: usize,
    pub num_classes: usize,
    pub tcp: bool,
    pub adm: bool,
    pub dcg: bool,
    /// Dropout rate whenever adaptive dropout is off; 0 disables dropout.
    pub fixed_p: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub se_reduction: usize,
    /// Also apply dropout to the two intermediate FPN levels.
    pub adm_per_level: bool,
    pub ppm_source: PpmSource,
    /// Complexity gate factor used when gating runs without a complexity head.
    pub fixed_gate: Option<f64>,
}

impl DecoderConfig {
    /// Full adaptive decoder with the reference constants.
    pub fn new(feature_widths: [usize; 4], width: usize, num_classes: usize) -> Self {
        DecoderConfig {
            feature_widths,
            width,
            num_classes,
            tcp: true,
            adm: true,
            dcg: true,
            fixed_p: 0.3,
            p_min: 0.1,
            p_max: 0.5,
            alpha: 0.3,
            temperature: 0.1,
            se_reduction: 4,
            adm_per_level: false,
            ppm_source: PpmSource::Deepest,
            fixed_gate: None,
        }
    }

    pub fn with_arm(mut self, arm: Arm) -> Self {
        let (tcp, adm, dcg) = arm.flags();
        self.tcp = tcp;
        self.adm = adm;
        self.dcg = dcg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DarnError::Config(m));
        if self.width == 0 || self.num_classes == 0 || self.feature_widths.contains(&0) {
            return fail(format!(
                "decoder widths must be positive: features {:?}, width {}, classes {}",
                self.feature_widths, self.width, self.num_classes
            ));
        }
        if self.adm && !self.tcp {
            return fail("adaptive dropout requires the complexity head (tcp)".into());
        }
        if self.dcg && !self.tcp && self.fixed_gate.is_none() {
            return fail("capacity gating requires the complexity head (tcp) or a fixed gate".into());
        }
        if !(0.0..1.0).contains(&self.fixed_p) {
            return fail(format!("fixed_p {} outside [0, 1)", self.fixed_p));
        }
        if !(0.0 < self.p_min && self.p_min <= self.p_max && self.p_max < 1.0) {
            return fail(format!(
                "need 0 < p_min <= p_max < 1, got p_min {} p_max {}",
                self.p_min, self.p_max
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if self.se_reduction == 0 {
            return fail("se_reduction must be positive".into());
        }
        Ok(())
    }

    fn dropout_active(&self) -> bool {
        self.adm || self.fixed_p > 0.0
    }
}

/// Rungs of the sequential component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    Baseline,
    Tcp,
    AdmWithTcp,
    DcgWithTcpNoAdm,
    Full,
}

impl Arm {
    pub const LADDER: [Arm; 5] = [
        Arm::Baseline,
        Arm::Tcp,
        Arm::AdmWithTcp,
        Arm::DcgWithTcpNoAdm,
        Arm::Full,
    ];

    /// `(tcp, adm, dcg)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Arm::Baseline => (false, false, false),
            Arm::Tcp => (true, false, false),
            Arm::AdmWithTcp => (true, true, false),
            Arm::DcgWithTcpNoAdm => (true, false, true),
            Arm::Full => (true, true, true),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Baseline => "Baseline Decoder",
            Arm::Tcp => "+ TCP (Features Only)",
            Arm::AdmWithTcp => "+ ADM (w/ TCP)",
            Arm::DcgWithTcpNoAdm => "+ DCG (w/ TCP, No ADM)",
            Arm::Full => "Full DARN (TCP+ADM+DCG)",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Tcp => "tcp",
            Arm::AdmWithTcp => "tcp_adm",
            Arm::DcgWithTcpNoAdm => "tcp_dcg",
            Arm::Full => "full",
        }
    }
}

// ------------------------------------------------------------------ scalars

/// Dropout rate for a complexity score.
pub fn dropout_rate(c: f64, p_min: f64, p_max: f64) -> f64 {
    p_max * (1.0 - c) + p_min * c
}

/// Complexity factor multiplying channel attention.
pub fn gate_factor(c: f64, alpha: f64) -> f64 {
    alpha * (1.0 - c) + c
}

/// Relaxed keep-mask value for drop probability `p`, uniform draw `u` and temperature `t`.
pub fn concrete_keep(p: f64, u: f64, t: f64) -> f64 {
    let logit = (p.ln() - (1.0 - p).ln() + u.ln() - (1.0 - u).ln()) / t;
    let drop = if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    };
    1.0 - drop
}

// ------------------------------------------------------------------- noise

/// Supplier of the uniform draws behind relaxed dropout masks.
pub trait NoiseSource {
    fn draw(&mut self, shape: &[usize]) -> Result<Tensor>;
}

/// Fresh draws from a seeded generator.
pub struct RngNoise<R: RngCore>(pub R);

impl<R: RngCore> NoiseSource for RngNoise<R> {
    fn draw(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng::open_unit(&mut self.0)).collect();
        Ok(Tensor::from_vec(shape.to_vec(), data))
    }
}

/// Replays a fixed list of draws in order; shapes must match the request.
#[derive(Clone, Debug, Default)]
pub struct ReplayNoise {
    draws: Vec<Tensor>,
    next: usize,
}

impl ReplayNoise {
    pub fn new(draws: Vec<Tensor>) -> Self {
        ReplayNoise { draws, next: 0 }
    }

    pub fn rewind(&mut self) {
        self.next = 0;
    }
}

impl NoiseSource for ReplayNoise {
    fn draw(&mut self, shape: &[usize]) -> Result<Tensor> {
        let t = self.draws.get(self.next).ok_or_else(|| {
            DarnError::Config(format!("replay noise exhausted after {} draws", self.next))
        })?;
        if t.shape() != shape {
            return Err(DarnError::Config(format!(
                "replay draw {} has shape {:?}, requested {shape:?}",
                self.next,
                t.shape()
            )));
        }
        self.next += 1;
        Ok(t.clone())
    }
}

/// Wraps another source and keeps a copy of everything it hands out.
pub struct RecordingNoise<N: NoiseSource> {
    pub inner: N,
    pub recorded: Vec<Tensor>,
}

impl<N: NoiseSource> RecordingNoise<N> {
    pub fn new(inner: N) -> Self {
        RecordingNoise {
            inner,
            recorded: Vec::new(),
        }
    }

    pub fn into_replay(self) -> ReplayNoise {
        ReplayNoise::new(self.recorded)
    }
}

impl<N: NoiseSource> NoiseSource for RecordingNoise<N> {
    fn draw(&mut self, shape: &[usize]) -> Result<Tensor> {
        let t = self.inner.draw(shape)?;
        self.recorded.push(t.clone());
        Ok(t)
    }
}

/// Explicit noise for one dropout site.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub u: Tensor,
    pub mode: Mode,
}

// --------------------------------------------------------------- parameters

/// Names, shapes and initializers of every decoder parameter for `cfg`.
pub fn decoder_layout(cfg: &DecoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let [c1, c2, c3, c4] = cfg.feature_widths;
    let d = cfg.width;
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    if cfg.tcp {
        add("tcp.conv.w".into(), vec![TCP_CONV_CHANNELS, c1, 3, 3], Init::HeNormal);
        add("tcp.conv.b".into(), vec![TCP_CONV_CHANNELS], Init::Zeros);
        add("tcp.fc1.w".into(), vec![TCP_HIDDEN, TCP_CONV_CHANNELS], Init::HeNormal);
        add("tcp.fc1.b".into(), vec![TCP_HIDDEN], Init::Zeros);
        add("tcp.fc2.w".into(), vec![1, TCP_HIDDEN], Init::HeNormal);
        add("tcp.fc2.b".into(), vec![1], Init::Zeros);
    }
    if cfg.dcg {
        for (level, c) in [(2, c2), (3, c3), (4, c4)] {
            let hidden = (c / cfg.se_reduction).max(1);
            add(format!("se.{level}.fc1.w"), vec![hidden, c], Init::HeNormal);
            add(format!("se.{level}.fc1.b"), vec![hidden], Init::Zeros);
            add(format!("se.{level}.fc2.w"), vec![c, hidden], Init::HeNormal);
            add(format!("se.{level}.fc2.b"), vec![c], Init::Zeros);
        }
    }
    let (ppm_in, laterals): (usize, Vec<(usize, usize)>) = match cfg.ppm_source {
        PpmSource::Deepest => (c4, vec![(1, c1), (2, c2), (3, c3)]),
        PpmSource::Shallowest => (c1, vec![(2, c2), (3, c3), (4, c4)]),
    };
    for s in PPM_SCALES {
        add(format!("ppm.{s}.w"), vec![d, ppm_in, 1, 1], Init::HeNormal);
        add(format!("ppm.{s}.b"), vec![d], Init::Zeros);
    }
    let cat = ppm_in + PPM_SCALES.len() * d;
    add("ppm.fuse.w".into(), vec![d, cat, 3, 3], Init::HeNormal);
    add("ppm.fuse.b".into(), vec![d], Init::Zeros);
    for (level, c) in laterals {
        add(format!("fpn.lat.{level}.w"), vec![d, c, 1, 1], Init::HeNormal);
        add(format!("fpn.lat.{level}.b"), vec![d], Init::Zeros);
    }
    add("fpn.fuse.w".into(), vec![d, d, 3, 3], Init::HeNormal);
    add("fpn.fuse.b".into(), vec![d], Init::Zeros);
    add("cls.w".into(), vec![cfg.num_classes, d, 1, 1], Init::HeNormal);
    add("cls.b".into(), vec![cfg.num_classes], Init::Zeros);
    out
}

pub fn build_decoder_params(cfg: &DecoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    for (name, shape, init) in decoder_layout(cfg) {
        p.declare(seed, &name, shape, init);
    }
    Ok(p)
}

/// Closed-form size of the complexity head for a shallowest width `c1`.
pub fn tcp_param_count(c1: usize) -> usize {
    9 * c1 * TCP_CONV_CHANNELS + TCP_CONV_CHANNELS + TCP_CONV_CHANNELS * TCP_HIDDEN + TCP_HIDDEN + TCP_HIDDEN + 1
}

// ---------------------------------------------------------------- forward

fn check_unit_interval(tape: &Tape, c: Var, what: &str) -> Result<()> {
    if let Some(bad) = tape.value(c).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DarnError::Domain(format!("{what} {bad} outside [0, 1]")));
    }
    Ok(())
}

/// `1 − x` on the tape.
fn one_minus(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.neg(x)?;
    Ok(tape.add_const(n, 1.0)?)
}

/// Per-sample complexity `c = σ(MLP(GAP(relu(conv3×3(F1)))))`, shape `[B]`.
pub fn tcp_forward(tape: &mut Tape, f1: Var, params: &Bound) -> Result<Var> {
    let w = params.get("tcp.conv.w")?;
    let expected = tape.shape(w)[1];
    let got = tape.shape(f1).get(1).copied().unwrap_or(0);
    if got != expected {
        return Err(DarnError::Config(format!(
            "complexity head expects {expected} input channels, got {got}"
        )));
    }
    let h = tape.conv2d(f1, w, Some(params.get("tcp.conv.b")?), 1, 1)?;
    let h = tape.relu(h)?;
    let h = tape.gap(h)?;
    let h = tape.linear(h, params.get("tcp.fc1.w")?, Some(params.get("tcp.fc1.b")?))?;
    let h = tape.relu(h)?;
    let h = tape.linear(h, params.get("tcp.fc2.w")?, Some(params.get("tcp.fc2.b")?))?;
    let c = tape.sigmoid(h)?;
    Ok(tape.sum(c, &[1])?)
}

/// Dropout rate `p(c)` on the tape; `∂p/∂c = p_min − p_max`.
pub fn adm_rate(tape: &mut Tape, c: Var, p_min: f64, p_max: f64) -> Result<Var> {
    check_unit_interval(tape, c, "complexity")?;
    let rest = one_minus(tape, c)?;
    let hi = tape.mul_const(rest, p_max)?;
    let lo = tape.mul_const(c, p_min)?;
    Ok(tape.add(hi, lo)?)
}

/// Gate factor `α(1 − c) + c` on the tape.
pub fn gate_scale(tape: &mut Tape, c: Var, alpha: f64) -> Result<Var> {
    check_unit_interval(tape, c, "complexity")?;
    let rest = one_minus(tape, c)?;
    let floor = tape.mul_const(rest, alpha)?;
    Ok(tape.add(floor, c)?)
}

/// Relaxed inverted dropout with per-sample rate `p` (`[B]`).
///
/// Train: `x ⊙ m̃ / (1 − p)` with
/// `m̃ = 1 − σ((log p − log(1−p) + log u − log(1−u)) / t)`.
/// Eval: returns `x` itself.
pub fn adm_apply(tape: &mut Tape, x: Var, p: Var, mask: &DropoutMask, temperature: f64) -> Result<Var> {
    if mask.mode == Mode::Eval {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    if mask.u.shape() != shape.as_slice() {
        return Err(DarnError::Config(format!(
            "dropout noise shape {:?} does not match activations {shape:?}",
            mask.u.shape()
        )));
    }
    if !(temperature > 0.0) {
        return Err(DarnError::Domain(format!("temperature {temperature} must be positive")));
    }
    if tape.shape(p) != [shape[0]] {
        return Err(DarnError::Config(format!(
            "dropout rate shape {:?}, expected [{}]",
            tape.shape(p),
            shape[0]
        )));
    }
    if let Some(bad) = tape.value(p).data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(DarnError::Domain(format!("dropout rate {bad} outside (0, 1)")));
    }
    if let Some(bad) = mask.u.data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(DarnError::Domain(format!("uniform draw {bad} outside (0, 1)")));
    }
    let noise_logit = mask.u.map(|u| u.ln() - (1.0 - u).ln());
    let noise_logit = tape.constant(noise_logit);

    let keep = one_minus(tape, p)?;
    let log_p = tape.log(p)?;
    let log_keep = tape.log(keep)?;
    let rate_logit = tape.sub(log_p, log_keep)?;
    let rate_logit = tape.broadcast(rate_logit, &shape)?;
    let z = tape.add(rate_logit, noise_logit)?;
    let z = tape.mul_const(z, 1.0 / temperature)?;
    let drop = tape.sigmoid(z)?;
    let mask_v = one_minus(tape, drop)?;
    let kept = tape.mul(x, mask_v)?;
    let keep_b = tape.broadcast(keep, &shape)?;
    Ok(tape.div(kept, keep_b)?)
}

/// Squeeze-excitation attention `σ(W2·relu(W1·GAP(F)))`, shape `[B, C]`.
pub fn se_attention(tape: &mut Tape, f: Var, params: &Bound, level: usize) -> Result<Var> {
    let w1 = params.get(&format!("se.{level}.fc1.w"))?;
    let c = tape.shape(f).get(1).copied().unwrap_or(0);
    if tape.shape(w1)[1] != c {
        return Err(DarnError::Config(format!(
            "gate at level {level} expects {} channels, got {c}",
            tape.shape(w1)[1]
        )));
    }
    let s = tape.gap(f)?;
    let s = tape.linear(s, w1, Some(params.get(&format!("se.{level}.fc1.b"))?))?;
    let s = tape.relu(s)?;
    let s = tape.linear(
        s,
        params.get(&format!("se.{level}.fc2.w"))?,
        Some(params.get(&format!("se.{level}.fc2.b"))?),
    )?;
    Ok(tape.sigmoid(s)?)
}

/// `F ⊙ [a · factor]` with `factor: [B]` broadcast over channels and space.
pub fn gate_features(tape: &mut Tape, f: Var, factor: Var, params: &Bound, level: usize) -> Result<Var> {
    let a = se_attention(tape, f, params, level)?;
    let a_shape = tape.shape(a).to_vec();
    let fb = tape.broadcast(factor, &a_shape)?;
    let gate = tape.mul(a, fb)?;
    let shape = tape.shape(f).to_vec();
    let gate = tape.broadcast(gate, &shape)?;
    Ok(tape.mul(f, gate)?)
}

/// Complexity-modulated channel gating of one feature map.
pub fn dcg_apply(tape: &mut Tape, f: Var, c: Var, alpha: f64, params: &Bound, level: usize) -> Result<Var> {
    let factor = gate_scale(tape, c, alpha)?;
    gate_features(tape, f, factor, params, level)
}

/// Tape handles of one decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct DecodeOutput {
    pub logits: Var,
    pub complexity: Option<Var>,
    pub dropout_rate: Option<Var>,
    pub gate_scale: Option<Var>,
}

/// Concrete per-sample complexity state.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityState {
    pub c: Tensor,
    pub p: Tensor,
    pub gate_scale: Tensor,
}

impl DecodeOutput {
    /// Complexity state when the complexity head ran. The rate and gate are
    /// derived from `c` with the decoder constants when their sites were off.
    pub fn state(&self, tape: &Tape, cfg: &DecoderConfig) -> Option<ComplexityState> {
        let c = tape.value(self.complexity?).clone();
        let p = match self.dropout_rate {
            Some(v) if cfg.adm => tape.value(v).clone(),
            _ => c.map(|v| dropout_rate(v, cfg.p_min, cfg.p_max)),
        };
        let g = match self.gate_scale {
            Some(v) => tape.value(v).clone(),
            None => c.map(|v| gate_factor(v, cfg.alpha)),
        };
        Some(ComplexityState { c, p, gate_scale: g })
    }
}

fn conv_named(tape: &mut Tape, x: Var, params: &Bound, name: &str, padding: usize) -> Result<Var> {
    let w = params.get(&format!("{name}.w"))?;
    let b = params.get(&format!("{name}.b"))?;
    Ok(tape.conv2d(x, w, Some(b), 1, padding)?)
}

fn ppm(tape: &mut Tape, f: Var, params: &Bound) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    let (h, w) = (s[2], s[3]);
    let mut branches = vec![f];
    for scale in PPM_SCALES {
        let pooled = tape.adaptive_avg_pool(f, scale, scale)?;
        let y = conv_named(tape, pooled, params, &format!("ppm.{scale}"), 0)?;
        let y = tape.relu(y)?;
        branches.push(tape.resize_bilinear(y, h, w)?);
    }
    let cat = tape.concat_channels(&branches)?;
    let y = conv_named(tape, cat, params, "ppm.fuse", 1)?;
    Ok(tape.relu(y)?)
}

fn dropout_site(
    tape: &mut Tape,
    x: Var,
    p: Var,
    cfg: &DecoderConfig,
    mode: Mode,
    noise: &mut dyn NoiseSource,
) -> Result<Var> {
    if mode == Mode::Eval {
        return Ok(x);
    }
    let u = noise.draw(tape.shape(x))?;
    adm_apply(tape, x, p, &DropoutMask { u, mode }, cfg.temperature)
}

fn top_down(tape: &mut Tape, top: Var, lateral: Var) -> Result<Var> {
    let s = tape.shape(lateral).to_vec();
    let up = tape.resize_bilinear(top, s[2], s[3])?;
    Ok(tape.add(lateral, up)?)
}

/// Full decoder pass producing `[B, K, H, W]` logits at image resolution.
pub fn decode(
    tape: &mut Tape,
    pyr: &PyramidVars,
    params: &Bound,
    cfg: &DecoderConfig,
    mode: Mode,
    noise: &mut dyn NoiseSource,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    for (l, (&v, &want)) in pyr.levels.iter().zip(&cfg.feature_widths).enumerate() {
        let s = tape.shape(v);
        if s.len() != 4 || s[1] != want {
            return Err(DarnError::Config(format!(
                "pyramid level {} has shape {s:?}, decoder expects {want} channels",
                l + 1
            )));
        }
    }
    let batch = tape.shape(pyr.levels[0])[0];
    let [f1, f2, f3, f4] = pyr.levels;

    let complexity = if cfg.tcp {
        Some(tcp_forward(tape, f1, params)?)
    } else {
        None
    };
    let gate = match (cfg.dcg, complexity) {
        (false, _) => None,
        (true, Some(c)) => Some(gate_scale(tape, c, cfg.alpha)?),
        (true, None) => {
            let g = cfg.fixed_gate.expect("validated");
            Some(tape.constant(Tensor::full(vec![batch], g)))
        }
    };
    let mut gated = [f2, f3, f4];
    if let Some(g) = gate {
        for (i, f) in gated.iter_mut().enumerate() {
            *f = gate_features(tape, *f, g, params, i + 2)?;
        }
    }
    let [g2, g3, g4] = gated;

    let rate = if cfg.adm {
        let c = complexity.expect("validated");
        Some(adm_rate(tape, c, cfg.p_min, cfg.p_max)?)
    } else if cfg.dropout_active() {
        Some(tape.constant(Tensor::full(vec![batch], cfg.fixed_p)))
    } else {
        None
    };

    let mid_dropout = |tape: &mut Tape, x: Var, noise: &mut dyn NoiseSource| -> Result<Var> {
        match rate {
            Some(p) if cfg.adm_per_level => dropout_site(tape, x, p, cfg, mode, noise),
            _ => Ok(x),
        }
    };

    let p1 = match cfg.ppm_source {
        PpmSource::Deepest => {
            let mut top = ppm(tape, g4, params)?;
            for (level, f) in [(3, g3), (2, g2)] {
                let lat = conv_named(tape, f, params, &format!("fpn.lat.{level}"), 0)?;
                top = top_down(tape, top, lat)?;
                top = mid_dropout(tape, top, noise)?;
            }
            let lat = conv_named(tape, f1, params, "fpn.lat.1", 0)?;
            top_down(tape, top, lat)?
        }
        PpmSource::Shallowest => {
            let mut top = conv_named(tape, g4, params, "fpn.lat.4", 0)?;
            for (level, f) in [(3, g3), (2, g2)] {
                let lat = conv_named(tape, f, params, &format!("fpn.lat.{level}"), 0)?;
                top = top_down(tape, top, lat)?;
                top = mid_dropout(tape, top, noise)?;
            }
            let pooled = ppm(tape, f1, params)?;
            top_down(tape, top, pooled)?
        }
    };
    let fused = conv_named(tape, p1, params, "fpn.fuse", 1)?;
    let mut fused = tape.relu(fused)?;
    if let Some(p) = rate {
        fused = dropout_site(tape, fused, p, cfg, mode, noise)?;
    }
    let logits = conv_named(tape, fused, params, "cls", 0)?;
    let (h, w) = pyr.image_size;
    let logits = tape.resize_bilinear(logits, h, w)?;
    Ok(DecodeOutput {
        logits,
        complexity,
        dropout_rate: if cfg.adm { rate } else { None },
        gate_scale: gate,
    })
}

/// Fixed-regularization pathway: no complexity head, no adaptive dropout,
/// constant dropout `fixed_p`. Gating stays on only if `base` pins a fixed gate.
pub fn decode_baseline(
    tape: &mut Tape,
    pyr: &PyramidVars,
    params: &Bound,
    base: &DecoderConfig,
    fixed_p: f64,
    mode: Mode,
    noise: &mut dyn NoiseSource,
) -> Result<Var> {
    let mut cfg = base.clone();
    cfg.tcp = false;
    cfg.adm = false;
    cfg.dcg = base.dcg && base.fixed_gate.is_some();
    cfg.fixed_p = fixed_p;
    Ok(decode(tape, pyr, params, &cfg, mode, noise)?.logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_constants_are_exact() {
        assert_eq!(dropout_rate(0.0, 0.1, 0.5), 0.5);
        assert_eq!(dropout_rate(1.0, 0.1, 0.5), 0.1);
        assert_eq!(dropout_rate(0.25, 0.1, 0.5), 0.4);
        assert_eq!(gate_factor(0.0, 0.3), 0.3);
        assert_eq!(gate_factor(0.5, 0.3), 0.65);
        assert_eq!(gate_factor(1.0, 0.3), 1.0);
    }

    #[test]
    fn tcp_count_matches_layout() {
        assert_eq!(tcp_param_count(16), 11_393);
        let cfg = DecoderConfig::new([16, 32, 64, 128], 8, 3);
        let tcp: usize = decoder_layout(&cfg)
            .iter()
            .filter(|(n, _, _)| n.starts_with("tcp."))
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum();
        assert_eq!(tcp, 11_393);
    }

    #[test]
    fn config_validation() {
        let base = DecoderConfig::new([4, 4, 4, 4], 4, 2);
        assert!(base.validate().is_ok());
        let mut c = base.clone();
        c.tcp = false;
        assert!(c.validate().is_err());
        c.adm = false;
        assert!(c.validate().is_err());
        c.fixed_gate = Some(0.65);
        assert!(c.validate().is_ok());
        let mut c = base.clone();
        c.fixed_p = 1.0;
        assert!(c.validate().is_err());
        let mut c = base;
        c.temperature = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn concrete_keep_limits() {
        // u above 1 − p with a cold temperature drops the unit.
        assert!(concrete_keep(0.5, 0.99, 1e-3) < 1e-12);
        assert!(concrete_keep(0.5, 0.01, 1e-3) > 1.0 - 1e-12);
    }
}
