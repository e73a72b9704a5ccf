//! Training objective: cross-entropy + Dice on the segmentation output plus
//! a batch-level regularizer on the complexity scores.

use ndtensor::{Tape, Tensor, Var};

use crate::error::{DarnError, Result};
use crate::metrics::Mask;

pub const DEFAULT_BETA: f64 = 0.05;
pub const DEFAULT_LAMBDA_DICE: f64 = 1.0;
pub const DICE_SMOOTHING: f64 = 1.0;

/// Weights of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda_dice: f64,
    /// `+1` adds the batch variance of `c` (penalizing spread), `−1` subtracts it.
    pub variance_sign: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: DEFAULT_BETA,
            lambda_dice: DEFAULT_LAMBDA_DICE,
            variance_sign: 1.0,
        }
    }
}

/// Tape handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
    pub complexity: Option<Var>,
}

/// Scalar values of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub complexity: f64,
    pub beta: f64,
    pub lambda_dice: f64,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape, w: &LossWeights) -> LossBreakdown {
        let item = |v: Var| tape.value(v).item().expect("scalar loss term");
        LossBreakdown {
            total: item(self.total),
            ce: item(self.ce),
            dice: item(self.dice),
            complexity: self.complexity.map(item).unwrap_or(0.0),
            beta: w.beta,
            lambda_dice: w.lambda_dice,
        }
    }
}

fn check_target(tape: &Tape, logits: Var, target: &Mask) -> Result<usize> {
    let s = tape.shape(logits);
    if s.len() != 4 || [s[0], s[2], s[3]] != target.shape {
        return Err(DarnError::Geometry(format!(
            "logits {s:?} do not match target {:?}",
            target.shape
        )));
    }
    let k = s[1];
    if let Some(bad) = target.data.iter().find(|&&t| t as usize >= k) {
        return Err(DarnError::Domain(format!("label {bad} outside 0..{k}")));
    }
    Ok(k)
}

/// Mean over pixels of `−log softmax(logits)[target]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, target: &Mask) -> Result<Var> {
    check_target(tape, logits, target)?;
    let lsm = tape.log_softmax(logits)?;
    let index: Vec<usize> = target.data.iter().map(|&t| t as usize).collect();
    let picked = tape.gather_channels(lsm, &index)?;
    let mean = tape.mean(picked, &[0, 1, 2])?;
    Ok(tape.neg(mean)?)
}

/// One-hot encoding `[B, K, H, W]` of a label mask.
pub fn one_hot(target: &Mask, k: usize) -> Tensor {
    let [b, h, w] = target.shape;
    let hw = h * w;
    let mut data = vec![0.0; b * k * hw];
    for (pos, &t) in target.data.iter().enumerate() {
        let (n, r) = (pos / hw, pos % hw);
        data[(n * k + t as usize) * hw + r] = 1.0;
    }
    Tensor::from_vec(vec![b, k, h, w], data)
}

/// Soft Dice averaged over classes, smoothed by [`DICE_SMOOTHING`].
pub fn dice_loss(tape: &mut Tape, logits: Var, target: &Mask) -> Result<Var> {
    let k = check_target(tape, logits, target)?;
    let y = one_hot(target, k);
    let mut y_sum = vec![0.0; k];
    let hw = target.shape[1] * target.shape[2];
    for (i, v) in y.data().iter().enumerate() {
        y_sum[(i / hw) % k] += v;
    }
    let p = tape.softmax(logits)?;
    let y = tape.constant(y);
    let y_sum = tape.constant(Tensor::from_vec(vec![k], y_sum));
    let inter = tape.mul(p, y)?;
    let inter = tape.sum(inter, &[0, 2, 3])?;
    let num = tape.mul_const(inter, 2.0)?;
    let num = tape.add_const(num, DICE_SMOOTHING)?;
    let p_sum = tape.sum(p, &[0, 2, 3])?;
    let den = tape.add(p_sum, y_sum)?;
    let den = tape.add_const(den, DICE_SMOOTHING)?;
    let ratio = tape.div(num, den)?;
    let mean = tape.mean(ratio, &[0])?;
    let neg = tape.neg(mean)?;
    Ok(tape.add_const(neg, 1.0)?)
}

/// `sign·Var(c) + (mean(c) − 0.5)²` with the population variance.
pub fn complexity_loss(tape: &mut Tape, c: Var, variance_sign: f64) -> Result<Var> {
    let s = tape.shape(c);
    if s.len() != 1 || s[0] == 0 {
        return Err(DarnError::Domain(format!(
            "complexity loss needs a non-empty [B] vector, got {s:?}"
        )));
    }
    if let Some(bad) = tape.value(c).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DarnError::Domain(format!("complexity {bad} outside [0, 1]")));
    }
    let var = tape.var(c, &[0])?;
    let var = tape.mul_const(var, variance_sign)?;
    let mean = tape.mean(c, &[0])?;
    let centered = tape.add_const(mean, -0.5)?;
    let sq = tape.mul(centered, centered)?;
    Ok(tape.add(var, sq)?)
}

/// `ce + λ_dice·dice + β·complexity`; the last term is dropped when `c` is absent.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    target: &Mask,
    c: Option<Var>,
    w: &LossWeights,
) -> Result<LossVars> {
    let ce = cross_entropy(tape, logits, target)?;
    let dice = dice_loss(tape, logits, target)?;
    let weighted = tape.mul_const(dice, w.lambda_dice)?;
    let mut total = tape.add(ce, weighted)?;
    let complexity = match c {
        Some(c) => {
            let l = complexity_loss(tape, c, w.variance_sign)?;
            let weighted = tape.mul_const(l, w.beta)?;
            total = tape.add(total, weighted)?;
            Some(l)
        }
        None => None,
    };
    Ok(LossVars {
        total,
        ce,
        dice,
        complexity,
    })
}
