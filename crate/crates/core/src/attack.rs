//! Single-step sign-gradient (FGSM) input attack.

use ndtensor::{Tape, Tensor, Var};

use crate::error::{DarnError, Result};

pub const DEFAULT_EPSILON: f64 = 8.0 / 255.0;

/// `clamp(x + ε·sign(∇ₓ loss), 0, 1)`. `loss` receives the tape and the
/// image leaf and must return a scalar; `sign(0) = 0`.
pub fn fgsm<F>(images: &Tensor, epsilon: f64, loss: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(DarnError::Domain(format!("epsilon {epsilon} must be finite and >= 0")));
    }
    let mut tape = Tape::new();
    let x = tape.param(images.clone());
    let root = loss(&mut tape, x)?;
    let grads = tape.backward(root)?;
    let g = grads.get_or_zeros(x);
    if !g.is_finite() {
        return Err(DarnError::NonFiniteGradient("input images".into()));
    }
    let data = images
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &d)| {
            let step = if d > 0.0 {
                epsilon
            } else if d < 0.0 {
                -epsilon
            } else {
                0.0
            };
            (v + step).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Tensor::from_vec(images.shape().to_vec(), data))
}
