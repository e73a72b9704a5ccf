//! AdamW with decoupled weight decay.

use ndtensor::Tensor;

use crate::error::{DarnError, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay to tensors whose name ends in `.b`.
    pub decay_biases: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            decay_biases: true,
        }
    }
}

/// Moments mirror the parameter set entry by entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|e| Tensor::zeros(e.value.shape().to_vec())).collect();
        AdamW {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update. `grads[i]` belongs to the `i`-th entry of `params`; a
    /// missing gradient counts as zero. Frozen entries are left untouched.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(DarnError::config(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        if !(lr >= 0.0) {
            return Err(DarnError::Domain(format!("learning rate {lr} must be >= 0")));
        }
        for (e, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != e.value.shape() {
                    return Err(DarnError::config(format!(
                        "gradient shape {:?} for `{}` of shape {:?}",
                        g.shape(),
                        e.name,
                        e.value.shape()
                    )));
                }
                if e.trainable && !g.is_finite() {
                    return Err(DarnError::NonFiniteGradient(e.name.clone()));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (e, g)) in params.iter_mut().zip(grads).enumerate() {
            if !e.trainable {
                continue;
            }
            let decay = if c.decay_biases || !e.name.ends_with(".b") {
                c.weight_decay
            } else {
                0.0
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let theta = e.value.data_mut();
            for j in 0..theta.len() {
                let gj = g.as_ref().map_or(0.0, |g| g.data()[j]);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] = theta[j] - lr * m_hat / (v_hat.sqrt() + c.eps) - lr * decay * theta[j];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        let mut p = ParamSet::new();
        p.push("a.w", Tensor::from_vec(vec![1], vec![1.0]), true);
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let err = opt
            .step(&mut p, &[Some(Tensor::from_vec(vec![1], vec![f64::NAN]))], 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("a.w"));
        assert_eq!(p, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn frozen_entries_are_skipped() {
        let mut p = ParamSet::new();
        p.push("enc.w", Tensor::from_vec(vec![1], vec![2.0]), false);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[Some(Tensor::from_vec(vec![1], vec![1.0]))], 1.0).unwrap();
        assert_eq!(p.get("enc.w").unwrap().data(), &[2.0]);
    }
}
