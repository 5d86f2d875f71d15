use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("adam.lr", "must be positive"));
        }
        for (field, b) in [("adam.beta1", self.beta1), ("adam.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("adam.eps", "must be positive"));
        }
        Ok(())
    }
}

/// Moment estimates mirroring the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = params.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update. Non-finite gradients leave everything
    /// untouched and name the offending parameter.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of {name} at step {}", self.step + 1),
            });
        }
        if grads.tensors().len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::config("adam", "state does not match the parameter set"));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let corr1 = T::of(1.0 - c.beta1.powi(t));
        let corr2 = T::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads.tensors()).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let m_hat = *mv / corr1;
                let v_hat = *vv / corr2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> AdamState<U> {
        AdamState {
            config: self.config,
            step: self.step,
            m: self.m.iter().map(Tensor::cast).collect(),
            v: self.v.iter().map(Tensor::cast).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    fn grads_of(s: &ParamStore<f64>, f: impl Fn(f64) -> f64) -> Gradients<f64> {
        let mut g = Gradients::zeros_like(s);
        g.tensors_mut()[0] = s.tensor(s.id("p").unwrap()).map(f);
        g
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = store(&[1.0, -2.0]);
        let mut a = AdamState::new(AdamConfig::default(), &s);
        let g = Gradients::zeros_like(&s);
        a.step(&mut s, &g).unwrap();
        assert_eq!(s.tensor(s.id("p").unwrap()).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.5]);
        let mut a = AdamState::new(AdamConfig::default(), &s);
        let g = grads_of(&s, |_| 1.0);
        a.step(&mut s, &g).unwrap();
        let moved = 0.5 - s.tensor(s.id("p").unwrap()).data()[0];
        assert!((moved - 1e-4).abs() < 1e-9);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = store(&[1.0, -0.5, 0.25]);
        let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
        let mut a = AdamState::new(cfg, &s);
        for _ in 0..2000 {
            let g = grads_of(&s, |x| 2.0 * x);
            a.step(&mut s, &g).unwrap();
        }
        let f: f64 = s.tensor(s.id("p").unwrap()).data().iter().map(|x| x * x).sum();
        assert!(f < 1e-6, "{f}");
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = store(&[1.0]);
        let mut a = AdamState::new(AdamConfig::default(), &s);
        let g = grads_of(&s, |_| f64::NAN);
        assert!(a.step(&mut s, &g).is_err());
        assert_eq!(a.step, 0);
    }
}
