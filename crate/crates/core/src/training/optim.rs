//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates, one pair per store entry (empty for buffers).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<R: Real>(store: &ParamStore<R>, cfg: AdamWConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| if p.trainable { vec![0.0; p.value.numel()] } else { Vec::new() })
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }

    /// One update at learning rate `lr`. Every gradient is checked before any weight
    /// moves, so a non-finite gradient leaves the store untouched.
    pub fn step<R: Real>(&mut self, store: &mut ParamStore<R>, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if p.trainable && !p.grad.all_finite() {
                return Err(Error::NonFiniteGrad { name: p.name.clone() });
            }
        }
        if self.m.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer built for {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grads = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                let mut x = w.as_f64() * (1.0 - lr * c.weight_decay);
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                x -= lr * m_hat / (v_hat.sqrt() + c.eps);
                *w = R::from_f64_lossy(x);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store(w: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[w.len()], w).unwrap());
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_a_no_op() {
        let mut s = store(&[1.0, -2.0]);
        let mut opt = AdamW::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn decoupled_decay_scales_weights() {
        let mut s = store(&[1.0, -2.0]);
        let mut opt = AdamW::new(&s, AdamWConfig { weight_decay: 0.1, ..Default::default() });
        opt.step(&mut s, 0.01).unwrap();
        let v = s.iter().next().unwrap().1.value.data().to_vec();
        assert!((v[0] - 0.999).abs() < 1e-15 && (v[1] + 1.998).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut s = store(&[0.0]);
        let mut opt = AdamW::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut last = 0.0;
        for _ in 0..200 {
            s.iter_mut().next().unwrap().grad = Tensor::from_f64(&[1], &[0.5]).unwrap();
            opt.step(&mut s, 1e-3).unwrap();
            let now = s.iter().next().unwrap().1.value.data()[0];
            let delta: f64 = last - now;
            assert!((delta - 1e-3).abs() < 1e-8, "{delta}");
            last = now;
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store(&[1.0]);
        s.iter_mut().next().unwrap().grad = Tensor::from_f64(&[1], &[f64::NAN]).unwrap();
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        match opt.step(&mut s, 0.1) {
            Err(Error::NonFiniteGrad { name }) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[1.0]);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-15);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
    }
}
