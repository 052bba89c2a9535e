//! Central-difference gradient checking.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::network::Model;
use crate::numerics::{ops, Graph, ParamStore, Tensor, Var};
use crate::spiking::SpikeOptions;

/// Central-difference formula. The five-point rule cancels the `h^2` error term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    ThreePoint,
    FivePoint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    pub stencil: Stencil,
    /// Coordinates checked per tensor (all of them when the tensor is smaller).
    pub coords_per_tensor: usize,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so coordinates whose true gradient is
    /// zero are judged on absolute error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            stencil: Stencil::FivePoint,
            coords_per_tensor: 64,
            tolerance: 1e-3,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    /// Coordinates passed over because a step of `h` changed a max-pool winner.
    pub kinks_skipped: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !(p.max_rel_err < tolerance)).collect()
    }

    pub fn coords(&self) -> usize {
        self.params.iter().map(|p| p.coords).sum()
    }

    /// `Err` listing every parameter over `tolerance`.
    pub fn ensure(&self, tolerance: f64) -> Result<()> {
        let bad = self.failures(tolerance);
        if bad.is_empty() {
            return Ok(());
        }
        let list: Vec<String> = bad
            .iter()
            .map(|p| format!("{} (rel err {:.3e} at coord {})", p.name, p.max_rel_err, p.worst_coord))
            .collect();
        Err(Error::Numeric(format!("gradient check failed: {}", list.join(", "))))
    }

    pub fn text(&self) -> String {
        let mut s = String::from("parameter,coords,kinks_skipped,max_rel_err,analytic,numeric\n");
        for p in &self.params {
            s += &format!("{},{},{},{:e},{:e},{:e}\n", p.name, p.coords, p.kinks_skipped, p.max_rel_err, p.analytic, p.numeric);
        }
        s
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the tape's gradients of `loss` against central differences on every
/// trainable tensor of `store`. `fault` corrupts one backward rule of the analytic
/// pass only.
pub fn check_gradients<F>(store: &mut ParamStore<f64>, loss: F, cfg: &GradCheckConfig, fault: Option<(&'static str, f64)>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    if let Some((op, factor)) = fault {
        g.inject_grad_fault(op, factor);
    }
    let l = loss(&mut g, store)?;
    g.backward(l, store)?;

    let base = g.branch_fingerprint();
    let eval = |store: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::inference();
        let l = loss(&mut g, store)?;
        Ok((g.value(l).item(), g.branch_fingerprint()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = store.get(id).value.numel();
        let order = index::sample(&mut rng, numel, numel).into_vec();
        let mut worst = ParamCheck {
            name: store.get(id).name.clone(),
            coords: 0,
            kinks_skipped: 0,
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for c in order {
            if worst.coords == cfg.coords_per_tensor {
                break;
            }
            let orig = store.get(id).value.data()[c];
            let mut at = |k: f64| -> Result<(f64, u64)> {
                store.get_mut(id).value.data_mut()[c] = orig + k * cfg.h;
                let r = eval(store);
                store.get_mut(id).value.data_mut()[c] = orig;
                r
            };
            let offsets: &[f64] = match cfg.stencil {
                Stencil::ThreePoint => &[1.0, -1.0],
                Stencil::FivePoint => &[1.0, -1.0, 2.0, -2.0],
            };
            let mut f = [0.0; 4];
            let mut kink = false;
            for (slot, &k) in offsets.iter().enumerate() {
                let (v, fp) = at(k)?;
                f[slot] = v;
                kink |= fp != base;
            }
            if kink {
                // the step crossed a max switch, where the loss has no derivative
                worst.kinks_skipped += 1;
                continue;
            }
            worst.coords += 1;
            let numeric = match cfg.stencil {
                Stencil::ThreePoint => (f[0] - f[1]) / (2.0 * cfg.h),
                Stencil::FivePoint => (8.0 * (f[0] - f[1]) - (f[2] - f[3])) / (12.0 * cfg.h),
            };
            let analytic = store.get(id).grad.data()[c];
            let err = relative_error(analytic, numeric, cfg.abs_floor);
            if !(err <= worst.max_rel_err) {
                worst.max_rel_err = err;
                worst.worst_coord = c;
                worst.analytic = analytic;
                worst.numeric = numeric;
            }
        }
        params.push(worst);
    }
    store.zero_grad();
    Ok(GradCheckReport { params })
}

/// Check a whole model at 64 bits with the smooth surrogate in the forward pass.
pub fn grad_check(model: &mut Model<f64>, input: &Tensor<f64>, labels: &[usize], cfg: &GradCheckConfig, fault: Option<(&'static str, f64)>) -> Result<GradCheckReport> {
    let arch = model.clone();
    let loss = |g: &mut Graph<f64>, store: &ParamStore<f64>| -> Result<Var> {
        let mut m = arch.clone();
        m.store = store.clone();
        let x = g.constant(input.clone());
        let mut ctx = ForwardCtx::train().with_spike(SpikeOptions::smooth());
        let y = m.forward(g, x, &mut ctx)?;
        ops::cross_entropy(g, y, labels)
    };
    check_gradients(&mut model.store, loss, cfg, fault)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (ParamStore<f64>, Tensor<f64>) {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[3, 2], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap());
        s.add("b", Tensor::from_f64(&[2], &[0.05, -0.05]).unwrap());
        (s, Tensor::from_f64(&[4, 3], &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0, -2.0, 1.0, 1.0, 0.3, 0.2, 0.1]).unwrap())
    }

    fn linear_sum(x: &Tensor<f64>) -> impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + '_ {
        move |g, s| {
            let w = g.param(s, s.find("w").unwrap());
            let b = g.param(s, s.find("b").unwrap());
            let xv = g.constant(x.clone());
            let y = ops::linear(g, xv, w, Some(b))?;
            let y = ops::sum_axis(g, y, 1, false)?;
            ops::sum_axis(g, y, 0, false)
        }
    }

    #[test]
    fn linear_model_is_exact() {
        let (mut s, x) = toy();
        let r = check_gradients(&mut s, linear_sum(&x), &GradCheckConfig::default(), None).unwrap();
        assert!(r.max_rel_err() < 1e-8, "{r:?}");
        assert_eq!(r.coords(), 8);
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let (mut s, x) = toy();
        let cfg = GradCheckConfig::default();
        let r = check_gradients(&mut s, linear_sum(&x), &cfg, Some(("linear", 1.5))).unwrap();
        assert!(r.ensure(cfg.tolerance).is_err());
    }
}
