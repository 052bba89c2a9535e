//! Leaky integrate-and-fire neurons with hard reset.
//!
//! Per step, with membrane `V` carried across time:
//!
//! ```text
//! H[t] = V[t-1] + (X[t] - (V[t-1] - V_reset)) / tau
//! S[t] = Θ(H[t] - V_th)          Θ(v) = 1 if v >= 0 else 0
//! V[t] = H[t] (1 - S[t]) + V_reset S[t]
//! ```
//!
//! Training replaces dS/dH with the arctan surrogate
//! `alpha / (2 (1 + (pi/2 · alpha · (H - V_th))^2))`.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::numerics::{Backward, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau: 2.0,
            v_th: 1.0,
            v_reset: 0.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.v_th > self.v_reset) {
            return Err(Error::Config(format!(
                "v_th ({}) must exceed v_reset ({})",
                self.v_th, self.v_reset
            )));
        }
        Ok(())
    }
}

/// Arctan surrogate; `alpha` sets the sharpness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateSpec {
    pub alpha: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self { alpha: 2.0 }
    }
}

impl SurrogateSpec {
    /// Smooth stand-in for Θ, used in the forward pass only in [`FiringMode::Smooth`].
    pub fn smooth_step(&self, x: f64) -> f64 {
        (FRAC_PI_2 * self.alpha * x).atan() / PI + 0.5
    }

    pub fn grad(&self, x: f64) -> f64 {
        let z = FRAC_PI_2 * self.alpha * x;
        self.alpha / (2.0 * (1.0 + z * z))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FiringMode {
    /// Exact Heaviside spikes, surrogate gradient in backward.
    #[default]
    Heaviside,
    /// The surrogate itself in forward, so the whole net is smooth and finite
    /// differences can check backward.
    Smooth,
}

/// Knobs shared by every spiking layer in one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpikeOptions {
    pub mode: FiringMode,
    /// Drop the gradient through the reset term of `V[t]`.
    pub detach_reset: bool,
}

impl Default for SpikeOptions {
    fn default() -> Self {
        Self {
            mode: FiringMode::Heaviside,
            detach_reset: true,
        }
    }
}

impl SpikeOptions {
    /// Settings for gradient checking: smooth forward, reset path attached.
    pub fn smooth() -> Self {
        Self {
            mode: FiringMode::Smooth,
            detach_reset: false,
        }
    }
}

/// Membrane state of a layer between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState<R: Real = f32> {
    /// V[t]
    pub v: Tensor<R>,
    /// H[t] of the step that produced `v`.
    pub h: Tensor<R>,
}

impl<R: Real> LifState<R> {
    pub fn fresh(shape: &[usize], params: &LifParams) -> Self {
        Self {
            v: Tensor::full(shape, R::from_f64_lossy(params.v_reset)),
            h: Tensor::zeros(shape),
        }
    }
}

#[inline]
fn charge<R: Real>(v_prev: R, x: R, tau: R, v_reset: R) -> R {
    v_prev + (x - (v_prev - v_reset)) / tau
}

#[inline]
fn heaviside<R: Real>(h: R, v_th: R) -> R {
    if h - v_th >= R::zero() {
        R::one()
    } else {
        R::zero()
    }
}

/// One LIF update over a whole slice of neurons.
pub fn lif_step<R: Real>(x_t: &Tensor<R>, state: &LifState<R>, params: &LifParams) -> Result<(Tensor<R>, LifState<R>)> {
    if x_t.shape() != state.v.shape() {
        return Err(Error::shape(
            "lif_step",
            format!("input {:?} vs state {:?}", x_t.shape(), state.v.shape()),
        ));
    }
    let tau = R::from_f64_lossy(params.tau);
    let v_th = R::from_f64_lossy(params.v_th);
    let v_reset = R::from_f64_lossy(params.v_reset);
    let n = x_t.numel();
    let (mut s, mut v, mut h) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (&x, &vp) in x_t.data().iter().zip(state.v.data()) {
        let hh = charge(vp, x, tau, v_reset);
        let ss = heaviside(hh, v_th);
        h.push(hh);
        s.push(ss);
        v.push(hh * (R::one() - ss) + v_reset * ss);
    }
    let shape = x_t.shape();
    Ok((
        Tensor::new(shape, s)?,
        LifState {
            v: Tensor::new(shape, v)?,
            h: Tensor::new(shape, h)?,
        },
    ))
}

struct LifRule {
    params: LifParams,
    surrogate: SurrogateSpec,
    opts: SpikeOptions,
    stateless: bool,
    steps: usize,
    /// H[t] for every step, same layout as the output.
    h: Vec<f64>,
}

impl<R: Real> Backward<R> for LifRule {
    fn name(&self) -> &'static str {
        "lif"
    }

    fn backward(&self, g: &Tensor<R>, _: &[&Tensor<R>], out: &Tensor<R>, _: &[bool]) -> Vec<Option<Tensor<R>>> {
        let per = g.numel() / self.steps;
        let inv_tau = 1.0 / self.params.tau;
        let leak = 1.0 - inv_tau;
        let mut gx = vec![R::zero(); g.numel()];
        // dL/dV[t] flowing back from step t+1
        let mut gv = vec![0.0f64; per];
        for t in (0..self.steps).rev() {
            for i in 0..per {
                let idx = t * per + i;
                let h = self.h[idx];
                let s = out.data()[idx].as_f64();
                let sg = self.surrogate.grad(h - self.params.v_th);
                let mut dv_dh = 1.0 - s;
                if !self.opts.detach_reset {
                    dv_dh += (self.params.v_reset - h) * sg;
                }
                let dh = g.data()[idx].as_f64() * sg + gv[i] * dv_dh;
                gx[idx] = R::from_f64_lossy(dh * inv_tau);
                gv[i] = if self.stateless { 0.0 } else { dh * leak };
            }
        }
        vec![Some(Tensor::new(g.shape(), gx).unwrap())]
    }
}

/// Spiking layer over a tensor whose leading axis is time.
///
/// State starts at `V_reset` for every call. `stateless` resets the membrane before
/// every step instead of carrying it.
pub fn sn<R: Real>(
    g: &mut Graph<R>,
    x: Var,
    params: &LifParams,
    surrogate: &SurrogateSpec,
    opts: SpikeOptions,
    stateless: bool,
) -> Result<Var> {
    let xv = g.value(x);
    let steps = *xv.shape().first().unwrap_or(&0);
    if steps == 0 {
        return Err(Error::shape("sn", "time axis is empty"));
    }
    let per = xv.numel() / steps;
    let tau = R::from_f64_lossy(params.tau);
    let v_th = R::from_f64_lossy(params.v_th);
    let v_reset = R::from_f64_lossy(params.v_reset);
    let mut v = vec![v_reset; per];
    let mut out = Vec::with_capacity(xv.numel());
    let keep_h = g.grad_enabled();
    let mut hs = Vec::with_capacity(if keep_h { xv.numel() } else { 0 });
    for t in 0..steps {
        let xt = &xv.data()[t * per..(t + 1) * per];
        for (vi, &xi) in v.iter_mut().zip(xt) {
            let vp = if stateless { v_reset } else { *vi };
            let h = charge(vp, xi, tau, v_reset);
            let s = match opts.mode {
                FiringMode::Heaviside => heaviside(h, v_th),
                FiringMode::Smooth => R::from_f64_lossy(surrogate.smooth_step((h - v_th).as_f64())),
            };
            *vi = h * (R::one() - s) + v_reset * s;
            out.push(s);
            if keep_h {
                hs.push(h.as_f64());
            }
        }
    }
    let out = Tensor::new(xv.shape(), out)?;
    if opts.mode == FiringMode::Heaviside {
        debug_assert!(out.is_binary(), "spiking layer emitted non-binary values");
    }
    Ok(g.push(
        out,
        &[x],
        LifRule {
            params: *params,
            surrogate: *surrogate,
            opts,
            stateless,
            steps,
            h: hs,
        },
    ))
}

/// Mean of a spike tensor.
pub fn firing_rate<R: Real>(s: &Tensor<R>) -> Result<f64> {
    if s.numel() == 0 {
        return Err(Error::shape("firing_rate", "empty spike tensor"));
    }
    Ok(s.data().iter().map(|v| v.as_f64()).sum::<f64>() / s.numel() as f64)
}
