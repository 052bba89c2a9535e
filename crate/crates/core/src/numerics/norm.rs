use super::ops::split_axis;
use super::{Backward, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics of one train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the value folded into running statistics.
    pub var_unbiased: Vec<f64>,
}

struct BatchNormRule {
    outer: usize,
    channels: usize,
    inner: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl<R: Real> Backward<R> for BatchNormRule {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, g: &Tensor<R>, inputs: &[&Tensor<R>], _: &Tensor<R>, need: &[bool]) -> Vec<Option<Tensor<R>>> {
        let (outer, c, inner) = (self.outer, self.channels, self.inner);
        let m = (outer * inner) as f64;
        let gamma = inputs[1].data();
        let gd = g.data();
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let dy = gd[i].as_f64();
                    sum_dy[ch] += dy;
                    sum_dy_xhat[ch] += dy * self.xhat[i];
                }
            }
        }
        let gx = need[0].then(|| {
            let mut out = vec![R::zero(); gd.len()];
            for o in 0..outer {
                for ch in 0..c {
                    let gm = gamma[ch].as_f64();
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        let dy = gd[i].as_f64();
                        let v = if self.train {
                            gm * self.inv_std[ch] * (dy - sum_dy[ch] / m - self.xhat[i] * sum_dy_xhat[ch] / m)
                        } else {
                            gm * self.inv_std[ch] * dy
                        };
                        out[i] = R::from_f64_lossy(v);
                    }
                }
            }
            Tensor::new(inputs[0].shape(), out).unwrap()
        });
        let to_t = |v: &[f64]| Tensor::new(&[c], v.iter().map(|x| R::from_f64_lossy(*x)).collect()).unwrap();
        vec![gx, need[1].then(|| to_t(&sum_dy_xhat)), need[2].then(|| to_t(&sum_dy))]
    }
}

/// Batch normalisation over every axis except `channel_axis`.
///
/// Train mode normalises with batch statistics (biased variance, `eps` inside the
/// square root) and returns them for the caller to fold into running statistics.
/// Eval mode uses `running_mean` / `running_var`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<R: Real>(
    g: &mut Graph<R>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &Tensor<R>,
    running_var: &Tensor<R>,
    channel_axis: usize,
    train: bool,
) -> Result<(Var, Option<BatchStats>)> {
    let xv = g.value(x);
    if channel_axis >= xv.rank() {
        return Err(Error::shape("batch_norm", format!("channel axis {channel_axis} out of range for {:?}", xv.shape())));
    }
    let (outer, c, inner) = split_axis(xv.shape(), channel_axis);
    for (what, t) in [("gamma", g.shape(gamma)), ("beta", g.shape(beta)), ("running_mean", running_mean.shape()), ("running_var", running_var.shape())] {
        if t != [c] {
            return Err(Error::shape("batch_norm", format!("{what} {t:?} vs {c} channels of input {:?}", xv.shape())));
        }
    }
    let count = outer * inner;
    if count == 0 {
        return Err(Error::shape("batch_norm", "zero-element reduction"));
    }
    let xd = xv.data();
    let (mean, var, stats) = if train {
        let mut mean = vec![0.0f64; c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                mean[ch] += xd[base..base + inner].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0f64; c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                var[ch] += xd[base..base + inner].iter().map(|v| (v.as_f64() - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let var_unbiased = var.iter().map(|v| if count > 1 { v / (count - 1) as f64 } else { *v }).collect();
        var.iter_mut().for_each(|v| *v /= count as f64);
        let stats = BatchStats {
            mean: mean.clone(),
            var_unbiased,
        };
        (mean, var, Some(stats))
    } else {
        (
            running_mean.data().iter().map(|v| v.as_f64()).collect(),
            running_var.data().iter().map(|v| v.as_f64()).collect(),
            None,
        )
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let gd = g.value(gamma).data();
    let bd = g.value(beta).data();
    let mut xhat = vec![0.0f64; xd.len()];
    let mut out = vec![R::zero(); xd.len()];
    for o in 0..outer {
        for ch in 0..c {
            let (gm, bt) = (gd[ch].as_f64(), bd[ch].as_f64());
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                let h = (xd[i].as_f64() - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = R::from_f64_lossy(h * gm + bt);
            }
        }
    }
    let out = Tensor::new(xv.shape(), out)?;
    let keep = g.grad_enabled();
    let rule = BatchNormRule {
        outer,
        channels: c,
        inner,
        xhat: if keep { xhat } else { Vec::new() },
        inv_std,
        train,
    };
    Ok((g.push(out, &[x, gamma, beta], rule), stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, rm: &[f64], rv: &[f64], train: bool) -> Tensor<f64> {
        let c = rm.len();
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::ones(&[c]));
        let beta = g.constant(Tensor::zeros(&[c]));
        let rm = Tensor::from_f64(&[c], rm).unwrap();
        let rv = Tensor::from_f64(&[c], rv).unwrap();
        let (y, _) = batch_norm(&mut g, xv, gamma, beta, &rm, &rv, 1, train).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn identity_statistics_pass_through() {
        // per-channel mean 0, biased var 1
        let x = Tensor::from_f64(&[4, 1], &[1., -1., 1., -1.]).unwrap();
        let y = run(x.clone(), &[0.], &[1.], true);
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn constant_channel_goes_to_zero() {
        let x = Tensor::full(&[5, 1], 3.7);
        let y = run(x, &[0.], &[1.], true);
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        let y = run(x, &[1., 2.], &[4., 9.], false);
        let exp = [0.0, 0.0, 2.0 / (4.0 + BN_EPS).sqrt(), 2.0 / (9.0 + BN_EPS).sqrt()];
        for (a, b) in y.data().iter().zip(exp) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_channels_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let r = Tensor::zeros(&[2]);
        assert!(batch_norm(&mut g, x, gamma, beta, &r, &r, 1, true).is_err());
        let x = g.constant(Tensor::zeros(&[0, 2]));
        assert!(batch_norm(&mut g, x, gamma, beta, &r, &r, 1, true).is_err());
    }
}
