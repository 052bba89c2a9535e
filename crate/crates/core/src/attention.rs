//! Spiking self-attention: the aggregated variant (SASA) and the two baselines it is
//! compared against (SSA, SDSA).
//!
//! SASA keeps only query and key projections. Both are pooled along the token axis
//! down to `n` tokens, spiked, multiplied elementwise and summed over the pooled
//! tokens, which gives one `(T, B, 1, D)` channel-attention vector. A second branch
//! spikes the full-length key and runs it through a depthwise convolution over the
//! token grid; the attention vector is broadcast over every token and added to that
//! branch before the output projection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv, ForwardCtx, Linear, Neuron};
use crate::numerics::{self, ops, Conv2dSpec, Graph, ParamStore, Real, Var};
use crate::profiler::{CountedLayer, LayerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    Sasa,
    Ssa,
    Sdsa,
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionVariant::Sasa => "sasa",
            AttentionVariant::Ssa => "ssa",
            AttentionVariant::Sdsa => "sdsa",
        })
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sasa" => Ok(Self::Sasa),
            "ssa" => Ok(Self::Ssa),
            "sdsa" => Ok(Self::Sdsa),
            other => Err(Error::ConfigKey {
                key: "variant".into(),
                reason: format!("unknown attention variant `{other}` (expected sasa, ssa or sdsa)"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    pub d_model: usize,
    /// Pooled token count `n` (SASA).
    pub n_agg: usize,
    /// Scale `c` applied to `Q Kᵀ V` (SSA).
    pub scale_c: f64,
    pub dwc_kernel: usize,
    pub dwc_enabled: bool,
    pub ag_enabled: bool,
    /// Head count for SSA; SASA and SDSA are single-head.
    pub heads: usize,
    /// Run the spiking layer on the attention vector without carrying membrane state.
    pub stateless_core: bool,
}

impl AttentionConfig {
    pub fn sasa(d_model: usize, n_agg: usize) -> Self {
        Self {
            variant: AttentionVariant::Sasa,
            d_model,
            n_agg,
            scale_c: 0.125,
            dwc_kernel: 3,
            dwc_enabled: true,
            ag_enabled: true,
            heads: 1,
            stateless_core: false,
        }
    }

    pub fn with_variant(mut self, variant: AttentionVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dwc_kernel % 2 == 0 {
            return Err(Error::ConfigKey {
                key: "dwc_kernel".into(),
                reason: format!("must be odd, got {}", self.dwc_kernel),
            });
        }
        if self.n_agg < 1 {
            return Err(Error::ConfigKey {
                key: "n_agg".into(),
                reason: "must be at least 1".into(),
            });
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::ConfigKey {
                key: "heads".into(),
                reason: format!("{} heads do not divide d={}", self.heads, self.d_model),
            });
        }
        Ok(())
    }

    /// Effective pooled length for `tokens` input tokens.
    pub fn pooled_len(&self, tokens: usize) -> usize {
        if self.ag_enabled {
            self.n_agg
        } else {
            tokens
        }
    }
}

/// Side length of a square token grid.
pub fn square_grid(tokens: usize) -> Result<(usize, usize)> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens {
        return Err(Error::Config(format!(
            "{tokens} tokens do not form a square grid for the depthwise convolution"
        )));
    }
    Ok((side, side))
}

/// Depthwise convolution over the token grid: `(T, B, N, D)` → `(T, B, N, D)`.
///
/// `grid` is the `(rows, cols)` layout of the `N` tokens. Batch norm and the spiking
/// layer that follow it are the caller's business.
pub fn dwc<R: Real>(g: &mut Graph<R>, k_hat: Var, w_d: Var, grid: (usize, usize)) -> Result<Var> {
    let s = g.shape(k_hat).to_vec();
    if s.len() != 4 || s[2] != grid.0 * grid.1 {
        return Err(Error::shape("dwc", format!("input {s:?} vs token grid {grid:?}")));
    }
    let (t, b, n, d) = (s[0], s[1], s[2], s[3]);
    let k = g.shape(w_d)[2];
    let x = ops::permute(g, k_hat, &[0, 1, 3, 2])?;
    let x = ops::reshape(g, x, &[t, b, d, grid.0, grid.1])?;
    let spec = Conv2dSpec {
        stride: 1,
        padding: (k - 1) / 2,
        groups: d,
    };
    let y = numerics::conv2d(g, x, w_d, spec)?;
    let y = ops::reshape(g, y, &[t, b, d, n])?;
    ops::permute(g, y, &[0, 1, 3, 2])
}

#[derive(Clone, Debug)]
enum Branches {
    Sasa {
        bn_q: BatchNorm,
        bn_k: BatchNorm,
        bn_kd: BatchNorm,
        dwc: Option<(Conv, BatchNorm)>,
    },
    Ssa {
        v_proj: Linear,
        bn_q: BatchNorm,
        bn_k: BatchNorm,
        bn_v: BatchNorm,
    },
    Sdsa {
        v_proj: Linear,
        bn_q: BatchNorm,
        bn_k: BatchNorm,
        bn_v: BatchNorm,
    },
}

/// One attention sub-layer with its parameters registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Attention {
    pub name: String,
    pub cfg: AttentionConfig,
    pub neuron: Neuron,
    pub grid: (usize, usize),
    q_proj: Linear,
    k_proj: Linear,
    out_proj: Linear,
    bn_out: BatchNorm,
    branches: Branches,
}

impl Attention {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        cfg: &AttentionConfig,
        neuron: Neuron,
        grid: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tokens = grid.0 * grid.1;
        if cfg.variant == AttentionVariant::Sasa && cfg.ag_enabled && cfg.n_agg > tokens {
            return Err(Error::ConfigKey {
                key: "n_agg".into(),
                reason: format!("n={} exceeds the {tokens} tokens produced by patch splitting", cfg.n_agg),
            });
        }
        let q_proj = Linear::new(store, &format!("{name}.q_proj"), d, d, false, rng);
        let k_proj = Linear::new(store, &format!("{name}.k_proj"), d, d, false, rng);
        let branches = match cfg.variant {
            AttentionVariant::Sasa => Branches::Sasa {
                bn_q: BatchNorm::new(store, &format!("{name}.q_bn"), d, 3),
                bn_k: BatchNorm::new(store, &format!("{name}.k_bn"), d, 3),
                bn_kd: BatchNorm::new(store, &format!("{name}.kd_bn"), d, 3),
                dwc: cfg.dwc_enabled.then(|| {
                    let spec = Conv2dSpec {
                        stride: 1,
                        padding: (cfg.dwc_kernel - 1) / 2,
                        groups: d,
                    };
                    (
                        Conv::new(store, &format!("{name}.dwc"), d, d, cfg.dwc_kernel, spec, rng),
                        BatchNorm::new(store, &format!("{name}.dwc_bn"), d, 3),
                    )
                }),
            },
            AttentionVariant::Ssa | AttentionVariant::Sdsa => {
                let v_proj = Linear::new(store, &format!("{name}.v_proj"), d, d, false, rng);
                let bn_q = BatchNorm::new(store, &format!("{name}.q_bn"), d, 3);
                let bn_k = BatchNorm::new(store, &format!("{name}.k_bn"), d, 3);
                let bn_v = BatchNorm::new(store, &format!("{name}.v_bn"), d, 3);
                if cfg.variant == AttentionVariant::Ssa {
                    Branches::Ssa { v_proj, bn_q, bn_k, bn_v }
                } else {
                    Branches::Sdsa { v_proj, bn_q, bn_k, bn_v }
                }
            }
        };
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), d, d, false, rng);
        let bn_out = BatchNorm::new(store, &format!("{name}.out_bn"), d, 3);
        Ok(Self {
            name: name.to_string(),
            cfg: cfg.clone(),
            neuron,
            grid,
            q_proj,
            k_proj,
            out_proj,
            bn_out,
            branches,
        })
    }

    fn tag(&self, what: &str) -> String {
        format!("{}.{what}", self.name)
    }

    /// `(T, B, N, D)` membrane input → `(T, B, N, D)` attention output.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var, ctx: &mut ForwardCtx<R>) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.cfg.d_model || shape[2] != self.grid.0 * self.grid.1 {
            return Err(Error::shape(
                "attention",
                format!("input {shape:?} vs d={} on a {:?} token grid", self.cfg.d_model, self.grid),
            ));
        }
        if !g.value(x).all_finite() {
            return Err(Error::Numeric(format!("{}: non-finite input", self.name)));
        }
        let xs = ctx.spike(g, x, &self.neuron, &self.tag("in_sn"), false)?;
        match &self.branches {
            Branches::Sasa { bn_q, bn_k, bn_kd, dwc } => self.sasa(g, store, xs, ctx, bn_q, bn_k, bn_kd, dwc.as_ref()),
            Branches::Ssa { v_proj, bn_q, bn_k, bn_v } => self.ssa(g, store, xs, ctx, v_proj, [bn_q, bn_k, bn_v]),
            Branches::Sdsa { v_proj, bn_q, bn_k, bn_v } => self.sdsa(g, store, xs, ctx, v_proj, [bn_q, bn_k, bn_v]),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn sasa<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        xs: Var,
        ctx: &mut ForwardCtx<R>,
        bn_q: &BatchNorm,
        bn_k: &BatchNorm,
        bn_kd: &BatchNorm,
        dwc_branch: Option<&(Conv, BatchNorm)>,
    ) -> Result<Var> {
        let neuron = &self.neuron;
        let q_f = self.q_proj.forward(g, store, xs)?;
        let k_f = self.k_proj.forward(g, store, xs)?;

        let (q_ag, k_ag) = if self.cfg.ag_enabled {
            (
                numerics::adaptive_avg_pool_tokens(g, q_f, self.cfg.n_agg)?,
                numerics::adaptive_avg_pool_tokens(g, k_f, self.cfg.n_agg)?,
            )
        } else {
            (q_f, k_f)
        };
        let q = bn_q.forward(g, store, q_ag, ctx)?;
        let q = ctx.spike(g, q, neuron, &self.tag("q"), false)?;
        let k = bn_k.forward(g, store, k_ag, ctx)?;
        let k = ctx.spike(g, k, neuron, &self.tag("k"), false)?;

        let qk = ops::mul(g, q, k)?;
        ctx.observe(g, qk, &self.tag("qk"));
        let col = ops::sum_axis(g, qk, 2, true)?;
        let attn = ctx.spike(g, col, neuron, &self.tag("sasa"), self.cfg.stateless_core)?;

        let kd = bn_kd.forward(g, store, k_f, ctx)?;
        let k_hat = ctx.spike(g, kd, neuron, &self.tag("k_hat"), false)?;
        let k_d = match dwc_branch {
            Some((conv, bn)) => {
                let w = g.param(store, conv.w);
                let y = dwc(g, k_hat, w, self.grid)?;
                let y = bn.forward(g, store, y, ctx)?;
                ctx.spike(g, y, neuron, &self.tag("k_d"), false)?
            }
            None => k_hat,
        };
        let merged = ops::add(g, k_d, attn)?;
        let m = ctx.spike(g, merged, neuron, &self.tag("merge_sn"), false)?;
        let y = self.out_proj.forward(g, store, m)?;
        self.bn_out.forward(g, store, y, ctx)
    }

    fn qkv<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        xs: Var,
        ctx: &mut ForwardCtx<R>,
        v_proj: &Linear,
        bns: [&BatchNorm; 3],
    ) -> Result<[Var; 3]> {
        let mut out = [xs; 3];
        for (i, (proj, tag)) in [(&self.q_proj, "q"), (&self.k_proj, "k"), (v_proj, "v")].into_iter().enumerate() {
            let y = proj.forward(g, store, xs)?;
            let y = bns[i].forward(g, store, y, ctx)?;
            out[i] = ctx.spike(g, y, &self.neuron, &self.tag(tag), false)?;
        }
        Ok(out)
    }

    fn ssa<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        xs: Var,
        ctx: &mut ForwardCtx<R>,
        v_proj: &Linear,
        bns: [&BatchNorm; 3],
    ) -> Result<Var> {
        let [q, k, v] = self.qkv(g, store, xs, ctx, v_proj, bns)?;
        let s = g.shape(q).to_vec();
        let (t, b, n, d) = (s[0], s[1], s[2], s[3]);
        let h = self.cfg.heads;
        let split = |g: &mut Graph<R>, x: Var| -> Result<Var> {
            let x = ops::reshape(g, x, &[t, b, n, h, d / h])?;
            ops::permute(g, x, &[0, 1, 3, 2, 4])
        };
        let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let logits = ops::bmm(g, qh, kh, true)?;
        let core = ops::bmm(g, logits, vh, false)?;
        let core = ops::scale(g, core, self.cfg.scale_c);
        let core = ops::permute(g, core, &[0, 1, 3, 2, 4])?;
        let core = ops::reshape(g, core, &[t, b, n, d])?;
        let core = ctx.spike(g, core, &self.neuron, &self.tag("core_sn"), false)?;
        let y = self.out_proj.forward(g, store, core)?;
        let y = self.bn_out.forward(g, store, y, ctx)?;
        ctx.spike(g, y, &self.neuron, &self.tag("out_sn"), false)
    }

    fn sdsa<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        xs: Var,
        ctx: &mut ForwardCtx<R>,
        v_proj: &Linear,
        bns: [&BatchNorm; 3],
    ) -> Result<Var> {
        let [q, k, v] = self.qkv(g, store, xs, ctx, v_proj, bns)?;
        let qk = ops::mul(g, q, k)?;
        ctx.observe(g, qk, &self.tag("qk"));
        let col = ops::sum_axis(g, qk, 2, true)?;
        let attn = ctx.spike(g, col, &self.neuron, &self.tag("sdsa"), self.cfg.stateless_core)?;
        let core = ops::mul(g, v, attn)?;
        ctx.observe(g, core, &self.tag("core"));
        let y = self.out_proj.forward(g, store, core)?;
        let y = self.bn_out.forward(g, store, y, ctx)?;
        ctx.spike(g, y, &self.neuron, &self.tag("out_sn"), false)
    }

    /// Linear-projection weights (Q, K, V where present, output).
    pub fn num_projection_params(&self) -> usize {
        let v = match &self.branches {
            Branches::Ssa { v_proj, .. } | Branches::Sdsa { v_proj, .. } => v_proj.num_params(),
            Branches::Sasa { .. } => 0,
        };
        self.q_proj.num_params() + self.k_proj.num_params() + v + self.out_proj.num_params()
    }

    pub fn num_dwc_params(&self) -> usize {
        match &self.branches {
            Branches::Sasa { dwc: Some((conv, _)), .. } => conv.num_params(),
            _ => 0,
        }
    }

    pub fn num_bn_params(&self) -> usize {
        let inner = match &self.branches {
            Branches::Sasa { bn_q, bn_k, bn_kd, dwc } => {
                bn_q.num_params() + bn_k.num_params() + bn_kd.num_params() + dwc.as_ref().map_or(0, |(_, bn)| bn.num_params())
            }
            Branches::Ssa { bn_q, bn_k, bn_v, .. } | Branches::Sdsa { bn_q, bn_k, bn_v, .. } => {
                bn_q.num_params() + bn_k.num_params() + bn_v.num_params()
            }
        };
        inner + self.bn_out.num_params()
    }

    pub fn num_params(&self) -> usize {
        self.num_projection_params() + self.num_dwc_params() + self.num_bn_params()
    }

    /// Layers billed by the energy model, with the probe tally that supplies each
    /// one's input firing rate.
    pub fn counted_layers(&self) -> Vec<CountedLayer> {
        let tokens = (self.grid.0 * self.grid.1) as u64;
        let d = self.cfg.d_model as u64;
        let in_sn = self.tag("in_sn");
        let fc = |name: String, rate: &str| CountedLayer {
            name,
            kind: LayerKind::Fc,
            flops: tokens * d * d,
            rate_source: rate.to_string(),
            encoding: false,
        };
        let mut out = vec![
            fc(self.q_proj.name.clone(), &in_sn),
            fc(self.k_proj.name.clone(), &in_sn),
        ];
        match &self.branches {
            Branches::Sasa { dwc, .. } => {
                let n = self.cfg.pooled_len(tokens as usize) as u64;
                out.push(CountedLayer {
                    name: self.tag("core"),
                    kind: LayerKind::AttentionCore,
                    flops: n * d,
                    rate_source: self.tag("qk"),
                    encoding: false,
                });
                if let Some((conv, _)) = dwc {
                    out.push(CountedLayer {
                        name: conv.name.clone(),
                        kind: LayerKind::Conv,
                        flops: conv.macs(self.grid.0, self.grid.1),
                        rate_source: self.tag("k_hat"),
                        encoding: false,
                    });
                }
                out.push(fc(self.out_proj.name.clone(), &self.tag("merge_sn")));
            }
            Branches::Ssa { v_proj, .. } => {
                out.push(fc(v_proj.name.clone(), &in_sn));
                out.push(CountedLayer {
                    name: self.tag("core"),
                    kind: LayerKind::AttentionCore,
                    flops: 2 * tokens * tokens * d,
                    rate_source: self.tag("q"),
                    encoding: false,
                });
                out.push(fc(self.out_proj.name.clone(), &self.tag("core_sn")));
            }
            Branches::Sdsa { v_proj, .. } => {
                out.push(fc(v_proj.name.clone(), &in_sn));
                out.push(CountedLayer {
                    name: self.tag("core"),
                    kind: LayerKind::AttentionCore,
                    flops: tokens * d,
                    rate_source: self.tag("qk"),
                    encoding: false,
                });
                out.push(fc(self.out_proj.name.clone(), &self.tag("core")));
            }
        }
        out
    }
}
