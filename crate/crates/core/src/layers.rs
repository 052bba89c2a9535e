//! Parameterised layer wrappers and the per-pass forward context.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::Result;
use crate::numerics::{self, ops, BatchStats, Conv2dSpec, Graph, ParamId, ParamStore, Real, Tensor, Var, BN_MOMENTUM};
use crate::spiking::{self, FiringMode, LifParams, SpikeOptions, SurrogateSpec};

/// Neuron constants shared by every spiking layer of a model.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Neuron {
    pub lif: LifParams,
    pub surrogate: SurrogateSpec,
}

/// Spike counts of one named tensor, summed over every pass that touched it.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpikeTally {
    pub ones: f64,
    pub total: u64,
}

impl SpikeTally {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.ones / self.total as f64
        }
    }

    pub fn merge(&mut self, other: &SpikeTally) {
        self.ones += other.ones;
        self.total += other.total;
    }
}

/// Observer attached to a forward pass.
///
/// Tallies every spiking-layer output by name. With `keep_tensors`, also keeps a copy
/// of each tensor (spike outputs and a few named real-valued layer inputs).
#[derive(Clone, Debug, Default)]
pub struct Probe<R: Real = f32> {
    pub keep_tensors: bool,
    pub tallies: BTreeMap<String, SpikeTally>,
    pub tensors: Vec<(String, Tensor<R>)>,
    /// Names in `tensors` that came from spiking layers.
    pub spike_names: Vec<String>,
}

impl<R: Real> Probe<R> {
    pub fn new(keep_tensors: bool) -> Self {
        Self {
            keep_tensors,
            ..Default::default()
        }
    }

    pub fn tally(&mut self, name: &str, t: &Tensor<R>) {
        let ones: f64 = t.data().iter().map(|v| v.as_f64()).sum();
        let e = self.tallies.entry(name.to_string()).or_default();
        e.ones += ones;
        e.total += t.numel() as u64;
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<R>> {
        self.tensors.iter().rev().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn rate(&self, name: &str) -> Option<f64> {
        self.tallies.get(name).map(SpikeTally::rate)
    }
}

/// Batch-norm running-stat update produced by a train-mode pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

pub struct ForwardCtx<R: Real = f32> {
    pub train: bool,
    pub spike: SpikeOptions,
    pub bn_updates: Vec<BnUpdate>,
    pub probe: Option<Probe<R>>,
}

impl<R: Real> ForwardCtx<R> {
    pub fn train() -> Self {
        Self {
            train: true,
            spike: SpikeOptions::default(),
            bn_updates: Vec::new(),
            probe: None,
        }
    }

    pub fn eval() -> Self {
        Self {
            train: false,
            ..Self::train()
        }
    }

    pub fn with_probe(mut self, probe: Probe<R>) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn with_spike(mut self, spike: SpikeOptions) -> Self {
        self.spike = spike;
        self
    }

    /// Spiking layer with probe bookkeeping.
    pub fn spike(&mut self, g: &mut Graph<R>, x: Var, neuron: &Neuron, name: &str, stateless: bool) -> Result<Var> {
        let s = spiking::sn(g, x, &neuron.lif, &neuron.surrogate, self.spike, stateless)?;
        debug_assert!(self.smooth() || g.value(s).is_binary(), "non-binary spikes from {name}");
        if let Some(p) = self.probe.as_mut() {
            let v = g.value(s);
            p.tally(name, v);
            if p.keep_tensors {
                p.tensors.push((name.to_string(), v.clone()));
                p.spike_names.push(name.to_string());
            }
        }
        Ok(s)
    }

    /// Record a non-spike tensor of interest (tallied as if it were a rate).
    pub fn observe(&mut self, g: &Graph<R>, x: Var, name: &str) {
        if let Some(p) = self.probe.as_mut() {
            let v = g.value(x);
            p.tally(name, v);
            if p.keep_tensors {
                p.tensors.push((name.to_string(), v.clone()));
            }
        }
    }

    pub fn smooth(&self) -> bool {
        self.spike.mode == FiringMode::Smooth
    }
}

/// Fold recorded batch statistics into the running buffers.
pub fn apply_bn_updates<R: Real>(store: &mut ParamStore<R>, updates: &[BnUpdate]) {
    let m = BN_MOMENTUM;
    for u in updates {
        for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var_unbiased)] {
            let p = store.get_mut(id);
            for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                *r = R::from_f64_lossy((1.0 - m) * r.as_f64() + m * b);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.bias"), &[d_out], d_in, rng));
        Self {
            name: name.to_string(),
            w,
            b,
            d_in,
            d_out,
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        ops::linear(g, x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub channel_axis: usize,
}

impl BatchNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, channels: usize, channel_axis: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
            channel_axis,
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var, ctx: &mut ForwardCtx<R>) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (y, stats) = numerics::batch_norm(
            g,
            x,
            gamma,
            beta,
            store.value(self.running_mean),
            store.value(self.running_var),
            self.channel_axis,
            ctx.train,
        )?;
        if let Some(stats) = stats {
            ctx.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
        }
        Ok(y)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub w: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv2dSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let per_group = c_in / spec.groups;
        let w = store.add_uniform(
            format!("{name}.weight"),
            &[c_out, per_group, kernel, kernel],
            per_group * kernel * kernel,
            rng,
        );
        Self {
            name: name.to_string(),
            w,
            c_in,
            c_out,
            kernel,
            spec,
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        numerics::conv2d(g, x, w, self.spec)
    }

    pub fn num_params(&self) -> usize {
        self.c_out * (self.c_in / self.spec.groups) * self.kernel * self.kernel
    }

    /// MACs per image per time step for an `h x w` input, padding taps included.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let ho = numerics::conv_out_len(h, self.kernel, self.spec.stride, self.spec.padding);
        let wo = numerics::conv_out_len(w, self.kernel, self.spec.stride, self.spec.padding);
        (self.c_out * ho * wo * (self.c_in / self.spec.groups) * self.kernel * self.kernel) as u64
    }

    /// MACs whose input tap lands inside the image rather than on zero padding.
    pub fn valid_macs(&self, h: usize, w: usize) -> u64 {
        let s = self.spec;
        crate::profiler::conv_valid_macs(self.c_in, self.c_out, s.groups, self.kernel, s.stride, s.padding, h, w)
    }
}
