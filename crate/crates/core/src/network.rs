//! Full model: spike patch splitting, encoder blocks with membrane residuals, and the
//! classification head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Attention, AttentionConfig};
use crate::error::{Error, Result};
use crate::layers::{apply_bn_updates, BatchNorm, Conv, ForwardCtx, Linear, Neuron};
use crate::numerics::{self, checkpoint, ops, Conv2dSpec, Graph, ParamStore, Real, Tensor, Var};
use crate::profiler::{CountedLayer, LayerKind};
use crate::spiking::{LifParams, SurrogateSpec};

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub time_steps: usize,
    pub blocks: usize,
    pub d_model: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub attention: AttentionConfig,
    pub lif: LifParams,
    pub surrogate: SurrogateSpec,
    pub seed: u64,
}

impl ModelConfig {
    /// `SAFormer-{blocks}-{d_model}` on CIFAR geometry (T=4, 3x32x32, 10 classes, n=16).
    pub fn saformer(blocks: usize, d_model: usize) -> Self {
        Self {
            time_steps: 4,
            blocks,
            d_model,
            in_channels: 3,
            height: 32,
            width: 32,
            num_classes: 10,
            mlp_ratio: 4,
            attention: AttentionConfig::sasa(d_model, 16),
            lif: LifParams::default(),
            surrogate: SurrogateSpec::default(),
            seed: 0,
        }
    }

    pub fn with_input(mut self, channels: usize, height: usize, width: usize) -> Self {
        self.in_channels = channels;
        self.height = height;
        self.width = width;
        self
    }

    pub fn with_time_steps(mut self, t: usize) -> Self {
        self.time_steps = t;
        self
    }

    pub fn with_classes(mut self, k: usize) -> Self {
        self.num_classes = k;
        self
    }

    pub fn with_n_agg(mut self, n: usize) -> Self {
        self.attention.n_agg = n;
        self
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn neuron(&self) -> Neuron {
        Neuron {
            lif: self.lif,
            surrogate: self.surrogate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::ConfigKey { key: key.into(), reason });
        if self.time_steps == 0 {
            return bad("t", "need at least one time step".into());
        }
        if self.blocks == 0 {
            return bad("l", "need at least one encoder block".into());
        }
        if self.d_model == 0 || self.d_model % 8 != 0 {
            return bad("d", format!("{} is not a positive multiple of 8", self.d_model));
        }
        if self.height == 0 || self.height % 4 != 0 {
            return bad("h", format!("{} is not a positive multiple of 4", self.height));
        }
        if self.width == 0 || self.width % 4 != 0 {
            return bad("w", format!("{} is not a positive multiple of 4", self.width));
        }
        if self.in_channels == 0 {
            return bad("c", "need at least one input channel".into());
        }
        if self.num_classes < 2 {
            return bad("classes", format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be positive".into());
        }
        if self.attention.d_model != self.d_model {
            return bad("d", "attention width disagrees with d".into());
        }
        self.attention.validate()?;
        if self.attention.ag_enabled && self.attention.n_agg > self.tokens() {
            return bad(
                "n_agg",
                format!("n={} exceeds the {} tokens of a {}x{} input", self.attention.n_agg, self.tokens(), self.height, self.width),
            );
        }
        self.lif.validate()?;
        if !(self.surrogate.alpha > 0.0) {
            return bad("alpha", format!("must be positive, got {}", self.surrogate.alpha));
        }
        Ok(())
    }
}

/// Five-conv patch splitter.
#[derive(Clone, Debug)]
pub struct Sps {
    convs: Vec<Conv>,
    bns: Vec<BatchNorm>,
    neuron: Neuron,
    in_hw: (usize, usize),
}

impl Sps {
    fn new<R: Real>(store: &mut ParamStore<R>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let widths = [cfg.in_channels, d / 8, d / 4, d / 2, d, d];
        let spec = Conv2dSpec {
            stride: 1,
            padding: 1,
            groups: 1,
        };
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for i in 0..5 {
            convs.push(Conv::new(store, &format!("sps.conv{}", i + 1), widths[i], widths[i + 1], 3, spec, rng));
            bns.push(BatchNorm::new(store, &format!("sps.bn{}", i + 1), widths[i + 1], 2));
        }
        Self {
            convs,
            bns,
            neuron: cfg.neuron(),
            in_hw: (cfg.height, cfg.width),
        }
    }

    /// `(T, B, C, H, W)` image sequence → `(T, B, N, D)` real-valued token features.
    ///
    /// Stages 1-4 end in a spiking layer (stages 3 and 4 pool first); stage 5 ends at
    /// batch norm so the encoder's membrane residuals receive real values.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var, ctx: &mut ForwardCtx<R>) -> Result<Var> {
        let mut h = x;
        for (i, (conv, bn)) in self.convs.iter().zip(&self.bns).enumerate() {
            h = conv.forward(g, store, h)?;
            h = bn.forward(g, store, h, ctx)?;
            if i == 4 {
                break;
            }
            if i == 2 || i == 3 {
                h = numerics::maxpool2d(g, h, 2, 2)?;
            }
            h = ctx.spike(g, h, &self.neuron, &format!("sps.sn{}", i + 1), false)?;
        }
        let s = g.shape(h).to_vec();
        let (t, b, d, gh, gw) = (s[0], s[1], s[2], s[3], s[4]);
        let h = ops::reshape(g, h, &[t, b, d, gh * gw])?;
        ops::permute(g, h, &[0, 1, 3, 2])
    }

    fn counted_layers(&self) -> Vec<CountedLayer> {
        let (mut h, mut w) = self.in_hw;
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push(CountedLayer {
                name: conv.name.clone(),
                kind: LayerKind::Conv,
                flops: conv.macs(h, w),
                rate_source: if i == 0 { String::new() } else { format!("sps.sn{i}") },
                encoding: i == 0,
            });
            if i == 2 || i == 3 {
                h /= 2;
                w /= 2;
            }
        }
        out
    }

    pub fn conv(&self, i: usize) -> &Conv {
        &self.convs[i]
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    name: String,
    fc1: Linear,
    bn1: BatchNorm,
    fc2: Linear,
    bn2: BatchNorm,
    neuron: Neuron,
    tokens: usize,
}

impl Mlp {
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, u: Var, ctx: &mut ForwardCtx<R>) -> Result<Var> {
        let x = ctx.spike(g, u, &self.neuron, &format!("{}.in_sn", self.name), false)?;
        let h = self.fc1.forward(g, store, x)?;
        let h = self.bn1.forward(g, store, h, ctx)?;
        let h = ctx.spike(g, h, &self.neuron, &format!("{}.hidden_sn", self.name), false)?;
        let y = self.fc2.forward(g, store, h)?;
        self.bn2.forward(g, store, y, ctx)
    }

    fn counted_layers(&self) -> Vec<CountedLayer> {
        let n = self.tokens as u64;
        vec![
            CountedLayer {
                name: self.fc1.name.clone(),
                kind: LayerKind::Fc,
                flops: n * (self.fc1.d_in * self.fc1.d_out) as u64,
                rate_source: format!("{}.in_sn", self.name),
                encoding: false,
            },
            CountedLayer {
                name: self.fc2.name.clone(),
                kind: LayerKind::Fc,
                flops: n * (self.fc2.d_in * self.fc2.d_out) as u64,
                rate_source: format!("{}.hidden_sn", self.name),
                encoding: false,
            },
        ]
    }
}

/// Attention and MLP sub-layers, each wrapped in a membrane residual.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: Attention,
    pub mlp: Mlp,
}

impl EncoderBlock {
    fn new<R: Real>(store: &mut ParamStore<R>, idx: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        let hidden = d * cfg.mlp_ratio;
        let name = format!("blocks.{idx}");
        let attn = Attention::new(store, &format!("{name}.attn"), &cfg.attention, cfg.neuron(), cfg.grid(), rng)?;
        let mlp_name = format!("{name}.mlp");
        let mlp = Mlp {
            fc1: Linear::new(store, &format!("{mlp_name}.fc1"), d, hidden, false, rng),
            bn1: BatchNorm::new(store, &format!("{mlp_name}.bn1"), hidden, 3),
            fc2: Linear::new(store, &format!("{mlp_name}.fc2"), hidden, d, false, rng),
            bn2: BatchNorm::new(store, &format!("{mlp_name}.bn2"), d, 3),
            neuron: cfg.neuron(),
            tokens: cfg.tokens(),
            name: mlp_name,
        };
        Ok(Self { attn, mlp })
    }

    /// `u = attn(u_prev) + u_prev; s = mlp(u) + u`.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, u_prev: Var, ctx: &mut ForwardCtx<R>) -> Result<Var> {
        let a = self.attn.forward(g, store, u_prev, ctx)?;
        let u = ops::add(g, a, u_prev)?;
        let m = self.mlp.forward(g, store, u, ctx)?;
        ops::add(g, m, u)
    }
}

/// Global average pooling over tokens, mean over time, then the linear head.
pub fn classify<R: Real>(g: &mut Graph<R>, store: &ParamStore<R>, s_last: Var, head: &Linear) -> Result<Var> {
    let pooled = ops::mean_axis(g, s_last, 2, false)?;
    let rate = ops::mean_axis(g, pooled, 0, false)?;
    head.forward(g, store, rate)
}

#[derive(Clone, Debug)]
pub struct Model<R: Real = f32> {
    pub cfg: ModelConfig,
    pub store: ParamStore<R>,
    pub sps: Sps,
    pub blocks: Vec<EncoderBlock>,
    pub head: Linear,
}

impl<R: Real> Model<R> {
    /// Build with parameters drawn from a generator seeded by `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let sps = Sps::new(&mut store, &cfg, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|i| EncoderBlock::new(&mut store, i, &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut store, "head", cfg.d_model, cfg.num_classes, true, &mut rng);
        Ok(Self {
            cfg,
            store,
            sps,
            blocks,
            head,
        })
    }

    /// Same architecture and values at another precision.
    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            sps: self.sps.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
        }
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 5] {
        [self.cfg.time_steps, batch, self.cfg.in_channels, self.cfg.height, self.cfg.width]
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.cfg;
        if shape.len() != 5 || shape[0] != c.time_steps || shape[2] != c.in_channels || shape[3] != c.height || shape[4] != c.width {
            return Err(Error::shape(
                "saformer_forward",
                format!(
                    "input {shape:?} vs expected (T={}, B, C={}, H={}, W={})",
                    c.time_steps, c.in_channels, c.height, c.width
                ),
            ));
        }
        Ok(())
    }

    /// Encoder output `S_L` for a `(T, B, C, H, W)` input.
    pub fn features(&self, g: &mut Graph<R>, input: Var, ctx: &mut ForwardCtx<R>) -> Result<Var> {
        self.check_input(g.shape(input))?;
        let mut u = self.sps.forward(g, &self.store, input, ctx)?;
        for block in &self.blocks {
            u = block.forward(g, &self.store, u, ctx)?;
        }
        Ok(u)
    }

    /// Logits `(B, classes)`.
    pub fn forward(&self, g: &mut Graph<R>, input: Var, ctx: &mut ForwardCtx<R>) -> Result<Var> {
        let s = self.features(g, input, ctx)?;
        classify(g, &self.store, s, &self.head)
    }

    /// Inference convenience: eval-mode logits on a no-grad graph.
    pub fn predict(&self, input: &Tensor<R>) -> Result<Tensor<R>> {
        let mut g = Graph::inference();
        let x = g.constant(input.clone());
        let mut ctx = ForwardCtx::eval();
        let y = self.forward(&mut g, x, &mut ctx)?;
        Ok(g.value(y).clone())
    }

    pub fn apply_bn_updates(&mut self, ctx: &ForwardCtx<R>) {
        apply_bn_updates(&mut self.store, &ctx.bn_updates);
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Every layer the energy model bills, in forward order, with the head last.
    pub fn counted_layers(&self) -> Vec<CountedLayer> {
        let mut out = self.sps.counted_layers();
        for b in &self.blocks {
            out.extend(b.attn.counted_layers());
            out.extend(b.mlp.counted_layers());
        }
        out.push(CountedLayer {
            name: self.head.name.clone(),
            kind: LayerKind::Fc,
            flops: (self.head.d_in * self.head.d_out) as u64,
            rate_source: String::new(),
            encoding: false,
        });
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_store(&self.store, path)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        checkpoint::load_store(&mut self.store, path)
    }
}
