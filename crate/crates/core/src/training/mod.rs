//! Supervised surrogate-gradient training.

pub mod gradcheck;
pub mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, Probe};
use crate::network::Model;
use crate::numerics::{ops, Graph};

pub use gradcheck::{check_gradients, grad_check, GradCheckConfig, GradCheckReport};
pub use optim::{cosine_lr, AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub cosine: bool,
    pub seed: u64,
    /// Flip and crop static images.
    pub augment: bool,
    /// Stop once test accuracy reaches this fraction.
    pub target_acc: Option<f64>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 5e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            cosine: true,
            seed: 0,
            augment: false,
            target_acc: None,
            eval_batch_size: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::ConfigKey {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size", "must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas", "must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub acc: f64,
    /// Mean firing rate of every spiking layer, by layer name.
    pub rates: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub best_acc: f64,
    pub best_epoch: usize,
    pub steps: u64,
}

impl TrainReport {
    pub fn test_acc(&self) -> Vec<f64> {
        self.history.iter().filter(|m| m.split == "test").map(|m| m.acc).collect()
    }

    pub fn losses(&self, split: &str) -> Vec<f64> {
        self.history.iter().filter(|m| m.split == split).map(|m| m.loss).collect()
    }
}

/// Metrics CSV: `epoch,split,loss,acc,fr_<layer>...` with the layer columns of the
/// first row.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,split,loss,acc");
    let cols: Vec<&String> = history.first().map(|m| m.rates.keys().collect()).unwrap_or_default();
    for c in &cols {
        let _ = write!(s, ",fr_{c}");
    }
    s.push('\n');
    for m in history {
        let _ = write!(s, "{},{},{},{}", m.epoch, m.split, m.loss, m.acc);
        for c in &cols {
            let _ = write!(s, ",{}", m.rates.get(*c).copied().unwrap_or(f64::NAN));
        }
        s.push('\n');
    }
    s
}

fn rates_of(probe: &Probe<f32>) -> BTreeMap<String, f64> {
    probe.tallies.iter().map(|(k, v)| (k.clone(), v.rate())).collect()
}

fn correct(logits: &crate::numerics::Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            // first index wins ties
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count()
}

/// Eval-mode loss, accuracy and firing rates over a whole dataset.
pub fn evaluate(model: &Model<f32>, data: &Dataset, batch_size: usize, epoch: usize) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let t = model.cfg.time_steps;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut probe = Probe::new(false);
    let (mut loss_sum, mut hits) = (0.0, 0);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk, t)?;
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let mut ctx = ForwardCtx::eval().with_probe(probe);
        let logits = model.forward(&mut g, xv, &mut ctx)?;
        let loss = ops::cross_entropy(&mut g, logits, &y)?;
        loss_sum += g.value(loss).item() as f64 * chunk.len() as f64;
        hits += correct(g.value(logits), &y);
        probe = ctx.probe.take().expect("attached");
    }
    Ok(EpochMetrics {
        epoch,
        split: "test",
        loss: loss_sum / data.len() as f64,
        acc: hits as f64 / data.len() as f64,
        rates: rates_of(&probe),
    })
}

/// Train `model` on `train`, evaluating on `test` after every epoch.
///
/// With `out`, writes `metrics.csv` after every epoch and `best.ckpt` whenever test
/// accuracy improves. The run is a pure function of the model, data and `cfg`.
pub fn train_loop(model: &mut Model<f32>, train: &Dataset, test: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let t = model.cfg.time_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.store, cfg.adamw());
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        history: Vec::new(),
        best_acc: f64::NEG_INFINITY,
        best_epoch: 0,
        steps: 0,
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut probe = Probe::new(false);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = if cfg.augment {
                train.augmented_batch(chunk, t, &mut rng)?
            } else {
                train.batch(chunk, t)?
            };
            let mut g = Graph::new();
            let xv = g.constant(x);
            let mut ctx = ForwardCtx::train().with_probe(probe);
            let logits = model.forward(&mut g, xv, &mut ctx)?;
            let loss = ops::cross_entropy(&mut g, logits, &y)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            loss_sum += lv * chunk.len() as f64;
            hits += correct(g.value(logits), &y);
            model.store.zero_grad();
            g.backward(loss, &mut model.store)?;
            model.apply_bn_updates(&ctx);
            let lr = if cfg.cosine {
                cosine_lr(cfg.lr, report.steps as usize, total_steps)
            } else {
                cfg.lr
            };
            opt.step(&mut model.store, lr)?;
            report.steps += 1;
            probe = ctx.probe.take().expect("attached");
        }
        report.history.push(EpochMetrics {
            epoch,
            split: "train",
            loss: loss_sum / train.len() as f64,
            acc: hits as f64 / train.len() as f64,
            rates: rates_of(&probe),
        });
        let m = evaluate(model, test, cfg.eval_batch_size, epoch)?;
        let acc = m.acc;
        report.history.push(m);
        if acc > report.best_acc {
            report.best_acc = acc;
            report.best_epoch = epoch;
            if let Some(dir) = out {
                model.save(&dir.join("best.ckpt"))?;
            }
        }
        if let Some(dir) = out {
            let p = dir.join("metrics.csv");
            std::fs::write(&p, metrics_csv(&report.history)).map_err(|e| Error::io(&p, e))?;
        }
        if cfg.target_acc.is_some_and(|target| acc >= target) {
            break;
        }
    }
    Ok(report)
}
