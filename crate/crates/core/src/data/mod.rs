//! Datasets: CIFAR-10 binary files and seeded synthetic stand-ins.

pub mod cifar;
pub mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One example: `(C, H, W)` static image or `(T, C, H, W)` event frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
}

/// `T` copies of a static image along a new leading axis.
pub fn replicate_temporal(image: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
    if t < 1 {
        return Err(Error::Config("temporal replication needs T >= 1".into()));
    }
    let mut shape = vec![t];
    shape.extend_from_slice(image.shape());
    let mut data = Vec::with_capacity(t * image.numel());
    for _ in 0..t {
        data.extend_from_slice(image.data());
    }
    Tensor::new(&shape, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    SyntheticShapes,
    SyntheticEvents,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Cifar10 => "cifar10-binary",
            DatasetKind::SyntheticShapes => "synthetic-shapes",
            DatasetKind::SyntheticEvents => "synthetic-events",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" | "cifar10-binary" => Ok(DatasetKind::Cifar10),
            "synthetic-shapes" | "shapes" => Ok(DatasetKind::SyntheticShapes),
            "synthetic-events" | "events" => Ok(DatasetKind::SyntheticEvents),
            _ => Err(Error::ConfigKey {
                key: "data".into(),
                reason: format!("unknown dataset kind `{s}`"),
            }),
        }
    }
}

/// Dataset addressed by `kind:classes:size:seed`, plus a test-split size and, for
/// CIFAR-10, the directory holding the binary batches.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// The first `classes` labels are kept.
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub path: Option<PathBuf>,
}

impl DatasetSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |reason: String| Error::ConfigKey {
            key: "data".into(),
            reason,
        };
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 4 {
            return Err(bad(format!("`{spec}` is not kind:classes:size:seed")));
        }
        let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| bad(format!("{what} `{s}` is not a non-negative integer")));
        let train_size = num(parts[2], "size")? as usize;
        Ok(Self {
            kind: parts[0].parse()?,
            classes: num(parts[1], "classes")? as usize,
            train_size,
            test_size: (train_size / 2).max(1),
            seed: num(parts[3], "seed")?,
            path: None,
        })
    }

    pub fn spec_string(&self) -> String {
        format!("{}:{}:{}:{}", self.kind, self.classes, self.train_size, self.seed)
    }

    pub fn is_temporal(&self) -> bool {
        self.kind == DatasetKind::SyntheticEvents
    }

    /// Input channels a model must accept.
    pub fn channels(&self) -> usize {
        match self.kind {
            DatasetKind::SyntheticEvents => 2,
            _ => 3,
        }
    }

    /// Train and test splits. `t`, `h`, `w` size the synthetic data; CIFAR-10 is
    /// always 32x32.
    pub fn build(&self, t: usize, h: usize, w: usize) -> Result<(Dataset, Dataset)> {
        if self.train_size == 0 {
            return Err(Error::ConfigKey {
                key: "data".into(),
                reason: "empty training set".into(),
            });
        }
        let test_seed = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        let (train, test) = match self.kind {
            DatasetKind::Cifar10 => {
                let dir = self.path.as_ref().ok_or_else(|| Error::ConfigKey {
                    key: "data_path".into(),
                    reason: "cifar10-binary needs the directory of the binary batches".into(),
                })?;
                if !dir.is_dir() {
                    return Err(Error::ConfigKey {
                        key: "data_path".into(),
                        reason: format!("{} is not a directory", dir.display()),
                    });
                }
                if (h, w) != (32, 32) {
                    return Err(Error::ConfigKey {
                        key: "h".into(),
                        reason: "cifar10-binary images are 32x32".into(),
                    });
                }
                let classes: Vec<usize> = (0..self.classes).collect();
                (
                    cifar::load_split(dir, true, &classes, Some(self.train_size), self.seed)?,
                    cifar::load_split(dir, false, &classes, Some(self.test_size), test_seed)?,
                )
            }
            DatasetKind::SyntheticShapes => (
                synth::synth_shapes(self.classes, self.train_size, h, w, self.seed)?,
                synth::synth_shapes(self.classes, self.test_size, h, w, test_seed)?,
            ),
            DatasetKind::SyntheticEvents => (
                synth::synth_events(self.classes, self.train_size, t, h, w, self.seed)?,
                synth::synth_events(self.classes, self.test_size, t, h, w, test_seed)?,
            ),
        };
        Ok((
            Dataset::new(train, self.classes, self.is_temporal())?,
            Dataset::new(test, self.classes, self.is_temporal())?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub temporal: bool,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, temporal: bool) -> Result<Self> {
        let rank = if temporal { 4 } else { 3 };
        if let Some(first) = samples.first() {
            for s in &samples {
                if s.label >= num_classes {
                    return Err(Error::Config(format!("label {} out of range for {num_classes} classes", s.label)));
                }
                if s.image.rank() != rank || s.image.shape() != first.image.shape() {
                    return Err(Error::shape("dataset", format!("sample {:?} vs {:?}", s.image.shape(), first.image.shape())));
                }
            }
        }
        Ok(Self {
            samples,
            num_classes,
            temporal,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(T, B, C, H, W)` batch of the given samples and their labels. Static images are
    /// replicated `t` times; event samples must already have `t` frames.
    pub fn batch(&self, idx: &[usize], t: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
        self.batch_with(idx, t, |s| s.image.clone())
    }

    /// As [`Dataset::batch`], with horizontal flips and padded random crops applied to
    /// static images.
    pub fn augmented_batch(&self, idx: &[usize], t: usize, rng: &mut impl Rng) -> Result<(Tensor<f32>, Vec<usize>)> {
        if self.temporal {
            return self.batch(idx, t);
        }
        let mut jitter: Vec<(bool, isize, isize)> = idx
            .iter()
            .map(|_| (rng.gen_bool(0.5), rng.gen_range(-4..=4), rng.gen_range(-4..=4)))
            .collect();
        jitter.reverse();
        self.batch_with(idx, t, |s| {
            let (flip, dy, dx) = jitter.pop().expect("one per sample");
            flip_crop(&s.image, flip, dy, dx)
        })
    }

    fn batch_with(&self, idx: &[usize], t: usize, mut image: impl FnMut(&Sample) -> Tensor<f32>) -> Result<(Tensor<f32>, Vec<usize>)> {
        if idx.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let b = idx.len();
        let first = &self.samples[idx[0]].image;
        let (frame, frames): (Vec<usize>, usize) = if self.temporal {
            (first.shape()[1..].to_vec(), first.shape()[0])
        } else {
            (first.shape().to_vec(), 1)
        };
        if self.temporal && frames != t {
            return Err(Error::shape("batch", format!("event samples have {frames} frames, model expects T={t}")));
        }
        let per: usize = frame.iter().product();
        let mut data = vec![0f32; t * b * per];
        for (j, &i) in idx.iter().enumerate() {
            let img = image(&self.samples[i]);
            for step in 0..t {
                let src = if self.temporal { &img.data()[step * per..(step + 1) * per] } else { img.data() };
                data[(step * b + j) * per..(step * b + j + 1) * per].copy_from_slice(src);
            }
        }
        let mut shape = vec![t, b];
        shape.extend(frame);
        Ok((Tensor::new(&shape, data)?, idx.iter().map(|&i| self.samples[i].label).collect()))
    }
}

/// Optional horizontal flip, then a shift by `(dy, dx)` with zero fill.
pub fn flip_crop(img: &Tensor<f32>, flip: bool, dy: isize, dx: isize) -> Tensor<f32> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1] as isize, s[2] as isize);
    let src = img.data();
    let mut out = vec![0f32; img.numel()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = y + dy;
                let sx0 = x + dx;
                if sy < 0 || sy >= h || sx0 < 0 || sx0 >= w {
                    continue;
                }
                let sx = if flip { w - 1 - sx0 } else { sx0 };
                out[ch * (h * w) as usize + (y * w + x) as usize] = src[ch * (h * w) as usize + (sy * w + sx) as usize];
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}
