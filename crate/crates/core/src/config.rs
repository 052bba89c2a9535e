//! Flat `key = value` run configuration and the resolved run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::attention::AttentionConfig;
use crate::data::{DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::training::TrainConfig;

/// Keys a config file or override may set.
pub const KEYS: &[&str] = &[
    "t",
    "l",
    "d",
    "n_agg",
    "c",
    "h",
    "w",
    "classes",
    "variant",
    "dwc",
    "dwc_kernel",
    "ag",
    "heads",
    "ssa_scale",
    "stateless_core",
    "tau",
    "v_th",
    "v_reset",
    "alpha",
    "mlp_ratio",
    "seed",
    "epochs",
    "batch_size",
    "eval_batch_size",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "cosine",
    "augment",
    "target_acc",
    "data",
    "data_path",
    "test_size",
];

/// Parse `key = value` lines. `#` starts a comment; later keys win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
        insert_checked(&mut out, k.trim(), v.trim())?;
    }
    Ok(out)
}

/// Apply one `key=value` override.
pub fn apply_override(kv: &mut BTreeMap<String, String>, item: &str) -> Result<()> {
    let (k, v) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    insert_checked(kv, k.trim(), v.trim())
}

fn insert_checked(kv: &mut BTreeMap<String, String>, k: &str, v: &str) -> Result<()> {
    if !KEYS.contains(&k) {
        return Err(Error::ConfigKey {
            key: k.to_string(),
            reason: "unknown key".into(),
        });
    }
    kv.insert(k.to_string(), v.to_string());
    Ok(())
}

struct Lookup<'a>(&'a BTreeMap<String, String>);

impl Lookup<'_> {
    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::ConfigKey {
                key: key.into(),
                reason: format!("cannot parse `{v}`"),
            }),
        }
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.0.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true" | "1" | "yes" | "on") => Ok(true),
            Some("false" | "0" | "no" | "off") => Ok(false),
            Some(v) => Err(Error::ConfigKey {
                key: key.into(),
                reason: format!("`{v}` is not a boolean"),
            }),
        }
    }
}

/// Everything a run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

impl RunManifest {
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let l = Lookup(kv);
        let mut data = DatasetSpec::parse(&l.get("data", "synthetic-events:2:256:0".to_string())?)?;
        data.test_size = l.get("test_size", data.test_size)?;
        data.path = kv.get("data_path").map(PathBuf::from);

        let d: usize = l.get("d", 32)?;
        let mut attention = AttentionConfig::sasa(d, l.get("n_agg", 4)?);
        attention.variant = l.get("variant", attention.variant)?;
        attention.dwc_enabled = l.flag("dwc", true)?;
        attention.ag_enabled = l.flag("ag", true)?;
        attention.dwc_kernel = l.get("dwc_kernel", 3)?;
        attention.heads = l.get("heads", 1)?;
        attention.scale_c = l.get("ssa_scale", attention.scale_c)?;
        attention.stateless_core = l.flag("stateless_core", false)?;

        let default_hw = if data.kind == DatasetKind::Cifar10 { 32 } else { 16 };
        let seed: u64 = l.get("seed", 0)?;
        let mut model = ModelConfig::saformer(l.get("l", 2)?, d);
        model.attention = attention;
        model.time_steps = l.get("t", if data.is_temporal() { 16 } else { 4 })?;
        model.in_channels = l.get("c", data.channels())?;
        model.height = l.get("h", default_hw)?;
        model.width = l.get("w", default_hw)?;
        model.num_classes = l.get("classes", data.classes)?;
        model.mlp_ratio = l.get("mlp_ratio", 4)?;
        model.lif.tau = l.get("tau", model.lif.tau)?;
        model.lif.v_th = l.get("v_th", model.lif.v_th)?;
        model.lif.v_reset = l.get("v_reset", model.lif.v_reset)?;
        model.surrogate.alpha = l.get("alpha", model.surrogate.alpha)?;
        model.seed = seed;

        let defaults = TrainConfig::default();
        let target: f64 = l.get("target_acc", -1.0)?;
        let train = TrainConfig {
            epochs: l.get("epochs", defaults.epochs)?,
            batch_size: l.get("batch_size", 32)?,
            eval_batch_size: l.get("eval_batch_size", defaults.eval_batch_size)?,
            lr: l.get("lr", defaults.lr)?,
            weight_decay: l.get("weight_decay", defaults.weight_decay)?,
            betas: (l.get("beta1", defaults.betas.0)?, l.get("beta2", defaults.betas.1)?),
            cosine: l.flag("cosine", defaults.cosine)?,
            augment: l.flag("augment", false)?,
            target_acc: (target >= 0.0).then_some(target),
            seed,
        };

        let m = Self { model, train, data };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.in_channels != self.data.channels() {
            return Err(Error::ConfigKey {
                key: "c".into(),
                reason: format!("dataset {} has {} channels, model expects {}", self.data.kind, self.data.channels(), self.model.in_channels),
            });
        }
        if self.model.num_classes != self.data.classes {
            return Err(Error::ConfigKey {
                key: "classes".into(),
                reason: format!("dataset has {} classes, model has {}", self.data.classes, self.model.num_classes),
            });
        }
        Ok(())
    }

    /// Canonical `key = value` text naming every setting.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let a = &m.attention;
        let t = &self.train;
        let mut pairs: Vec<(&str, String)> = vec![
            ("t", m.time_steps.to_string()),
            ("l", m.blocks.to_string()),
            ("d", m.d_model.to_string()),
            ("n_agg", a.n_agg.to_string()),
            ("c", m.in_channels.to_string()),
            ("h", m.height.to_string()),
            ("w", m.width.to_string()),
            ("classes", m.num_classes.to_string()),
            ("variant", a.variant.to_string()),
            ("dwc", a.dwc_enabled.to_string()),
            ("dwc_kernel", a.dwc_kernel.to_string()),
            ("ag", a.ag_enabled.to_string()),
            ("heads", a.heads.to_string()),
            ("ssa_scale", a.scale_c.to_string()),
            ("stateless_core", a.stateless_core.to_string()),
            ("tau", m.lif.tau.to_string()),
            ("v_th", m.lif.v_th.to_string()),
            ("v_reset", m.lif.v_reset.to_string()),
            ("alpha", m.surrogate.alpha.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("seed", m.seed.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("eval_batch_size", t.eval_batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("beta1", t.betas.0.to_string()),
            ("beta2", t.betas.1.to_string()),
            ("cosine", t.cosine.to_string()),
            ("augment", t.augment.to_string()),
            ("target_acc", t.target_acc.unwrap_or(-1.0).to_string()),
            ("data", self.data.spec_string()),
            ("test_size", self.data.test_size.to_string()),
        ];
        if let Some(p) = &self.data.path {
            pairs.push(("data_path", p.display().to_string()));
        }
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// First 12 hex digits of the SHA-256 of [`RunManifest::to_text`].
    pub fn run_id(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_precedence() {
        let mut kv = parse_kv("d = 32 # width\n\n# whole line\nl=1\n").unwrap();
        assert_eq!(kv["d"], "32");
        apply_override(&mut kv, "d=64").unwrap();
        let m = RunManifest::from_kv(&kv).unwrap();
        assert_eq!(m.model.d_model, 64);
        assert!(m.to_text().contains("d = 64\n"));
    }

    #[test]
    fn unknown_and_malformed_keys_are_named() {
        match parse_kv("depth = 3") {
            Err(Error::ConfigKey { key, .. }) => assert_eq!(key, "depth"),
            other => panic!("{other:?}"),
        }
        let kv = parse_kv("d = twelve").unwrap();
        match RunManifest::from_kv(&kv) {
            Err(Error::ConfigKey { key, .. }) => assert_eq!(key, "d"),
            other => panic!("{other:?}"),
        }
        assert!(parse_kv("no equals sign").is_err());
    }

    #[test]
    fn manifest_text_round_trips() {
        let kv = parse_kv("data = synthetic-shapes:3:10:4\nvariant = ssa\nag = false\ntarget_acc = 0.9").unwrap();
        let m = RunManifest::from_kv(&kv).unwrap();
        let again = RunManifest::from_kv(&parse_kv(&m.to_text()).unwrap()).unwrap();
        assert_eq!(m, again);
        assert_eq!(m.run_id(), again.run_id());
        assert_eq!(m.run_id().len(), 12);
    }

    #[test]
    fn dataset_and_model_must_agree() {
        let kv = parse_kv("data = synthetic-events:2:10:0\nclasses = 3").unwrap();
        assert!(matches!(RunManifest::from_kv(&kv), Err(Error::ConfigKey { key, .. }) if key == "classes"));
    }
}
