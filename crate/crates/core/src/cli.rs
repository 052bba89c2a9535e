//! Command-line front end: train, eval, ablate, profile, gradcheck, complexity.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::attention::AttentionVariant;
use crate::config::{apply_override, parse_kv, RunManifest};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::profiler::{self, EnergyConstants, MetricComparison};
use crate::training::{self, GradCheckConfig};

#[derive(Debug, Parser)]
#[command(name = "saformer", version, about = "Spiking transformer with aggregated spike self-attention")]
pub struct Cli {
    /// Seed for model initialisation and training order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `key=value` pair applied after the config file; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (default `runs/<command>-<run id>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and keep the best checkpoint.
    Train,
    /// Test-set loss and accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train attention ablations under a shared schedule.
    Ablate {
        /// Any of full, no-dwc, no-ag, no-dwc-ag, ssa, sdsa.
        #[arg(long, value_delimiter = ',', default_value = "full,no-dwc,no-ag,no-dwc-ag")]
        variants: Vec<String>,
        /// Seeds to repeat every variant with (default: the run seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Per-layer operation counts, firing rates and energy.
    Profile {
        /// Weights to profile; a freshly initialised model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// CSV of `metric,ours,other` rows to compare by relative difference.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Calibration batches drawn from the test split.
        #[arg(long, default_value_t = 4)]
        batches: usize,
        #[arg(long, default_value_t = profiler::E_MAC_PJ)]
        e_mac: f64,
        #[arg(long, default_value_t = profiler::E_AC_PJ)]
        e_ac: f64,
    },
    /// Compare backprop gradients with finite differences at 64 bits.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 64)]
        coords: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Scale the gradients of one backward rule, as `op:factor`.
        #[arg(long)]
        fault: Option<String>,
    },
    /// Count attention-core operations over a sweep of token counts.
    Complexity {
        #[arg(long, value_delimiter = ',', default_value = "16,64,256,1024")]
        tokens: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Profile { .. } => "profile",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Complexity { .. } => "complexity",
        }
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    match run(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

/// Resolve config file, overrides and `--seed` into a manifest.
pub fn resolve_manifest(cli: &Cli) -> Result<RunManifest> {
    let mut kv = match &cli.config {
        Some(p) => parse_kv(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => BTreeMap::new(),
    };
    for o in &cli.overrides {
        apply_override(&mut kv, o)?;
    }
    if let Some(seed) = cli.seed {
        kv.insert("seed".into(), seed.to_string());
    }
    RunManifest::from_kv(&kv)
}

/// Create `dir`, refusing to reuse a non-empty one unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))
}

fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let manifest = resolve_manifest(cli)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-{}", cli.command.name(), manifest.run_id())));
    let say = |stdout: &mut dyn Write, s: String| {
        let _ = stdout.write_all(s.as_bytes());
    };
    match &cli.command {
        Command::Train => {
            prepare_out_dir(&out, cli.force)?;
            write_file(&out, "manifest.txt", &manifest.to_text())?;
            let m = &manifest.model;
            let (train, test) = manifest.data.build(m.time_steps, m.height, m.width)?;
            let mut model = Model::<f32>::new(m.clone())?;
            let report = training::train_loop(&mut model, &train, &test, &manifest.train, Some(&out))?;
            let summary = format!(
                "run {}\nparameters {}\nsteps {}\nbest test accuracy {:.4} at epoch {}\n",
                manifest.run_id(),
                model.num_params(),
                report.steps,
                report.best_acc,
                report.best_epoch
            );
            write_file(&out, "summary.txt", &summary)?;
            say(stdout, format!("{summary}wrote {}\n", out.display()));
        }
        Command::Eval { checkpoint } => {
            let m = &manifest.model;
            let (_, test) = manifest.data.build(m.time_steps, m.height, m.width)?;
            let mut model = Model::<f32>::new(m.clone())?;
            model.load(checkpoint)?;
            let r = training::evaluate(&model, &test, manifest.train.eval_batch_size, 0)?;
            say(stdout, format!("samples {}\nloss {:.6}\naccuracy {:.4}\n", test.len(), r.loss, r.acc));
        }
        Command::Ablate { variants, seeds } => {
            prepare_out_dir(&out, cli.force)?;
            write_file(&out, "manifest.txt", &manifest.to_text())?;
            let seeds = if seeds.is_empty() { vec![manifest.model.seed] } else { seeds.clone() };
            let rows = ablate(&manifest, variants, &seeds)?;
            let (runs, table) = ablation_csv(&rows);
            write_file(&out, "ablation_runs.csv", &runs)?;
            write_file(&out, "ablation.csv", &table)?;
            say(stdout, table);
        }
        Command::Profile {
            checkpoint,
            reference,
            batches,
            e_mac,
            e_ac,
        } => {
            prepare_out_dir(&out, cli.force)?;
            write_file(&out, "manifest.txt", &manifest.to_text())?;
            let m = &manifest.model;
            let mut model = Model::<f32>::new(m.clone())?;
            if let Some(c) = checkpoint {
                model.load(c)?;
            }
            let (_, test) = manifest.data.build(m.time_steps, m.height, m.width)?;
            let bs = manifest.train.batch_size;
            let mut calib = Vec::new();
            let idx: Vec<usize> = (0..test.len()).collect();
            for chunk in idx.chunks(bs).take((*batches).max(1)) {
                calib.push(test.batch(chunk, m.time_steps)?.0);
            }
            let consts = EnergyConstants {
                e_mac_pj: *e_mac,
                e_ac_pj: *e_ac,
            };
            let (costs, report) = profiler::profile(&model, &calib, consts)?;
            report.check()?;
            let mut csv = Vec::new();
            profiler::write_costs_csv(&mut csv, &costs, consts).map_err(|e| Error::io(out.join("energy.csv"), e))?;
            write_file(&out, "energy.csv", &String::from_utf8(csv).expect("ascii"))?;
            let summary = profiler::summary_text(&costs, &report);
            write_file(&out, "energy.txt", &summary)?;
            say(stdout, summary);
            if let Some(r) = reference {
                let text = std::fs::read_to_string(r).map_err(|e| Error::io(r, e))?;
                let rows = profiler::parse_reference(&text)?;
                let csv = rd_csv(&rows);
                write_file(&out, "rd.csv", &csv)?;
                say(stdout, csv);
            }
        }
        Command::Gradcheck {
            tolerance,
            step,
            coords,
            batch,
            fault,
        } => {
            prepare_out_dir(&out, cli.force)?;
            write_file(&out, "manifest.txt", &manifest.to_text())?;
            let fault = fault.as_deref().map(parse_fault).transpose()?;
            let m = &manifest.model;
            let (train, _) = manifest.data.build(m.time_steps, m.height, m.width)?;
            let n = (*batch).min(train.len()).max(1);
            let (x, y) = train.batch(&(0..n).collect::<Vec<_>>(), m.time_steps)?;
            let mut model: Model<f64> = Model::<f32>::new(m.clone())?.cast();
            let cfg = GradCheckConfig {
                h: *step,
                coords_per_tensor: *coords,
                tolerance: *tolerance,
                seed: m.seed,
                ..Default::default()
            };
            let report = training::grad_check(&mut model, &x.cast(), &y, &cfg, fault)?;
            write_file(&out, "gradcheck.csv", &report.text())?;
            say(
                stdout,
                format!("checked {} coordinates, max relative error {:.3e}\n", report.coords(), report.max_rel_err()),
            );
            report.ensure(*tolerance)?;
        }
        Command::Complexity { tokens, n, d } => {
            prepare_out_dir(&out, cli.force)?;
            let variants = [AttentionVariant::Sasa, AttentionVariant::Ssa, AttentionVariant::Sdsa];
            let rows = profiler::complexity_sweep(&variants, tokens, *n, *d);
            let summaries: Vec<_> = variants.iter().map(|v| profiler::scaling_summary(&rows, *v)).collect();
            let mut csv = String::from("variant,tokens,n_agg,d,projection_ops,core_ops\n");
            for r in &rows {
                let _ = writeln!(csv, "{},{},{},{},{},{}", r.variant, r.tokens, r.n_agg, r.d, r.projection_ops, r.core_ops);
            }
            let mut dat = String::from("# N sasa_core ssa_core sdsa_core\n");
            for &t in tokens {
                let core = |v: AttentionVariant| rows.iter().find(|r| r.variant == v && r.tokens == t).map_or(0, |r| r.core_ops);
                let _ = writeln!(dat, "{t} {} {} {}", core(variants[0]), core(variants[1]), core(variants[2]));
            }
            let text = profiler::complexity_text(&rows, &summaries);
            write_file(&out, "sweep.txt", &format!("tokens = {tokens:?}\nn = {n}\nd = {d}\n"))?;
            write_file(&out, "complexity.csv", &csv)?;
            write_file(&out, "complexity.dat", &dat)?;
            write_file(&out, "complexity.txt", &text)?;
            say(stdout, text);
        }
    }
    Ok(())
}

fn parse_fault(s: &str) -> Result<(&'static str, f64)> {
    const OPS: &[&str] = &[
        "add", "mul", "scale", "linear", "bmm", "reshape", "permute", "sum_axis", "cross_entropy", "batch_norm", "conv2d", "maxpool2d",
        "adaptive_avg_pool_tokens", "lif",
    ];
    let bad = || Error::ConfigKey {
        key: "fault".into(),
        reason: format!("`{s}` is not op:factor with op one of {}", OPS.join(", ")),
    };
    let (op, f) = s.split_once(':').ok_or_else(bad)?;
    let op = OPS.iter().find(|o| **o == op).ok_or_else(bad)?;
    Ok((op, f.parse().map_err(|_| bad())?))
}

/// Manifest for one named ablation.
pub fn ablation_manifest(base: &RunManifest, variant: &str, seed: u64) -> Result<RunManifest> {
    let mut m = base.clone();
    let a = &mut m.model.attention;
    match variant {
        "full" => {}
        "no-dwc" => a.dwc_enabled = false,
        "no-ag" => a.ag_enabled = false,
        "no-dwc-ag" => {
            a.dwc_enabled = false;
            a.ag_enabled = false;
        }
        "ssa" => a.variant = AttentionVariant::Ssa,
        "sdsa" => a.variant = AttentionVariant::Sdsa,
        other => {
            return Err(Error::ConfigKey {
                key: "variants".into(),
                reason: format!("unknown ablation `{other}` (expected full, no-dwc, no-ag, no-dwc-ag, ssa, sdsa)"),
            })
        }
    }
    m.model.seed = seed;
    m.train.seed = seed;
    m.validate()?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub best_acc: f64,
    pub final_acc: f64,
}

/// Train every variant under every seed on the same data.
pub fn ablate(base: &RunManifest, variants: &[String], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let manifests = variants
        .iter()
        .map(|v| seeds.iter().map(|&s| ablation_manifest(base, v, s)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let m = &base.model;
    let (train, test) = base.data.build(m.time_steps, m.height, m.width)?;
    let mut rows = Vec::new();
    for (v, per_seed) in variants.iter().zip(manifests) {
        for man in per_seed {
            let mut model = Model::<f32>::new(man.model.clone())?;
            let r = training::train_loop(&mut model, &train, &test, &man.train, None)?;
            rows.push(AblationRow {
                variant: v.clone(),
                seed: man.model.seed,
                best_acc: r.best_acc,
                final_acc: *r.test_acc().last().unwrap_or(&0.0),
            });
        }
    }
    Ok(rows)
}

/// Per-run CSV and the per-variant table (mean best accuracy and its gap to `full`).
pub fn ablation_csv(rows: &[AblationRow]) -> (String, String) {
    let mut runs = String::from("variant,seed,best_acc,final_acc\n");
    let mut order: Vec<&str> = Vec::new();
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in rows {
        let _ = writeln!(runs, "{},{},{},{}", r.variant, r.seed, r.best_acc, r.final_acc);
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
        acc.entry(&r.variant).or_default().push(r.best_acc);
    }
    let mean = |v: &str| {
        let a = &acc[v];
        a.iter().sum::<f64>() / a.len() as f64
    };
    let full = acc.contains_key("full").then(|| mean("full"));
    let mut table = String::from("variant,mean_acc_pct,full_minus_variant_pct\n");
    for v in order {
        let m = mean(v);
        let gap = full.map_or(String::new(), |f| format!("{:.2}", 100.0 * (f - m)));
        let _ = writeln!(table, "{v},{:.2},{gap}", 100.0 * m);
    }
    (runs, table)
}

pub fn rd_csv(rows: &[MetricComparison]) -> String {
    let mut s = String::from("metric,ours,other,rd,rd_pct\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6},{:.2}", r.metric, r.i_our, r.i_other, r.rd, 100.0 * r.rd);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_ablation_rejected() {
        let base = RunManifest::from_kv(&BTreeMap::new()).unwrap();
        assert!(ablation_manifest(&base, "no-bn", 0).is_err());
        let m = ablation_manifest(&base, "no-dwc-ag", 3).unwrap();
        assert!(!m.model.attention.dwc_enabled && !m.model.attention.ag_enabled);
        assert_eq!(m.train.seed, 3);
    }

    #[test]
    fn ablation_table_shape() {
        let rows = vec![
            AblationRow { variant: "full".into(), seed: 1, best_acc: 0.9, final_acc: 0.9 },
            AblationRow { variant: "no-ag".into(), seed: 1, best_acc: 0.8, final_acc: 0.8 },
        ];
        let (_, t) = ablation_csv(&rows);
        assert_eq!(t, "variant,mean_acc_pct,full_minus_variant_pct\nfull,90.00,0.00\nno-ag,80.00,10.00\n");
    }

    #[test]
    fn fault_parsing() {
        assert_eq!(parse_fault("linear:1.5").unwrap(), ("linear", 1.5));
        assert!(parse_fault("nope:2").is_err());
        assert!(parse_fault("linear").is_err());
    }
}
