//! Operation counting and the spike-energy model.
//!
//! Every billed layer is described by a [`CountedLayer`]: its MAC count per sample and
//! time step, and the probe tally whose density is the layer's input firing rate.
//! Conv MAC counts are dense: every kernel tap of every output position, including
//! taps that read zero padding. In event terms each input spike is scattered to all
//! `k x k` taps and `C_out / groups` channels, whether the target output sits inside
//! the image or in the padding halo. [`conv_valid_macs`] counts only in-image taps;
//! the two differ at the borders.
//!
//! Attention firing-rate measurement points, per variant:
//!
//! | variant | projections            | core                         |
//! |---------|------------------------|------------------------------|
//! | SSA     | `fr_1` = attn `in_sn`  | `fr_2` = spiking `Q`         |
//! | SDSA    | `fr_3` = attn `in_sn`  | `fr_4` = `Q ⊗ K`             |
//! | SASA    | `fr_5` = attn `in_sn`  | `fr_6` = pooled `Q ⊗ K`      |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::attention::AttentionVariant;
use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, Probe};
use crate::network::Model;
use crate::numerics::{Graph, Real, Tensor};

pub const E_MAC_PJ: f64 = 4.6;
pub const E_AC_PJ: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerKind {
    Conv,
    Fc,
    AttentionCore,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            LayerKind::AttentionCore => "attention-core",
        }
    }
}

/// A layer the energy model bills.
#[derive(Clone, Debug, PartialEq)]
pub struct CountedLayer {
    pub name: String,
    pub kind: LayerKind,
    /// MACs per sample per time step.
    pub flops: u64,
    /// Probe tally holding the input firing rate. Empty for layers whose input is
    /// real-valued (the encoding conv and the head), which are billed at rate 1.
    pub rate_source: String,
    pub encoding: bool,
}

/// MACs of a conv layer over one `h x w` input, counting only taps that fall inside
/// the input.
pub fn conv_valid_macs(c_in: usize, c_out: usize, groups: usize, kernel: usize, stride: usize, padding: usize, h: usize, w: usize) -> u64 {
    let taps_h: u64 = (0..h).map(|y| conv_reach(y, h, kernel, stride, padding)).sum();
    let taps_w: u64 = (0..w).map(|x| conv_reach(x, w, kernel, stride, padding)).sum();
    (c_out * (c_in / groups)) as u64 * taps_h * taps_w
}

/// Number of output positions along one axis that read input position `i`.
pub fn conv_reach(i: usize, len: usize, kernel: usize, stride: usize, padding: usize) -> u64 {
    let padded = len + 2 * padding;
    if padded < kernel {
        return 0;
    }
    let out_len = (padded - kernel) / stride + 1;
    (0..kernel)
        .filter(|&k| {
            let pos = i + padding;
            pos >= k && (pos - k) % stride == 0 && (pos - k) / stride < out_len
        })
        .count() as u64
}

/// Per-layer cost row.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub flops: u64,
    pub fr: f64,
    pub sop: f64,
    pub is_first_encoding_layer: bool,
}

/// Spike operations for one layer: `fr * T * flops`.
pub fn sop(fr: f64, t: usize, flops: u64) -> f64 {
    fr * t as f64 * flops as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyConstants {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self {
            e_mac_pj: E_MAC_PJ,
            e_ac_pj: E_AC_PJ,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    pub fl_conv1: u64,
    pub sp_conv: f64,
    pub sp_fc: f64,
    pub sp_attention: f64,
    pub sp: f64,
    pub total_pj: f64,
}

impl EnergyReport {
    pub fn from_parts(consts: EnergyConstants, fl_conv1: u64, sp_conv: f64, sp_fc: f64, sp_attention: f64) -> Self {
        let sp = sp_conv + sp_fc + sp_attention;
        Self {
            e_mac_pj: consts.e_mac_pj,
            e_ac_pj: consts.e_ac_pj,
            fl_conv1,
            sp_conv,
            sp_fc,
            sp_attention,
            sp,
            total_pj: consts.e_mac_pj * fl_conv1 as f64 + consts.e_ac_pj * sp,
        }
    }

    pub fn total_mj(&self) -> f64 {
        self.total_pj * 1e-9
    }

    pub fn total_joules(&self) -> f64 {
        self.total_pj * 1e-12
    }

    /// Re-derive both identities bit for bit.
    pub fn check(&self) -> Result<()> {
        let sp = self.sp_conv + self.sp_fc + self.sp_attention;
        if sp != self.sp {
            return Err(Error::Numeric(format!("SP {} differs from its decomposition sum {sp}", self.sp)));
        }
        let total = self.e_mac_pj * self.fl_conv1 as f64 + self.e_ac_pj * self.sp;
        if total != self.total_pj {
            return Err(Error::Numeric(format!("total {} pJ differs from E_MAC*FL + E_AC*SP = {total}", self.total_pj)));
        }
        Ok(())
    }
}

/// Relative difference `|ours - other| / other`. Not symmetric in its arguments.
///
/// ```
/// use saformer_core::profiler::relative_difference;
/// let a = relative_difference(95.8, 95.5).unwrap();
/// let b = relative_difference(95.5, 95.8).unwrap();
/// assert!(a != b);
/// ```
pub fn relative_difference(i_our: f64, i_other: f64) -> Result<f64> {
    if i_other == 0.0 {
        return Err(Error::Numeric("relative difference against a zero reference".into()));
    }
    Ok((i_our - i_other).abs() / i_other.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricComparison {
    pub metric: String,
    pub i_our: f64,
    pub i_other: f64,
    pub rd: f64,
}

impl MetricComparison {
    pub fn new(metric: &str, i_our: f64, i_other: f64) -> Result<Self> {
        Ok(Self {
            metric: metric.to_string(),
            i_our,
            i_other,
            rd: relative_difference(i_our, i_other)?,
        })
    }
}

/// Parse `metric,ours,other` lines (blank lines and `#` comments skipped).
pub fn parse_reference(text: &str) -> Result<Vec<MetricComparison>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("reference line {}: `{s}` is not a number", lineno + 1)))
        };
        if f.len() != 3 {
            return Err(Error::Config(format!("reference line {}: expected metric,ours,other", lineno + 1)));
        }
        if f[1] == "ours" {
            continue;
        }
        out.push(MetricComparison::new(f[0], num(f[1])?, num(f[2])?)?);
    }
    Ok(out)
}

/// MAC counts of every billed layer.
pub fn count_flops<R: Real>(model: &Model<R>) -> Vec<CountedLayer> {
    model.counted_layers()
}

/// Input firing rates keyed by probe tally name.
pub type RateTable = BTreeMap<String, f64>;

/// Mean spike density of every spiking layer over the calibration batches, in eval mode.
pub fn measure_firing_rates<R: Real>(model: &Model<R>, batches: &[Tensor<R>]) -> Result<RateTable> {
    if batches.is_empty() {
        return Err(Error::Config("empty calibration set".into()));
    }
    let mut probe = Probe::new(false);
    for batch in batches {
        let mut g = Graph::inference();
        let x = g.constant(batch.clone());
        let mut ctx = ForwardCtx::eval().with_probe(probe);
        model.forward(&mut g, x, &mut ctx)?;
        probe = ctx.probe.take().expect("probe attached above");
    }
    Ok(probe.tallies.iter().map(|(k, v)| (k.clone(), v.rate())).collect())
}

/// Bill every layer: the encoding conv at `E_MAC` on raw MACs, everything else at
/// `E_AC` on spike operations.
pub fn energy(layers: &[CountedLayer], rates: &RateTable, t: usize, consts: EnergyConstants) -> Result<(Vec<LayerCost>, EnergyReport)> {
    let mut costs = Vec::with_capacity(layers.len());
    let (mut fl_conv1, mut sp_conv, mut sp_fc, mut sp_attn) = (0u64, 0.0, 0.0, 0.0);
    for l in layers {
        let fr = if l.rate_source.is_empty() {
            1.0
        } else {
            *rates
                .get(&l.rate_source)
                .ok_or_else(|| Error::Config(format!("no firing rate measured for `{}` (needs `{}`)", l.name, l.rate_source)))?
        };
        let s = sop(fr, t, l.flops);
        if l.encoding {
            fl_conv1 += l.flops;
        } else {
            match l.kind {
                LayerKind::Conv => sp_conv += s,
                LayerKind::Fc => sp_fc += s,
                LayerKind::AttentionCore => sp_attn += s,
            }
        }
        costs.push(LayerCost {
            name: l.name.clone(),
            kind: l.kind,
            flops: l.flops,
            fr,
            sop: s,
            is_first_encoding_layer: l.encoding,
        });
    }
    let report = EnergyReport::from_parts(consts, fl_conv1, sp_conv, sp_fc, sp_attn);
    report.check()?;
    Ok((costs, report))
}

/// Per-layer energy in pJ as billed by [`energy`].
pub fn layer_energy_pj(c: &LayerCost, consts: EnergyConstants) -> f64 {
    if c.is_first_encoding_layer {
        consts.e_mac_pj * c.flops as f64
    } else {
        consts.e_ac_pj * c.sop
    }
}

/// Measure rates and bill a model in one go.
pub fn profile<R: Real>(model: &Model<R>, batches: &[Tensor<R>], consts: EnergyConstants) -> Result<(Vec<LayerCost>, EnergyReport)> {
    let rates = measure_firing_rates(model, batches)?;
    energy(&count_flops(model), &rates, model.cfg.time_steps, consts)
}

pub fn write_costs_csv(out: &mut impl Write, costs: &[LayerCost], consts: EnergyConstants) -> std::io::Result<()> {
    writeln!(out, "layer,kind,flops,fr,sop,energy_pj")?;
    for c in costs {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.name,
            c.kind.as_str(),
            c.flops,
            c.fr,
            c.sop,
            layer_energy_pj(c, consts)
        )?;
    }
    Ok(())
}

/// Text summary grouped like the per-variant energy rows: projections and core per
/// attention layer, then totals.
pub fn summary_text(costs: &[LayerCost], report: &EnergyReport) -> String {
    let mut s = String::new();
    let consts = EnergyConstants {
        e_mac_pj: report.e_mac_pj,
        e_ac_pj: report.e_ac_pj,
    };
    let _ = writeln!(s, "{:<28} {:>15} {:>8} {:>15} {:>14}", "layer", "MACs", "fr", "SOP", "energy (pJ)");
    for c in costs {
        let _ = writeln!(
            s,
            "{:<28} {:>15} {:>8.4} {:>15.1} {:>14.1}",
            c.name,
            c.flops,
            c.fr,
            c.sop,
            layer_energy_pj(c, consts)
        );
    }
    let _ = writeln!(s, "E_MAC x FL_conv1     = {:.4} x {} pJ", report.e_mac_pj, report.fl_conv1);
    let _ = writeln!(
        s,
        "SP = conv {:.1} + fc {:.1} + attention {:.1} = {:.1}",
        report.sp_conv, report.sp_fc, report.sp_attention, report.sp
    );
    let _ = writeln!(s, "E_AC x SP            = {:.4} x {:.1} pJ", report.e_ac_pj, report.sp);
    let _ = writeln!(s, "total                = {:.1} pJ ({:.6} mJ)", report.total_pj, report.total_mj());
    s
}

/// Asymptotic classes of the attention cores.
pub const SYMBOLIC_COMPLEXITY: [(&str, &str); 4] = [("VSA", "O(N^2 D)"), ("SSA", "O(N^2 D)"), ("SDSA", "O(N D)"), ("SASA", "O(n D)")];

/// Accumulates performed by an attention core with every input firing, counted by
/// walking the core's index space one event at a time.
pub fn core_ops(variant: AttentionVariant, tokens: usize, n_agg: usize, d: usize) -> u64 {
    let mut count = 0u64;
    match variant {
        AttentionVariant::Sasa => {
            // column sum of the pooled Q ⊗ K over its n rows
            for _row in 0..n_agg.min(tokens) {
                for _ch in 0..d {
                    count += 1;
                }
            }
        }
        AttentionVariant::Ssa => {
            // Q Kᵀ then (Q Kᵀ) V
            for _ in 0..2 {
                for _i in 0..tokens {
                    for _j in 0..tokens {
                        for _ch in 0..d {
                            count += 1;
                        }
                    }
                }
            }
        }
        AttentionVariant::Sdsa => {
            for _row in 0..tokens {
                for _ch in 0..d {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Query/key(/value) projection MACs per time step.
pub fn projection_ops(variant: AttentionVariant, tokens: usize, d: usize) -> u64 {
    let mats = match variant {
        AttentionVariant::Sasa => 2,
        AttentionVariant::Ssa | AttentionVariant::Sdsa => 3,
    };
    (mats * tokens * d * d) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityRow {
    pub variant: AttentionVariant,
    pub tokens: usize,
    pub n_agg: usize,
    pub d: usize,
    pub projection_ops: u64,
    pub core_ops: u64,
}

pub fn complexity_sweep(variants: &[AttentionVariant], tokens: &[usize], n_agg: usize, d: usize) -> Vec<ComplexityRow> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &n in tokens {
            rows.push(ComplexityRow {
                variant,
                tokens: n,
                n_agg,
                d,
                projection_ops: projection_ops(variant, n, d),
                core_ops: core_ops(variant, n, n_agg, d),
            });
        }
    }
    rows
}

/// Least-squares fit `y = c * x^power` through the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fit {
    pub power: i32,
    pub coef: f64,
    pub r2: f64,
}

pub fn fit_power(xs: &[f64], ys: &[f64], power: i32) -> Fit {
    let basis: Vec<f64> = xs.iter().map(|x| x.powi(power)).collect();
    let sxx: f64 = basis.iter().map(|b| b * b).sum();
    let sxy: f64 = basis.iter().zip(ys).map(|(b, y)| b * y).sum();
    let coef = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let mean = ys.iter().sum::<f64>() / ys.len().max(1) as f64;
    let ss_res: f64 = basis.iter().zip(ys).map(|(b, y)| (y - coef * b).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    // a constant series has no variance to explain; only an exact fit counts
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Fit { power, coef, r2 }
}

/// Scaling of one variant's core count across the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingSummary {
    pub variant: AttentionVariant,
    /// Largest `|y - y_0| / y_0` over the sweep.
    pub max_rel_deviation: f64,
    pub constant: Fit,
    pub linear: Fit,
    pub quadratic: Fit,
}

pub fn scaling_summary(rows: &[ComplexityRow], variant: AttentionVariant) -> ScalingSummary {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| (r.tokens as f64, r.core_ops as f64))
        .collect();
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let y0 = ys.first().copied().unwrap_or(0.0);
    let max_rel_deviation = ys
        .iter()
        .map(|y| if y0 == 0.0 { 0.0 } else { (y - y0).abs() / y0 })
        .fold(0.0, f64::max);
    ScalingSummary {
        variant,
        max_rel_deviation,
        constant: fit_power(&xs, &ys, 0),
        linear: fit_power(&xs, &ys, 1),
        quadratic: fit_power(&xs, &ys, 2),
    }
}

fn r2_text(r2: f64) -> String {
    if r2.is_finite() {
        format!("{r2:.6}")
    } else {
        "n/a".into()
    }
}

pub fn complexity_text(rows: &[ComplexityRow], summaries: &[ScalingSummary]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<6} {:<10}", "model", "core");
    for (m, c) in SYMBOLIC_COMPLEXITY {
        let _ = writeln!(s, "{m:<6} {c:<10}");
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<6} {:>6} {:>4} {:>5} {:>14} {:>14}", "model", "N", "n", "D", "projection", "core");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<6} {:>6} {:>4} {:>5} {:>14} {:>14}",
            r.variant, r.tokens, r.n_agg, r.d, r.projection_ops, r.core_ops
        );
    }
    let _ = writeln!(s);
    for m in summaries {
        let _ = writeln!(
            s,
            "{}: max deviation from N={} {:.4}%, R^2 of fits c: {}, c*N: {}, c*N^2: {}",
            m.variant,
            rows.iter().find(|r| r.variant == m.variant).map_or(0, |r| r.tokens),
            100.0 * m.max_rel_deviation,
            r2_text(m.constant.r2),
            r2_text(m.linear.r2),
            r2_text(m.quadratic.r2)
        );
    }
    s
}
