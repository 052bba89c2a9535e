use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use saformer_core::attention::{Attention, AttentionConfig, AttentionVariant};
use saformer_core::layers::Neuron;
use saformer_core::network::{Model as CoreModel, ModelConfig};
use saformer_core::numerics::{Graph, ParamStore, Tensor};
use saformer_core::profiler::{self, EnergyConstants};
use saformer_core::spiking::{self, LifParams, SpikeOptions, SurrogateSpec};
use saformer_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::DataFormat { .. } | Error::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::ConfigKey { .. } | Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn variant(name: &str) -> PyResult<AttentionVariant> {
    name.parse().map_err(|e: Error| PyValueError::new_err(e.to_string()))
}

/// Spikes of a LIF layer over `x[t][i]`, membrane starting at `v_reset`.
#[pyfunction]
#[pyo3(signature = (x, tau=2.0, v_th=1.0, v_reset=0.0))]
fn lif(x: Vec<Vec<f64>>, tau: f64, v_th: f64, v_reset: f64) -> PyResult<Vec<Vec<f64>>> {
    let t = x.len();
    let width = x.first().map_or(0, Vec::len);
    if t == 0 || x.iter().any(|row| row.len() != width) {
        return Err(PyValueError::new_err("x must be a non-empty rectangular T x N list"));
    }
    let p = LifParams { tau, v_th, v_reset };
    p.validate().map_err(to_py)?;
    let mut g = Graph::<f64>::inference();
    let xv = g.constant(Tensor::new(&[t, width], x.concat()).map_err(to_py)?);
    let s = spiking::sn(&mut g, xv, &p, &SurrogateSpec::default(), SpikeOptions::default(), false).map_err(to_py)?;
    Ok(g.value(s).data().chunks(width.max(1)).map(<[f64]>::to_vec).collect())
}

/// `|ours - other| / |other|`.
#[pyfunction]
fn relative_difference(ours: f64, other: f64) -> PyResult<f64> {
    profiler::relative_difference(ours, other).map_err(to_py)
}

/// Attention-core operation counts for every variant and token count.
#[pyfunction]
#[pyo3(signature = (tokens, n=16, d=64))]
fn complexity<'py>(py: Python<'py>, tokens: Vec<usize>, n: usize, d: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let variants = [AttentionVariant::Sasa, AttentionVariant::Ssa, AttentionVariant::Sdsa];
    profiler::complexity_sweep(&variants, &tokens, n, d)
        .into_iter()
        .map(|r| {
            let row = PyDict::new(py);
            row.set_item("variant", r.variant.to_string())?;
            row.set_item("tokens", r.tokens)?;
            row.set_item("projection_ops", r.projection_ops)?;
            row.set_item("core_ops", r.core_ops)?;
            Ok(row)
        })
        .collect()
}

/// Trainable parameters of one attention layer, split by role.
#[pyfunction]
#[pyo3(signature = (d, variant="sasa", n=4, dwc_kernel=3))]
fn attention_params<'py>(py: Python<'py>, d: usize, variant: &str, n: usize, dwc_kernel: usize) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = AttentionConfig::sasa(d, n).with_variant(self::variant(variant)?);
    cfg.dwc_kernel = dwc_kernel;
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Attention::new(&mut store, "attn", &cfg, Neuron::default(), (4, 4), &mut rng).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("projection", a.num_projection_params())?;
    out.set_item("dwc", a.num_dwc_params())?;
    out.set_item("bn", a.num_bn_params())?;
    out.set_item("total", a.num_params())?;
    Ok(out)
}

/// A SAFormer classifier at 32-bit precision.
#[pyclass(module = "saformer")]
struct Model {
    inner: CoreModel<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (blocks=2, d=64, time_steps=4, channels=3, height=32, width=32, classes=10, n_agg=4, variant="sasa", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(blocks: usize, d: usize, time_steps: usize, channels: usize, height: usize, width: usize, classes: usize, n_agg: usize, variant: &str, seed: u64) -> PyResult<Self> {
        let mut cfg = ModelConfig::saformer(blocks, d)
            .with_input(channels, height, width)
            .with_time_steps(time_steps)
            .with_classes(classes)
            .with_n_agg(n_agg);
        cfg.attention.variant = self::variant(variant)?;
        cfg.seed = seed;
        Ok(Self {
            inner: CoreModel::new(cfg).map_err(to_py)?,
        })
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// `(T, B, C, H, W)` for a batch of `batch`.
    fn input_shape(&self, batch: usize) -> Vec<usize> {
        self.inner.input_shape(batch).to_vec()
    }

    /// Eval-mode logits, one row per sample. `x` is flat in `input_shape(batch)` order.
    fn predict(&self, x: Vec<f32>, batch: usize) -> PyResult<Vec<Vec<f32>>> {
        let input = Tensor::new(&self.inner.input_shape(batch), x).map_err(to_py)?;
        let logits = self.inner.predict(&input).map_err(to_py)?;
        let k = self.inner.cfg.num_classes;
        Ok(logits.data().chunks(k).map(<[f32]>::to_vec).collect())
    }

    /// Per-layer SOPs and energy (pJ) over calibration batches, each flat in
    /// `input_shape(batch)` order.
    #[pyo3(signature = (batches, batch, e_mac=profiler::E_MAC_PJ, e_ac=profiler::E_AC_PJ))]
    fn profile<'py>(&self, py: Python<'py>, batches: Vec<Vec<f32>>, batch: usize, e_mac: f64, e_ac: f64) -> PyResult<Bound<'py, PyDict>> {
        let shape = self.inner.input_shape(batch);
        let calib = batches
            .into_iter()
            .map(|b| Tensor::new(&shape, b))
            .collect::<saformer_core::Result<Vec<_>>>()
            .map_err(to_py)?;
        let consts = EnergyConstants { e_mac_pj: e_mac, e_ac_pj: e_ac };
        let (costs, report) = profiler::profile(&self.inner, &calib, consts).map_err(to_py)?;
        report.check().map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("total_pj", report.total_pj)?;
        out.set_item("fl_conv1", report.fl_conv1)?;
        out.set_item("sp_conv", report.sp_conv)?;
        out.set_item("sp_fc", report.sp_fc)?;
        out.set_item("sp_attention", report.sp_attention)?;
        let layers = costs
            .iter()
            .map(|c| {
                let row = PyDict::new(py);
                row.set_item("name", &c.name)?;
                row.set_item("kind", c.kind.as_str())?;
                row.set_item("flops", c.flops)?;
                row.set_item("fr", c.fr)?;
                row.set_item("sop", c.sop)?;
                row.set_item("energy_pj", profiler::layer_energy_pj(c, consts))?;
                Ok(row)
            })
            .collect::<PyResult<Vec<_>>>()?;
        out.set_item("layers", layers)?;
        Ok(out)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(to_py)
    }

    fn load(&mut self, path: &str) -> PyResult<()> {
        self.inner.load(path.as_ref()).map_err(to_py)
    }
}

/// Run the `saformer` command line; returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = saformer_core::cli::main_with(std::iter::once("saformer".to_string()).chain(args), &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
}

#[pymodule]
fn saformer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lif, m)?)?;
    m.add_function(wrap_pyfunction!(relative_difference, m)?)?;
    m.add_function(wrap_pyfunction!(complexity, m)?)?;
    m.add_function(wrap_pyfunction!(attention_params, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Model>()?;
    m.add("E_MAC_PJ", profiler::E_MAC_PJ)?;
    m.add("E_AC_PJ", profiler::E_AC_PJ)?;
    Ok(())
}
