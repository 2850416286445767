//! Python bindings: pattern sets, FKW layers, the executor with its load
//! accounting, the tuner and manifest validation.
//!
//! Tensors cross the boundary as flat lists in row-major order. Execution
//! configs cross as JSON text, the same form the CLI reads and writes.

use std::collections::HashMap;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use patconv::exec::{conv_fkw, lre_load_model, ExecConfig, LoadStats};
use patconv::fkw::{self, CsrLayer};
use patconv::lr::{lr_emit, lr_parse};
use patconv::tensor::{FeatureMap, LayerShape};
use patconv::Error;

create_exception!(patconv_py, PatconvError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Validation(v) => {
            let lines: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            PatconvError::new_err(format!("validation failed:\n{}", lines.join("\n")))
        }
        other => PatconvError::new_err(other.to_string()),
    }
}

fn stats_dict(s: LoadStats) -> HashMap<&'static str, u64> {
    HashMap::from([
        ("input_element_loads", s.input_element_loads),
        ("weight_loads", s.weight_loads),
        ("branch_events", s.branch_events),
    ])
}

/// Ordered pattern set; ids are 1-based in list order.
#[pyclass(
    name = "PatternSet",
    module = "patconv_py",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
struct PyPatternSet(patconv::pattern::PatternSet);

#[pymethods]
impl PyPatternSet {
    #[new]
    fn new(patterns: Vec<[(u8, u8); 4]>) -> PyResult<Self> {
        let ps = patterns
            .into_iter()
            .map(patconv::pattern::Pattern::new)
            .collect::<patconv::Result<Vec<_>>>()
            .map_err(err)?;
        Ok(Self(patconv::pattern::PatternSet::new(ps).map_err(err)?))
    }

    #[staticmethod]
    fn full() -> Self {
        Self(patconv::pattern::PatternSet::full())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        patconv::pattern::PatternSet::from_json(text)
            .map(Self)
            .map_err(err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    fn patterns(&self) -> Vec<[(u8, u8); 4]> {
        self.0.patterns().iter().map(|p| *p.positions()).collect()
    }

    /// Best pattern id for a 9-entry kernel and the projected kernel.
    fn project(&self, kernel: [f64; 9]) -> (u8, [f64; 9]) {
        patconv::pattern::project_pattern(&kernel, &self.0)
    }

    fn __len__(&self) -> usize {
        self.0.k()
    }
}

/// All 56 center-containing 4-entry patterns in canonical order.
#[pyfunction]
fn all_patterns() -> Vec<[(u8, u8); 4]> {
    patconv::pattern::all_patterns()
        .iter()
        .map(|p| *p.positions())
        .collect()
}

/// One pattern-pruned layer in FKW form.
#[pyclass(name = "FkwModel", module = "patconv_py", frozen)]
struct PyFkw(fkw::FkwModel);

#[pymethods]
impl PyFkw {
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        fkw::FkwModel::from_bytes(data).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let m: fkw::FkwModel = serde_json::from_str(text).map_err(|e| err(e.into()))?;
        m.validate().map_err(err)?;
        Ok(Self(m))
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.to_bytes())
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.0).expect("plain data serializes")
    }

    /// `(in_channels, out_channels, input_h, input_w, stride)`
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize, usize) {
        let s = &self.0.shape;
        (
            s.in_channels,
            s.out_channels,
            s.input_h,
            s.input_w,
            s.stride,
        )
    }

    #[getter]
    fn output_shape(&self) -> (usize, usize, usize) {
        let s = &self.0.shape;
        (s.out_channels, s.output_h(), s.output_w())
    }

    #[getter]
    fn pattern_set(&self) -> PyPatternSet {
        PyPatternSet(self.0.pattern_set.clone())
    }

    #[getter]
    fn offset(&self) -> Vec<u32> {
        self.0.offset.clone()
    }

    #[getter]
    fn reorder(&self) -> Vec<u32> {
        self.0.reorder.clone()
    }

    #[getter]
    fn index(&self) -> Vec<u32> {
        self.0.index.clone()
    }

    #[getter]
    fn stride(&self) -> Vec<Vec<u32>> {
        self.0.stride.clone()
    }

    #[getter]
    fn weights(&self) -> Vec<f32> {
        self.0.weights.clone()
    }

    #[getter]
    fn total_kernels(&self) -> usize {
        self.0.total_kernels()
    }

    /// Bytes of index structure (offset, reorder, index, stride).
    fn structure_overhead(&self) -> usize {
        self.0.structure_overhead()
    }

    /// Index bytes the same layer needs in CSR form.
    fn csr_overhead(&self) -> PyResult<usize> {
        Ok(CsrLayer::from_dense(&self.0.to_dense().map_err(err)?).structure_overhead())
    }

    /// Dense `[out][in][3][3]` weights and bias in original channel order.
    fn to_dense(&self) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let w = self.0.to_dense().map_err(err)?;
        Ok((w.data, w.bias))
    }

    /// Documented default execution config, as JSON.
    fn default_config(&self) -> String {
        serde_json::to_string(&ExecConfig::default_for(&self.0.shape)).expect("config serializes")
    }

    /// Runs the layer on a flat `[C][H][W]` input. Returns the flat output and load statistics.
    #[pyo3(signature = (input, config=None))]
    fn conv(
        &self,
        py: Python<'_>,
        input: Vec<f32>,
        config: Option<&str>,
    ) -> PyResult<(Vec<f32>, HashMap<&'static str, u64>)> {
        let cfg = parse_config(config, &self.0.shape)?;
        let s = self.0.shape;
        let x = FeatureMap::new(s.in_channels, s.input_h, s.input_w, input).map_err(err)?;
        let (out, stats) = py.detach(|| conv_fkw(&x, &self.0, &cfg)).map_err(err)?;
        Ok((out.data, stats_dict(stats)))
    }

    /// Predicted load statistics without executing.
    #[pyo3(signature = (config=None))]
    fn load_model(&self, config: Option<&str>) -> PyResult<HashMap<&'static str, u64>> {
        let cfg = parse_config(config, &self.0.shape)?;
        lre_load_model(&self.0, &cfg).map(stats_dict).map_err(err)
    }

    /// Genetic search over execution configs on a seeded random input; returns the best as JSON.
    #[pyo3(signature = (budget=patconv::tune::DEFAULT_BUDGET, seed=0))]
    fn tune(&self, py: Python<'_>, budget: usize, seed: u64) -> PyResult<String> {
        let input = patconv::synth::random_input(&self.0.shape, seed.wrapping_add(1));
        let (best, _) = py
            .detach(|| patconv::tune::tune(&self.0, &input, budget, seed))
            .map_err(err)?;
        Ok(serde_json::to_string(&best).expect("config serializes"))
    }

    fn __repr__(&self) -> String {
        let s = &self.0.shape;
        format!(
            "FkwModel({}->{} on {}x{}, {} kernels, k={})",
            s.in_channels,
            s.out_channels,
            s.input_h,
            s.input_w,
            self.0.total_kernels(),
            self.0.pattern_set.k()
        )
    }
}

fn parse_config(config: Option<&str>, shape: &LayerShape) -> PyResult<ExecConfig> {
    match config {
        None => Ok(ExecConfig::default_for(shape)),
        Some(text) => serde_json::from_str(text).map_err(|e| err(e.into())),
    }
}

/// Seeded random 3x3 layer pruned to `k` patterns at connectivity `rate`, reordered and encoded.
#[pyfunction]
#[pyo3(signature = (in_channels, out_channels, height, width, k=8, rate=3.6, seed=0))]
fn pruned_layer(
    in_channels: usize,
    out_channels: usize,
    height: usize,
    width: usize,
    k: usize,
    rate: f64,
    seed: u64,
) -> PyResult<PyFkw> {
    let shape = LayerShape::conv3x3(in_channels, out_channels, height, width).map_err(err)?;
    let (m, _) = patconv::synth::pruned_layer(shape, k, rate, seed).map_err(err)?;
    Ok(PyFkw(m))
}

/// The small hand-built four-filter layer used as the format's golden example.
#[pyfunction]
fn worked_example() -> PyResult<PyFkw> {
    let (layer, plan) = fkw::worked_example();
    fkw::fkw_encode(&layer, &plan).map(PyFkw).map_err(err)
}

/// Dense reference convolution of flat weights `[out][in][3][3]` on a flat input.
#[pyfunction]
fn conv_dense(
    input: Vec<f32>,
    shape: (usize, usize, usize, usize),
    weights: Vec<f32>,
    bias: Vec<f32>,
) -> PyResult<Vec<f32>> {
    let (ic, oc, h, w) = shape;
    let s = LayerShape::conv3x3(ic, oc, h, w).map_err(err)?;
    let x = FeatureMap::new(ic, h, w, input).map_err(err)?;
    let wt = patconv::tensor::WeightTensor::new(s, weights, bias).map_err(err)?;
    patconv::tensor::conv_dense(&x, &wt)
        .map(|y| y.data)
        .map_err(err)
}

/// Parses and checks a layerwise manifest; returns its canonical text.
#[pyfunction]
fn validate_manifest(text: &str) -> PyResult<String> {
    lr_parse(text).map(|m| lr_emit(&m)).map_err(err)
}

#[pymodule]
fn patconv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PatconvError", m.py().get_type::<PatconvError>())?;
    m.add_class::<PyPatternSet>()?;
    m.add_class::<PyFkw>()?;
    m.add_function(wrap_pyfunction!(all_patterns, m)?)?;
    m.add_function(wrap_pyfunction!(pruned_layer, m)?)?;
    m.add_function(wrap_pyfunction!(worked_example, m)?)?;
    m.add_function(wrap_pyfunction!(conv_dense, m)?)?;
    m.add_function(wrap_pyfunction!(validate_manifest, m)?)?;
    Ok(())
}
