//! Python bindings: tensors, the architecture zoo, inflation, fixed-point
//! checks, TV-L1 flow and checkpoints.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use inflate3d_core::flow::{self, FlowField, TvL1Params};
use inflate3d_core::graph::{self, ArchConfig, Family, GraphSpec};
use inflate3d_core::inflate::{self, InflationRule};
use inflate3d_core::ops::Mode;

fn py_err(e: inflate3d_core::Error) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// A dense float32 tensor in row-major order.
#[pyclass(name = "Tensor", module = "inflate3d", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: inflate3d_core::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        let inner = inflate3d_core::Tensor::new(shape, data).map_err(py_err)?;
        Ok(PyTensor { inner })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor {
            inner: inflate3d_core::Tensor::zeros(shape),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (shape, lo=-1.0, hi=1.0, seed=0))]
    fn uniform(shape: Vec<usize>, lo: f32, hi: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PyTensor {
            inner: inflate3d_core::Tensor::uniform(shape, lo, hi, &mut rng),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat copy of the values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        let inner = self.inner.clone().reshape(shape).map_err(py_err)?;
        Ok(PyTensor { inner })
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f32> {
        self.inner.max_abs_diff(&other.inner).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

impl From<inflate3d_core::Tensor> for PyTensor {
    fn from(inner: inflate3d_core::Tensor) -> Self {
        PyTensor { inner }
    }
}

/// A network description from the architecture zoo.
#[pyclass(name = "Graph", module = "inflate3d", skip_from_py_object)]
#[derive(Clone)]
pub struct PyGraph {
    inner: GraphSpec,
}

#[pymethods]
impl PyGraph {
    /// Full-scale network, or a toy one when any of `width`, `frames` or
    /// `size` is given.
    #[staticmethod]
    #[pyo3(signature = (family, classes=400, width=None, frames=None, size=None))]
    fn build(
        family: &str,
        classes: usize,
        width: Option<f64>,
        frames: Option<usize>,
        size: Option<usize>,
    ) -> PyResult<Self> {
        let family: Family = family.parse().map_err(py_err)?;
        let full = ArchConfig::full_scale(family, classes);
        let cfg = if width.is_none() && frames.is_none() && size.is_none() {
            full
        } else {
            ArchConfig::toy(
                family,
                classes,
                width.unwrap_or(1.0),
                frames.unwrap_or(full.frames),
                size.unwrap_or(full.height),
            )
        };
        let inner = graph::build(&cfg).map_err(py_err)?;
        Ok(PyGraph { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = GraphSpec::from_json(text).map_err(py_err)?;
        Ok(PyGraph { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family.name()
    }

    fn layers(&self) -> Vec<String> {
        self.inner.nodes.iter().map(|n| n.id.clone()).collect()
    }

    fn count_params(&self) -> usize {
        graph::count_params(&self.inner)
    }

    fn summary(&self) -> PyResult<String> {
        graph::summary(&self.inner).map_err(py_err)
    }

    /// `(extent, stride)` of `layer` as `(t, x, y)` triples.
    fn receptive_field(&self, layer: &str) -> PyResult<([usize; 3], [usize; 3])> {
        let rf = graph::receptive_field(&self.inner, layer).map_err(py_err)?;
        Ok((rf.extent, rf.stride))
    }

    #[pyo3(signature = (seed=0))]
    fn init_params(&self, seed: u64) -> PyCheckpoint {
        let mut ckpt = graph::init_params(&self.inner, &mut ChaCha8Rng::seed_from_u64(seed));
        ckpt.set_graph(&self.inner);
        PyCheckpoint { inner: ckpt }
    }

    /// Runs the network in inference mode and returns the output node.
    fn forward(&self, params: &PyCheckpoint, inputs: Vec<PyTensor>) -> PyResult<PyTensor> {
        let inputs: Vec<_> = inputs.into_iter().map(|t| t.inner).collect();
        let out =
            graph::forward(&self.inner, &params.inner, &inputs, Mode::Infer).map_err(py_err)?;
        Ok(out.output(&self.inner).clone().into())
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(family={}, layers={})",
            self.inner.family,
            self.inner.nodes.len()
        )
    }
}

/// Named tensors plus the graph they belong to.
#[pyclass(name = "Checkpoint", module = "inflate3d", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCheckpoint {
    inner: inflate3d_core::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = inflate3d_core::Checkpoint::load(path).map_err(py_err)?;
        Ok(PyCheckpoint { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.to_bytes().map_err(py_err)
    }

    #[getter]
    fn family(&self) -> String {
        self.inner.family.clone()
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().map(str::to_string).collect()
    }

    fn get(&self, name: &str) -> PyResult<PyTensor> {
        Ok(self.inner.get(name).map_err(py_err)?.clone().into())
    }

    fn set(&mut self, name: &str, tensor: &PyTensor) {
        self.inner.insert(name, tensor.inner.clone());
    }

    fn graph(&self) -> PyResult<PyGraph> {
        let inner = self.inner.graph().map_err(py_err)?;
        Ok(PyGraph { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Repeats a 2D `(O, I, kH, kW)` kernel `n` times along time and divides by `n`.
#[pyfunction]
fn inflate_kernel(kernel: &PyTensor, n: usize) -> PyResult<PyTensor> {
    Ok(inflate::inflate_kernel(&kernel.inner, n)
        .map_err(py_err)?
        .into())
}

/// A `(1, C, T, H, W)` clip of `t` copies of a `(C, H, W)` image.
#[pyfunction]
fn make_boring_video(image: &PyTensor, t: usize) -> PyResult<PyTensor> {
    Ok(inflate::make_boring_video(&image.inner, t)
        .map_err(py_err)?
        .into())
}

/// Inflates a 2D checkpoint with the i3d rule (or the degenerate rule,
/// which keeps every kernel one frame deep).
#[pyfunction]
#[pyo3(name = "inflate", signature = (ckpt2d, frames=64, degenerate=false))]
fn inflate_checkpoint(
    ckpt2d: &PyCheckpoint,
    frames: usize,
    degenerate: bool,
) -> PyResult<PyCheckpoint> {
    let g2 = ckpt2d.inner.graph().map_err(py_err)?;
    let rule = if degenerate {
        InflationRule::degenerate(frames)
    } else {
        InflationRule::i3d(frames)
    };
    let (g3, mut w3) = inflate::inflate_graph(&g2, &ckpt2d.inner, &rule).map_err(py_err)?;
    w3.set_graph(&g3);
    Ok(PyCheckpoint { inner: w3 })
}

/// Compares the 2D network on `image` with the 3D one on a boring video.
/// Returns `(passed, max_deviation, table)`.
#[pyfunction]
#[pyo3(signature = (ckpt2d, ckpt3d, image, frames=None, tol=inflate::DEFAULT_TOLERANCE))]
fn verify_fixed_point(
    ckpt2d: &PyCheckpoint,
    ckpt3d: &PyCheckpoint,
    image: &PyTensor,
    frames: Option<usize>,
    tol: f32,
) -> PyResult<(bool, f32, String)> {
    let g2 = ckpt2d.inner.graph().map_err(py_err)?;
    let g3 = ckpt3d.inner.graph().map_err(py_err)?;
    let frames = match frames {
        Some(f) => f,
        None => inflate::default_check_frames(&g3, &g3.nodes[g3.output].id).map_err(py_err)?,
    };
    let report = inflate::verify_fixed_point(
        &g2,
        &ckpt2d.inner,
        &g3,
        &ckpt3d.inner,
        &image.inner,
        frames,
        tol,
    )
    .map_err(py_err)?;
    Ok((report.passed(), report.max_deviation(), report.to_table()))
}

/// Seconds of video covered by `frames` inputs sampled every `stride` frames.
#[pyfunction]
#[pyo3(signature = (frames, stride=1, fps=25.0))]
fn temporal_footprint(frames: usize, stride: usize, fps: f64) -> f64 {
    graph::temporal_footprint(frames, stride, fps)
}

fn flow_pair(f: FlowField) -> (PyTensor, PyTensor) {
    let plane = |d: Vec<f32>| {
        PyTensor::from(inflate3d_core::Tensor::new(vec![f.height, f.width], d).unwrap())
    };
    (plane(f.u.clone()), plane(f.v.clone()))
}

/// TV-L1 flow between grayscale `(H, W)` frames in `[0, 1]`; returns `(u, v)`.
#[pyfunction]
#[pyo3(signature = (a, b, warps=None))]
fn tvl1(a: &PyTensor, b: &PyTensor, warps: Option<usize>) -> PyResult<(PyTensor, PyTensor)> {
    let mut params = TvL1Params::default();
    if let Some(w) = warps {
        params.warps = w;
    }
    Ok(flow_pair(
        flow::tvl1(&a.inner, &b.inner, &params).map_err(py_err)?,
    ))
}

#[pyfunction]
fn write_flo(path: &str, u: &PyTensor, v: &PyTensor) -> PyResult<()> {
    let &[height, width] = u.inner.shape() else {
        return Err(PyValueError::new_err("flow planes must be (H, W)"));
    };
    if v.inner.shape() != u.inner.shape() {
        return Err(PyValueError::new_err("u and v differ in shape"));
    }
    let f = FlowField {
        width,
        height,
        u: u.inner.data().to_vec(),
        v: v.inner.data().to_vec(),
    };
    flow::write_flo(path, &f).map_err(py_err)
}

#[pyfunction]
fn read_flo(path: &str) -> PyResult<(PyTensor, PyTensor)> {
    Ok(flow_pair(flow::read_flo(path).map_err(py_err)?))
}

#[pymodule]
pub fn inflate3d(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(inflate_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(make_boring_video, m)?)?;
    m.add_function(wrap_pyfunction!(inflate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(verify_fixed_point, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_footprint, m)?)?;
    m.add_function(wrap_pyfunction!(tvl1, m)?)?;
    m.add_function(wrap_pyfunction!(write_flo, m)?)?;
    m.add_function(wrap_pyfunction!(read_flo, m)?)?;
    Ok(())
}
