//! Python bindings. Images cross the boundary as flat `[h, w, c]` row-major lists
//! of floats on the `[0, 255]` scale together with their shape.

use std::path::PathBuf;

use advtransfer::analysis::{analyze, load_responses, stats};
use advtransfer::nn::read_checkpoint;
use advtransfer::retina::{RetinaParams, RetinaSpec, ViewingGeometry};
use advtransfer::stimuli::{assemble_session, load_pool, SessionTiming};
use advtransfer::Tensor;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: advtransfer::Error) -> PyErr {
    match e {
        advtransfer::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor(data: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Tensor> {
    Tensor::new(vec![shape.0, shape.1, shape.2], data).map_err(to_py)
}

/// `log P(target) - log P(rest)` of the softmax over `logits`.
#[pyfunction]
fn coarse_logit(logits: Vec<f64>, target: Vec<usize>) -> PyResult<f64> {
    advtransfer::coarse::coarse_logit(&logits, &target).map_err(to_py)
}

/// Total softmax probability of the fine classes in `target`.
#[pyfunction]
fn coarse_probability(logits: Vec<f64>, target: Vec<usize>) -> PyResult<f64> {
    advtransfer::coarse::coarse_probability(&logits, &target).map_err(to_py)
}

/// Maps `[0, 255]` linearly onto `[40, 215]`.
#[pyfunction]
fn rescale_to_margin(x: f64) -> f64 {
    advtransfer::stimuli::rescale_to_margin(x)
}

#[pyfunction]
#[pyo3(signature = (viewer_distance_m, image_size_m, image_pixels))]
fn visual_angle_deg(viewer_distance_m: f64, image_size_m: f64, image_pixels: usize) -> f64 {
    ViewingGeometry::new(viewer_distance_m, image_size_m, image_pixels).visual_angle_deg()
}

/// Retinal blur of a square image. Returns the cropped output and its shape.
#[pyfunction]
#[pyo3(signature = (image, shape, viewer_distance_m=0.61, image_size_m=0.1524))]
fn retinal_blur(
    image: Vec<f64>,
    shape: (usize, usize, usize),
    viewer_distance_m: f64,
    image_size_m: f64,
) -> PyResult<(Vec<f64>, (usize, usize, usize))> {
    let spec = RetinaSpec {
        geometry: ViewingGeometry::new(viewer_distance_m, image_size_m, shape.0),
        params: RetinaParams::default(),
    };
    let x = tensor(image, shape)?;
    let out = advtransfer::retina::RetinaLayer::new(&spec)
        .and_then(|l| l.apply(&x))
        .map_err(to_py)?;
    let (h, w, c) = out.hwc().map_err(to_py)?;
    Ok((out.into_data(), (h, w, c)))
}

/// A trained classifier loaded from a checkpoint.
#[pyclass(frozen)]
struct Model {
    inner: advtransfer::nn::Model,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_checkpoint(&path).map_err(to_py)?.model,
        })
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn has_retina(&self) -> bool {
        self.inner.retina().is_some()
    }

    /// Fine-class logits.
    fn forward(&self, py: Python<'_>, image: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Vec<f64>> {
        let x = tensor(image, shape)?;
        py.detach(|| self.inner.forward(&x)).map_err(to_py)
    }

    /// Gradient of the coarse logit for `target` with respect to the image.
    fn coarse_logit_gradient(
        &self,
        py: Python<'_>,
        image: Vec<f64>,
        shape: (usize, usize, usize),
        target: Vec<usize>,
    ) -> PyResult<(f64, Vec<f64>)> {
        let x = tensor(image, shape)?;
        py.detach(|| {
            let logits = self.inner.forward(&x)?;
            let (z, dz) = advtransfer::coarse::coarse_logit_grad(&logits, &target)?;
            Ok((z, self.inner.logits_vjp(&x, &dz)?.into_data()))
        })
        .map_err(to_py)
    }
}

/// Writes a synthetic dataset; returns the number of images.
#[pyfunction]
#[pyo3(signature = (out_dir, per_label, size=64, seed=0))]
fn write_synthetic_dataset(out_dir: PathBuf, per_label: usize, size: usize, seed: u64) -> PyResult<usize> {
    let data = advtransfer::data::synthetic_dataset(per_label, size, seed);
    data.write(&out_dir).map_err(to_py)?;
    Ok(data.dataset.items.len())
}

/// `(t, df, p)` of a two-tailed one-sample t-test against `mu`.
#[pyfunction]
fn one_sample_t(xs: Vec<f64>, mu: f64) -> PyResult<(f64, f64, f64)> {
    let t = stats::one_sample_t(&xs, mu).map_err(to_py)?;
    Ok((t.t, t.df, t.p))
}

/// `(t, df, p)` of a pooled-variance two-sample t-test.
#[pyfunction]
fn two_sample_t(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let t = stats::two_sample_t(&a, &b).map_err(to_py)?;
    Ok((t.t, t.df, t.p))
}

/// `(F, df_between, df_within, p)`.
#[pyfunction]
fn one_way_anova(groups: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64, f64)> {
    let a = stats::one_way_anova(&groups).map_err(to_py)?;
    Ok((a.f, a.df_between, a.df_within, a.p))
}

/// `(r, p)` with a two-tailed p-value.
#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = stats::pearson_correlation(&x, &y).map_err(to_py)?;
    Ok((r.r, r.p))
}

/// Session manifest JSON for `group` built from the pool in `pool_dir`.
#[pyfunction]
fn assemble(pool_dir: PathBuf, group: &str, classes: (String, String), n: usize, seed: u64) -> PyResult<String> {
    let pool = load_pool(&pool_dir).map_err(to_py)?;
    let m = assemble_session(&pool, group, &[classes.0, classes.1], n, seed, &SessionTiming::default())
        .map_err(to_py)?;
    Ok(serde_json::to_string(&m).expect("manifest serializes"))
}

/// Analysis report JSON for a response log file or directory.
#[pyfunction]
fn analyze_responses(path: PathBuf) -> PyResult<String> {
    let records = load_responses(&path).map_err(to_py)?;
    Ok(serde_json::to_string(&analyze(&records)).expect("report serializes"))
}

#[pymodule]
fn advtransfer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(coarse_logit, m)?)?;
    m.add_function(wrap_pyfunction!(coarse_probability, m)?)?;
    m.add_function(wrap_pyfunction!(rescale_to_margin, m)?)?;
    m.add_function(wrap_pyfunction!(visual_angle_deg, m)?)?;
    m.add_function(wrap_pyfunction!(retinal_blur, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(one_sample_t, m)?)?;
    m.add_function(wrap_pyfunction!(two_sample_t, m)?)?;
    m.add_function(wrap_pyfunction!(one_way_anova, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(assemble, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_responses, m)?)?;
    Ok(())
}
