//! Python bindings for `mdmica`. Matrices cross the boundary as lists of rows.

use mdmica::error::Error;
use mdmica::init::GpKernel;
use mdmica::measures::{Bandwidth, GroupedSample, MeasureKind};
use mdmica::optimizer::{self, InitStrategy, OptimizerConfig, Scheme};
use mdmica::{init, metrics, rotation, simgen, whitening};
use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(pymdmica, MdmicaError, PyException);

type Rows = Vec<Vec<f64>>;

fn err(e: Error) -> PyErr {
    MdmicaError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn to_matrix(rows: &Rows) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if let Some(k) = rows.iter().position(|r| r.len() != p) {
        return Err(err(Error::Shape(format!("row {k} has {} entries, expected {p}", rows[k].len()))));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn measure_kind(name: &str, bandwidth: Option<Vec<f64>>) -> PyResult<MeasureKind> {
    let kind: MeasureKind = parse(name)?;
    Ok(match (kind, bandwidth) {
        (MeasureKind::Hsic(_), Some(bw)) => MeasureKind::Hsic(Bandwidth::Fixed(bw)),
        (kind, _) => kind,
    })
}

/// Centers and whitens `y`; returns `(z, h, mean)` with `z = (y - mean)·h`.
#[pyfunction]
fn whiten(y: Rows) -> PyResult<(Rows, Rows, Vec<f64>)> {
    let w = whitening::whiten(&to_matrix(&y)?).map_err(err)?;
    Ok((to_rows(&w.z), to_rows(&w.h), w.mean.iter().copied().collect()))
}

/// Evaluates a dependence measure (`asym`, `sym`, `comp` or `hsic`) on the
/// columns of `x`. `blocks` groups columns into vector components.
#[pyfunction]
#[pyo3(signature = (x, measure, blocks=None, bandwidth=None))]
fn dependence(
    x: Rows,
    measure: &str,
    blocks: Option<Vec<Vec<usize>>>,
    bandwidth: Option<Vec<f64>>,
) -> PyResult<f64> {
    let x = to_matrix(&x)?;
    let kind = measure_kind(measure, bandwidth)?;
    kind.validate().map_err(err)?;
    let sample = match blocks {
        Some(b) => GroupedSample::new(&x, b).map_err(err)?,
        None => GroupedSample::scalar(&x),
    };
    kind.evaluate(&sample).map_err(err)
}

#[pyfunction]
fn num_angles(d: usize) -> usize {
    rotation::num_angles(d)
}

/// Rotation matrix for angles in lexicographic pair order.
#[pyfunction]
fn rotation_from_angles(d: usize, angles: Vec<f64>) -> PyResult<Rows> {
    let theta = rotation::AngleVector::new(d, angles).map_err(err)?;
    Ok(to_rows(rotation::rotation_from_angles(&theta).matrix()))
}

#[pyfunction]
fn angles_from_rotation(w: Rows) -> PyResult<Vec<f64>> {
    let w = rotation::RotationMatrix::new(to_matrix(&w)?).map_err(err)?;
    Ok(rotation::angles_from_rotation(&w).map_err(err)?.into_vec())
}

#[pyfunction]
fn lhs_sample(m: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    init::lhs_sample(m, d, seed).into_iter().map(|a| a.into_vec()).collect()
}

#[pyclass(frozen, get_all, module = "pymdmica")]
struct IcaResult {
    theta_hat: Vec<f64>,
    w_hat: Rows,
    h: Rows,
    mean: Vec<f64>,
    x_hat: Rows,
    unmixing: Rows,
    objective: f64,
    init_objective: f64,
    evaluations: usize,
}

#[pymethods]
impl IcaResult {
    fn __repr__(&self) -> String {
        format!("IcaResult(objective={:?}, evaluations={})", self.objective, self.evaluations)
    }
}

/// Full pipeline on raw observations `y` (rows are observations).
#[pyfunction]
#[pyo3(signature = (
    y, measure="sym", scheme="parallel", init="lhs", seed=0,
    lhs_points=None, bo_iters=None, kernel="exp", max_iters=200, bandwidth=None,
))]
#[allow(clippy::too_many_arguments)]
fn estimate_ica(
    y: Rows,
    measure: &str,
    scheme: &str,
    init: &str,
    seed: u64,
    lhs_points: Option<usize>,
    bo_iters: Option<usize>,
    kernel: &str,
    max_iters: usize,
    bandwidth: Option<Vec<f64>>,
) -> PyResult<IcaResult> {
    let config = OptimizerConfig {
        scheme: parse::<Scheme>(scheme)?,
        measure: measure_kind(measure, bandwidth)?,
        init: parse::<InitStrategy>(init)?,
        lhs_points,
        bo_iters,
        bo_kernel: parse::<GpKernel>(kernel)?,
        max_iters,
        seed,
        ..Default::default()
    };
    let y = to_matrix(&y)?;
    let res = optimizer::estimate_ica(&y, &config).map_err(err)?;
    Ok(IcaResult {
        theta_hat: res.theta_hat.as_slice().to_vec(),
        w_hat: to_rows(res.w_hat.matrix()),
        h: to_rows(&res.h),
        mean: res.mean.iter().copied().collect(),
        x_hat: to_rows(&res.x_hat),
        unmixing: to_rows(&res.unmixing()),
        objective: res.objective,
        init_objective: res.init_objective,
        evaluations: res.evaluations,
    })
}

/// Returns `(md, permutation, scalings)`.
#[pyfunction]
fn md_index(w_hat: Rows, w0: Rows) -> PyResult<(f64, Vec<usize>, Vec<f64>)> {
    let r = metrics::md_index(&to_matrix(&w_hat)?, &to_matrix(&w0)?).map_err(err)?;
    Ok((r.md, r.permutation, r.scalings))
}

#[pyfunction]
fn random_mixing(d: usize, cond_lo: f64, cond_hi: f64, seed: u64) -> PyResult<Rows> {
    Ok(to_rows(&simgen::random_mixing(d, cond_lo, cond_hi, seed).map_err(err)?))
}

/// Standardized draws from a catalog source, given by name or 1-based number.
#[pyfunction]
fn sample_source(source: &str, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    let spec: simgen::SourceSpec = parse(source)?;
    Ok(simgen::sample_source(spec, n, seed).map_err(err)?.iter().copied().collect())
}

#[pyfunction]
fn source_names() -> Vec<&'static str> {
    simgen::SourceSpec::catalog().map(|s| s.name()).collect()
}

#[pymodule]
fn pymdmica(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MdmicaError", m.py().get_type::<MdmicaError>())?;
    m.add_class::<IcaResult>()?;
    m.add_function(wrap_pyfunction!(whiten, m)?)?;
    m.add_function(wrap_pyfunction!(dependence, m)?)?;
    m.add_function(wrap_pyfunction!(num_angles, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_from_angles, m)?)?;
    m.add_function(wrap_pyfunction!(angles_from_rotation, m)?)?;
    m.add_function(wrap_pyfunction!(lhs_sample, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_ica, m)?)?;
    m.add_function(wrap_pyfunction!(md_index, m)?)?;
    m.add_function(wrap_pyfunction!(random_mixing, m)?)?;
    m.add_function(wrap_pyfunction!(sample_source, m)?)?;
    m.add_function(wrap_pyfunction!(source_names, m)?)?;
    Ok(())
}
