//! Python module `highfield`.
//!
//! Arrays cross the boundary as flat lists of floats; eigenvectors and
//! fields are row-major over the `n x n` grid.

use std::path::PathBuf;

use highfield::cli::{self, Command, FieldData};
use highfield::dynamics::{self, AmplitudeSpec, Propagator, StudySetup, ZGrid};
use highfield::perturbation::{self, coupling_matrix, rs_coefficients, Projection, ReducedResolvent};
use highfield::{
    assemble_fiber_h, assemble_h, eval_confining_potential, lowest_eigenpairs, make_model, AzimuthalProfile, Branch,
    EigenMethod, Error, Grid2D, ModelParams, SpectralData, Stencil, SymOp, TailSpec,
};
use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Parse { .. } | Error::InvalidInput(_) | Error::DimensionMismatch { .. } | Error::AssumptionViolated { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_branch(s: &str) -> PyResult<Branch> {
    match s {
        "regular" => Ok(Branch::Regular),
        "singular" => Ok(Branch::Singular),
        _ => Err(PyValueError::new_err(format!("unknown branch {s:?}"))),
    }
}

fn parse_command(s: &str) -> PyResult<Command> {
    Ok(match s {
        "spectrum" => Command::Spectrum,
        "coeffs" => Command::Coeffs,
        "evolve" => Command::Evolve,
        "converge" => Command::Converge,
        "almostinv" => Command::Almostinv,
        "decay" => Command::Decay,
        "general" => Command::General,
        _ => return Err(PyValueError::new_err(format!("unknown command {s:?}"))),
    })
}

/// Model parameters: `alpha`, `epsilon`, cosine coefficients of the angular
/// profile, and an optional tail `(gamma, delta, coeff)`.
#[pyclass(name = "Model", frozen)]
pub struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (alpha, epsilon, theta = vec![1.0], tail = None, p0 = 1.5))]
    fn new(alpha: f64, epsilon: f64, theta: Vec<f64>, tail: Option<(f64, f64, f64)>, p0: f64) -> PyResult<Self> {
        let profile = AzimuthalProfile::cosine_series(&theta).map_err(to_py)?;
        let tail = tail.map(|(g, d, c)| TailSpec::new(g, d, c));
        Ok(PyModel {
            inner: make_model(alpha, profile, epsilon, tail, p0).map_err(to_py)?,
        })
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta()
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon()
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.inner.eta()
    }

    #[getter]
    fn has_tail(&self) -> bool {
        self.inner.tail().is_some()
    }

    fn with_epsilon(&self, epsilon: f64) -> PyResult<Self> {
        Ok(PyModel {
            inner: self.inner.with_epsilon(epsilon).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(alpha={}, epsilon={}, tail={})",
            self.inner.alpha(),
            self.inner.epsilon(),
            self.inner.tail().is_some()
        )
    }
}

/// Uniform square grid on `[-L, L]^2` with `n` nodes per axis.
#[pyclass(name = "Grid", frozen)]
pub struct PyGrid {
    inner: Grid2D,
}

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (half_width, n, stencil = "fourth-order"))]
    fn new(half_width: f64, n: usize, stencil: &str) -> PyResult<Self> {
        let stencil = match stencil {
            "fourth-order" => Stencil::FourthOrder,
            "five-point" => Stencil::FivePoint,
            _ => return Err(PyValueError::new_err(format!("unknown stencil {stencil:?}"))),
        };
        Ok(PyGrid {
            inner: Grid2D::new(half_width, n).map_err(to_py)?.with_stencil(stencil),
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn spacing(&self) -> f64 {
        self.inner.spacing()
    }

    fn coords(&self) -> Vec<f64> {
        (0..self.inner.n()).map(|i| self.inner.coord(i)).collect()
    }
}

/// Discretised fiber Hamiltonian.
#[pyclass(name = "Operator", frozen)]
pub struct PyOperator {
    inner: SymOp,
}

#[pymethods]
impl PyOperator {
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.inner.dim() {
            return Err(to_py(Error::DimensionMismatch {
                expected: self.inner.dim(),
                found: x.len(),
            }));
        }
        Ok(self.inner.apply_vec(&x))
    }

    fn potential(&self) -> Vec<f64> {
        self.inner.potential().to_vec()
    }

    fn quadratic_form(&self, u: Vec<f64>) -> PyResult<f64> {
        if u.len() != self.inner.dim() {
            return Err(PyValueError::new_err("vector length differs from operator dimension"));
        }
        Ok(self.inner.quadratic_form(&u))
    }
}

/// `H^eps(p)` on the grid; `p = 0` gives `H` itself.
#[pyfunction]
#[pyo3(signature = (model, grid, p = 0.0, branch = "regular"))]
fn fiber_operator(model: &PyModel, grid: &PyGrid, p: f64, branch: &str) -> PyResult<PyOperator> {
    Ok(PyOperator {
        inner: assemble_fiber_h(&grid.inner, &model.inner, p, parse_branch(branch)?).map_err(to_py)?,
    })
}

/// Lowest eigenpairs of `H` grouped into clusters.
#[pyclass(name = "Spectrum", frozen)]
pub struct PySpectrum {
    h: SymOp,
    model: ModelParams,
    data: SpectralData,
}

#[pymethods]
impl PySpectrum {
    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.data.eigenvalues().to_vec()
    }

    #[getter]
    fn residuals(&self) -> Vec<f64> {
        self.data.residuals().to_vec()
    }

    /// `(value, multiplicity)` of each cluster.
    fn clusters(&self) -> Vec<(f64, usize)> {
        self.data.clusters().iter().map(|c| (c.value, c.multiplicity())).collect()
    }

    /// Grid-normalized eigenvector `j`.
    fn eigenvector(&self, j: usize) -> PyResult<Vec<f64>> {
        if j >= self.data.len() {
            return Err(PyValueError::new_err(format!("eigenpair {j} out of range")));
        }
        Ok(self.data.eigenvector(j).to_vec())
    }

    /// First- and second-order coefficients of `cluster`, one entry per member.
    fn coefficients<'py>(&self, py: Python<'py>, cluster: usize) -> PyResult<Bound<'py, PyDict>> {
        let res = ReducedResolvent::new(&self.h, &self.data, cluster).map_err(to_py)?;
        let rs = rs_coefficients(&coupling_matrix(&self.data, &self.model), &self.data, cluster, Some(&res)).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("lambda", rs.lambda)?;
        d.set_item("lambda1", rs.lambda1)?;
        d.set_item("lambda2", rs.lambda2)?;
        d.set_item("lambda2_truncated", rs.lambda2_truncated)?;
        Ok(d)
    }

    /// Isolation distance of `cluster` from the rest of the computed spectrum.
    fn gap(&self, cluster: usize) -> PyResult<f64> {
        Ok(self.data.gap_info(cluster).map_err(to_py)?.gap)
    }
}

#[pyfunction]
#[pyo3(signature = (model, grid, k = 6, tol = 1e-10, gap_tol = 1e-6, seed = 0))]
fn eigenpairs(model: &PyModel, grid: &PyGrid, k: usize, tol: f64, gap_tol: f64, seed: u64) -> PyResult<PySpectrum> {
    let h = assemble_h(&grid.inner, &eval_confining_potential(&grid.inner, &model.inner)).map_err(to_py)?;
    let data = lowest_eigenpairs(&h, k, tol, EigenMethod::Auto, seed)
        .and_then(|s| s.group_degenerate(gap_tol))
        .map_err(to_py)?;
    Ok(PySpectrum {
        h,
        model: model.inner.clone(),
        data,
    })
}

/// Error table of the effective dynamics.
#[pyclass(name = "ConvergenceTable", frozen)]
pub struct PyConvergenceTable {
    #[pyo3(get)]
    eps: Vec<f64>,
    #[pyo3(get)]
    times: Vec<f64>,
    /// `errors[i][j]` at `eps[i]`, `times[j]`.
    #[pyo3(get)]
    errors: Vec<Vec<f64>>,
    /// Log-log slope in `eps` per time; NaN when not fittable.
    #[pyo3(get)]
    slopes: Vec<f64>,
    #[pyo3(get)]
    unitarity_defect: f64,
}

#[pyfunction]
#[pyo3(signature = (model, grid, eps, times, cluster = 0, member = 0, branch = "regular",
                    zgrid = (32.0, 256), amplitude = (1.0, 0.5), propagator = "dense"))]
#[allow(clippy::too_many_arguments)]
fn error_study(
    model: &PyModel,
    grid: &PyGrid,
    eps: Vec<f64>,
    times: Vec<f64>,
    cluster: usize,
    member: usize,
    branch: &str,
    zgrid: (f64, usize),
    amplitude: (f64, f64),
    propagator: &str,
) -> PyResult<PyConvergenceTable> {
    let propagator = match propagator {
        "dense" => Propagator::Dense,
        "krylov" => Propagator::Krylov {
            tol: dynamics::KRYLOV_TOL,
            subspace: dynamics::KRYLOV_SUBSPACE,
        },
        "auto" => Propagator::Auto,
        _ => return Err(PyValueError::new_err(format!("unknown propagator {propagator:?}"))),
    };
    let g = &grid.inner;
    let m = &model.inner;
    let table = (|| {
        let h = assemble_h(g, &eval_confining_potential(g, m))?;
        let k = (cluster + 1) * 4;
        let sp = lowest_eigenpairs(&h, k, 1e-10, EigenMethod::Auto, 0)?.group_degenerate(1e-6)?;
        let mode = dynamics::effective_mode(&h, m, &sp, cluster, member)?;
        let setup = StudySetup {
            zgrid: ZGrid::new(zgrid.0, zgrid.1)?,
            amplitude: AmplitudeSpec::new(amplitude.0, amplitude.1)?,
            propagator,
        };
        dynamics::error_study(m, parse_branch(branch).map_err(|e| Error::InvalidInput(e.to_string()))?, &mode, &setup, g, &times, &eps)
    })()
    .map_err(to_py)?;
    Ok(PyConvergenceTable {
        eps: table.eps,
        times: table.times,
        errors: table.errors,
        slopes: table.slopes,
        unitarity_defect: table.unitarity_defect,
    })
}

fn columns(rows: Vec<Vec<f64>>, dim: usize) -> PyResult<Array2<f64>> {
    let rank = rows.len();
    if rank == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err(format!("expected a non-empty list of length-{dim} vectors")));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((rank, dim), flat).expect("checked shape").reversed_axes())
}

/// Unitary `U` with `U P U^* = Q` for the projections onto the spans of two
/// lists of vectors. Returns its defects and `|P - Q|`.
#[pyfunction]
fn intertwiner<'py>(py: Python<'py>, p_vectors: Vec<Vec<f64>>, q_vectors: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let dim = p_vectors.first().map_or(0, Vec::len);
    let p = Projection::onto(&columns(p_vectors, dim)?);
    let q = Projection::onto(&columns(q_vectors, dim)?);
    let d = PyDict::new(py);
    let dist = p.distance(&q).map_err(to_py)?;
    let u = perturbation::sz_nagy_intertwiner(&p, &q).map_err(to_py)?;
    d.set_item("distance", dist)?;
    d.set_item("unitarity_defect", u.unitarity_defect().map_err(to_py)?)?;
    d.set_item("intertwining_residual", u.intertwining_residual().map_err(to_py)?)?;
    d.set_item("distance_from_identity", u.distance_from_identity().map_err(to_py)?)?;
    Ok(d)
}

type RunOutcome = (i32, Vec<String>, Vec<String>, Vec<String>);

/// Runs a scenario (TOML text) and returns `(exit_code, summary, failed, files)`.
#[pyfunction]
#[pyo3(signature = (config, command, out_dir, seed = 0))]
fn run_scenario(config: &str, command: &str, out_dir: PathBuf, seed: u64) -> PyResult<RunOutcome> {
    let command = parse_command(command)?;
    let result = cli::parse_scenario(config).and_then(|mut plan| {
        plan.command = command;
        plan.out_dir = out_dir;
        plan.seed = seed;
        std::fs::create_dir_all(&plan.out_dir)?;
        cli::run(&plan)
    });
    let code = cli::exit_code(&result);
    match result {
        Ok(r) => Ok((
            code,
            r.summary,
            r.failed,
            r.files.iter().map(|f| f.display().to_string()).collect(),
        )),
        Err(e) => Err(to_py(e)),
    }
}

/// `(header, rows)` of a CSV table.
#[pyfunction]
fn read_table(path: PathBuf) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
    let t = cli::read_table(&path).map_err(to_py)?;
    Ok((t.header, t.rows))
}

/// `(shape, complex, values)`; complex values come back as interleaved `re, im`.
#[pyfunction]
fn read_field(path: PathBuf) -> PyResult<(Vec<usize>, bool, Vec<f64>)> {
    let (h, data) = cli::read_field(&path).map_err(to_py)?;
    let values = match data {
        FieldData::Real(v) => v,
        FieldData::Complex(v) => v.iter().flat_map(|c| [c.re, c.im]).collect(),
    };
    Ok((h.shape, h.complex, values))
}

#[pymodule]
#[pyo3(name = "highfield")]
pub fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyOperator>()?;
    m.add_class::<PySpectrum>()?;
    m.add_class::<PyConvergenceTable>()?;
    m.add_function(wrap_pyfunction!(fiber_operator, m)?)?;
    m.add_function(wrap_pyfunction!(eigenpairs, m)?)?;
    m.add_function(wrap_pyfunction!(error_study, m)?)?;
    m.add_function(wrap_pyfunction!(intertwiner, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(read_table, m)?)?;
    m.add_function(wrap_pyfunction!(read_field, m)?)?;
    Ok(())
}
