//! Angle estimation: minimize a dependence measure of `Z·W(θ)ᵀ` over the
//! rotation angles, either jointly (parallel) or one block at a time
//! (deflation), and assemble the full ICA result.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{bayes_opt, best_candidate, lhs_sample_with, CandidateSet, GpKernel};
use crate::measures::{dcov_sq, GroupedSample, MeasureKind};
use crate::rotation::{
    block_range, rotation_from_angles, rotation_from_raw, wrap_angles, AngleVector, RotationMatrix,
};
use crate::whitening::whiten;

/// Maximum number of step halvings per line search.
pub const LINE_SEARCH_MAX: usize = 40;
const ARMIJO: f64 = 1e-4;
// largest single-coordinate move per step, radians
const MAX_STEP: f64 = 1.0;
const STEP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    Deflation,
    Parallel,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "def" | "deflation" => Ok(Scheme::Deflation),
            "par" | "parallel" => Ok(Scheme::Parallel),
            other => Err(Error::InvalidConfig(format!("unknown scheme {other:?}"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Deflation => "def",
            Scheme::Parallel => "par",
        })
    }
}

/// How the starting angles are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitStrategy {
    /// `θ = 0`, i.e. `W = I`.
    Identity,
    /// One uniform Latin hypercube point.
    Single,
    /// Best of `lhs_points` Latin hypercube points.
    Lhs,
    /// Best of the Latin hypercube points plus `bo_iters` BO evaluations.
    LhsBo,
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "zero" => Ok(InitStrategy::Identity),
            "single" => Ok(InitStrategy::Single),
            "lhs" => Ok(InitStrategy::Lhs),
            "lhs+bo" | "lhs_bo" | "lhsbo" => Ok(InitStrategy::LhsBo),
            other => Err(Error::InvalidConfig(format!("unknown init strategy {other:?}"))),
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitStrategy::Identity => "identity",
            InitStrategy::Single => "single",
            InitStrategy::Lhs => "lhs",
            InitStrategy::LhsBo => "lhs+bo",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub scheme: Scheme,
    pub measure: MeasureKind,
    pub init: InitStrategy,
    /// `None` means `10·d`.
    pub lhs_points: Option<usize>,
    /// `None` means `10·d`.
    pub bo_iters: Option<usize>,
    pub bo_kernel: GpKernel,
    /// Relative finite-difference step: `h = grad_step·(1 + |θ_k|)`.
    pub grad_step: f64,
    pub tol_grad: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Deflation stage `i` minimizes only `V²(X_i, X_{i+1..d})` instead of the
    /// full measure.
    pub deflation_single_term: bool,
    pub record_trace: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Parallel,
            measure: MeasureKind::Sym,
            init: InitStrategy::Lhs,
            lhs_points: None,
            bo_iters: None,
            bo_kernel: GpKernel::Exp,
            grad_step: 1e-6,
            tol_grad: 1e-8,
            max_iters: 200,
            seed: 0,
            deflation_single_term: false,
            record_trace: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        positive("grad_step", self.grad_step)?;
        positive("tol_grad", self.tol_grad)?;
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be positive".into()));
        }
        if self.lhs_points == Some(0) || self.bo_iters == Some(0) {
            return Err(Error::InvalidConfig("lhs_points and bo_iters must be positive".into()));
        }
        if self.scheme == Scheme::Deflation && self.measure != MeasureKind::Asym {
            return Err(Error::InvalidConfig(format!(
                "the deflation scheme requires the asym measure, got {}",
                self.measure
            )));
        }
        self.measure.validate()
    }

    pub fn lhs_points_for(&self, dim: usize) -> usize {
        self.lhs_points.unwrap_or(10 * dim)
    }

    pub fn bo_iters_for(&self, dim: usize) -> usize {
        self.bo_iters.unwrap_or(10 * dim)
    }
}

/// Output of [`local_minimize`].
#[derive(Debug, Clone)]
pub struct LocalResult {
    pub theta: AngleVector,
    pub value: f64,
    pub evaluations: usize,
    pub iterations: usize,
    pub trace: Vec<f64>,
}

/// Quasi-Newton (BFGS) descent with central finite-difference gradients.
///
/// `objective` receives raw angles; iterates move freely in `ℝ^p` and the
/// result is mapped back into the support box with [`wrap_angles`], which
/// leaves `W(θ)` unchanged. With `free_block = Some(i)` only the angles of
/// block `i` move. Stops when the gradient max-norm drops below
/// `config.tol_grad`, after `config.max_iters` iterations, or when no descent
/// step can be found.
pub fn local_minimize<F>(
    mut objective: F,
    theta0: &AngleVector,
    config: &OptimizerConfig,
    free_block: Option<usize>,
) -> Result<LocalResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = theta0.dim();
    let free: Vec<usize> = match free_block {
        Some(b) if b + 1 < dim => block_range(dim, b).collect(),
        Some(b) => return Err(Error::InvalidConfig(format!("block {b} out of range for d = {dim}"))),
        None => (0..theta0.len()).collect(),
    };
    let m = free.len();
    let mut evaluations = 0usize;
    let mut eval = |x: &[f64]| -> Result<f64> {
        evaluations += 1;
        let v = objective(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteObjective { theta: x.to_vec() })
        }
    };

    let mut x = theta0.as_slice().to_vec();
    let f0 = eval(&x)?;
    let mut f = f0;
    let mut trace = Vec::new();
    if config.record_trace {
        trace.push(f);
    }
    let mut g = fd_gradient(&mut eval, &mut x, &free, config.grad_step)?;
    let mut hinv = DMatrix::<f64>::identity(m, m);
    let mut fresh = true;
    let mut iterations = 0;

    while max_abs(&g) >= config.tol_grad && iterations < config.max_iters {
        iterations += 1;
        let gv = DVector::from_column_slice(&g);
        let mut dir = -(&hinv * &gv);
        if dir.dot(&gv) >= 0.0 {
            hinv.fill_with_identity();
            fresh = true;
            dir = -gv.clone();
        }
        let biggest = dir.amax();
        if biggest > MAX_STEP {
            dir *= MAX_STEP / biggest;
        }
        let slope = dir.dot(&gv);

        let mut t = 1.0;
        let mut accepted = None;
        let mut trial = x.clone();
        for _ in 0..LINE_SEARCH_MAX {
            for (k, &pos) in free.iter().enumerate() {
                trial[pos] = x[pos] + t * dir[k];
            }
            let ft = eval(&trial)?;
            if ft <= f + ARMIJO * t * slope {
                accepted = Some(ft);
                break;
            }
            t *= 0.5;
        }
        let Some(f_new) = accepted else {
            if fresh {
                break;
            }
            hinv.fill_with_identity();
            fresh = true;
            continue;
        };

        let step = dir * t;
        let g_new = fd_gradient(&mut eval, &mut trial, &free, config.grad_step)?;
        let y = DVector::from_column_slice(&g_new) - gv;
        let sy = step.dot(&y);
        if sy > 1e-12 * step.norm() * y.norm() {
            if fresh {
                hinv *= sy / y.dot(&y);
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H+ = H - ρ(s·(Hy)ᵀ + (Hy)·sᵀ) + (ρ²·yᵀHy + ρ)·s·sᵀ
            hinv -= (&step * hy.transpose() + &hy * step.transpose()) * rho;
            hinv += &step * step.transpose() * (rho * rho * yhy + rho);
        }
        x = trial.clone();
        f = f_new;
        g = g_new;
        if config.record_trace {
            trace.push(f);
        }
        if step.amax() < STEP_TOL {
            break;
        }
    }

    let wrapped = wrap_angles(dim, &x);
    let value = if wrapped.as_slice() == x.as_slice() { f } else { eval(wrapped.as_slice())? };
    let (theta, value) = if value <= f0 { (wrapped, value) } else { (theta0.clone(), f0) };
    Ok(LocalResult { theta, value, evaluations, iterations, trace })
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn fd_gradient<E>(eval: &mut E, x: &mut [f64], free: &[usize], rel_step: f64) -> Result<Vec<f64>>
where
    E: FnMut(&[f64]) -> Result<f64>,
{
    let mut g = Vec::with_capacity(free.len());
    for &pos in free {
        let orig = x[pos];
        let h = rel_step * (1.0 + orig.abs());
        x[pos] = orig + h;
        let up = eval(x)?;
        x[pos] = orig - h;
        let down = eval(x)?;
        x[pos] = orig;
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

/// Recovered sources `Z·W(θ)ᵀ` for raw angles.
pub fn rotate_sources(z: &DMatrix<f64>, angles: &[f64]) -> DMatrix<f64> {
    let w = rotation_from_raw(z.ncols(), angles);
    z * w.transpose()
}

/// The map `θ ↦ measure(Z·W(θ)ᵀ)`; errors become `NaN`.
pub fn measure_objective<'a>(z: &'a DMatrix<f64>, measure: &'a MeasureKind) -> impl Fn(&[f64]) -> f64 + 'a {
    move |angles| measure.evaluate_matrix(&rotate_sources(z, angles)).unwrap_or(f64::NAN)
}

/// Result of an estimation run.
#[derive(Debug, Clone, PartialEq)]
pub struct IcaResult {
    pub theta_hat: AngleVector,
    pub w_hat: RotationMatrix,
    /// Whitener; identity when the input was already whitened.
    pub h: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// `Z·Ŵᵀ`.
    pub x_hat: DMatrix<f64>,
    pub objective: f64,
    pub init_objective: f64,
    pub evaluations: usize,
    pub trace: Vec<f64>,
    /// Evaluated starting candidates, when more than one was considered.
    pub candidates: Option<CandidateSet>,
}

impl IcaResult {
    /// Full unmixing map `Ŵ·H` applied to centered observations.
    pub fn unmixing(&self) -> DMatrix<f64> {
        self.w_hat.matrix() * &self.h
    }
}

/// Chosen starting angles.
#[derive(Debug, Clone)]
pub struct InitOutcome {
    pub theta: AngleVector,
    pub value: f64,
    pub evaluations: usize,
    pub candidates: Option<CandidateSet>,
}

/// Picks starting angles for whitened data according to `config.init`.
pub fn initialize(z: &DMatrix<f64>, config: &OptimizerConfig) -> Result<InitOutcome> {
    let dim = z.ncols();
    let objective = measure_objective(z, &config.measure);
    let mut evaluations = 0;
    let mut counted = |t: &AngleVector| {
        evaluations += 1;
        objective(t.as_slice())
    };
    // stream 0: Latin hypercube, stream 1: Bayesian optimization
    let mut lhs_rng = ChaCha8Rng::seed_from_u64(config.seed);
    lhs_rng.set_stream(0);
    let outcome = match config.init {
        InitStrategy::Identity => {
            let theta = AngleVector::zeros(dim);
            let value = counted(&theta);
            if !value.is_finite() {
                return Err(Error::NonFiniteObjective { theta: theta.into_vec() });
            }
            return Ok(InitOutcome { theta, value, evaluations: 1, candidates: None });
        }
        InitStrategy::Single => {
            let pts = lhs_sample_with(1, dim, &mut lhs_rng);
            best_candidate(&mut counted, &pts)?
        }
        InitStrategy::Lhs | InitStrategy::LhsBo => {
            let pts = lhs_sample_with(config.lhs_points_for(dim), dim, &mut lhs_rng);
            best_candidate(&mut counted, &pts)?
        }
    };
    let mut candidates = outcome.evaluated;
    if config.init == InitStrategy::LhsBo {
        let mut bo_seed = ChaCha8Rng::seed_from_u64(config.seed);
        bo_seed.set_stream(1);
        let seed = rand::Rng::random::<u64>(&mut bo_seed);
        candidates = bayes_opt(&mut counted, &candidates, config.bo_iters_for(dim), config.bo_kernel, seed)?;
    }
    let best = candidates.argmin().expect("nonempty candidate set");
    Ok(InitOutcome {
        theta: candidates.points[best].clone(),
        value: candidates.values[best],
        evaluations,
        candidates: Some(candidates),
    })
}

fn assemble(
    z: &DMatrix<f64>,
    theta: AngleVector,
    objective: f64,
    init: &InitOutcome,
    evaluations: usize,
    trace: Vec<f64>,
) -> IcaResult {
    let w_hat = rotation_from_angles(&theta);
    let x_hat = z * w_hat.matrix().transpose();
    let d = z.ncols();
    IcaResult {
        theta_hat: theta,
        w_hat,
        h: DMatrix::identity(d, d),
        mean: DVector::zeros(d),
        x_hat,
        objective,
        init_objective: init.value,
        evaluations: evaluations + init.evaluations,
        trace,
        candidates: init.candidates.clone(),
    }
}

fn check_whitened_input(z: &DMatrix<f64>) -> Result<()> {
    if z.ncols() < 2 {
        return Err(Error::Shape(format!("need at least 2 components, got {}", z.ncols())));
    }
    if z.nrows() < 2 {
        return Err(Error::InsufficientSample { n: z.nrows(), min: 2 });
    }
    Ok(())
}

/// Joint minimization over all angles of whitened data `z`.
pub fn ica_parallel(z: &DMatrix<f64>, config: &OptimizerConfig) -> Result<IcaResult> {
    config.validate()?;
    check_whitened_input(z)?;
    let init = initialize(z, config)?;
    ica_parallel_from(z, config, init)
}

/// [`ica_parallel`] from a given starting point.
pub fn ica_parallel_from(z: &DMatrix<f64>, config: &OptimizerConfig, init: InitOutcome) -> Result<IcaResult> {
    let objective = measure_objective(z, &config.measure);
    let local = local_minimize(&objective, &init.theta, config, None)?;
    Ok(assemble(z, local.theta, local.value, &init, local.evaluations, local.trace))
}

/// Block-by-block minimization: stage `i` moves only the angles `θ_i`.
pub fn ica_deflation(z: &DMatrix<f64>, config: &OptimizerConfig) -> Result<IcaResult> {
    config.validate()?;
    check_whitened_input(z)?;
    if config.scheme != Scheme::Deflation {
        return Err(Error::InvalidConfig("ica_deflation needs the deflation scheme".into()));
    }
    let init = initialize(z, config)?;
    ica_deflation_from(z, config, init)
}

/// [`ica_deflation`] from a given starting point.
pub fn ica_deflation_from(
    z: &DMatrix<f64>,
    config: &OptimizerConfig,
    init: InitOutcome,
) -> Result<IcaResult> {
    let dim = z.ncols();
    let full = measure_objective(z, &config.measure);
    let mut theta = init.theta.clone();
    let mut value = init.value;
    let mut evaluations = 0;
    let mut trace = Vec::new();
    for stage in 0..dim - 1 {
        let local = if config.deflation_single_term {
            let term = |angles: &[f64]| {
                let x = rotate_sources(z, angles);
                let left = x.columns(stage, 1).into_owned();
                let right = x.columns(stage + 1, dim - stage - 1).into_owned();
                GroupedSample::from_blocks(&[left, right]).and_then(|s| dcov_sq(&s)).unwrap_or(f64::NAN)
            };
            local_minimize(term, &theta, config, Some(stage))?
        } else {
            local_minimize(&full, &theta, config, Some(stage))?
        };
        evaluations += local.evaluations;
        trace.extend(local.trace);
        theta = local.theta;
        value = local.value;
    }
    if config.deflation_single_term {
        value = full(theta.as_slice());
        evaluations += 1;
    }
    Ok(assemble(z, theta, value, &init, evaluations, trace))
}

/// Whitens `y`, initializes, and runs the configured scheme.
///
/// The recovered sources satisfy `x_hat = (y - mean)·Hᵀ·Ŵᵀ`.
pub fn estimate_ica(y: &DMatrix<f64>, config: &OptimizerConfig) -> Result<IcaResult> {
    config.validate()?;
    if y.ncols() < 2 {
        return Err(Error::Shape(format!("need at least 2 components, got {}", y.ncols())));
    }
    let white = whiten(y)?;
    let mut result = match config.scheme {
        Scheme::Parallel => ica_parallel(&white.z, config)?,
        Scheme::Deflation => ica_deflation(&white.z, config)?,
    };
    result.h = white.h;
    result.mean = white.mean;
    Ok(result)
}
