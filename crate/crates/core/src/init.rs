//! Starting points for the local optimizer: Latin hypercube sampling of the
//! angle box and Gaussian-process Bayesian optimization with expected
//! improvement.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::rotation::{angle_period, num_angles, AngleVector};

/// Where a candidate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Lhs,
    Bo,
}

/// Evaluated starting points. All values are finite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    pub points: Vec<AngleVector>,
    pub values: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, point: AngleVector, value: f64, provenance: Provenance) {
        self.points.push(point);
        self.values.push(value);
        self.provenance.push(provenance);
    }

    /// Index of the smallest value, lowest index on ties.
    pub fn argmin(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if best.is_none_or(|b| v < self.values[b]) {
                best = Some(i);
            }
        }
        best
    }

    pub fn min_value(&self) -> Option<f64> {
        self.argmin().map(|i| self.values[i])
    }
}

/// `m` Latin hypercube points over the angle box for dimension `dim`.
///
/// Every coordinate range is cut into `m` equal strata holding exactly one
/// point each, jittered uniformly within its stratum.
pub fn lhs_sample(m: usize, dim: usize, seed: u64) -> Vec<AngleVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lhs_sample_with(m, dim, &mut rng)
}

pub fn lhs_sample_with<R: Rng>(m: usize, dim: usize, rng: &mut R) -> Vec<AngleVector> {
    let p = num_angles(dim);
    let mut coords = vec![vec![0.0; p]; m];
    let mut strata: Vec<usize> = (0..m).collect();
    for pos in 0..p {
        let width = angle_period(dim, pos) / m as f64;
        strata.shuffle(rng);
        for (point, &stratum) in coords.iter_mut().zip(&strata) {
            let u: f64 = rng.random();
            let v = (stratum as f64 + u) * width;
            // guard the open upper end against rounding
            point[pos] = v.min(angle_period(dim, pos) * (1.0 - f64::EPSILON));
        }
    }
    coords.into_iter().map(|c| AngleVector::new(dim, c).expect("LHS point lies in the support box")).collect()
}

/// Result of scanning a candidate list.
#[derive(Debug, Clone)]
pub struct BestCandidate {
    pub theta: AngleVector,
    pub value: f64,
    pub evaluated: CandidateSet,
    /// Indices whose objective was not finite; they are left out of `evaluated`.
    pub skipped: Vec<usize>,
}

/// Evaluates every candidate and returns the minimizer (lowest index on ties).
pub fn best_candidate<F>(mut objective: F, candidates: &[AngleVector]) -> Result<BestCandidate>
where
    F: FnMut(&AngleVector) -> f64,
{
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("empty candidate list".into()));
    }
    let mut evaluated = CandidateSet::default();
    let mut skipped = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let v = objective(c);
        if v.is_finite() {
            evaluated.push(c.clone(), v, Provenance::Lhs);
        } else {
            skipped.push(i);
        }
    }
    let best = evaluated.argmin().ok_or(Error::NoFiniteCandidate)?;
    Ok(BestCandidate {
        theta: evaluated.points[best].clone(),
        value: evaluated.values[best],
        evaluated,
        skipped,
    })
}

/// Covariance family of the surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GpKernel {
    /// Squared exponential.
    Exp,
    Matern52,
}

impl GpKernel {
    /// Covariance at distance `r`.
    pub fn eval(self, r: f64, length_scale: f64, signal_variance: f64) -> f64 {
        match self {
            GpKernel::Exp => signal_variance * (-r * r / (2.0 * length_scale * length_scale)).exp(),
            GpKernel::Matern52 => {
                let a = 5f64.sqrt() * r / length_scale;
                signal_variance * (1.0 + a + a * a / 3.0) * (-a).exp()
            }
        }
    }
}

impl fmt::Display for GpKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GpKernel::Exp => "exp",
            GpKernel::Matern52 => "matern52",
        })
    }
}

impl FromStr for GpKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exp" | "se" => Ok(GpKernel::Exp),
            "matern52" | "matern" => Ok(GpKernel::Matern52),
            other => Err(Error::InvalidConfig(format!("unknown kernel {other:?}"))),
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// A Gaussian-process regression model conditioned on observations.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub kernel: GpKernel,
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub prior_mean: f64,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl GpModel {
    pub fn fit(
        kernel: GpKernel,
        length_scale: f64,
        signal_variance: f64,
        noise_variance: f64,
        prior_mean: f64,
        observations: &CandidateSet,
    ) -> Result<Self> {
        if !(length_scale > 0.0 && signal_variance > 0.0) {
            return Err(Error::InvalidConfig("GP hyperparameters must be positive".into()));
        }
        if !(noise_variance >= 1e-10) {
            return Err(Error::InvalidConfig("GP noise variance must be at least 1e-10".into()));
        }
        let inputs: Vec<Vec<f64>> = observations.points.iter().map(|p| p.as_slice().to_vec()).collect();
        let m = inputs.len();
        let gram = DMatrix::from_fn(m, m, |i, j| {
            let k = kernel.eval(euclidean(&inputs[i], &inputs[j]), length_scale, signal_variance);
            if i == j {
                k + noise_variance
            } else {
                k
            }
        });
        let chol = Cholesky::new(gram)
            .ok_or_else(|| Error::IllConditionedGp(format!("Cholesky failed with {m} points")))?;
        let centered = DVector::from_iterator(m, observations.values.iter().map(|v| v - prior_mean));
        let alpha = chol.solve(&centered);
        Ok(Self {
            kernel,
            length_scale,
            signal_variance,
            noise_variance,
            prior_mean,
            inputs,
            targets: observations.values.clone(),
            chol,
            alpha,
        })
    }

    fn cross_cov(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.inputs.len(),
            self.inputs
                .iter()
                .map(|p| self.kernel.eval(euclidean(p, x), self.length_scale, self.signal_variance)),
        )
    }

    /// Posterior mean and variance of the latent function at `x`.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let k = self.cross_cov(x);
        let mean = self.prior_mean + k.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&k).expect("triangular factor is nonsingular");
        let var = self.signal_variance - v.dot(&v);
        (mean, var.max(0.0))
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let m = self.targets.len() as f64;
        let centered =
            DVector::from_iterator(self.targets.len(), self.targets.iter().map(|v| v - self.prior_mean));
        let log_det: f64 = self.chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * centered.dot(&self.alpha) - 0.5 * log_det - 0.5 * m * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Posterior `(mean, variance)` of `model` at `x`.
pub fn gp_posterior(model: &GpModel, x: &AngleVector) -> (f64, f64) {
    model.posterior(x.as_slice())
}

const LENGTH_SCALES: [f64; 10] = [0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.5, 4.0];
const VARIANCE_FACTORS: [f64; 3] = [0.25, 1.0, 4.0];

/// Refits `(ℓ, σ², prior mean)` by maximizing the marginal likelihood over a
/// fixed grid; noise is pinned at `1e-8 σ²`.
pub fn fit_gp(kernel: GpKernel, observations: &CandidateSet) -> Result<GpModel> {
    let m = observations.len() as f64;
    let mean = observations.values.iter().sum::<f64>() / m;
    let var = observations.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    let base = if var > 0.0 { var } else { mean.abs().max(1e-12) };
    let mut best: Option<(f64, GpModel)> = None;
    let mut last_err = None;
    for &factor in &VARIANCE_FACTORS {
        let sv = base * factor;
        for &ls in &LENGTH_SCALES {
            match GpModel::fit(kernel, ls, sv, (1e-8 * sv).max(1e-10), mean, observations) {
                Ok(model) => {
                    let lml = model.log_marginal_likelihood();
                    if lml.is_finite() && best.as_ref().is_none_or(|(b, _)| lml > *b) {
                        best = Some((lml, model));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
    }
    best.map(|(_, m)| m).ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::IllConditionedGp("no admissible hyperparameters".into()))
    })
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement below `best` for a Gaussian prediction.
pub fn expected_improvement(best: f64, mean: f64, variance: f64) -> f64 {
    let sd = variance.sqrt();
    let gap = best - mean;
    if sd <= 0.0 {
        return gap.max(0.0);
    }
    let z = gap / sd;
    gap * std_normal_cdf(z) + sd * std_normal_pdf(z)
}

/// Runs `iters` rounds of Bayesian optimization starting from `init`.
///
/// Each round refits the surrogate, maximizes expected improvement over a
/// fresh batch of `100·p` Latin hypercube points plus the incumbent, and
/// evaluates the objective at the winner. Returns `init` extended by the new
/// points.
pub fn bayes_opt<F>(
    mut objective: F,
    init: &CandidateSet,
    iters: usize,
    kernel: GpKernel,
    seed: u64,
) -> Result<CandidateSet>
where
    F: FnMut(&AngleVector) -> f64,
{
    let mut set = init.clone();
    if iters == 0 {
        return Ok(set);
    }
    let incumbent = set.argmin().ok_or_else(|| Error::InvalidConfig("empty initial set".into()))?;
    let dim = set.points[incumbent].dim();
    let p = num_angles(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..iters {
        let model = fit_gp(kernel, &set)?;
        let best_idx = set.argmin().expect("nonempty");
        let best = set.values[best_idx];
        let mut pool = lhs_sample_with(100 * p, dim, &mut rng);
        pool.push(set.points[best_idx].clone());
        let mut chosen = 0;
        let mut chosen_ei = f64::NEG_INFINITY;
        for (i, x) in pool.iter().enumerate() {
            let (mu, var) = model.posterior(x.as_slice());
            let ei = expected_improvement(best, mu, var);
            if ei > chosen_ei {
                chosen_ei = ei;
                chosen = i;
            }
        }
        let x = pool.swap_remove(chosen);
        let v = objective(&x);
        if !v.is_finite() {
            return Err(Error::NonFiniteObjective { theta: x.into_vec() });
        }
        set.push(x, v, Provenance::Bo);
    }
    Ok(set)
}
