//! Simulation data: a frozen catalog of standardized non-Gaussian sources,
//! mixing matrices with a controlled condition number, and seeded trial
//! runners for the four simulation models.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::GpKernel;
use crate::measures::MeasureKind;
use crate::metrics::md_index;
use crate::optimizer::{estimate_ica, InitStrategy, OptimizerConfig, Scheme};

#[derive(Debug, Clone, Copy)]
enum Law {
    StudentT(f64),
    Uniform,
    Laplace,
    Exponential,
    // (weight, mean, sd) triples of a Gaussian mixture
    Mixture(&'static [(f64, f64, f64)]),
}

impl Law {
    fn mean(&self) -> f64 {
        match *self {
            Law::StudentT(_) | Law::Laplace => 0.0,
            Law::Uniform => 0.5,
            Law::Exponential => 1.0,
            Law::Mixture(parts) => parts.iter().map(|(w, m, _)| w * m).sum(),
        }
    }

    fn variance(&self) -> f64 {
        match *self {
            Law::StudentT(df) => df / (df - 2.0),
            Law::Uniform => 1.0 / 12.0,
            Law::Laplace => 2.0,
            Law::Exponential => 1.0,
            Law::Mixture(parts) => {
                let second: f64 = parts.iter().map(|(w, m, s)| w * (s * s + m * m)).sum();
                second - self.mean().powi(2)
            }
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Law::StudentT(df) => StudentT::new(df).expect("positive df").sample(rng),
            Law::Uniform => rng.random::<f64>(),
            Law::Laplace => {
                let e: f64 = Exp1.sample(rng);
                if rng.random_bool(0.5) {
                    e
                } else {
                    -e
                }
            }
            Law::Exponential => Exp1.sample(rng),
            Law::Mixture(parts) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = parts[parts.len() - 1];
                for &part in parts {
                    acc += part.0;
                    if u < acc {
                        chosen = part;
                        break;
                    }
                }
                let z: f64 = StandardNormal.sample(rng);
                chosen.1 + chosen.2 * z
            }
        }
    }
}

const CATALOG: [(&str, Law); 18] = [
    ("t3", Law::StudentT(3.0)),
    ("t5", Law::StudentT(5.0)),
    ("uniform", Law::Uniform),
    ("laplace", Law::Laplace),
    ("exponential", Law::Exponential),
    ("bimodal-separated", Law::Mixture(&[(0.5, -2.0, 0.5), (0.5, 2.0, 0.5)])),
    ("bimodal", Law::Mixture(&[(0.5, -1.0, 0.5), (0.5, 1.0, 0.5)])),
    ("bimodal-weak", Law::Mixture(&[(0.5, -1.0, 0.8), (0.5, 1.0, 0.8)])),
    ("skewed-separated", Law::Mixture(&[(0.3, -2.0, 0.5), (0.7, 1.0, 0.5)])),
    ("skewed-bimodal", Law::Mixture(&[(0.25, -1.5, 0.6), (0.75, 0.5, 0.6)])),
    ("skewed-weak", Law::Mixture(&[(0.2, -1.0, 0.7), (0.8, 0.25, 0.7)])),
    ("trimodal", Law::Mixture(&[(1.0 / 3.0, -2.0, 0.5), (1.0 / 3.0, 0.0, 0.5), (1.0 / 3.0, 2.0, 0.5)])),
    ("trimodal-center", Law::Mixture(&[(0.25, -2.0, 0.7), (0.5, 0.0, 0.7), (0.25, 2.0, 0.7)])),
    ("trimodal-skewed", Law::Mixture(&[(0.5, -1.5, 0.5), (0.3, 0.5, 0.5), (0.2, 2.5, 0.5)])),
    ("trimodal-wide", Law::Mixture(&[(0.6, 0.0, 0.8), (0.3, 2.0, 0.8), (0.1, 5.0, 0.8)])),
    ("outlier-mixture", Law::Mixture(&[(0.9, 0.0, 1.0), (0.1, 0.0, 3.0)])),
    ("peaked-mixture", Law::Mixture(&[(0.5, 0.0, 0.5), (0.5, 0.0, 1.5)])),
    ("skewed-scale", Law::Mixture(&[(0.7, -0.3, 0.5), (0.3, 0.7, 1.5)])),
];

/// One of the 18 catalog distributions, standardized to mean 0 and variance 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceSpec {
    /// Catalog number, 1 to 18.
    index: usize,
}

impl SourceSpec {
    pub const COUNT: usize = CATALOG.len();

    pub fn new(index: usize) -> Result<Self> {
        if (1..=Self::COUNT).contains(&index) {
            Ok(Self { index })
        } else {
            Err(Error::UnknownSource(index.to_string()))
        }
    }

    pub fn catalog() -> impl Iterator<Item = SourceSpec> {
        (1..=Self::COUNT).map(|index| SourceSpec { index })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn name(&self) -> &'static str {
        CATALOG[self.index - 1].0
    }

    fn law(&self) -> Law {
        CATALOG[self.index - 1].1
    }

    /// Standardized support bound, if finite.
    pub fn bounded_support(&self) -> Option<(f64, f64)> {
        match self.law() {
            Law::Uniform => Some((-3f64.sqrt(), 3f64.sqrt())),
            _ => None,
        }
    }
}

impl fmt::Display for SourceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceSpec {
    type Err = Error;

    /// Accepts a catalog number or name.
    fn from_str(s: &str) -> Result<Self> {
        if let Ok(i) = s.parse::<usize>() {
            return Self::new(i);
        }
        CATALOG
            .iter()
            .position(|(name, _)| name.eq_ignore_ascii_case(s))
            .map(|i| SourceSpec { index: i + 1 })
            .ok_or_else(|| Error::UnknownSource(s.to_string()))
    }
}

/// `n` i.i.d. draws of `spec`, standardized with its analytic moments.
pub fn sample_source(spec: SourceSpec, n: usize, seed: u64) -> Result<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_source_with(spec, n, &mut rng)
}

pub fn sample_source_with<R: Rng>(spec: SourceSpec, n: usize, rng: &mut R) -> Result<DVector<f64>> {
    if n == 0 {
        return Err(Error::InsufficientSample { n, min: 1 });
    }
    let law = spec.law();
    let (mean, sd) = (law.mean(), law.variance().sqrt());
    Ok(DVector::from_fn(n, |_, _| (law.draw(rng) - mean) / sd))
}

/// Random `d × d` matrix with condition number in `[cond_lo, cond_hi]`.
///
/// The singular vectors of a Gaussian matrix are kept and the singular values
/// replaced by a linear grid from `c` to 1, `c ~ U[1/cond_hi, 1/cond_lo]`.
pub fn random_mixing(d: usize, cond_lo: f64, cond_hi: f64, seed: u64) -> Result<DMatrix<f64>> {
    if d < 2 {
        return Err(Error::Shape(format!("mixing matrix needs d >= 2, got {d}")));
    }
    if !(cond_lo >= 1.0 && cond_lo <= cond_hi && cond_hi.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "condition range [{cond_lo}, {cond_hi}] must satisfy 1 <= lo <= hi"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let svd = g.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
    let (lo, hi) = (1.0 / cond_hi, 1.0 / cond_lo);
    let c = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let s = DVector::from_fn(d, |i, _| c + (1.0 - c) * i as f64 / (d - 1) as f64);
    Ok(u * DMatrix::from_diagonal(&s) * v_t)
}

/// Simulation models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    /// All components from one catalog distribution.
    DifferentDistributions,
    /// As above, with the dimension as the varied factor.
    DifferentDimensions,
    /// Each component from its own catalog distribution.
    DifferentInits,
    /// `Y₁ = X₁`, `Y₂ = X₂²`: no linear mixing explains the data.
    Misspecified,
}

impl Model {
    pub fn number(&self) -> u8 {
        match self {
            Model::DifferentDistributions => 1,
            Model::DifferentDimensions => 2,
            Model::DifferentInits => 3,
            Model::Misspecified => 4,
        }
    }

    pub fn from_number(k: u8) -> Result<Self> {
        match k {
            1 => Ok(Model::DifferentDistributions),
            2 => Ok(Model::DifferentDimensions),
            3 => Ok(Model::DifferentInits),
            4 => Ok(Model::Misspecified),
            _ => Err(Error::InvalidConfig(format!("unknown model {k} (expected 1 to 4)"))),
        }
    }
}

/// Data-generating setup for [`run_trials`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model: Model,
    pub d: usize,
    pub n: usize,
    /// One entry per component, or a single entry used for all of them. Empty
    /// under the different-inits model means a fresh random draw of `d`
    /// distinct catalog entries per trial.
    pub sources: Vec<SourceSpec>,
    pub cond_lo: f64,
    pub cond_hi: f64,
}

impl ModelSpec {
    pub fn new(model: Model, d: usize, n: usize, sources: Vec<SourceSpec>) -> Self {
        Self { model, d, n, sources, cond_lo: 1.0, cond_hi: 2.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model == Model::Misspecified && self.d != 2 {
            return Err(Error::InvalidConfig("the misspecified model has d = 2".into()));
        }
        if self.d < 2 {
            return Err(Error::InvalidConfig(format!("d must be at least 2, got {}", self.d)));
        }
        if self.n <= self.d {
            return Err(Error::InsufficientSample { n: self.n, min: self.d + 1 });
        }
        let k = self.sources.len();
        let random_ok = k == 0 && self.model == Model::DifferentInits;
        if !(random_ok || k == 1 || k == self.d) {
            return Err(Error::InvalidConfig(format!("{k} sources for d = {}", self.d)));
        }
        Ok(())
    }

    fn sources_for<R: Rng>(&self, rng: &mut R) -> Vec<SourceSpec> {
        match self.sources.len() {
            0 => rand::seq::index::sample(rng, SourceSpec::COUNT, self.d)
                .into_iter()
                .map(|i| SourceSpec { index: i + 1 })
                .collect(),
            1 => vec![self.sources[0]; self.d],
            _ => self.sources.clone(),
        }
    }
}

/// A named optimizer configuration such as `sym` or `asy-def@lhs+bo`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    pub label: String,
    pub config: OptimizerConfig,
}

impl Estimator {
    pub const BASE_LABELS: [&'static str; 5] = ["asy-def", "asy-par", "sym", "com", "hsic"];
    pub const INIT_SUFFIXES: [&'static str; 5] = ["identity", "single", "lhs", "lhs+bo", "lhs+bo-matern52"];

    /// Parses `base[@init]`; the default initialization is `lhs`.
    pub fn from_label(label: &str) -> Result<Self> {
        let (base, init) = match label.split_once('@') {
            Some((b, i)) => (b, i),
            None => (label, "lhs"),
        };
        let unknown = || {
            Error::InvalidConfig(format!(
                "unknown estimator {label:?}; valid labels are {} optionally followed by @{}",
                Self::BASE_LABELS.join(", "),
                Self::INIT_SUFFIXES.join("|@")
            ))
        };
        let (scheme, measure) = match base {
            "asy-def" => (Scheme::Deflation, MeasureKind::Asym),
            "asy-par" => (Scheme::Parallel, MeasureKind::Asym),
            "sym" => (Scheme::Parallel, MeasureKind::Sym),
            "com" => (Scheme::Parallel, MeasureKind::Comp),
            "hsic" => (Scheme::Parallel, MeasureKind::hsic_median()),
            _ => return Err(unknown()),
        };
        let (init, kernel) = match init {
            "lhs+bo-matern52" => (InitStrategy::LhsBo, GpKernel::Matern52),
            other => (other.parse::<InitStrategy>().map_err(|_| unknown())?, GpKernel::Exp),
        };
        let config = OptimizerConfig { scheme, measure, init, bo_kernel: kernel, ..Default::default() };
        Ok(Self { label: label.to_string(), config })
    }
}

/// `(R_n, S_n, Q*_n)` of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureTriple {
    pub asym: f64,
    pub sym: f64,
    pub comp: f64,
}

impl MeasureTriple {
    pub fn of(x: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            asym: MeasureKind::Asym.evaluate_matrix(x)?,
            sym: MeasureKind::Sym.evaluate_matrix(x)?,
            comp: MeasureKind::Comp.evaluate_matrix(x)?,
        })
    }
}

/// Outcome of one estimator on one simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub model: Model,
    pub estimator: String,
    pub trial: usize,
    /// Seed of the simulated data.
    pub data_seed: u64,
    /// Seed handed to the optimizer.
    pub seed: u64,
    pub sources: Vec<String>,
    /// Not defined for the misspecified model.
    pub md: Option<f64>,
    pub objective: Option<f64>,
    pub init_objective: Option<f64>,
    pub evaluations: Option<usize>,
    pub wall_time: f64,
    pub measures_before: Option<MeasureTriple>,
    pub measures_after: Option<MeasureTriple>,
    pub error: Option<String>,
}

// Independent 64-bit seed for (stream, index) under a master seed.
fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.set_word_pos(2 * index as u128);
    rng.random()
}

struct TrialData {
    y: DMatrix<f64>,
    mixing: Option<DMatrix<f64>>,
    sources: Vec<SourceSpec>,
}

fn simulate(spec: &ModelSpec, seed: u64) -> Result<TrialData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = spec.sources_for(&mut rng);
    let mut x = DMatrix::zeros(spec.n, spec.d);
    for (j, &s) in sources.iter().enumerate() {
        x.set_column(j, &sample_source_with(s, spec.n, &mut rng)?);
    }
    if spec.model == Model::Misspecified {
        let mut y = x.clone();
        y.column_mut(1).apply(|v| *v = *v * *v);
        return Ok(TrialData { y, mixing: None, sources });
    }
    let m = random_mixing(spec.d, spec.cond_lo, spec.cond_hi, rng.random())?;
    let y = &x * m.transpose();
    Ok(TrialData { y, mixing: Some(m), sources })
}

fn run_one(
    spec: &ModelSpec,
    data: &TrialData,
    estimator: &Estimator,
    trial: usize,
    data_seed: u64,
    seed: u64,
) -> TrialRecord {
    let mut record = TrialRecord {
        model: spec.model,
        estimator: estimator.label.clone(),
        trial,
        data_seed,
        seed,
        sources: data.sources.iter().map(|s| s.name().to_string()).collect(),
        md: None,
        objective: None,
        init_objective: None,
        evaluations: None,
        wall_time: 0.0,
        measures_before: None,
        measures_after: None,
        error: None,
    };
    let config = OptimizerConfig { seed, ..estimator.config.clone() };
    let start = Instant::now();
    let outcome = estimate_ica(&data.y, &config).and_then(|res| {
        record.wall_time = start.elapsed().as_secs_f64();
        record.objective = Some(res.objective);
        record.init_objective = Some(res.init_objective);
        record.evaluations = Some(res.evaluations);
        match &data.mixing {
            Some(m) => {
                let w0 = (&res.h * m)
                    .try_inverse()
                    .ok_or_else(|| Error::SingularMatrix("whitened mixing matrix".into()))?;
                record.md = Some(md_index(res.w_hat.matrix(), &w0)?.md);
            }
            None => {
                // the whitened observations are x_hat at W = I
                let z = &res.x_hat * res.w_hat.matrix();
                record.measures_before = Some(MeasureTriple::of(&z)?);
                record.measures_after = Some(MeasureTriple::of(&res.x_hat)?);
            }
        }
        Ok(())
    });
    if let Err(e) = outcome {
        record.wall_time = start.elapsed().as_secs_f64();
        record.error = Some(e.to_string());
    }
    record
}

/// Runs every estimator on `trials` simulated data sets.
///
/// Trial `t` draws its data from a seed derived from `(seed, t)`; all
/// estimators see the same data and the same optimizer seed within a trial.
/// Failures are recorded in [`TrialRecord::error`] without stopping the
/// batch. Records come back ordered by trial, then estimator, for any
/// `jobs`.
pub fn run_trials(
    spec: &ModelSpec,
    estimators: &[Estimator],
    trials: usize,
    seed: u64,
    jobs: usize,
) -> Result<Vec<TrialRecord>> {
    spec.validate()?;
    for e in estimators {
        e.config.validate()?;
    }
    let trial = |t: usize| -> Vec<TrialRecord> {
        let data_seed = derive_seed(seed, 0, t as u64);
        let opt_seed = derive_seed(seed, 1, t as u64);
        match simulate(spec, data_seed) {
            Ok(data) => estimators.iter().map(|e| run_one(spec, &data, e, t, data_seed, opt_seed)).collect(),
            Err(err) => estimators
                .iter()
                .map(|e| TrialRecord {
                    model: spec.model,
                    estimator: e.label.clone(),
                    trial: t,
                    data_seed,
                    seed: opt_seed,
                    sources: Vec::new(),
                    md: None,
                    objective: None,
                    init_objective: None,
                    evaluations: None,
                    wall_time: 0.0,
                    measures_before: None,
                    measures_after: None,
                    error: Some(err.to_string()),
                })
                .collect(),
        }
    };
    let nested: Vec<Vec<TrialRecord>> = if jobs <= 1 {
        (0..trials).map(trial).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| (0..trials).into_par_iter().map(trial).collect())
    };
    Ok(nested.into_iter().flatten().collect())
}

/// Mean and standard error `sd / √k` of the values; the standard error of a
/// single value is 0.
pub fn mean_stderr(values: &[f64]) -> Option<(f64, f64)> {
    let k = values.len();
    if k == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    Some((mean, (var / k as f64).sqrt()))
}

/// Per-estimator summary of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub estimator: String,
    pub trials: usize,
    pub failures: usize,
    pub md: Option<(f64, f64)>,
    pub objective: Option<(f64, f64)>,
    pub wall_time: Option<(f64, f64)>,
}

/// Aggregates in order of first appearance of each estimator.
pub fn aggregate(records: &[TrialRecord]) -> Vec<Aggregate> {
    let mut labels: Vec<&str> = Vec::new();
    for r in records {
        if !labels.contains(&r.estimator.as_str()) {
            labels.push(&r.estimator);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let rows: Vec<&TrialRecord> = records.iter().filter(|r| r.estimator == label).collect();
            let ok: Vec<&&TrialRecord> = rows.iter().filter(|r| r.error.is_none()).collect();
            let md: Vec<f64> = ok.iter().filter_map(|r| r.md).collect();
            let obj: Vec<f64> = ok.iter().filter_map(|r| r.objective).collect();
            let time: Vec<f64> = ok.iter().map(|r| r.wall_time).collect();
            Aggregate {
                estimator: label.to_string(),
                trials: rows.len(),
                failures: rows.len() - ok.len(),
                md: mean_stderr(&md),
                objective: mean_stderr(&obj),
                wall_time: mean_stderr(&time),
            }
        })
        .collect()
}
