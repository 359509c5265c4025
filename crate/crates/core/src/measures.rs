//! Empirical mutual dependence measures.
//!
//! All statistics are V-statistics over Euclidean distances between rows,
//! accumulated in `O(n²)` time in a fixed summation order so repeated calls
//! agree bitwise. Components may be vector valued: a [`GroupedSample`]
//! partitions the columns of the data into blocks.
//!
//! * [`dcov_sq`]: squared distance covariance of two blocks.
//! * [`mdm_asym`]: `Σ_{c<d} V²(X_c, X_{c+1..d})`.
//! * [`mdm_sym`]: `Σ_c V²(X_c, X_{-c})`.
//! * [`mdm_comp_star`]: complete measure against the cyclically shifted
//!   sample, `2·E|X - S'| - E|X - X'| - E|S - S'|` in empirical form.
//! * [`dhsic`]: d-variable HSIC with Gaussian kernels.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rows with columns partitioned into components.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedSample {
    n: usize,
    p: usize,
    // row-major n × p
    data: Vec<f64>,
    // block index of every column
    block_of: Vec<usize>,
    blocks: Vec<Vec<usize>>,
    // block j is exactly column j
    scalar: bool,
}

impl GroupedSample {
    /// Every column is its own component.
    pub fn scalar(x: &DMatrix<f64>) -> Self {
        let blocks = (0..x.ncols()).map(|c| vec![c]).collect();
        Self::build(x, blocks)
    }

    /// Columns grouped by `blocks`, which must partition `0..x.ncols()`.
    pub fn new(x: &DMatrix<f64>, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let p = x.ncols();
        let mut seen = vec![false; p];
        for block in &blocks {
            if block.is_empty() {
                return Err(Error::Shape("empty component block".into()));
            }
            for &c in block {
                if c >= p || seen[c] {
                    return Err(Error::Shape(format!("column {c} is out of range or repeated")));
                }
                seen[c] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Shape("blocks do not cover every column".into()));
        }
        Ok(Self::build(x, blocks))
    }

    /// Concatenates per-component matrices side by side.
    pub fn from_blocks(parts: &[DMatrix<f64>]) -> Result<Self> {
        let n = parts.first().map(|m| m.nrows()).unwrap_or(0);
        if let Some(bad) = parts.iter().find(|m| m.nrows() != n) {
            return Err(Error::Shape(format!("row counts differ: {n} vs {}", bad.nrows())));
        }
        let p: usize = parts.iter().map(|m| m.ncols()).sum();
        let mut joined = DMatrix::zeros(n, p);
        let mut blocks = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for part in parts {
            joined.columns_mut(offset, part.ncols()).copy_from(part);
            blocks.push((offset..offset + part.ncols()).collect());
            offset += part.ncols();
        }
        Self::new(&joined, blocks)
    }

    fn build(x: &DMatrix<f64>, blocks: Vec<Vec<usize>>) -> Self {
        let (n, p) = x.shape();
        let mut data = Vec::with_capacity(n * p);
        for k in 0..n {
            for c in 0..p {
                data.push(x[(k, c)]);
            }
        }
        let mut block_of = vec![0; p];
        for (b, cols) in blocks.iter().enumerate() {
            for &c in cols {
                block_of[c] = b;
            }
        }
        let scalar = blocks.iter().enumerate().all(|(j, b)| b.len() == 1 && b[0] == j);
        Self { n, p, data, block_of, blocks, scalar }
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn num_components(&self) -> usize {
        self.blocks.len()
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.p..(k + 1) * self.p]
    }

    fn check(&self, min_components: usize) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InsufficientSample { n: self.n, min: 2 });
        }
        if self.blocks.len() < min_components {
            return Err(Error::Shape(format!(
                "need at least {min_components} components, got {}",
                self.blocks.len()
            )));
        }
        Ok(())
    }

    // per-block squared distances between rows a and b
    #[inline]
    fn block_sq(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        if self.scalar {
            for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                let diff = x - y;
                *o = diff * diff;
            }
            return;
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.p {
            let diff = a[c] - b[c];
            out[self.block_of[c]] += diff * diff;
        }
    }

    /// Copy whose component `j` is shifted cyclically by `j` rows.
    fn shifted(&self) -> Vec<f64> {
        let (n, p) = (self.n, self.p);
        let mut out = vec![0.0; n * p];
        for l in 0..n {
            for c in 0..p {
                let src = (l + self.block_of[c]) % n;
                out[l * p + c] = self.data[src * p + c];
            }
        }
        out
    }
}

/// Kernel bandwidths for [`dhsic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Median of the nonzero pairwise distances within each component.
    Median,
    /// One positive bandwidth per component.
    Fixed(Vec<f64>),
}

/// The objective family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MeasureKind {
    Asym,
    Sym,
    Comp,
    Hsic(Bandwidth),
}

impl MeasureKind {
    pub fn hsic_median() -> Self {
        Self::Hsic(Bandwidth::Median)
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Hsic(Bandwidth::Fixed(bw)) = self {
            if let Some(&b) = bw.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
                return Err(Error::InvalidBandwidth(b));
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, sample: &GroupedSample) -> Result<f64> {
        match self {
            Self::Asym => mdm_asym(sample),
            Self::Sym => mdm_sym(sample),
            Self::Comp => mdm_comp_star(sample),
            Self::Hsic(bw) => dhsic(sample, bw),
        }
    }

    /// Evaluates on a matrix whose columns are scalar components.
    pub fn evaluate_matrix(&self, x: &DMatrix<f64>) -> Result<f64> {
        self.evaluate(&GroupedSample::scalar(x))
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Asym => "asym",
            Self::Sym => "sym",
            Self::Comp => "comp",
            Self::Hsic(_) => "hsic",
        }
    }
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MeasureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asym" | "asy" | "dcov" => Ok(Self::Asym),
            "sym" => Ok(Self::Sym),
            "comp" | "com" => Ok(Self::Comp),
            "hsic" => Ok(Self::hsic_median()),
            other => Err(Error::InvalidConfig(format!(
                "unknown measure {other:?} (expected asym, sym, comp or hsic)"
            ))),
        }
    }
}

#[derive(Clone, Copy)]
enum Split {
    // (X_c, X_{c+1..d}) for c < d - 1
    Asym,
    // (X_c, X_{-c}) for every c
    Sym,
}

// Sum of V² over the splits, each term clamped at zero.
fn dcov_splits(sample: &GroupedSample, split: Split) -> f64 {
    let n = sample.n;
    let d = sample.num_components();
    let terms = match split {
        Split::Asym => d - 1,
        Split::Sym => d,
    };
    let mut sum_ab = vec![0.0; terms];
    // row sums laid out as [row][term]
    let mut row_a = vec![0.0; terms * n];
    let mut row_b = vec![0.0; terms * n];
    let mut sq = vec![0.0; d];
    let mut suffix = vec![0.0; d + 1];
    let mut prefix = vec![0.0; d + 1];
    let mut acc_a = vec![0.0; terms];
    let mut acc_b = vec![0.0; terms];
    let mut a = vec![0.0; terms];
    let mut b = vec![0.0; terms];
    for k in 0..n {
        let xk = sample.row(k);
        acc_a.iter_mut().for_each(|v| *v = 0.0);
        acc_b.iter_mut().for_each(|v| *v = 0.0);
        for l in k + 1..n {
            sample.block_sq(xk, sample.row(l), &mut sq);
            for j in (0..d).rev() {
                suffix[j] = suffix[j + 1] + sq[j];
            }
            match split {
                Split::Asym => {
                    for c in 0..terms {
                        a[c] = sq[c].sqrt();
                        b[c] = suffix[c + 1].sqrt();
                    }
                }
                Split::Sym => {
                    for j in 0..d {
                        prefix[j + 1] = prefix[j] + sq[j];
                    }
                    for c in 0..terms {
                        a[c] = sq[c].sqrt();
                        b[c] = (prefix[c] + suffix[c + 1]).sqrt();
                    }
                }
            }
            let ra = &mut row_a[l * terms..(l + 1) * terms];
            let rb = &mut row_b[l * terms..(l + 1) * terms];
            for c in 0..terms {
                sum_ab[c] += a[c] * b[c];
                acc_a[c] += a[c];
                acc_b[c] += b[c];
                ra[c] += a[c];
                rb[c] += b[c];
            }
        }
        for c in 0..terms {
            row_a[k * terms + c] += acc_a[c];
            row_b[k * terms + c] += acc_b[c];
        }
    }
    let nf = n as f64;
    let mut total = 0.0;
    for c in 0..terms {
        let (mut sa, mut sb, mut cross) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let (ra, rb) = (row_a[k * terms + c], row_b[k * terms + c]);
            sa += ra;
            sb += rb;
            cross += ra * rb;
        }
        let v =
            2.0 * sum_ab[c] / (nf * nf) + (sa / (nf * nf)) * (sb / (nf * nf)) - 2.0 * cross / (nf * nf * nf);
        total += v.max(0.0);
    }
    total
}

/// Squared distance covariance `V_n²` of a two-component sample.
pub fn dcov_sq(sample: &GroupedSample) -> Result<f64> {
    sample.check(2)?;
    if sample.num_components() != 2 {
        return Err(Error::Shape(format!(
            "distance covariance needs exactly 2 components, got {}",
            sample.num_components()
        )));
    }
    Ok(dcov_splits(sample, Split::Asym))
}

/// Asymmetric measure `R_n`.
pub fn mdm_asym(sample: &GroupedSample) -> Result<f64> {
    sample.check(2)?;
    Ok(dcov_splits(sample, Split::Asym))
}

/// Symmetric measure `S_n`.
pub fn mdm_sym(sample: &GroupedSample) -> Result<f64> {
    sample.check(2)?;
    Ok(dcov_splits(sample, Split::Sym))
}

/// Simplified complete measure `Q*_n`.
///
/// With `S^ℓ = (X_1^ℓ, X_2^{ℓ+1}, …, X_d^{ℓ+d-1})` (indices mod n):
/// `2/n² Σ|X^k - S^ℓ| - 1/n² Σ|X^k - X^ℓ| - 1/n² Σ|S^k - S^ℓ|`.
/// Not clamped; small negative values are possible.
pub fn mdm_comp_star(sample: &GroupedSample) -> Result<f64> {
    sample.check(2)?;
    let (n, p) = (sample.n, sample.p);
    let shifted = sample.shifted();
    let srow = |l: usize| &shifted[l * p..(l + 1) * p];
    let dist = |a: &[f64], b: &[f64]| {
        let mut s = 0.0;
        for c in 0..p {
            let diff = a[c] - b[c];
            s += diff * diff;
        }
        s.sqrt()
    };
    let mut cross = 0.0;
    let mut within_x = 0.0;
    let mut within_s = 0.0;
    for k in 0..n {
        let xk = sample.row(k);
        let sk = srow(k);
        let mut row_cross = 0.0;
        for l in 0..n {
            row_cross += dist(xk, srow(l));
        }
        cross += row_cross;
        let mut row_x = 0.0;
        let mut row_s = 0.0;
        for l in k + 1..n {
            row_x += dist(xk, sample.row(l));
            row_s += dist(sk, srow(l));
        }
        within_x += row_x;
        within_s += row_s;
    }
    let nn = (n * n) as f64;
    Ok(2.0 * cross / nn - 2.0 * within_x / nn - 2.0 * within_s / nn)
}

/// Median of the nonzero pairwise distances within each component.
pub fn median_bandwidths(sample: &GroupedSample) -> Result<Vec<f64>> {
    let d = sample.num_components();
    let medians: Vec<Option<f64>> = if sample.scalar {
        (0..d)
            .map(|j| {
                let mut col: Vec<f64> = (0..sample.n).map(|k| sample.data[k * sample.p + j]).collect();
                col.sort_unstable_by(f64::total_cmp);
                sorted_gap_median(&col)
            })
            .collect()
    } else {
        block_medians(sample)
    };
    medians
        .into_iter()
        .enumerate()
        .map(|(j, m)| match m {
            Some(m) if m > 0.0 => Ok(m),
            _ => Err(Error::DegenerateBandwidth { component: j }),
        })
        .collect()
}

fn block_medians(sample: &GroupedSample) -> Vec<Option<f64>> {
    let n = sample.n;
    let d = sample.num_components();
    let mut sq = vec![0.0; d];
    let mut per_block: Vec<Vec<f64>> = vec![Vec::with_capacity(n * (n - 1) / 2); d];
    for k in 0..n {
        let xk = sample.row(k);
        for l in k + 1..n {
            sample.block_sq(xk, sample.row(l), &mut sq);
            for j in 0..d {
                if sq[j] > 0.0 {
                    per_block[j].push(sq[j].sqrt());
                }
            }
        }
    }
    per_block.iter_mut().map(|v| median_in_place(v)).collect()
}

fn median_in_place(v: &mut [f64]) -> Option<f64> {
    let len = v.len();
    if len == 0 {
        return None;
    }
    let mid = len / 2;
    let (lower, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if len % 2 == 1 {
        Some(upper)
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(0.5 * (below + upper))
    }
}

// Number of pairs k < l of a sorted slice with `x[l] - x[k] <= t`.
fn pairs_within(x: &[f64], t: f64) -> usize {
    let mut count = 0;
    let mut k = 0;
    for l in 0..x.len() {
        while x[l] - x[k] > t {
            k += 1;
        }
        count += l - k;
    }
    count
}

// Smallest gap value whose rank (1-based, among all pairs) is at least `rank`.
// Gaps are non-negative, so their bit patterns order like the values.
fn gap_of_rank(x: &[f64], rank: usize) -> f64 {
    let (mut lo, mut hi) = (0u64, (x[x.len() - 1] - x[0]).to_bits());
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pairs_within(x, f64::from_bits(mid)) >= rank {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    f64::from_bits(lo)
}

// Median of the nonzero pairwise gaps of sorted scalar data.
fn sorted_gap_median(x: &[f64]) -> Option<f64> {
    let n = x.len();
    let zeros = pairs_within(x, 0.0);
    let m = n * (n - 1) / 2 - zeros;
    if m == 0 {
        return None;
    }
    let upper = gap_of_rank(x, zeros + m / 2 + 1);
    if m % 2 == 1 {
        Some(upper)
    } else {
        Some(0.5 * (gap_of_rank(x, zeros + m / 2) + upper))
    }
}

/// dHSIC V-statistic with Gaussian kernels `exp(-|x - x'|² / (2σ_j²))`.
pub fn dhsic(sample: &GroupedSample, bandwidth: &Bandwidth) -> Result<f64> {
    sample.check(2)?;
    let d = sample.num_components();
    let sigmas = match bandwidth {
        Bandwidth::Median => median_bandwidths(sample)?,
        Bandwidth::Fixed(bw) => {
            if bw.len() != d {
                return Err(Error::Shape(format!("{} bandwidths for {d} components", bw.len())));
            }
            if let Some(&b) = bw.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
                return Err(Error::InvalidBandwidth(b));
            }
            bw.clone()
        }
    };
    let scale: Vec<f64> = sigmas.iter().map(|s| -0.5 / (s * s)).collect();
    let n = sample.n;
    let mut sq = vec![0.0; d];
    let mut row_k = vec![1.0; d * n];
    let mut prod_sum = 0.0;
    for k in 0..n {
        let xk = sample.row(k);
        for l in k + 1..n {
            sample.block_sq(xk, sample.row(l), &mut sq);
            let mut prod = 1.0;
            for j in 0..d {
                let kv = (sq[j] * scale[j]).exp();
                prod *= kv;
                row_k[j * n + k] += kv;
                row_k[j * n + l] += kv;
            }
            prod_sum += prod;
        }
    }
    let nf = n as f64;
    let joint = (nf + 2.0 * prod_sum) / (nf * nf);
    let mut product_of_means = 1.0;
    for j in 0..d {
        let s: f64 = row_k[j * n..(j + 1) * n].iter().sum();
        product_of_means *= s / (nf * nf);
    }
    let mut cross = 0.0;
    for k in 0..n {
        let mut prod = 1.0;
        for j in 0..d {
            prod *= row_k[j * n + k] / nf;
        }
        cross += prod;
    }
    let value = joint + product_of_means - 2.0 * cross / nf;
    Ok(value.max(0.0))
}
