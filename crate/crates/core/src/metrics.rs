//! Estimation error of an unmixing matrix up to the ICA ambiguities (scale,
//! sign and order of the components), and signed-permutation alignment.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum-cost perfect assignment of rows to columns of a square matrix.
///
/// Returns `assignment[row] = column` and the total cost. Runs the
/// shortest-augmenting-path method with potentials in `O(d³)`.
pub fn hungarian(cost: &DMatrix<f64>) -> Result<(Vec<usize>, f64)> {
    let (rows, cols) = cost.shape();
    if rows != cols {
        return Err(Error::Shape(format!("cost matrix must be square, got {rows}×{cols}")));
    }
    if let Some(pos) = cost.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEntry { row: pos % rows, col: pos / rows });
    }
    let n = rows;
    // 1-based arrays with a virtual column 0, as in the classic formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum();
    Ok((assignment, total))
}

/// Output of [`md_index`].
#[derive(Debug, Clone, PartialEq)]
pub struct MdReport {
    pub md: f64,
    /// `permutation[k]` is the position row `k` of `G` is moved to.
    pub permutation: Vec<usize>,
    /// Optimal scale applied to row `k` of `G`.
    pub scalings: Vec<f64>,
    /// `G = Ŵ·W₀⁻¹`.
    pub gain: DMatrix<f64>,
}

impl MdReport {
    /// `P·D·G` for the reported permutation and scalings.
    pub fn aligned_gain(&self) -> DMatrix<f64> {
        let d = self.gain.nrows();
        let mut out = DMatrix::zeros(d, d);
        for (k, &pos) in self.permutation.iter().enumerate() {
            out.set_row(pos, &(self.gain.row(k) * self.scalings[k]));
        }
        out
    }
}

/// `MD(Ŵ, W₀) = inf_{P,D} ‖P·D·Ŵ·W₀⁻¹ - I‖_F / √(d-1)`.
///
/// The best scale of row `k` placed at position `j` is `G_kj / ‖G_k‖²`, leaving
/// the residual `1 - G_kj² / ‖G_k‖²`; the permutation then solves an
/// assignment problem over those residuals.
pub fn md_index(w_hat: &DMatrix<f64>, w0: &DMatrix<f64>) -> Result<MdReport> {
    let d = w0.nrows();
    if w0.shape() != (d, d) || w_hat.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "expected two square matrices of equal size, got {:?} and {:?}",
            w_hat.shape(),
            w0.shape()
        )));
    }
    if d < 2 {
        return Err(Error::Shape("md needs d >= 2".into()));
    }
    let w0_inv = invert(w0)?;
    let gain = w_hat * w0_inv;
    let norms: Vec<f64> = gain.row_iter().map(|r| r.norm_squared()).collect();
    if let Some(k) = norms.iter().position(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::ZeroRow(k));
    }
    let cost = DMatrix::from_fn(d, d, |k, j| 1.0 - gain[(k, j)].powi(2) / norms[k]);
    let (permutation, total) = hungarian(&cost)?;
    let scalings = permutation.iter().enumerate().map(|(k, &j)| gain[(k, j)] / norms[k]).collect();
    let md = total.max(0.0).sqrt() / ((d - 1) as f64).sqrt();
    Ok(MdReport { md, permutation, scalings, gain })
}

fn invert(w0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(pos) = w0.iter().position(|v| !v.is_finite()) {
        let n = w0.nrows();
        return Err(Error::NonFiniteEntry { row: pos % n, col: pos / n });
    }
    let svd = w0.clone().svd(false, false);
    let (hi, lo) = (svd.singular_values.max(), svd.singular_values.min());
    if !(lo > 1e-12 * hi) {
        return Err(Error::SingularMatrix(format!("condition number {:e}", hi / lo)));
    }
    w0.clone().try_inverse().ok_or_else(|| Error::SingularMatrix("inverse failed".into()))
}

/// A signed permutation of columns: output column `j` is
/// `signs[j] · input column source[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedPermutation {
    pub source: Vec<usize>,
    pub signs: Vec<f64>,
}

impl SignedPermutation {
    pub fn identity(d: usize) -> Self {
        Self { source: (0..d).collect(), signs: vec![1.0; d] }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), self.source.len());
        for (j, (&src, &s)) in self.source.iter().zip(&self.signs).enumerate() {
            out.set_column(j, &(x.column(src) * s));
        }
        out
    }
}

/// Reorders and flips the columns of `x_hat` to best match `reference`,
/// maximizing the total absolute correlation of matched columns.
pub fn align_components(
    x_hat: &DMatrix<f64>,
    reference: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, SignedPermutation)> {
    if x_hat.shape() != reference.shape() {
        return Err(Error::Shape(format!("shapes differ: {:?} vs {:?}", x_hat.shape(), reference.shape())));
    }
    let corr = correlations(x_hat, reference)?;
    let d = x_hat.ncols();
    // rows: reference columns, cols: estimated columns
    let cost = DMatrix::from_fn(d, d, |r, c| 1.0 - corr[(c, r)].abs());
    let (assignment, _) = hungarian(&cost)?;
    let signs =
        assignment.iter().enumerate().map(|(r, &c)| if corr[(c, r)] < 0.0 { -1.0 } else { 1.0 }).collect();
    let perm = SignedPermutation { source: assignment, signs };
    Ok((perm.apply(x_hat), perm))
}

// Pearson correlations between the columns of a and b.
fn correlations(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let standardize = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let mut out = m.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
            let norm = col.norm();
            if !(norm > 0.0) {
                return Err(Error::ZeroVariance(j));
            }
            col /= norm;
        }
        Ok(out)
    };
    let (sa, sb) = (standardize(a)?, standardize(b)?);
    Ok(sa.transpose() * sb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn random_matrix(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0))
    }

    // exhaustive md with the closed-form per-row scale
    fn brute_md(w_hat: &DMatrix<f64>, w0: &DMatrix<f64>) -> f64 {
        let d = w0.nrows();
        let g = w_hat * w0.clone().try_inverse().unwrap();
        let mut best = f64::INFINITY;
        for p in permutations(d) {
            let mut total = 0.0;
            for k in 0..d {
                let row = g.row(k);
                let s = row[p[k]] / row.norm_squared();
                for j in 0..d {
                    let target = if j == p[k] { 1.0 } else { 0.0 };
                    total += (s * row[j] - target).powi(2);
                }
            }
            best = best.min(total);
        }
        best.sqrt() / ((d - 1) as f64).sqrt()
    }

    #[test]
    fn hungarian_small_cases() {
        let eye = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(hungarian(&eye).unwrap(), (vec![0, 1, 2], 0.0));
        let anti = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(hungarian(&anti).unwrap(), (vec![1, 0], 0.0));
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, 0.0, 1.0]);
        assert!(matches!(hungarian(&bad), Err(Error::NonFiniteEntry { row: 0, col: 1 })));
    }

    #[test]
    fn hungarian_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let perms = permutations(6);
        assert_eq!(perms.len(), 720);
        for round in 0..20 {
            // integer costs in some rounds to force ties
            let cost = DMatrix::from_fn(6, 6, |_, _| {
                if round % 2 == 0 {
                    rng.random_range(-5.0..5.0)
                } else {
                    rng.random_range(0..4) as f64
                }
            });
            let (assignment, total) = hungarian(&cost).unwrap();
            let brute = perms
                .iter()
                .map(|p| p.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert!((total - brute).abs() < 1e-12);
            let mut seen = assignment.clone();
            seen.sort();
            assert_eq!(seen, (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn md_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..20 {
            let w_hat = random_matrix(3, &mut rng);
            let w0 = random_matrix(3, &mut rng);
            let report = md_index(&w_hat, &w0).unwrap();
            assert!((report.md - brute_md(&w_hat, &w0)).abs() < 1e-10);
            // the reported P and D realize the value
            let resid = (report.aligned_gain() - DMatrix::identity(3, 3)).norm() / 2f64.sqrt();
            assert!((resid - report.md).abs() < 1e-10);
        }
    }

    #[test]
    fn md_matches_grid_over_scalings() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..5 {
            let w_hat = random_matrix(3, &mut rng);
            let w0 = random_matrix(3, &mut rng);
            let g = &w_hat * w0.clone().try_inverse().unwrap();
            let mut best = f64::INFINITY;
            for p in permutations(3) {
                let mut total = 0.0;
                for k in 0..3 {
                    // golden-section search over the row scale
                    let f = |s: f64| {
                        (0..3)
                            .map(|j| (s * g[(k, j)] - if j == p[k] { 1.0 } else { 0.0 }).powi(2))
                            .sum::<f64>()
                    };
                    let (mut lo, mut hi) = (-100.0, 100.0);
                    let phi = (5f64.sqrt() - 1.0) / 2.0;
                    for _ in 0..200 {
                        let a = hi - phi * (hi - lo);
                        let b = lo + phi * (hi - lo);
                        if f(a) < f(b) {
                            hi = b;
                        } else {
                            lo = a;
                        }
                    }
                    total += f(0.5 * (lo + hi));
                }
                best = best.min(total);
            }
            let grid = best.sqrt() / 2f64.sqrt();
            assert!((md_index(&w_hat, &w0).unwrap().md - grid).abs() < 1e-6);
        }
    }

    #[test]
    fn md_zero_on_signed_scaled_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in 2..=5 {
            let w0 = random_matrix(d, &mut rng);
            assert!(md_index(&w0, &w0).unwrap().md < 1e-8);
            let mut p = permutations(d)[rng.random_range(0..(1..=d).product::<usize>())].clone();
            p.rotate_left(1);
            let mut pd = DMatrix::zeros(d, d);
            for (k, &j) in p.iter().enumerate() {
                let scale = rng.random_range(0.2..3.0) * if rng.random_bool(0.5) { -1.0 } else { 1.0 };
                pd[(k, j)] = scale;
            }
            let report = md_index(&(&pd * &w0), &w0).unwrap();
            assert!(report.md < 1e-8, "{}", report.md);
        }
    }

    #[test]
    fn md_invariant_to_ambiguities() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w_hat = random_matrix(4, &mut rng);
        let w0 = random_matrix(4, &mut rng);
        let base = md_index(&w_hat, &w0).unwrap().md;
        let pd = DMatrix::from_row_slice(
            4,
            4,
            &[0.0, -2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0],
        );
        let moved = md_index(&(pd * &w_hat), &w0).unwrap().md;
        assert!((base - moved).abs() < 1e-10);
        assert!(base >= 0.0);
    }

    #[test]
    fn md_errors() {
        let w = DMatrix::<f64>::identity(3, 3);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(md_index(&DMatrix::identity(2, 2), &singular), Err(Error::SingularMatrix(_))));
        let mut zero_row = w.clone();
        zero_row.set_row(1, &nalgebra::RowDVector::zeros(3));
        assert!(matches!(md_index(&zero_row, &w), Err(Error::ZeroRow(1))));
        assert!(matches!(md_index(&w, &DMatrix::identity(2, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn alignment_recovers_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(50, 3, |_, _| rng.random_range(-1.0..1.0));
        let (same, perm) = align_components(&x, &x).unwrap();
        assert_eq!(perm, SignedPermutation::identity(3));
        assert_eq!(same, x);
        let mut reference = DMatrix::zeros(50, 3);
        reference.set_column(0, &x.column(2));
        reference.set_column(1, &-x.column(0));
        reference.set_column(2, &x.column(1));
        let (aligned, perm) = align_components(&x, &reference).unwrap();
        assert_eq!(perm.source, vec![2, 0, 1]);
        assert_eq!(perm.signs, vec![1.0, -1.0, 1.0]);
        assert_eq!(aligned, reference);
    }

    #[test]
    fn alignment_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for d in 2..=4 {
            for _ in 0..5 {
                let x = DMatrix::from_fn(80, d, |_, _| rng.random_range(-1.0..1.0));
                let q = random_matrix(d, &mut rng).qr().q();
                let reference = &x * q;
                let (_, perm) = align_components(&x, &reference).unwrap();
                let corr = correlations(&x, &reference).unwrap();
                let score = |src: &[usize], signs: &[f64]| -> f64 {
                    src.iter().zip(signs).enumerate().map(|(r, (&c, &s))| s * corr[(c, r)]).sum()
                };
                let mut best = f64::NEG_INFINITY;
                for p in permutations(d) {
                    for mask in 0..(1 << d) {
                        let signs: Vec<f64> =
                            (0..d).map(|j| if mask >> j & 1 == 1 { -1.0 } else { 1.0 }).collect();
                        best = best.max(score(&p, &signs));
                    }
                }
                assert!((score(&perm.source, &perm.signs) - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alignment_rejects_constant_column() {
        let mut x = DMatrix::from_fn(10, 2, |k, j| (k * (j + 1)) as f64);
        x.set_column(1, &nalgebra::DVector::from_element(10, 3.0));
        assert!(matches!(align_components(&x, &x), Err(Error::ZeroVariance(1))));
    }
}
