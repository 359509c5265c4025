//! Centering and symmetric whitening of observations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Output of [`whiten`]: `z = (y - mean) * hᵀ` has identity sample covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningResult {
    pub z: DMatrix<f64>,
    /// `Σ̂^{-1/2}`, symmetric positive definite.
    pub h: DMatrix<f64>,
    pub mean: DVector<f64>,
}

/// Column means of an `n × d` sample.
pub fn column_means(y: &DMatrix<f64>) -> DVector<f64> {
    let n = y.nrows() as f64;
    DVector::from_iterator(y.ncols(), y.column_iter().map(|c| c.sum() / n))
}

/// Sample covariance with the `n - 1` normalization.
pub fn sample_covariance(y: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = column_means(y);
    let centered = center(y, &mean);
    centered.transpose() * &centered / (y.nrows() as f64 - 1.0)
}

fn center(y: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = y.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    c
}

/// Centers `y` and rotates it to unit sample covariance via `H = U Λ^{-1/2} Uᵀ`.
///
/// Requires `n > d` and a covariance whose smallest eigenvalue exceeds
/// `1e-12` times its largest.
pub fn whiten(y: &DMatrix<f64>) -> Result<WhiteningResult> {
    let (n, d) = y.shape();
    if d == 0 {
        return Err(Error::Shape("no columns".into()));
    }
    if n <= d {
        return Err(Error::InsufficientSample { n, min: d + 1 });
    }
    if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEntry { row: pos % n, col: pos / n });
    }
    let mean = column_means(y);
    let centered = center(y, &mean);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let largest = eig.eigenvalues.max();
    let smallest = eig.eigenvalues.min();
    if !(smallest > 1e-12 * largest) {
        return Err(Error::SingularCovariance { eigenvalue: smallest, largest });
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let u = &eig.eigenvectors;
    let mut h = u * inv_sqrt * u.transpose();
    // symmetrize away rounding
    h = (&h + h.transpose()) * 0.5;
    let z = centered * h.transpose();
    Ok(WhiteningResult { z, h, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp, Normal};

    fn random_data(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let exp = Exp::new(1.0).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x =
            DMatrix::from_fn(
                n,
                d,
                |_, j| {
                    if j % 2 == 0 {
                        exp.sample(&mut rng)
                    } else {
                        normal.sample(&mut rng)
                    }
                },
            );
        let a = DMatrix::from_fn(d, d, |i, j| if i == j { 2.0 } else { 0.3 * (i + 2 * j) as f64 });
        x * a.transpose()
    }

    // covariance recomputed with an explicit double loop
    fn naive_cov(z: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, d) = z.shape();
        let mut means = vec![0.0; d];
        for j in 0..d {
            for k in 0..n {
                means[j] += z[(k, j)];
            }
            means[j] /= n as f64;
        }
        DMatrix::from_fn(d, d, |a, b| {
            let mut s = 0.0;
            for k in 0..n {
                s += (z[(k, a)] - means[a]) * (z[(k, b)] - means[b]);
            }
            s / (n as f64 - 1.0)
        })
    }

    #[test]
    fn whitened_covariance_is_identity() {
        for (d, seed) in [(2, 1), (3, 2), (5, 3)] {
            let y = random_data(400, d, seed);
            let w = whiten(&y).unwrap();
            let cov = naive_cov(&w.z);
            assert!((cov - DMatrix::identity(d, d)).amax() < 1e-8);
            let sigma = sample_covariance(&y);
            let hsh = &w.h * sigma * &w.h;
            assert!((hsh - DMatrix::identity(d, d)).amax() < 1e-8);
            assert!((&w.h - w.h.transpose()).amax() == 0.0);
            assert!(SymmetricEigen::new(w.h.clone()).eigenvalues.min() > 0.0);
        }
    }

    #[test]
    fn whitening_is_idempotent() {
        let y = random_data(300, 3, 4);
        let first = whiten(&y).unwrap();
        let second = whiten(&first.z).unwrap();
        assert!((second.h - DMatrix::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn diagonal_covariance_gives_diagonal_whitener() {
        // columns with sample variance 4 and 1 and zero sample covariance
        let col1 = [2.0, -2.0, 2.0, -2.0];
        let col2 = [1.0, 1.0, -1.0, -1.0];
        let scale = (3.0f64 / 4.0).sqrt();
        let y = DMatrix::from_fn(4, 2, |k, j| scale * if j == 0 { col1[k] } else { col2[k] });
        let w = whiten(&y).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]);
        assert!((w.h - expected).amax() < 1e-12);
    }

    #[test]
    fn affine_invariance() {
        let y = random_data(250, 3, 7);
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0, 0.2, 0.0, 1.0]);
        let w = whiten(&(y * a.transpose())).unwrap();
        assert!((naive_cov(&w.z) - DMatrix::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn singular_covariance_is_rejected() {
        let y = DMatrix::from_fn(50, 2, |k, _| k as f64);
        assert!(matches!(whiten(&y), Err(Error::SingularCovariance { .. })));
    }

    #[test]
    fn too_few_rows() {
        let y = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(whiten(&y), Err(Error::InsufficientSample { .. })));
    }
}
