//! Givens-product parameterization of SO(d).
//!
//! A rotation is written as `W(θ) = G⁽ᵈ⁻¹⁾(θ_{d-1}) ⋯ G⁽¹⁾(θ_1)` with
//! `G⁽ᵏ⁾(θ_k) = G_{k,d}(θ_{k,d}) ⋯ G_{k,k+1}(θ_{k,k+1})`. Angles are stored in
//! lexicographic `(i, j)` order, `i < j`. Indices in this module are zero-based.
//!
//! The support box is `0 ≤ θ_{0,j} ≤ 2π` for the first block and
//! `0 ≤ θ_{i,j} < π` for every other block. Under this box the map from angles
//! to rotations is one-to-one almost everywhere; [`angles_from_rotation`]
//! inverts it.

use std::f64::consts::{PI, TAU};
use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const DEGENERATE_TOL: f64 = 1e-12;
const ROTATION_TOL: f64 = 1e-8;

/// Number of angles `d(d-1)/2` needed for dimension `d`.
pub fn num_angles(dim: usize) -> usize {
    dim * dim.saturating_sub(1) / 2
}

/// Position of angle `(i, j)` in the flat lexicographic layout.
pub fn angle_index(dim: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < dim);
    i * (2 * dim - i - 1) / 2 + (j - i - 1)
}

/// Flat positions of block `i`, i.e. the angles `θ_{i, i+1..d}`.
pub fn block_range(dim: usize, i: usize) -> Range<usize> {
    let start = angle_index(dim, i, i + 1);
    start..start + (dim - i - 1)
}

/// Width of the support interval for the angle at flat position `pos`.
pub fn angle_period(dim: usize, pos: usize) -> f64 {
    if pos < dim - 1 {
        TAU
    } else {
        PI
    }
}

/// Rotation angles constrained to the support box.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleVector {
    dim: usize,
    angles: Vec<f64>,
}

impl AngleVector {
    /// Validates length and support.
    pub fn new(dim: usize, angles: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidAngles(format!("dimension must be at least 2, got {dim}")));
        }
        if angles.len() != num_angles(dim) {
            return Err(Error::InvalidAngles(format!(
                "expected {} angles for d = {dim}, got {}",
                num_angles(dim),
                angles.len()
            )));
        }
        for (pos, &a) in angles.iter().enumerate() {
            if !in_support(dim, pos, a) {
                return Err(Error::InvalidAngles(format!("angle {pos} = {a} outside its support")));
            }
        }
        Ok(Self { dim, angles })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, angles: vec![0.0; num_angles(dim)] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.angles
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.angles
    }

    /// Angle `θ_{i,j}` (zero-based, `i < j`).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.angles[angle_index(self.dim, i, j)]
    }
}

fn in_support(dim: usize, pos: usize, a: f64) -> bool {
    if !a.is_finite() || a < 0.0 {
        return false;
    }
    if pos < dim - 1 {
        a <= TAU
    } else {
        a < PI
    }
}

/// An element of SO(d).
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMatrix(DMatrix<f64>);

impl RotationMatrix {
    /// Checks orthogonality and unit determinant within `1e-8`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() < 2 {
            return Err(Error::InvalidRotation(format!(
                "expected a square matrix of size >= 2, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let d = m.nrows();
        let gram = &m * m.transpose();
        let dev = (gram - DMatrix::identity(d, d)).amax();
        if !(dev <= ROTATION_TOL) {
            return Err(Error::InvalidRotation(format!("not orthogonal (max deviation {dev:e})")));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidRotation(format!("determinant {det} != 1")));
        }
        Ok(Self(m))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// The Givens rotation `Q_{i,j}(ψ)`: identity except `(i,i) = (j,j) = cos ψ`,
/// `(i,j) = -sin ψ`, `(j,i) = sin ψ`.
pub fn givens(dim: usize, i: usize, j: usize, psi: f64) -> Result<RotationMatrix> {
    if i >= j || j >= dim {
        return Err(Error::InvalidIndex { dim, i, j });
    }
    let mut m = DMatrix::identity(dim, dim);
    let (s, c) = psi.sin_cos();
    m[(i, i)] = c;
    m[(j, j)] = c;
    m[(i, j)] = -s;
    m[(j, i)] = s;
    Ok(RotationMatrix(m))
}

// m <- Q_{i,j}(psi) * m
fn rotate_rows(m: &mut DMatrix<f64>, i: usize, j: usize, psi: f64) {
    let (s, c) = psi.sin_cos();
    for col in 0..m.ncols() {
        let a = m[(i, col)];
        let b = m[(j, col)];
        m[(i, col)] = c * a - s * b;
        m[(j, col)] = s * a + c * b;
    }
}

// m <- m * Q_{i,j}(psi)^T
fn rotate_cols_transposed(m: &mut DMatrix<f64>, i: usize, j: usize, psi: f64) {
    let (s, c) = psi.sin_cos();
    for row in 0..m.nrows() {
        let a = m[(row, i)];
        let b = m[(row, j)];
        m[(row, i)] = c * a - s * b;
        m[(row, j)] = s * a + c * b;
    }
}

/// Builds the rotation for raw angles, which need not lie in the support box.
pub fn rotation_from_raw(dim: usize, angles: &[f64]) -> DMatrix<f64> {
    assert_eq!(angles.len(), num_angles(dim), "angle count does not match dimension");
    let mut w = DMatrix::identity(dim, dim);
    let mut pos = 0;
    for i in 0..dim {
        for j in i + 1..dim {
            rotate_rows(&mut w, i, j, angles[pos]);
            pos += 1;
        }
    }
    w
}

/// `W(θ)`.
pub fn rotation_from_angles(theta: &AngleVector) -> RotationMatrix {
    RotationMatrix(rotation_from_raw(theta.dim, &theta.angles))
}

/// Recovers the support-box angles of a rotation.
///
/// Each block is read off the leading row of the partially peeled matrix as a
/// set of hyperspherical angles; the block is then peeled by multiplying with
/// the transposed factors. The first block has `2^(d-2)` admissible sign
/// branches. The remaining blocks are forced by their `[0, π)` range, and the
/// first-block branch is the one that keeps every later block inside that
/// range (smallest total violation, lowest branch on ties). When a required
/// sine and cosine are both below `1e-12` the angle is set to zero.
pub fn angles_from_rotation(w: &RotationMatrix) -> Result<AngleVector> {
    let m = w.matrix();
    RotationMatrix::new(m.clone())?;
    Ok(extract_angles(m))
}

fn extract_angles(m: &DMatrix<f64>) -> AngleVector {
    let dim = m.nrows();
    let free = dim.saturating_sub(2);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for branch in 0u64..(1u64 << free) {
        let (violation, angles) = extract_with_branch(m, branch);
        let better = match &best {
            None => true,
            Some((v, _)) => violation < *v - DEGENERATE_TOL,
        };
        if better {
            let done = violation == 0.0;
            best = Some((violation, angles));
            if done {
                break;
            }
        }
    }
    let (_, mut angles) = best.expect("at least one branch");
    for (pos, a) in angles.iter_mut().enumerate() {
        *a = a.rem_euclid(angle_period(dim, pos));
        // rem_euclid can round up to the period itself
        if *a >= angle_period(dim, pos) {
            *a = 0.0;
        }
    }
    AngleVector { dim, angles }
}

fn extract_with_branch(m: &DMatrix<f64>, branch: u64) -> (f64, Vec<f64>) {
    let dim = m.nrows();
    let mut peeled = m.clone();
    let mut angles = vec![0.0; num_angles(dim)];
    let mut violation = 0.0;
    for k in 0..dim - 1 {
        let row: Vec<f64> = (k..dim).map(|c| peeled[(k, c)]).collect();
        let span = row.len() - 1;
        // sign of the cosine tail product at each level t = 1..span
        let mut signs = vec![1.0; span + 1];
        for t in 1..span {
            signs[t] = if k == 0 {
                if (branch >> (t - 1)) & 1 == 1 {
                    -1.0
                } else {
                    1.0
                }
            } else if row[t] > 0.0 {
                -1.0
            } else {
                1.0
            };
        }
        if k > 0 {
            violation += row[span].max(0.0);
        }
        let mut norms = vec![0.0; span + 1];
        let mut acc = 0.0;
        for t in 0..=span {
            acc += row[t] * row[t];
            norms[t] = acc.sqrt();
        }
        let block = block_range(dim, k);
        for t in (1..=span).rev() {
            let prev = if t == 1 { row[0] } else { signs[t - 1] * norms[t - 1] };
            let sin_part = -signs[t] * row[t];
            let cos_part = signs[t] * prev;
            let angle = if sin_part.abs() < DEGENERATE_TOL && cos_part.abs() < DEGENERATE_TOL {
                0.0
            } else {
                sin_part.atan2(cos_part)
            };
            angles[block.start + t - 1] = angle;
        }
        // peel G^(k): W G^(k)^T, with G^(k) = G_{k,d-1} ... G_{k,k+1}
        for (offset, j) in (k + 1..dim).enumerate() {
            rotate_cols_transposed(&mut peeled, k, j, angles[block.start + offset]);
        }
    }
    (violation, angles)
}

/// Maps arbitrary finite angles to the support-box angles of the same rotation.
///
/// Objectives that depend on `θ` only through `W(θ)` are unchanged.
pub fn wrap_angles(dim: usize, raw: &[f64]) -> AngleVector {
    if raw.iter().enumerate().all(|(pos, &a)| in_support(dim, pos, a)) {
        return AngleVector { dim, angles: raw.to_vec() };
    }
    extract_angles(&rotation_from_raw(dim, raw))
}
