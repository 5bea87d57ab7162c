//! Orthogonal projections onto the complement of a set of removed directions.
//!
//! A [`Projection`] keeps an orthonormal basis `B` (k x d) of everything
//! removed so far; its matrix form is `P = I - BᵀB`.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Relative rank tolerance used when none is given.
pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Amnesic,
    Random,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    basis: Array2<f64>,
    pub kind: ProjectionKind,
    pub seed: Option<u64>,
}

impl Default for Projection {
    fn default() -> Self {
        Projection::identity(0)
    }
}

impl Projection {
    pub fn identity(dim: usize) -> Self {
        Projection {
            basis: Array2::zeros((0, dim)),
            kind: ProjectionKind::Identity,
            seed: None,
        }
    }

    /// Projection removing the span of `rows` (orthonormalized here).
    pub fn from_rows(rows: ArrayView2<f64>, kind: ProjectionKind, tol: f64) -> Self {
        let basis = rowspace_basis(rows, tol);
        Projection {
            basis,
            kind,
            seed: None,
        }
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Number of removed directions.
    pub fn removed(&self) -> usize {
        self.basis.nrows()
    }

    /// Rank of the projection matrix.
    pub fn rank(&self) -> usize {
        self.dim() - self.removed()
    }

    pub fn is_identity(&self) -> bool {
        self.removed() == 0
    }

    /// The dense d x d matrix `I - BᵀB`.
    pub fn matrix(&self) -> Array2<f64> {
        let d = self.dim();
        Array2::eye(d) - self.basis.t().dot(&self.basis)
    }

    /// The projection that removes only the first `k` basis directions.
    pub fn truncated(&self, k: usize) -> Projection {
        let k = k.min(self.removed());
        Projection {
            basis: self.basis.slice(s![..k, ..]).to_owned(),
            kind: if k == 0 { ProjectionKind::Identity } else { self.kind },
            seed: self.seed,
        }
    }

    /// The projection removing basis rows `from..`.
    pub(crate) fn tail(&self, from: usize) -> Projection {
        Projection {
            basis: self.basis.slice(s![from.., ..]).to_owned(),
            kind: self.kind,
            seed: self.seed,
        }
    }

    /// Rebuilds a projection from stored (possibly f32-rounded) basis rows.
    pub fn from_stored(rows: &Array2<f32>, kind: ProjectionKind, seed: Option<u64>) -> Self {
        let rows = rows.mapv(|v| v as f64);
        let mut p = Projection::from_rows(rows.view(), kind, DEFAULT_TOL);
        p.seed = seed;
        p
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn subtract_component(v: &mut [f64], q: &[f64]) {
    let c = dot(v, q);
    for (x, y) in v.iter_mut().zip(q) {
        *x -= c * y;
    }
}

/// Pivoted modified Gram–Schmidt with one re-orthogonalization pass.
///
/// `candidates` are orthogonalized against `existing` (already orthonormal)
/// and among themselves; at each step the candidate with the largest residual
/// is taken, and candidates whose residual norm falls to `tol * scale` or
/// below are dropped.
fn orthonormalize(existing: &[Vec<f64>], mut candidates: Vec<Vec<f64>>, tol: f64, scale: f64) -> Vec<Vec<f64>> {
    let threshold = tol * scale;
    for c in candidates.iter_mut() {
        for q in existing {
            subtract_component(c, q);
        }
    }
    let mut out: Vec<Vec<f64>> = Vec::new();
    while !candidates.is_empty() {
        let (pick, best) = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (i, norm(c)))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if !(best > threshold) {
            break;
        }
        let mut q = candidates.swap_remove(pick);
        // second pass: restores orthogonality lost to cancellation
        for e in existing.iter().chain(out.iter()) {
            subtract_component(&mut q, e);
        }
        let n = norm(&q);
        if !(n > threshold) {
            continue;
        }
        q.iter_mut().for_each(|x| *x /= n);
        for c in candidates.iter_mut() {
            subtract_component(c, &q);
        }
        out.push(q);
    }
    out
}

fn max_row_norm(rows: ArrayView2<f64>) -> f64 {
    rows.axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max)
}

fn to_rows(m: ArrayView2<f64>) -> Vec<Vec<f64>> {
    m.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&ndarray::ArrayView1::from(r.as_slice()));
    }
    out
}

/// Orthonormal rows spanning the row space of `weights`.
///
/// Directions whose residual norm is at most `tol` times the largest row norm
/// of `weights` are treated as numerically dependent and dropped. A zero
/// matrix yields an empty basis.
pub fn rowspace_basis(weights: ArrayView2<f64>, tol: f64) -> Array2<f64> {
    let dim = weights.ncols();
    let scale = max_row_norm(weights);
    if scale == 0.0 {
        return Array2::zeros((0, dim));
    }
    from_rows(&orthonormalize(&[], to_rows(weights), tol, scale), dim)
}

/// Adds the directions of `new_rows` to an accumulated projection.
///
/// Fails with [`Error::RankExhausted`] when the result would remove every
/// direction of the space.
pub fn extend_basis(acc: &Projection, new_rows: ArrayView2<f64>, tol: f64) -> Result<Projection> {
    let dim = acc.dim();
    if new_rows.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: new_rows.ncols(),
        });
    }
    let scale = max_row_norm(new_rows);
    if scale == 0.0 {
        return Ok(acc.clone());
    }
    let existing = to_rows(acc.basis.view());
    let added = orthonormalize(&existing, to_rows(new_rows), tol, scale);
    if existing.len() + added.len() >= dim && !added.is_empty() {
        return Err(Error::RankExhausted { dim });
    }
    let mut all = existing;
    all.extend(added);
    Ok(Projection {
        basis: from_rows(&all, dim),
        kind: match acc.kind {
            ProjectionKind::Identity => ProjectionKind::Amnesic,
            k => k,
        },
        seed: acc.seed,
    })
}

const APPLY_CHUNK: usize = 2048;

/// Returns `H P`, i.e. every row with its removed components subtracted.
pub fn apply_projection(p: &Projection, reps: &Array2<f32>) -> Result<Array2<f32>> {
    if reps.ncols() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            found: reps.ncols(),
        });
    }
    if p.is_identity() {
        return Ok(reps.clone());
    }
    let n = reps.nrows();
    let mut out = Array2::<f32>::zeros(reps.raw_dim());
    out.axis_chunks_iter_mut(Axis(0), APPLY_CHUNK)
        .into_par_iter()
        .enumerate()
        .for_each(|(c, mut block)| {
            let start = c * APPLY_CHUNK;
            let end = (start + APPLY_CHUNK).min(n);
            let h = reps.slice(s![start..end, ..]).mapv(|v| v as f64);
            let coeffs = h.dot(&p.basis.t());
            let projected = &h - &coeffs.dot(&p.basis);
            block.assign(&projected.mapv(|v| v as f32));
        });
    Ok(out)
}

/// Rank-`num_dirs` random removal: rows drawn i.i.d. uniform on [-1, 1],
/// then orthonormalized. All directions are drawn in one batch.
pub fn random_projection(dim: usize, num_dirs: usize, seed: u64) -> Result<Projection> {
    if num_dirs > dim {
        return Err(Error::RankExhausted { dim });
    }
    let mut rng = seed::rng(seed, seed::stream::RANDOM_PROJECTION);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(num_dirs);
    while basis.len() < num_dirs {
        let missing = num_dirs - basis.len();
        let draws: Vec<Vec<f64>> = (0..missing)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let scale = draws.iter().map(|r| norm(r)).fold(0.0, f64::max);
        let added = orthonormalize(&basis, draws, DEFAULT_TOL, scale);
        basis.extend(added.into_iter().take(missing));
    }
    Ok(Projection {
        basis: from_rows(&basis, dim),
        kind: if num_dirs == 0 {
            ProjectionKind::Identity
        } else {
            ProjectionKind::Random
        },
        seed: Some(seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::Rng;

    fn max_abs(m: &Array2<f64>) -> f64 {
        m.iter().fold(0.0, |a, &v| a.max(v.abs()))
    }

    /// Independent check: eigenvalues of BBᵀ via nalgebra must all be 1.
    fn gram_is_identity(b: &Array2<f64>, tol: f64) -> bool {
        let k = b.nrows();
        let g = b.dot(&b.t());
        let gm = nalgebra::DMatrix::from_fn(k, k, |i, j| g[[i, j]]);
        nalgebra::SymmetricEigen::new(gm)
            .eigenvalues
            .iter()
            .all(|e| (e - 1.0).abs() < tol)
    }

    #[test]
    fn rowspace_of_simple_matrices() {
        let b = rowspace_basis(array![[2.0, 0.0], [0.0, 0.0]].view(), DEFAULT_TOL);
        assert_eq!(b, array![[1.0, 0.0]]);
        let z = rowspace_basis(Array2::<f64>::zeros((3, 4)).view(), DEFAULT_TOL);
        assert_eq!(z.dim(), (0, 4));
    }

    #[test]
    fn rowspace_of_random_full_rank_matrix() {
        let mut rng = seed::rng(3, 0);
        let w = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        let b = rowspace_basis(w.view(), DEFAULT_TOL);
        assert_eq!(b.nrows(), 3);
        assert!(max_abs(&(b.dot(&b.t()) - Array2::<f64>::eye(3))) < 1e-10);
        assert!(gram_is_identity(&b, 1e-10));
        // every original row is reproduced by its projection onto the basis
        let recon = w.dot(&b.t()).dot(&b);
        assert!(max_abs(&(recon - &w)) < 1e-10);
    }

    #[test]
    fn extend_examples() {
        let e1 = array![[1.0, 0.0, 0.0]];
        let p = extend_basis(&Projection::identity(3), e1.view(), DEFAULT_TOL).unwrap();
        assert!(max_abs(&(p.matrix() - Array2::from_diag(&array![0.0, 1.0, 1.0]))) < 1e-12);
        assert_eq!(p.kind, ProjectionKind::Amnesic);

        let again = extend_basis(&p, e1.view(), DEFAULT_TOL).unwrap();
        assert_eq!(again.removed(), 1);

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let diag = extend_basis(&p, array![[s, s, 0.0]].view(), DEFAULT_TOL).unwrap();
        assert_eq!(diag.removed(), 2);
        assert!(max_abs(&(diag.basis() - array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])) < 1e-12);
        assert!(max_abs(&(diag.matrix() - Array2::from_diag(&array![0.0, 0.0, 1.0]))) < 1e-12);
    }

    #[test]
    fn extend_refuses_to_remove_everything() {
        let p = extend_basis(&Projection::identity(2), array![[1.0, 0.0]].view(), DEFAULT_TOL).unwrap();
        assert!(matches!(
            extend_basis(&p, array![[0.0, 1.0]].view(), DEFAULT_TOL),
            Err(Error::RankExhausted { dim: 2 })
        ));
        assert!(matches!(
            extend_basis(&p, array![[0.0, 1.0, 0.0]].view(), DEFAULT_TOL),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn apply_examples() {
        let h = array![[3.0f32, 4.0], [-1.0, 2.5]];
        assert_eq!(apply_projection(&Projection::identity(2), &h).unwrap(), h);
        let p = Projection::from_rows(array![[1.0, 0.0]].view(), ProjectionKind::Amnesic, DEFAULT_TOL);
        let out = apply_projection(&p, &h).unwrap();
        assert_eq!(out, array![[0.0f32, 4.0], [0.0, 2.5]]);
        assert!(matches!(
            apply_projection(&p, &Array2::zeros((1, 3))),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn random_projection_contract() {
        let id = random_projection(10, 0, 1).unwrap();
        assert!(id.is_identity());
        let p = random_projection(10, 4, 1).unwrap();
        // numerical rank through nalgebra's SVD
        let m = p.matrix();
        let nm = nalgebra::DMatrix::from_fn(10, 10, |i, j| m[[i, j]]);
        let rank = nm.singular_values().iter().filter(|&&s| s > 1e-8).count();
        assert_eq!(rank, 6);
        let q = random_projection(10, 4, 2).unwrap();
        let dist = (p.matrix() - q.matrix()).mapv(|v| v * v).sum().sqrt();
        assert!(dist > 1e-3);
        assert_eq!(p, random_projection(10, 4, 1).unwrap());
        assert!(matches!(random_projection(3, 4, 0), Err(Error::RankExhausted { .. })));
        assert_eq!(random_projection(3, 3, 0).unwrap().rank(), 0);
    }

    #[test]
    fn sequential_projections_match_accumulated_basis() {
        let mut rng = seed::rng(8, 0);
        let d = 12;
        let mut acc = Projection::identity(d);
        let mut stepwise: Vec<Array2<f64>> = Vec::new();
        for _ in 0..3 {
            let w = Array2::from_shape_fn((2, d), |_| rng.random_range(-1.0..1.0));
            // each iteration's classifier lives in the current nullspace
            let w = w.dot(&acc.matrix());
            stepwise.push(Projection::from_rows(w.view(), ProjectionKind::Amnesic, DEFAULT_TOL).matrix());
            acc = extend_basis(&acc, w.view(), DEFAULT_TOL).unwrap();
        }
        for _ in 0..20 {
            let v = Array1::<f64>::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
            let v = &v / v.dot(&v).sqrt();
            let seq = stepwise.iter().fold(v.clone(), |x, p| p.dot(&x));
            let direct = acc.matrix().dot(&v);
            assert!((&seq - &direct).iter().all(|e| e.abs() < 1e-4));
        }
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_symmetric_and_fixes_orthogonal_vectors(
            d in 2usize..24,
            k_frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let k = ((d as f64 - 1.0) * k_frac) as usize;
            let p = random_projection(d, k, seed).unwrap();
            let m = p.matrix();
            prop_assert!(max_abs(&(m.dot(&m) - &m)) < 1e-5);
            prop_assert!(max_abs(&(&m - &m.t())) < 1e-5);
            prop_assert_eq!(p.rank(), d - k);
            let trace: f64 = m.diag().sum();
            prop_assert!((trace - (d - k) as f64).abs() < 1e-6);

            let mut rng = seed::rng(seed, 77);
            let v = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
            let orth = m.dot(&v);
            prop_assert!((m.dot(&orth) - &orth).iter().all(|e| e.abs() < 1e-5));
        }
    }
}
