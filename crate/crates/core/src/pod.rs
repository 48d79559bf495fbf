//! Proper orthogonal decomposition in a configurable inner product.
//!
//! The basis comes from the eigendecomposition of the snapshot correlation
//! matrix (method of snapshots) when there are at most as many snapshots as
//! dofs. Larger snapshot sets switch to the equivalent spatial-Gram
//! eigenproblem, which has the same nonzero spectrum at `dof x dof` cost. A
//! final re-orthonormalization pass keeps the basis orthonormal to 1e-10
//! even when the smallest retained eigenvalue sits near the cutoff.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::Error;
use crate::mesh::{csc_to_dense, GramTag, SpatialOperators};
use crate::stepper::Trajectory;
use crate::Result;

/// Eigenvalues at or below `1e-13 * lambda_max` count as numerically zero
/// and are never turned into basis vectors.
const RANK_SAFETY: f64 = 1e-13;

/// Snapshot collection with its inner product, stored column-wise.
#[derive(Clone, Debug)]
pub struct SnapshotSet {
    /// dof x n matrix, one snapshot per column.
    pub data: DMatrix<f64>,
    pub gram_tag: GramTag,
    /// Optional per-snapshot weights (e.g. trapezoidal time weights);
    /// uniform weight 1 when absent.
    pub weights: Option<Vec<f64>>,
}

impl SnapshotSet {
    pub fn from_columns(columns: &[DVector<f64>], gram_tag: GramTag) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Config("snapshot set needs at least one column".into()));
        }
        let n = columns[0].len();
        if let Some(c) = columns.iter().find(|c| c.len() != n) {
            return Err(Error::DimensionMismatch { expected: n, got: c.len() });
        }
        Ok(SnapshotSet {
            data: DMatrix::from_columns(columns),
            gram_tag,
            weights: None,
        })
    }

    /// Collects every state of every trajectory, in order.
    pub fn from_trajectories(trajectories: &[&Trajectory], gram_tag: GramTag) -> Result<Self> {
        let columns: Vec<DVector<f64>> = trajectories
            .iter()
            .flat_map(|t| t.states.iter().cloned())
            .collect();
        Self::from_columns(&columns, gram_tag)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n_snapshots() {
            return Err(Error::DimensionMismatch {
                expected: self.n_snapshots(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("snapshot weights must be positive".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn n_snapshots(&self) -> usize {
        self.data.ncols()
    }

    pub fn n_dofs(&self) -> usize {
        self.data.nrows()
    }

    /// Snapshot matrix with each column scaled by the square root of its
    /// weight; the POD of this set equals the weighted POD of the original.
    fn scaled_data(&self) -> DMatrix<f64> {
        let mut data = self.data.clone();
        if let Some(w) = &self.weights {
            for (j, &wj) in w.iter().enumerate() {
                data.column_mut(j).scale_mut(wj.sqrt());
            }
        }
        data
    }
}

/// Basis-size rule: keep eigenvalues above a threshold, or keep a fixed
/// count.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cutoff {
    Threshold(f64),
    Rank(usize),
}

/// Orthonormal POD basis with the full eigenvalue list for reporting.
#[derive(Clone, Debug)]
pub struct PodBasis {
    /// dof x k, orthonormal in the tagged inner product.
    pub vectors: DMatrix<f64>,
    /// All eigenvalues, non-increasing and clipped at zero; length
    /// min(n_snapshots, n_dofs).
    pub eigenvalues: Vec<f64>,
    pub gram_tag: GramTag,
    pub cutoff_used: Cutoff,
}

impl PodBasis {
    pub fn rank(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.vectors.column(i).into_owned()
    }

    pub fn columns_vec(&self) -> Vec<DVector<f64>> {
        (0..self.rank()).map(|i| self.column(i)).collect()
    }

    pub fn eigenvalue_sum(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Sum of eigenvalues beyond the first `k`.
    pub fn tail_sum(&self, k: usize) -> f64 {
        self.eigenvalues.iter().skip(k).sum()
    }
}

/// Keeps the leading `k` vectors; the eigenvalue list stays complete so
/// tail sums remain available.
pub fn rank_truncate(basis: &PodBasis, k: usize) -> PodBasis {
    let k = k.min(basis.rank());
    PodBasis {
        vectors: basis.vectors.columns(0, k).into_owned(),
        eigenvalues: basis.eigenvalues.clone(),
        gram_tag: basis.gram_tag,
        cutoff_used: Cutoff::Rank(k),
    }
}

/// Correlation matrix `K[i][j] = (v_i, v_j)_G`, including snapshot weights
/// when present.
pub fn correlation_matrix(ops: &SpatialOperators, s: &SnapshotSet) -> DMatrix<f64> {
    let data = s.scaled_data();
    let gs = ops.gram(s.gram_tag) * &data;
    data.tr_mul(&gs)
}

/// Computes the POD basis of `s` under `cutoff`.
pub fn pod_basis(ops: &SpatialOperators, s: &SnapshotSet, cutoff: Cutoff) -> Result<PodBasis> {
    if s.n_dofs() != ops.n_dofs() {
        return Err(Error::DimensionMismatch {
            expected: ops.n_dofs(),
            got: s.n_dofs(),
        });
    }
    match cutoff {
        Cutoff::Threshold(t) if !(t > 0.0) => {
            return Err(Error::Config(format!(
                "POD threshold must be positive, got {t}"
            )));
        }
        Cutoff::Rank(r) if r == 0 || r > s.n_snapshots() => {
            return Err(Error::Config(format!(
                "POD rank must lie in 1..={}, got {r}",
                s.n_snapshots()
            )));
        }
        _ => {}
    }

    let (mut eigenvalues, mut vectors) = if s.n_snapshots() <= s.n_dofs() {
        snapshot_route(ops, s)
    } else {
        spatial_route(ops, s)?
    };

    for v in eigenvalues.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let lambda_max = eigenvalues.first().copied().unwrap_or(0.0);
    let floor = match cutoff {
        Cutoff::Threshold(t) => t.max(RANK_SAFETY * lambda_max),
        Cutoff::Rank(_) => RANK_SAFETY * lambda_max,
    };
    let mut keep = eigenvalues.iter().take_while(|&&l| l > floor).count();
    if let Cutoff::Rank(r) = cutoff {
        keep = keep.min(r);
    }
    if keep == 0 {
        return Err(Error::EmptyBasis);
    }
    vectors = vectors.columns(0, keep).into_owned();
    orthonormalize(ops, s.gram_tag, &mut vectors);

    Ok(PodBasis {
        vectors,
        eigenvalues,
        gram_tag: s.gram_tag,
        cutoff_used: cutoff,
    })
}

/// Method of snapshots: eigendecomposition of the n x n correlation matrix,
/// basis vectors `S V / sqrt(lambda)`.
fn snapshot_route(ops: &SpatialOperators, s: &SnapshotSet) -> (Vec<f64>, DMatrix<f64>) {
    let data = s.scaled_data();
    let gs = ops.gram(s.gram_tag) * &data;
    let corr = data.tr_mul(&gs);
    let (eigenvalues, eigvecs) = sorted_eigen(corr);
    let mut vectors = &data * &eigvecs;
    for (i, &l) in eigenvalues.iter().enumerate() {
        if l > 0.0 {
            vectors.column_mut(i).scale_mut(1.0 / l.sqrt());
        }
    }
    (eigenvalues, vectors)
}

/// Spatial route for snapshot counts above the dof count: with `G = L L^T`,
/// the eigenproblem of `(L^T S)(L^T S)^T` has the same nonzero spectrum as
/// the correlation matrix, and `psi = L^{-T} phi` is G-orthonormal.
fn spatial_route(ops: &SpatialOperators, s: &SnapshotSet) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let g = csc_to_dense(ops.gram(s.gram_tag));
    let chol = g
        .cholesky()
        .ok_or_else(|| Error::Factorization("dense Gram factorization failed".into()))?;
    let l = chol.l();
    let hat = l.tr_mul(&s.scaled_data());
    let a = &hat * hat.transpose();
    let (eigenvalues, phi) = sorted_eigen(a);
    let vectors = l
        .transpose()
        .solve_upper_triangular(&phi)
        .ok_or_else(|| Error::Factorization("triangular back-substitution failed".into()))?;
    Ok((eigenvalues, vectors))
}

fn sorted_eigen(sym: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = sym.nrows();
    let eigen = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eigen.eigenvalues[j].partial_cmp(&eigen.eigenvalues[i]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eigen.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eigen.eigenvectors[(r, order[c])]);
    (eigenvalues, vectors)
}

/// Modified Gram-Schmidt pass in the G-inner product. Raw POD vectors lose
/// orthonormality on the order of eps * lambda_max / lambda_kept, which can
/// exceed 1e-10 near the cutoff; one pass restores it without changing any
/// leading span.
fn orthonormalize(ops: &SpatialOperators, tag: GramTag, vectors: &mut DMatrix<f64>) {
    let gram = ops.gram(tag);
    let mut g_cols: Vec<DVector<f64>> = Vec::with_capacity(vectors.ncols());
    for i in 0..vectors.ncols() {
        let mut v = vectors.column(i).into_owned();
        for (j, gj) in g_cols.iter().enumerate() {
            let c = gj.dot(&v);
            v.axpy(-c, &vectors.column(j).into_owned(), 1.0);
        }
        let gv = gram * &v;
        let norm = v.dot(&gv).max(0.0).sqrt();
        v /= norm;
        vectors.set_column(i, &v);
        g_cols.push(gv / norm);
    }
}

/// Coefficients and reconstruction of `x` in a POD basis.
#[derive(Clone, Debug)]
pub struct Projection {
    pub coefficients: DVector<f64>,
    pub reconstruction: DVector<f64>,
}

/// Orthogonal projection onto the basis span in its inner product:
/// `c = Psi^T G x`, reconstruction `Psi c`.
pub fn project(ops: &SpatialOperators, basis: &PodBasis, x: &DVector<f64>) -> Result<Projection> {
    if x.len() != basis.vectors.nrows() {
        return Err(Error::DimensionMismatch {
            expected: basis.vectors.nrows(),
            got: x.len(),
        });
    }
    let gx = ops.gram(basis.gram_tag) * x;
    let coefficients = basis.vectors.tr_mul(&gx);
    let reconstruction = &basis.vectors * &coefficients;
    Ok(Projection { coefficients, reconstruction })
}

/// Total squared projection error of the snapshot set onto the basis,
/// weighted like the POD functional; equals the eigenvalue tail sum when
/// the basis came from this set.
pub fn reconstruction_error(
    ops: &SpatialOperators,
    basis: &PodBasis,
    s: &SnapshotSet,
) -> Result<f64> {
    let mut total = 0.0;
    for j in 0..s.n_snapshots() {
        let v = s.data.column(j).into_owned();
        let p = project(ops, basis, &v)?;
        let d = v - p.reconstruction;
        let w = s.weights.as_ref().map_or(1.0, |w| w[j]);
        total += w * ops.inner_product(&d, &d, s.gram_tag);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{assemble_operators, build_grid, csc_identity, DomainSpec, Mask};
    use approx::assert_abs_diff_eq;
    use nalgebra_sparse::CscMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn square_ops(cells: usize) -> SpatialOperators {
        let grid = build_grid(&DomainSpec {
            dimension: 2,
            cells_per_side: cells,
            mask: Mask::None,
        })
        .unwrap();
        assemble_operators(&grid).unwrap()
    }

    fn euclid_ops(n: usize) -> SpatialOperators {
        SpatialOperators::surrogate(csc_identity(n), CscMatrix::zeros(n, n), DVector::zeros(n))
            .unwrap()
    }

    fn random_set(
        ops: &SpatialOperators,
        n: usize,
        tag: GramTag,
        seed: u64,
    ) -> SnapshotSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(ops.n_dofs(), |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        SnapshotSet::from_columns(&cols, tag).unwrap()
    }

    fn orthonormality_defect(ops: &SpatialOperators, basis: &PodBasis) -> f64 {
        let g = ops.gram(basis.gram_tag) * &basis.vectors;
        let mut gram = basis.vectors.tr_mul(&g);
        for i in 0..gram.nrows() {
            gram[(i, i)] -= 1.0;
        }
        gram.abs().max()
    }

    fn projector(ops: &SpatialOperators, basis: &PodBasis) -> DMatrix<f64> {
        let g = csc_to_dense(ops.gram(basis.gram_tag));
        &basis.vectors * basis.vectors.tr_mul(&g)
    }

    #[test]
    fn correlation_matrix_matches_double_loop() {
        let ops = square_ops(4);
        let s = random_set(&ops, 3, GramTag::H, 1);
        let k = correlation_matrix(&ops, &s);
        for i in 0..3 {
            for j in 0..3 {
                let vi = s.data.column(i).into_owned();
                let vj = s.data.column(j).into_owned();
                let expect = ops.inner_product(&vi, &vj, GramTag::H);
                assert_abs_diff_eq!(k[(i, j)], expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn correlation_of_orthonormal_snapshots_is_identity() {
        let ops = square_ops(4);
        let raw = random_set(&ops, 3, GramTag::W, 2);
        let basis = pod_basis(&ops, &raw, Cutoff::Rank(3)).unwrap();
        let s = SnapshotSet::from_columns(&basis.columns_vec(), GramTag::W).unwrap();
        let mut k = correlation_matrix(&ops, &s);
        for i in 0..3 {
            k[(i, i)] -= 1.0;
        }
        assert!(k.abs().max() < 1e-10);
    }

    #[test]
    fn duplicated_snapshot_yields_rank_one() {
        let ops = square_ops(4);
        let raw = random_set(&ops, 1, GramTag::H, 3);
        let v = raw.data.column(0).into_owned();
        let v = &v / ops.h_norm(&v);
        let s = SnapshotSet::from_columns(&[v.clone(), v.clone()], GramTag::H).unwrap();

        let k = correlation_matrix(&ops, &s);
        for entry in [k[(0, 0)], k[(0, 1)], k[(1, 0)], k[(1, 1)]] {
            assert_abs_diff_eq!(entry, 1.0, epsilon = 1e-12);
        }

        let basis = pod_basis(&ops, &s, Cutoff::Threshold(1e-10)).unwrap();
        assert_eq!(basis.rank(), 1);
        assert_abs_diff_eq!(basis.eigenvalues[0], 2.0, epsilon = 1e-12);
        assert!(basis.eigenvalues[1].abs() < 1e-12);
        let alignment = ops.inner_product(&basis.column(0), &v, GramTag::H).abs();
        assert_abs_diff_eq!(alignment, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn unit_vectors_give_flat_spectrum() {
        let ops = euclid_ops(5);
        let cols = vec![
            DVector::from_fn(5, |i, _| if i == 0 { 1.0 } else { 0.0 }),
            DVector::from_fn(5, |i, _| if i == 1 { 1.0 } else { 0.0 }),
        ];
        let s = SnapshotSet::from_columns(&cols, GramTag::H).unwrap();
        let basis = pod_basis(&ops, &s, Cutoff::Threshold(1e-12)).unwrap();
        assert_eq!(basis.rank(), 2);
        assert_abs_diff_eq!(basis.eigenvalues[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(basis.eigenvalues[1], 1.0, epsilon = 1e-12);
        // The projector reproduces both coordinate directions.
        for c in &cols {
            let p = project(&ops, &basis, c).unwrap();
            assert!((c - p.reconstruction).amax() < 1e-10);
        }
    }

    #[test]
    fn rank_one_basis_matches_dense_eigensolver() {
        let ops = square_ops(4);
        let s = random_set(&ops, 5, GramTag::W, 4);
        let basis = pod_basis(&ops, &s, Cutoff::Rank(1)).unwrap();

        let corr = correlation_matrix(&ops, &s);
        let (oracle_vals, oracle_vecs) = sorted_eigen(corr);
        assert_abs_diff_eq!(basis.eigenvalues[0], oracle_vals[0], epsilon = 1e-12);
        let mut oracle = DVector::zeros(ops.n_dofs());
        for l in 0..5 {
            oracle.axpy(oracle_vecs[(l, 0)], &s.data.column(l).into_owned(), 1.0);
        }
        oracle /= oracle_vals[0].sqrt();
        let align = ops.inner_product(&basis.column(0), &oracle, GramTag::W).abs();
        assert_abs_diff_eq!(align, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn produced_bases_are_orthonormal() {
        let ops = square_ops(5);
        for (seed, tag) in [(5, GramTag::H), (6, GramTag::W)] {
            let s = random_set(&ops, 10, tag, seed);
            let basis = pod_basis(&ops, &s, Cutoff::Threshold(1e-12)).unwrap();
            assert_eq!(basis.rank(), 10);
            assert!(orthonormality_defect(&ops, &basis) < 1e-10);
        }
    }

    #[test]
    fn projection_satisfies_pythagoras() {
        let ops = square_ops(5);
        let s = random_set(&ops, 6, GramTag::W, 7);
        let basis = pod_basis(&ops, &s, Cutoff::Rank(3)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let x = DVector::from_fn(ops.n_dofs(), |_, _| rng.gen_range(-1.0..1.0));
            let p = project(&ops, &basis, &x).unwrap();
            let tail = &x - &p.reconstruction;
            let lhs = ops.inner_product(&x, &x, GramTag::W);
            let rhs = p.coefficients.norm_squared() + ops.inner_product(&tail, &tail, GramTag::W);
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.max(1.0));

            // Idempotence of the projector.
            let p2 = project(&ops, &basis, &p.reconstruction).unwrap();
            assert!((&p.reconstruction - &p2.reconstruction).amax() < 1e-12);
        }
    }

    #[test]
    fn in_span_vectors_reconstruct_exactly() {
        let ops = square_ops(5);
        let s = random_set(&ops, 4, GramTag::H, 9);
        let basis = pod_basis(&ops, &s, Cutoff::Rank(4)).unwrap();
        let x = basis.column(0) * 2.0 - basis.column(2) * 0.3;
        let p = project(&ops, &basis, &x).unwrap();
        assert!((&x - &p.reconstruction).amax() < 1e-10);

        // A vector orthogonal to the span projects to zero.
        let full = random_set(&ops, 1, GramTag::H, 10);
        let y = full.data.column(0).into_owned();
        let py = project(&ops, &basis, &y).unwrap();
        let orth = &y - &py.reconstruction;
        let p_orth = project(&ops, &basis, &orth).unwrap();
        assert!(p_orth.reconstruction.amax() < 1e-10 * y.amax());
    }

    #[test]
    fn tail_sum_identity_holds_at_every_rank() {
        let ops = square_ops(5);
        for tag in [GramTag::H, GramTag::W] {
            let s = random_set(&ops, 12, tag, 11);
            let full = pod_basis(&ops, &s, Cutoff::Rank(12)).unwrap();
            let total = full.eigenvalue_sum();
            for k in 1..=12 {
                let basis = rank_truncate(&full, k);
                let err = reconstruction_error(&ops, &basis, &s).unwrap();
                let tail = full.tail_sum(k);
                assert!(
                    (err - tail).abs() <= 1e-9 * total,
                    "rank {k}: error {err} vs tail {tail}"
                );
            }
        }
    }

    #[test]
    fn zero_rank_error_equals_total_energy() {
        let ops = square_ops(4);
        let s = random_set(&ops, 5, GramTag::H, 12);
        let full = pod_basis(&ops, &s, Cutoff::Rank(5)).unwrap();
        let total: f64 = (0..5)
            .map(|j| {
                let v = s.data.column(j).into_owned();
                ops.inner_product(&v, &v, GramTag::H)
            })
            .sum();
        assert!((full.eigenvalue_sum() - total).abs() <= 1e-10 * total);
        let err_full = reconstruction_error(&ops, &full, &s).unwrap();
        assert!(err_full <= 1e-9 * total);
    }

    #[test]
    fn eigenvalues_invariant_under_permutation() {
        let ops = square_ops(5);
        let s = random_set(&ops, 8, GramTag::W, 13);
        let mut perm_cols = (0..8).map(|j| s.data.column(j).into_owned()).collect::<Vec<_>>();
        perm_cols.rotate_left(3);
        perm_cols.swap(0, 5);
        let sp = SnapshotSet::from_columns(&perm_cols, GramTag::W).unwrap();

        let a = pod_basis(&ops, &s, Cutoff::Threshold(1e-12)).unwrap();
        let b = pod_basis(&ops, &sp, Cutoff::Threshold(1e-12)).unwrap();
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            assert!((x - y).abs() <= 1e-12 * a.eigenvalues[0]);
        }
        let diff = projector(&ops, &a) - projector(&ops, &b);
        assert!(diff.abs().max() < 1e-9);
    }

    #[test]
    fn spatial_route_matches_snapshot_route() {
        // More snapshots than dofs forces the spatial route; compare with
        // the correlation route computed inline.
        let ops = square_ops(4);
        let n_dofs = ops.n_dofs();
        let s = random_set(&ops, n_dofs + 11, GramTag::W, 14);
        let basis = pod_basis(&ops, &s, Cutoff::Rank(4)).unwrap();
        assert_eq!(basis.eigenvalues.len(), n_dofs);
        assert!(orthonormality_defect(&ops, &basis) < 1e-10);

        let corr = correlation_matrix(&ops, &s);
        let (oracle_vals, oracle_vecs) = sorted_eigen(corr);
        for k in 0..6 {
            assert!(
                (basis.eigenvalues[k] - oracle_vals[k]).abs() <= 1e-10 * oracle_vals[0],
                "eigenvalue {k}"
            );
        }
        let tail_oracle: f64 = oracle_vals.iter().skip(4).sum();
        assert!((basis.tail_sum(4) - tail_oracle).abs() <= 1e-9 * oracle_vals[0]);

        let mut oracle_vectors = &s.data * oracle_vecs.columns(0, 4).into_owned();
        for i in 0..4 {
            oracle_vectors.column_mut(i).scale_mut(1.0 / oracle_vals[i].sqrt());
        }
        let oracle_basis = PodBasis {
            vectors: oracle_vectors,
            eigenvalues: oracle_vals,
            gram_tag: GramTag::W,
            cutoff_used: Cutoff::Rank(4),
        };
        let diff = projector(&ops, &basis) - projector(&ops, &oracle_basis);
        assert!(diff.abs().max() < 1e-8);
    }

    #[test]
    fn uniform_weights_rescale_eigenvalues_only() {
        let ops = square_ops(4);
        let s = random_set(&ops, 6, GramTag::H, 15);
        let sw = s.clone().with_weights(vec![0.25; 6]).unwrap();
        let a = pod_basis(&ops, &s, Cutoff::Rank(3)).unwrap();
        let b = pod_basis(&ops, &sw, Cutoff::Rank(3)).unwrap();
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            assert!((x * 0.25 - y).abs() <= 1e-12 * a.eigenvalues[0]);
        }
        let diff = projector(&ops, &a) - projector(&ops, &b);
        assert!(diff.abs().max() < 1e-9);
    }

    #[test]
    fn trapezoid_weights_keep_the_tail_identity() {
        let ops = square_ops(4);
        let s = random_set(&ops, 7, GramTag::W, 16);
        let mut w = vec![0.125; 7];
        w[0] = 0.0625;
        w[6] = 0.0625;
        let sw = s.with_weights(w).unwrap();
        let full = pod_basis(&ops, &sw, Cutoff::Rank(7)).unwrap();
        assert!(orthonormality_defect(&ops, &full) < 1e-10);
        let total = full.eigenvalue_sum();
        for k in 1..=7 {
            let basis = rank_truncate(&full, k);
            let err = reconstruction_error(&ops, &basis, &sw).unwrap();
            assert!((err - full.tail_sum(k)).abs() <= 1e-9 * total, "rank {k}");
        }
    }

    #[test]
    fn oversized_threshold_reports_empty_basis() {
        let ops = square_ops(4);
        let s = random_set(&ops, 4, GramTag::H, 17);
        let err = pod_basis(&ops, &s, Cutoff::Threshold(1e9));
        assert!(matches!(err, Err(Error::EmptyBasis)));
    }

    #[test]
    fn invalid_cutoffs_are_rejected() {
        let ops = square_ops(4);
        let s = random_set(&ops, 4, GramTag::H, 18);
        assert!(matches!(
            pod_basis(&ops, &s, Cutoff::Threshold(0.0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            pod_basis(&ops, &s, Cutoff::Rank(0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            pod_basis(&ops, &s, Cutoff::Rank(5)),
            Err(Error::Config(_))
        ));
        assert!(SnapshotSet::from_columns(&[], GramTag::H).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_sets_obey_pod_identities(
            seed in 0u64..4096,
            n in 2usize..12,
            rank in 1usize..6,
            use_w in proptest::bool::ANY,
        ) {
            let ops = square_ops(4);
            let tag = if use_w { GramTag::W } else { GramTag::H };
            let s = random_set(&ops, n, tag, seed);
            let rank = rank.min(n);
            let full = pod_basis(&ops, &s, Cutoff::Rank(n)).unwrap();
            prop_assert!(orthonormality_defect(&ops, &full) < 1e-10);
            let basis = rank_truncate(&full, rank);
            let err = reconstruction_error(&ops, &basis, &s).unwrap();
            let total = full.eigenvalue_sum();
            prop_assert!((err - full.tail_sum(rank)).abs() <= 1e-9 * total.max(1e-30));
        }
    }
}
