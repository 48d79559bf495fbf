//! Galerkin reduction onto a POD basis.
//!
//! Reduced operators are dense projections of the sparse ones; the cubic
//! term is lifted to the grid, evaluated nodewise, and projected back, so
//! the reduced dynamics reproduce the full ones exactly when the basis has
//! full rank. An optional precomputed fourth-order tensor replaces the
//! lift for very small bases.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::mesh::{GramTag, PdeParams, SpatialOperators};
use crate::newton::LinearizedOperator;
use crate::pod::PodBasis;
use crate::stepper::{sample_control, Trajectory, NEWTON_MAX_ITER, NEWTON_TOL};
use crate::Result;

/// Largest basis for which the cubic tensor may be materialized; beyond
/// this the lift is both faster to set up and lighter on memory.
pub const TENSOR_DIM_CAP: usize = 40;

/// Dense Galerkin projection of the spatial operators onto a basis that is
/// orthonormal in the weighted space.
#[derive(Clone, Debug)]
pub struct ReducedModel {
    /// dof x k basis matrix.
    pub psi: DMatrix<f64>,
    pub m_r: DMatrix<f64>,
    pub k_r: DMatrix<f64>,
    /// Projection of the linearized-reaction matrix, when the model was
    /// built with a linearization attached.
    pub c_r: Option<DMatrix<f64>>,
    /// Projected control load.
    pub f_r: DVector<f64>,
    /// Cached `M psi`, the workhorse of lift-evaluate-project.
    pub m_psi: DMatrix<f64>,
    /// Cached `G_W psi`; restriction is its transpose.
    pub gw_psi: DMatrix<f64>,
    cubic_tensor: Option<Vec<f64>>,
    jacobian_tensor: Option<Vec<f64>>,
}

pub fn reduce_model(
    ops: &SpatialOperators,
    basis: &PodBasis,
    lin: Option<&LinearizedOperator>,
) -> Result<ReducedModel> {
    if basis.gram_tag != GramTag::W {
        return Err(Error::Config(
            "state reduction expects a basis orthonormal in the weighted space".into(),
        ));
    }
    if basis.vectors.nrows() != ops.n_dofs() {
        return Err(Error::DimensionMismatch {
            expected: ops.n_dofs(),
            got: basis.vectors.nrows(),
        });
    }
    let psi = basis.vectors.clone();
    let m_psi = ops.gram(GramTag::H) * &psi;
    let k_psi = &ops.k * &psi;
    let gw_psi = ops.gram(GramTag::W) * &psi;
    let m_r = psi.tr_mul(&m_psi);
    let k_r = psi.tr_mul(&k_psi);
    let c_r = lin.map(|lin| psi.tr_mul(&(&lin.c_mat * &psi)));
    let f_r = psi.tr_mul(&ops.load_f);
    Ok(ReducedModel {
        psi,
        m_r,
        k_r,
        c_r,
        f_r,
        m_psi,
        gw_psi,
        cubic_tensor: None,
        jacobian_tensor: None,
    })
}

impl ReducedModel {
    pub fn dim(&self) -> usize {
        self.psi.ncols()
    }

    pub fn n_dofs(&self) -> usize {
        self.psi.nrows()
    }

    pub fn lift(&self, yhat: &DVector<f64>) -> DVector<f64> {
        &self.psi * yhat
    }

    pub fn lift_trajectory(&self, t: &Trajectory) -> Trajectory {
        Trajectory {
            states: t.states.iter().map(|s| self.lift(s)).collect(),
            dt: t.dt,
        }
    }

    /// Coefficients of the orthogonal projection onto the basis in the
    /// weighted inner product.
    pub fn restrict_w(&self, y: &DVector<f64>) -> DVector<f64> {
        self.gw_psi.tr_mul(y)
    }

    /// Galerkin cubic term `(M psi)^T (psi yhat)^3`, without the reaction
    /// coefficient.
    pub fn cubic_galerkin(&self, yhat: &DVector<f64>) -> DVector<f64> {
        if let Some(tensor) = &self.cubic_tensor {
            return contract_pairs(tensor, self.dim(), yhat) * yhat;
        }
        let lifted = self.lift(yhat);
        self.m_psi.tr_mul(&lifted.map(|v| v * v * v))
    }

    /// Exact Galerkin Jacobian block `psi^T M diag(q) psi` for a nodal
    /// weight `q`; the cubic term differentiates into three times this with
    /// `q` the squared lifted state.
    pub fn weighted_nodal_jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.psi.clone();
        for j in 0..scaled.ncols() {
            scaled.column_mut(j).component_mul_assign(q);
        }
        self.m_psi.tr_mul(&scaled)
    }

    /// [`weighted_nodal_jacobian`](Self::weighted_nodal_jacobian) at the
    /// squared lifted state, the block the adjoint stepper rebuilds every
    /// step. Contracts the cubic tensor when one is materialized instead of
    /// lifting to the grid.
    pub fn cubic_jacobian(&self, yhat: &DVector<f64>) -> DMatrix<f64> {
        if let Some(tensor) = &self.cubic_tensor {
            return contract_pairs(tensor, self.dim(), yhat);
        }
        let q = self.lift(yhat).map(|v| v * v);
        self.weighted_nodal_jacobian(&q)
    }

    /// Projected weighted mass at the squared lifted state,
    /// `psi^T W((psi yhat)^2) psi`, the cubic block of the reduced Newton
    /// matrix. Contracts the Jacobian tensor when one is materialized;
    /// otherwise assembles the full-space weighted mass and projects it.
    pub fn weighted_mass_jacobian(
        &self,
        ops: &SpatialOperators,
        yhat: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        if let Some(tensor) = &self.jacobian_tensor {
            return Ok(contract_pairs(tensor, self.dim(), yhat));
        }
        let q = self.lift(yhat).map(|v| v * v);
        reduced_weighted_mass(ops, self, &q)
    }

    /// Materializes the fourth-order cubic tensor
    /// `T[i][j][l][m] = sum_n (M psi)[n][i] psi[n][j] psi[n][l] psi[n][m]`
    /// so the cubic term no longer lifts to the grid. Only worthwhile for
    /// small bases; the evaluation is a drop-in replacement with identical
    /// results up to roundoff.
    pub fn enable_cubic_tensor(&mut self) -> Result<()> {
        let k = self.dim();
        if k > TENSOR_DIM_CAP {
            return Err(Error::Config(format!(
                "cubic tensor supports at most {TENSOR_DIM_CAP} basis vectors, got {k}"
            )));
        }
        let n = self.n_dofs();
        let mut tensor = vec![0.0; k * k * k * k];
        let k2 = k * k;
        for node in 0..n {
            for j in 0..k {
                let pj = self.psi[(node, j)];
                if pj == 0.0 {
                    continue;
                }
                for l in 0..k {
                    let pjl = pj * self.psi[(node, l)];
                    if pjl == 0.0 {
                        continue;
                    }
                    for m in 0..k {
                        let pjlm = pjl * self.psi[(node, m)];
                        let idx = (j * k + l) * k + m;
                        for i in 0..k {
                            tensor[i * k2 * k + idx] += self.m_psi[(node, i)] * pjlm;
                        }
                    }
                }
            }
        }
        self.cubic_tensor = Some(tensor);
        Ok(())
    }

    /// Materializes the fourth-order Jacobian tensor
    /// `T[i][j][l][m] = (psi^T W(psi_l .* psi_m) psi)[i][j]`
    /// whose pair contraction with `yhat` reproduces
    /// `psi^T W((psi yhat)^2) psi`, so the reduced Newton matrix no longer
    /// assembles a full-space weighted mass per iteration. Same size cap and
    /// trade-off as [`enable_cubic_tensor`](Self::enable_cubic_tensor).
    pub fn enable_jacobian_tensor(&mut self, ops: &SpatialOperators) -> Result<()> {
        let k = self.dim();
        if k > TENSOR_DIM_CAP {
            return Err(Error::Config(format!(
                "jacobian tensor supports at most {TENSOR_DIM_CAP} basis vectors, got {k}"
            )));
        }
        let k2 = k * k;
        let mut tensor = vec![0.0; k2 * k2];
        for l in 0..k {
            for m in l..k {
                let w = DVector::from_fn(self.n_dofs(), |node, _| {
                    self.psi[(node, l)] * self.psi[(node, m)]
                });
                let block = reduced_weighted_mass(ops, self, &w)?;
                for i in 0..k {
                    for j in 0..k {
                        let v = block[(i, j)];
                        tensor[(i * k + j) * k2 + l * k + m] = v;
                        tensor[(i * k + j) * k2 + m * k + l] = v;
                    }
                }
            }
        }
        self.jacobian_tensor = Some(tensor);
        Ok(())
    }

    pub fn cubic_tensor_enabled(&self) -> bool {
        self.cubic_tensor.is_some()
    }

    pub fn jacobian_tensor_enabled(&self) -> bool {
        self.jacobian_tensor.is_some()
    }
}

/// Pair contraction `B[i][j] = sum_{l,m} tensor[i][j][l][m] yhat[l] yhat[m]`
/// shared by the tensor fast paths.
fn contract_pairs(tensor: &[f64], k: usize, yhat: &DVector<f64>) -> DMatrix<f64> {
    let k2 = k * k;
    let mut pair = vec![0.0; k2];
    for l in 0..k {
        for m in 0..k {
            pair[l * k + m] = yhat[l] * yhat[m];
        }
    }
    DMatrix::from_fn(k, k, |i, j| {
        let base = (i * k + j) * k2;
        tensor[base..base + k2].iter().zip(&pair).map(|(t, p)| t * p).sum()
    })
}

fn check_finite_reduced(yhat: &DVector<f64>, step: usize) -> Result<()> {
    if yhat.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { step })
    }
}

/// Reduced residual norm mirroring the full solver: the inverse-mass norm
/// of the residual, scaled by the step size.
fn reduced_residual_norm(
    m_chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    r: &DVector<f64>,
    dt: f64,
) -> f64 {
    let z = m_chol.solve(r);
    r.dot(&z).max(0.0).sqrt() / dt
}

/// Projected weighted mass `psi^T W(q) psi`, the symmetric Jacobian block
/// of the reduced Newton iteration.
fn reduced_weighted_mass(
    ops: &SpatialOperators,
    rm: &ReducedModel,
    q: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let w = ops.weighted_mass(q)?;
    Ok(rm.psi.tr_mul(&(&w * &rm.psi)))
}

/// Reduced semilinear theta-scheme with a per-step Newton iteration, the
/// direct counterpart of the full solver.
pub fn solve_reduced_semilinear(
    ops: &SpatialOperators,
    rm: &ReducedModel,
    params: &PdeParams,
    u: &[f64],
    y0: &DVector<f64>,
) -> Result<Trajectory> {
    params.validate()?;
    if u.len() != params.k_steps {
        return Err(Error::DimensionMismatch { expected: params.k_steps, got: u.len() });
    }
    if y0.len() != rm.n_dofs() {
        return Err(Error::DimensionMismatch { expected: rm.n_dofs(), got: y0.len() });
    }
    let dt = params.dt();
    let theta = params.theta;
    let a_impl = &rm.m_r + &rm.k_r * (dt * theta * params.a);
    let a_expl = &rm.m_r - &rm.k_r * (dt * (1.0 - theta) * params.a);
    let m_chol = rm
        .m_r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Factorization("reduced mass factorization failed".into()))?;

    let mut yhat = rm.restrict_w(y0);
    let mut states = Vec::with_capacity(params.k_steps + 1);
    states.push(yhat.clone());
    for (k, &uk) in u.iter().enumerate() {
        let mut rhs = &a_expl * &yhat;
        if theta < 1.0 {
            rhs.axpy(-dt * (1.0 - theta) * params.b, &rm.cubic_galerkin(&yhat), 1.0);
        }
        rhs.axpy(dt * uk, &rm.f_r, 1.0);

        let residual = |x: &DVector<f64>| {
            let mut res = &a_impl * x;
            res.axpy(dt * theta * params.b, &rm.cubic_galerkin(x), 1.0);
            res -= &rhs;
            res
        };

        let mut x = yhat.clone();
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITER {
            let res = residual(&x);
            if reduced_residual_norm(&m_chol, &res, dt) <= NEWTON_TOL {
                converged = true;
                break;
            }
            let jac =
                &a_impl + rm.weighted_mass_jacobian(ops, &x)? * (3.0 * dt * theta * params.b);
            let delta = jac
                .lu()
                .solve(&res)
                .ok_or_else(|| Error::Factorization("reduced Newton system is singular".into()))?;
            x -= delta;
        }
        if !converged {
            return Err(Error::NewtonDivergence {
                step: k,
                max_iter: NEWTON_MAX_ITER,
                residual: reduced_residual_norm(&m_chol, &residual(&x), dt),
            });
        }
        check_finite_reduced(&x, k)?;
        yhat = x;
        states.push(yhat.clone());
    }
    Ok(Trajectory { states, dt })
}

/// Convenience wrapper sampling the control like the full solver does.
pub fn solve_reduced_semilinear_sampled(
    ops: &SpatialOperators,
    rm: &ReducedModel,
    params: &PdeParams,
    control: impl Fn(f64) -> f64,
    y0: &DVector<f64>,
) -> Result<Trajectory> {
    let u = sample_control(params, control);
    solve_reduced_semilinear(ops, rm, params, &u, y0)
}

/// Dense linear theta-stepper shared by the reduced Newton steps.
struct ReducedThetaScheme {
    a_impl_lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    a_expl: DMatrix<f64>,
    dt: f64,
}

impl ReducedThetaScheme {
    fn new(rm: &ReducedModel, params: &PdeParams) -> Result<Self> {
        let c_r = rm.c_r.as_ref().ok_or_else(|| {
            Error::Config("reduced Newton steps need a model built with a linearization".into())
        })?;
        let dt = params.dt();
        let l_r = &rm.k_r * params.a + c_r;
        let a_impl = &rm.m_r + &l_r * (dt * params.theta);
        let a_expl = &rm.m_r - &l_r * (dt * (1.0 - params.theta));
        Ok(ReducedThetaScheme { a_impl_lu: a_impl.lu(), a_expl, dt })
    }

    fn solve(&self, loads: &[DVector<f64>], yhat0: DVector<f64>) -> Result<Trajectory> {
        let mut states = Vec::with_capacity(loads.len() + 1);
        let mut yhat = yhat0;
        states.push(yhat.clone());
        for (k, g) in loads.iter().enumerate() {
            let mut rhs = &self.a_expl * &yhat;
            rhs.axpy(self.dt, g, 1.0);
            yhat = self
                .a_impl_lu
                .solve(&rhs)
                .ok_or_else(|| Error::Factorization("reduced step matrix is singular".into()))?;
            check_finite_reduced(&yhat, k)?;
            states.push(yhat.clone());
        }
        Ok(Trajectory { states, dt: self.dt })
    }
}

/// Reduced first simplified Newton step: projected control-independent
/// source plus the projected control load, started from the projected
/// deviation of the initial value.
pub fn reduced_first_newton_step(
    rm: &ReducedModel,
    lin: &LinearizedOperator,
    u: &[f64],
    y0: &DVector<f64>,
) -> Result<Trajectory> {
    if u.len() != lin.params.k_steps {
        return Err(Error::DimensionMismatch { expected: lin.params.k_steps, got: u.len() });
    }
    let scheme = ReducedThetaScheme::new(rm, &lin.params)?;
    let source_r = rm.psi.tr_mul(&lin.const_source);
    let loads: Vec<DVector<f64>> = u
        .iter()
        .map(|&uk| {
            let mut g = source_r.clone();
            g.axpy(uk, &rm.f_r, 1.0);
            g
        })
        .collect();
    scheme.solve(&loads, rm.restrict_w(&(y0 - &lin.ybar)))
}

/// Reduced second simplified Newton step. Each load lifts the first-step
/// deviation, forms the cubic Taylor remainder nodewise, and routes the
/// cube through the nonlinearity basis before projecting back; without a
/// nonlinearity basis the cube stays exact.
pub fn reduced_second_newton_step(
    ops: &SpatialOperators,
    rm: &ReducedModel,
    lin: &LinearizedOperator,
    nonlin: Option<&PodBasis>,
    d1: &Trajectory,
) -> Result<Trajectory> {
    if let Some(basis) = nonlin {
        if basis.gram_tag != GramTag::H {
            return Err(Error::Config(
                "nonlinearity projection expects a basis orthonormal in the state space".into(),
            ));
        }
    }
    if d1.states.len() != lin.params.k_steps + 1 {
        return Err(Error::DimensionMismatch {
            expected: lin.params.k_steps + 1,
            got: d1.states.len(),
        });
    }
    let scheme = ReducedThetaScheme::new(rm, &lin.params)?;
    let ybar = &lin.ybar;
    let ybar_cube = ybar.map(|v| v * v * v);
    let ybar_sq3 = ybar.component_mul(ybar) * 3.0;
    // M-orthonormal columns make the H-projection `C (C^T M x)`.
    let m_c = nonlin.map(|basis| ops.gram(GramTag::H) * &basis.vectors);

    let loads: Vec<DVector<f64>> = d1.states[..lin.params.k_steps]
        .iter()
        .map(|alpha| {
            let d = rm.lift(alpha);
            let mut cube = (ybar + &d).map(|v| v * v * v);
            if let (Some(basis), Some(m_c)) = (nonlin, &m_c) {
                cube = &basis.vectors * m_c.tr_mul(&cube);
            }
            let mut nodal = ybar_cube.clone();
            nodal += ybar_sq3.component_mul(&d);
            nodal -= &cube;
            rm.m_psi.tr_mul(&nodal) * lin.params.b
        })
        .collect();
    scheme.solve(&loads, DVector::zeros(rm.dim()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{assemble_operators, build_grid, DomainSpec, Mask};
    use crate::newton::{first_newton_step, linearize, second_newton_step};
    use crate::pod::{pod_basis, Cutoff, SnapshotSet};
    use crate::stepper::{compute_steady_state, solve_semilinear, trajectory_error};
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

    fn random_basis(
        ops: &SpatialOperators,
        rank: usize,
        tag: GramTag,
        seed: u64,
    ) -> PodBasis {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<DVector<f64>> = (0..rank)
            .map(|_| DVector::from_fn(ops.n_dofs(), |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let set = SnapshotSet::from_columns(&cols, tag).unwrap();
        pod_basis(ops, &set, Cutoff::Rank(rank)).unwrap()
    }

    fn full_rank_basis(ops: &SpatialOperators, tag: GramTag, seed: u64) -> PodBasis {
        random_basis(ops, ops.n_dofs(), tag, seed)
    }

    #[test]
    fn projected_mass_and_stiffness_partition_identity() {
        let ops = square_ops(5);
        let basis = random_basis(&ops, 6, GramTag::W, 1);
        let rm = reduce_model(&ops, &basis, None).unwrap();
        let mut sum = &rm.m_r + &rm.k_r;
        for i in 0..rm.dim() {
            sum[(i, i)] -= 1.0;
        }
        assert!(sum.abs().max() < 1e-10);
    }

    #[test]
    fn lift_is_an_isometry_and_restriction_inverts_it() {
        let ops = square_ops(5);
        let basis = random_basis(&ops, 5, GramTag::W, 2);
        let rm = reduce_model(&ops, &basis, None).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let alpha = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
        let lifted = rm.lift(&alpha);
        assert!((ops.w_norm(&lifted) - alpha.norm()).abs() < 1e-12);
        let back = rm.restrict_w(&lifted);
        assert!((back - &alpha).amax() < 1e-12);
    }

    #[test]
    fn state_space_basis_is_rejected() {
        let ops = square_ops(4);
        let basis = random_basis(&ops, 3, GramTag::H, 4);
        assert!(matches!(reduce_model(&ops, &basis, None), Err(Error::Config(_))));
    }

    #[test]
    fn single_mode_step_matches_scalar_bisection() {
        let ops = square_ops(5);
        let basis = random_basis(&ops, 1, GramTag::W, 5);
        let rm = reduce_model(&ops, &basis, None).unwrap();
        let params = PdeParams { a: 0.5, b: 2.0, t_final: 2.0, theta: 1.0, k_steps: 1 };
        let dt = params.dt();

        let y0 = rm.lift(&DVector::from_element(1, 0.7));
        let traj = solve_reduced_semilinear(&ops, &rm, &params, &[1.5], &y0).unwrap();

        // One implicit step of the scalar model
        // (m + dt a k) x + dt b s x^3 = m x0 + dt u f, solved by bisection.
        let m = rm.m_r[(0, 0)];
        let kk = rm.k_r[(0, 0)];
        let s = {
            let phi = rm.psi.column(0).into_owned();
            let m_phi = rm.m_psi.column(0).into_owned();
            m_phi.dot(&phi.map(|v| v * v * v))
        };
        let rhs = m * 0.7 + dt * 1.5 * rm.f_r[0];
        let g = |x: f64| (m + dt * params.a * kk) * x + dt * params.b * s * x * x * x - rhs;
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(lo) * g(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((traj.states[1][0] - 0.5 * (lo + hi)).abs() < 1e-9);
    }

    #[test]
    fn full_rank_reduction_reproduces_the_semilinear_solve() {
        let ops = square_ops(5);
        let basis = full_rank_basis(&ops, GramTag::W, 6);
        for theta in [1.0, 0.75] {
            let params = PdeParams { a: 0.1, b: 3.0, t_final: 0.5, theta, k_steps: 64 };
            let rm = reduce_model(&ops, &basis, None).unwrap();
            let u = sample_control(&params, |t| 2.0 + (2.0 * std::f64::consts::PI * t).cos());
            let y0 = DVector::from_element(ops.n_dofs(), 0.4);
            let full = solve_semilinear(&ops, &params, &u, &y0).unwrap();
            let reduced = solve_reduced_semilinear(&ops, &rm, &params, &u, &y0).unwrap();
            let lifted = rm.lift_trajectory(&reduced);
            let err = trajectory_error(&lifted, &full, &ops, GramTag::W);
            assert!(err < 1e-8, "theta {theta}: deviation {err}");
        }
    }

    #[test]
    fn full_rank_reduction_reproduces_both_newton_steps() {
        let ops = square_ops(5);
        let params = PdeParams { a: 0.1, b: 3.0, t_final: 1.0, theta: 1.0, k_steps: 12 };
        let ybar = compute_steady_state(&ops, &params, 2.0).unwrap();
        let lin = linearize(&ops, &params, &ybar).unwrap();
        let basis = full_rank_basis(&ops, GramTag::W, 7);
        let rm = reduce_model(&ops, &basis, Some(&lin)).unwrap();
        let nonlin_full = full_rank_basis(&ops, GramTag::H, 8);

        let u = sample_control(&params, |t| 2.0 + 1.5 * (2.0 * std::f64::consts::PI * t).sin());
        let y0 = &ybar * 0.9;

        let d1_full = first_newton_step(&ops, &lin, &u, &y0).unwrap();
        let d1_red = reduced_first_newton_step(&rm, &lin, &u, &y0).unwrap();
        let err1 = trajectory_error(&rm.lift_trajectory(&d1_red), &d1_full, &ops, GramTag::W);
        assert!(err1 < 1e-8, "first step deviation {err1}");

        let d2_full = second_newton_step(&ops, &lin, &d1_full).unwrap();
        let d2_red =
            reduced_second_newton_step(&ops, &rm, &lin, Some(&nonlin_full), &d1_red).unwrap();
        let err2 = trajectory_error(&rm.lift_trajectory(&d2_red), &d2_full, &ops, GramTag::W);
        assert!(err2 < 1e-8, "second step deviation {err2}");

        // Skipping the nonlinearity projection entirely must agree too,
        // since a full-rank projection changes nothing.
        let d2_plain = reduced_second_newton_step(&ops, &rm, &lin, None, &d1_red).unwrap();
        let err3 = trajectory_error(&rm.lift_trajectory(&d2_plain), &d2_full, &ops, GramTag::W);
        assert!(err3 < 1e-8, "unprojected second step deviation {err3}");
    }

    #[test]
    fn newton_steps_require_an_attached_linearization() {
        let ops = square_ops(4);
        let params = PdeParams { a: 0.1, b: 3.0, t_final: 1.0, theta: 1.0, k_steps: 4 };
        let ybar = compute_steady_state(&ops, &params, 2.0).unwrap();
        let lin = linearize(&ops, &params, &ybar).unwrap();
        let basis = random_basis(&ops, 3, GramTag::W, 9);
        let rm = reduce_model(&ops, &basis, None).unwrap();
        let res = reduced_first_newton_step(&rm, &lin, &[0.0; 4], &ybar);
        assert!(matches!(res, Err(Error::Config(_))));
    }

    #[test]
    fn cubic_tensor_matches_the_lifted_evaluation() {
        let ops = square_ops(5);
        let basis = random_basis(&ops, 6, GramTag::W, 10);
        let mut rm = reduce_model(&ops, &basis, None).unwrap();
        let plain = rm.clone();
        rm.enable_cubic_tensor().unwrap();
        assert!(rm.cubic_tensor_enabled());

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let yhat = DVector::from_fn(6, |_, _| rng.gen_range(-1.5..1.5));
            let a = plain.cubic_galerkin(&yhat);
            let b = rm.cubic_galerkin(&yhat);
            assert!((a - b).amax() < 1e-10);
        }

        let params = PdeParams { a: 0.2, b: 1.0, t_final: 0.5, theta: 1.0, k_steps: 8 };
        let y0 = DVector::from_element(ops.n_dofs(), 0.3);
        let u = vec![1.0; 8];
        let with_tensor = solve_reduced_semilinear(&ops, &rm, &params, &u, &y0).unwrap();
        let without = solve_reduced_semilinear(&ops, &plain, &params, &u, &y0).unwrap();
        for (a, b) in with_tensor.states.iter().zip(&without.states) {
            assert!((a - b).amax() < 1e-10);
        }
    }

    #[test]
    fn cubic_tensor_rejects_large_bases() {
        let ops = square_ops(8);
        let basis = random_basis(&ops, TENSOR_DIM_CAP + 1, GramTag::W, 12);
        let mut rm = reduce_model(&ops, &basis, None).unwrap();
        assert!(matches!(rm.enable_cubic_tensor(), Err(Error::Config(_))));
        assert!(matches!(rm.enable_jacobian_tensor(&ops), Err(Error::Config(_))));
    }

    #[test]
    fn jacobian_tensor_matches_the_assembled_projection() {
        let ops = square_ops(5);
        let basis = random_basis(&ops, 6, GramTag::W, 14);
        let mut rm = reduce_model(&ops, &basis, None).unwrap();
        let plain = rm.clone();
        rm.enable_cubic_tensor().unwrap();
        rm.enable_jacobian_tensor(&ops).unwrap();
        assert!(rm.jacobian_tensor_enabled());

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
        for _ in 0..5 {
            let yhat = DVector::from_fn(6, |_, _| rng.gen_range(-1.5..1.5));
            let newton = plain.weighted_mass_jacobian(&ops, &yhat).unwrap();
            let newton_t = rm.weighted_mass_jacobian(&ops, &yhat).unwrap();
            assert!((newton - newton_t).amax() < 1e-10);
            let adjoint = plain.cubic_jacobian(&yhat);
            let adjoint_t = rm.cubic_jacobian(&yhat);
            assert!((adjoint - adjoint_t).amax() < 1e-10);
        }

        let params = PdeParams { a: 0.2, b: 1.0, t_final: 0.5, theta: 1.0, k_steps: 8 };
        let y0 = DVector::from_element(ops.n_dofs(), 0.3);
        let u = vec![1.0; 8];
        let with_tensor = solve_reduced_semilinear(&ops, &rm, &params, &u, &y0).unwrap();
        let without = solve_reduced_semilinear(&ops, &plain, &params, &u, &y0).unwrap();
        for (a, b) in with_tensor.states.iter().zip(&without.states) {
            assert!((a - b).amax() < 1e-10);
        }
    }

    #[test]
    fn reduced_solution_decays_without_forcing() {
        let ops = square_ops(6);
        let basis = random_basis(&ops, 8, GramTag::W, 13);
        let rm = reduce_model(&ops, &basis, None).unwrap();
        let params = PdeParams { a: 0.5, b: 3.0, t_final: 2.0, theta: 1.0, k_steps: 24 };
        let y0 = DVector::from_element(ops.n_dofs(), 1.0);
        let traj = solve_reduced_semilinear(&ops, &rm, &params, &vec![0.0; 24], &y0).unwrap();
        let norms: Vec<f64> = traj
            .states
            .iter()
            .map(|s| {
                let ms = &rm.m_r * s;
                s.dot(&ms).sqrt()
            })
            .collect();
        for pair in norms.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
        assert!(norms[24] < 0.1 * norms[0]);
    }

    #[test]
    fn initial_state_is_the_weighted_projection() {
        let ops = square_ops(5);
        let basis = random_basis(&ops, 4, GramTag::W, 14);
        let rm = reduce_model(&ops, &basis, None).unwrap();
        let params = PdeParams { a: 0.2, b: 1.0, t_final: 0.25, theta: 1.0, k_steps: 2 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
        let y0 = DVector::from_fn(ops.n_dofs(), |_, _| rng.gen_range(-1.0..1.0));
        let traj = solve_reduced_semilinear(&ops, &rm, &params, &[0.0, 0.0], &y0).unwrap();
        let expect = rm.restrict_w(&y0);
        assert!((&traj.states[0] - &expect).amax() < 1e-14);

        // The projection is optimal in the weighted norm: no reduced state
        // is closer to the initial value.
        let lifted = rm.lift(&expect);
        let residual = &y0 - &lifted;
        let coeffs = rm.restrict_w(&residual);
        assert!(coeffs.amax() < 1e-10);
    }
}
