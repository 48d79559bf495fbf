//! One-step theta time discretization of `M y' + L y (+ b M y^3) = g`.
//!
//! A step solves `(M + dt theta L) y_next = (M - dt (1 - theta) L) y + dt g`
//! with the load taken at the left endpoint of the step, not theta-averaged.
//! The nonlinear forward solver treats the cubic term implicitly with the
//! same theta weighting and resolves each step by a Newton iteration whose
//! matrix stays symmetric positive definite.

use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::CscMatrix;

use crate::error::Error;
use crate::mesh::{GramTag, PdeParams, SpatialOperators};
use crate::Result;

/// Convergence threshold for per-step Newton residuals, measured in the
/// inverse-mass norm at PDE scale.
pub const NEWTON_TOL: f64 = 1e-11;
/// Newton iteration cap per time step.
pub const NEWTON_MAX_ITER: usize = 25;

/// Control samples at the left endpoints `t_k = k dt`, `k = 0 .. k_steps-1`.
pub fn sample_control(params: &PdeParams, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let dt = params.dt();
    (0..params.k_steps).map(|k| f(k as f64 * dt)).collect()
}

/// Discrete state sequence `y_0 .. y_K` on a uniform time grid.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub dt: f64,
}

impl Trajectory {
    pub fn k_steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// Time-discrete `L^2(0, T)` norm `sqrt(dt * sum_k |y_k|^2)` over every
    /// state, in the selected spatial inner product.
    pub fn l2_norm(&self, ops: &SpatialOperators, which: GramTag) -> f64 {
        let sum: f64 = self
            .states
            .iter()
            .map(|y| ops.inner_product(y, y, which))
            .sum();
        (self.dt * sum).max(0.0).sqrt()
    }
}

/// Absolute trajectory distance in the time-discrete `L^2` norm.
pub fn trajectory_error(
    a: &Trajectory,
    b: &Trajectory,
    ops: &SpatialOperators,
    which: GramTag,
) -> f64 {
    assert_eq!(a.states.len(), b.states.len(), "trajectory lengths differ");
    let sum: f64 = a
        .states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| {
            let d = x - y;
            ops.inner_product(&d, &d, which)
        })
        .sum();
    (a.dt * sum).max(0.0).sqrt()
}

/// `trajectory_error` divided by the norm of the reference `b`.
pub fn trajectory_relative_error(
    a: &Trajectory,
    b: &Trajectory,
    ops: &SpatialOperators,
    which: GramTag,
) -> f64 {
    trajectory_error(a, b, ops, which) / b.l2_norm(ops, which)
}

/// Factored step matrices of the linear theta scheme for a fixed spatial
/// operator `L`.
pub struct ThetaScheme {
    pub a_impl: CscMatrix<f64>,
    pub a_expl: CscMatrix<f64>,
    factor: CscCholesky<f64>,
    m: CscMatrix<f64>,
    pub dt: f64,
    pub theta: f64,
}

/// Builds the scheme `(M + dt theta L, M - dt (1 - theta) L)` and factors
/// the implicit matrix.
pub fn theta_scheme(
    ops: &SpatialOperators,
    l: &CscMatrix<f64>,
    params: &PdeParams,
) -> Result<ThetaScheme> {
    params.validate()?;
    let dt = params.dt();
    let a_impl = &ops.m + &(l * (dt * params.theta));
    let a_expl = &ops.m + &(l * (-dt * (1.0 - params.theta)));
    let factor = CscCholesky::factor(&a_impl)
        .map_err(|e| Error::Factorization(format!("implicit step matrix: {e}")))?;
    Ok(ThetaScheme {
        a_impl,
        a_expl,
        factor,
        m: ops.m.clone(),
        dt,
        theta: params.theta,
    })
}

impl ThetaScheme {
    /// One step from `y` under the load `g` at the left endpoint.
    pub fn step(&self, y: &DVector<f64>, g: Option<&DVector<f64>>) -> DVector<f64> {
        let mut rhs = &self.a_expl * y;
        if let Some(g) = g {
            rhs.axpy(self.dt, g, 1.0);
        }
        self.factor.solve(&rhs).column(0).into_owned()
    }
}

fn check_finite(y: &DVector<f64>, step: usize) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { step })
    }
}

/// Runs the linear theta scheme for `loads.len()` steps.
pub fn solve_linear_theta(
    scheme: &ThetaScheme,
    loads: &[DVector<f64>],
    y0: &DVector<f64>,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(loads.len() + 1);
    states.push(y0.clone());
    for (k, g) in loads.iter().enumerate() {
        let next = scheme.step(states.last().unwrap(), Some(g));
        check_finite(&next, k + 1)?;
        states.push(next);
    }
    Ok(Trajectory { states, dt: scheme.dt })
}

/// Impulse response of the scheme: the initial state solves
/// `(M - dt (1 - theta) L) w_0 = M f`, after which the evolution is free.
/// With `theta = 1` this yields `w_0 = f` exactly.
pub fn solve_impulse_theta(
    scheme: &ThetaScheme,
    f: &DVector<f64>,
    k_steps: usize,
) -> Result<Trajectory> {
    let w0 = if scheme.theta == 1.0 {
        f.clone()
    } else {
        let expl = CscCholesky::factor(&scheme.a_expl).map_err(|_| Error::SingularExplicit {
            theta: scheme.theta,
            dt: scheme.dt,
        })?;
        expl.solve(&(&scheme.m * f)).column(0).into_owned()
    };
    let mut states = Vec::with_capacity(k_steps + 1);
    states.push(w0);
    for k in 0..k_steps {
        let next = scheme.step(states.last().unwrap(), None);
        check_finite(&next, k + 1)?;
        states.push(next);
    }
    Ok(Trajectory { states, dt: scheme.dt })
}

/// Solves `M y' + a K y + b M y^3 = loads(t_k)` by the theta scheme with the
/// cubic term carried at both endpoints under the same weighting.
pub fn solve_semilinear_with_loads(
    ops: &SpatialOperators,
    params: &PdeParams,
    loads: &[DVector<f64>],
    y0: &DVector<f64>,
) -> Result<Trajectory> {
    params.validate()?;
    if loads.len() != params.k_steps {
        return Err(Error::DimensionMismatch {
            expected: params.k_steps,
            got: loads.len(),
        });
    }
    let dt = params.dt();
    let theta = params.theta;
    let a_impl = ops.combined_matrix(1.0, dt * theta * params.a, 0.0, None)?;
    let a_expl = ops.combined_matrix(1.0, -dt * (1.0 - theta) * params.a, 0.0, None)?;
    let m_factor = CscCholesky::factor(&ops.m)
        .map_err(|e| Error::Factorization(format!("mass matrix: {e}")))?;

    let mut states = Vec::with_capacity(loads.len() + 1);
    states.push(y0.clone());
    for (k, g) in loads.iter().enumerate() {
        let prev = states.last().unwrap();
        let mut rhs = &a_expl * prev;
        if theta < 1.0 {
            rhs.axpy(-dt * (1.0 - theta) * params.b, &ops.cubic_load(prev), 1.0);
        }
        rhs.axpy(dt, g, 1.0);
        let next = newton_solve_step(ops, params, &a_impl, &m_factor, &rhs, prev, k + 1)?;
        check_finite(&next, k + 1)?;
        states.push(next);
    }
    Ok(Trajectory { states, dt })
}

/// Scalar-control wrapper: the load at step `k` is `u_k` times the control
/// load vector.
pub fn solve_semilinear(
    ops: &SpatialOperators,
    params: &PdeParams,
    controls: &[f64],
    y0: &DVector<f64>,
) -> Result<Trajectory> {
    let loads: Vec<DVector<f64>> = controls.iter().map(|&u| &ops.load_f * u).collect();
    solve_semilinear_with_loads(ops, params, &loads, y0)
}

/// Solves `(M + dt theta a K) y + dt theta b M y^3 = rhs` by Newton with the
/// symmetric weighted-mass linearization of the cubic term.
fn newton_solve_step(
    ops: &SpatialOperators,
    params: &PdeParams,
    a_impl: &CscMatrix<f64>,
    m_factor: &CscCholesky<f64>,
    rhs: &DVector<f64>,
    guess: &DVector<f64>,
    step: usize,
) -> Result<DVector<f64>> {
    let dt = params.dt();
    let c_cubic = dt * params.theta * params.b;
    let mut y = guess.clone();
    let mut residual_norm = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITER {
        let mut r = a_impl * &y;
        r.axpy(c_cubic, &ops.cubic_load(&y), 1.0);
        r -= rhs;
        residual_norm = inv_mass_norm(m_factor, &r) / dt;
        if residual_norm <= NEWTON_TOL {
            return Ok(y);
        }
        let jac = ops.combined_matrix(
            1.0,
            dt * params.theta * params.a,
            3.0 * c_cubic,
            Some(&y.map(|v| v * v)),
        )?;
        let factor = CscCholesky::factor(&jac)
            .map_err(|e| Error::Factorization(format!("step Newton matrix: {e}")))?;
        y -= factor.solve(&r).column(0).into_owned();
    }
    Err(Error::NewtonDivergence {
        step,
        max_iter: NEWTON_MAX_ITER,
        residual: residual_norm,
    })
}

/// Norm `sqrt(r' M^-1 r)` of a load vector.
pub fn inv_mass_norm(m_factor: &CscCholesky<f64>, r: &DVector<f64>) -> f64 {
    let sol = m_factor.solve(r).column(0).into_owned();
    r.dot(&sol).max(0.0).sqrt()
}

/// Steady state of `a K y + b M y^3 = u_bar * load_f`, by damped Newton
/// from zero.
pub fn compute_steady_state(
    ops: &SpatialOperators,
    params: &PdeParams,
    u_bar: f64,
) -> Result<DVector<f64>> {
    params.validate()?;
    let rhs = &ops.load_f * u_bar;
    let m_factor = CscCholesky::factor(&ops.m)
        .map_err(|e| Error::Factorization(format!("mass matrix: {e}")))?;
    let tol = 1e-12 * inv_mass_norm(&m_factor, &rhs).max(1.0);

    let residual = |y: &DVector<f64>| -> Result<DVector<f64>> {
        let mut r = ops.combined_matrix(0.0, params.a, 0.0, None)? * y;
        r.axpy(params.b, &ops.cubic_load(y), 1.0);
        r -= &rhs;
        Ok(r)
    };

    let mut y = DVector::zeros(ops.n_dofs());
    let mut r = residual(&y)?;
    let mut r_norm = inv_mass_norm(&m_factor, &r);
    for _ in 0..50 {
        if r_norm <= tol {
            return Ok(y);
        }
        let jac = ops.combined_matrix(0.0, params.a, 3.0 * params.b, Some(&y.map(|v| v * v)))?;
        let factor = CscCholesky::factor(&jac)
            .map_err(|e| Error::Factorization(format!("steady-state Newton matrix: {e}")))?;
        let dy = factor.solve(&r).column(0).into_owned();
        let mut lambda = 1.0;
        loop {
            let candidate = &y - &dy * lambda;
            let rc = residual(&candidate)?;
            let rc_norm = inv_mass_norm(&m_factor, &rc);
            if rc_norm < r_norm || lambda < 1e-3 {
                y = candidate;
                r = rc;
                r_norm = rc_norm;
                break;
            }
            lambda *= 0.5;
        }
    }
    Err(Error::NewtonDivergence {
        step: 0,
        max_iter: 50,
        residual: r_norm,
    })
}

/// Inverse-mass norm of the steady-state residual `a K y + b M y^3 - u_bar f`
/// at `y`, the quantity [`compute_steady_state`] drives below its tolerance.
pub fn steady_residual(
    ops: &SpatialOperators,
    params: &PdeParams,
    u_bar: f64,
    y: &DVector<f64>,
) -> Result<f64> {
    let m_factor = CscCholesky::factor(&ops.m)
        .map_err(|e| Error::Factorization(format!("mass matrix: {e}")))?;
    let mut r = ops.combined_matrix(0.0, params.a, 0.0, None)? * y;
    r.axpy(params.b, &ops.cubic_load(y), 1.0);
    r.axpy(-u_bar, &ops.load_f, 1.0);
    Ok(inv_mass_norm(&m_factor, &r))
}
