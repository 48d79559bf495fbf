//! Simplified Newton steps for the semilinear evolution, linearized once at
//! a time-constant state, plus exact discrete convolution representations of
//! both steps.
//!
//! Freezing the linearization at `ybar` makes every step a linear solve with
//! one shared factorization. The first step responds to the control; the
//! second step responds to the Taylor remainder of the cubic term along the
//! first step. Both admit superposition formulas: background response plus
//! discrete convolutions of impulse responses with scalar signals, and those
//! identities hold to machine precision for this discretization.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::Error;
use crate::mesh::{GramTag, PdeParams, SpatialOperators};
use crate::stepper::{
    solve_impulse_theta, solve_linear_theta, theta_scheme, ThetaScheme, Trajectory,
};
use crate::Result;

/// Evolution operator of the semilinear equation linearized at `ybar`, with
/// the theta-scheme factorization cached.
pub struct LinearizedOperator {
    pub ybar: DVector<f64>,
    /// Weighted mass matrix of the linearized reaction `3 b ybar^2`.
    pub c_mat: nalgebra_sparse::CscMatrix<f64>,
    /// Full spatial operator `a K + c_mat`.
    pub l: nalgebra_sparse::CscMatrix<f64>,
    /// Control-independent load `-(a K ybar + b M ybar^3)`; equals
    /// `-u_bar * load_f` when `ybar` is the steady state for `u_bar`.
    pub const_source: DVector<f64>,
    pub scheme: ThetaScheme,
    pub params: PdeParams,
}

/// Builds the linearized operator and factors its step matrices.
pub fn linearize(
    ops: &SpatialOperators,
    params: &PdeParams,
    ybar: &DVector<f64>,
) -> Result<LinearizedOperator> {
    if !ybar.iter().all(|v| v.is_finite()) {
        return Err(Error::Config("linearization state must be finite".into()));
    }
    let weight = ybar.map(|v| v * v);
    let c_mat = ops.combined_matrix(0.0, 0.0, 3.0 * params.b, Some(&weight))?;
    let l = ops.combined_matrix(0.0, params.a, 3.0 * params.b, Some(&weight))?;
    let mut const_source = ops.combined_matrix(0.0, params.a, 0.0, None)? * ybar;
    const_source.axpy(params.b, &ops.cubic_load(ybar), 1.0);
    const_source.neg_mut();
    let scheme = theta_scheme(ops, &l, params)?;
    Ok(LinearizedOperator {
        ybar: ybar.clone(),
        c_mat,
        l,
        const_source,
        scheme,
        params: *params,
    })
}

impl LinearizedOperator {
    /// Load of the cubic Taylor remainder between `ybar + prev` and
    /// `ybar + total`, realized nodewise and factored so the difference of
    /// cubes never cancels catastrophically:
    /// `b M [ d o (3 ybar^2 - x^2 - x o z - z^2) ]` with `d = total - prev`,
    /// `x = ybar + total`, `z = ybar + prev`.
    fn increment_load(
        &self,
        ops: &SpatialOperators,
        total: &DVector<f64>,
        prev: &DVector<f64>,
    ) -> DVector<f64> {
        let x = &self.ybar + total;
        let z = &self.ybar + prev;
        let d = total - prev;
        let mut w = self.ybar.component_mul(&self.ybar) * 3.0;
        w -= x.component_mul(&x);
        w -= x.component_mul(&z);
        w -= z.component_mul(&z);
        &ops.m * &(d.component_mul(&w) * self.params.b)
    }
}

/// First simplified Newton step: the deviation `d1 = y1 - ybar` solving the
/// linearized evolution with load `const_source + u_k load_f` and initial
/// value `y0 - ybar`.
pub fn first_newton_step(
    ops: &SpatialOperators,
    lin: &LinearizedOperator,
    u: &[f64],
    y0: &DVector<f64>,
) -> Result<Trajectory> {
    if u.len() != lin.params.k_steps {
        return Err(Error::DimensionMismatch {
            expected: lin.params.k_steps,
            got: u.len(),
        });
    }
    let loads: Vec<DVector<f64>> = u
        .iter()
        .map(|&uk| {
            let mut g = lin.const_source.clone();
            g.axpy(uk, &ops.load_f, 1.0);
            g
        })
        .collect();
    solve_linear_theta(&lin.scheme, &loads, &(y0 - &lin.ybar))
}

/// Second simplified Newton step: the increment `d2 = y2 - y1` driven by the
/// cubic Taylor remainder of the first step, taken at the left endpoint of
/// every interval, with zero initial value.
pub fn second_newton_step(
    ops: &SpatialOperators,
    lin: &LinearizedOperator,
    d1: &Trajectory,
) -> Result<Trajectory> {
    let zero = DVector::zeros(lin.ybar.len());
    let loads: Vec<DVector<f64>> = d1.states[..lin.params.k_steps]
        .iter()
        .map(|d| lin.increment_load(ops, d, &zero))
        .collect();
    solve_linear_theta(&lin.scheme, &loads, &zero)
}

/// Consecutive increments `d1, d2, d3, ...` of the simplified Newton
/// iteration started at the constant trajectory `ybar`. The first two equal
/// [`first_newton_step`] and [`second_newton_step`] exactly; later ones
/// exist to observe the contraction of the iteration.
pub fn simplified_newton_increments(
    ops: &SpatialOperators,
    lin: &LinearizedOperator,
    u: &[f64],
    y0: &DVector<f64>,
    count: usize,
) -> Result<Vec<Trajectory>> {
    let mut increments = vec![first_newton_step(ops, lin, u, y0)?];
    let k = lin.params.k_steps;
    let n = lin.ybar.len();
    let mut prev_total: Vec<DVector<f64>> = vec![DVector::zeros(n); k + 1];
    let mut total = increments[0].states.clone();
    while increments.len() < count {
        let loads: Vec<DVector<f64>> = (0..k)
            .map(|j| lin.increment_load(ops, &total[j], &prev_total[j]))
            .collect();
        let inc = solve_linear_theta(&lin.scheme, &loads, &DVector::zeros(n))?;
        prev_total = total;
        total = inc
            .states
            .iter()
            .zip(&prev_total)
            .map(|(d, t)| d + t)
            .collect();
        increments.push(inc);
    }
    Ok(increments)
}

/// Response to the control-independent source with initial value
/// `y0 - ybar`; the non-convolutional part of the first step.
pub fn background_response(lin: &LinearizedOperator, y0: &DVector<f64>) -> Result<Trajectory> {
    let loads = vec![lin.const_source.clone(); lin.params.k_steps];
    solve_linear_theta(&lin.scheme, &loads, &(y0 - &lin.ybar))
}

/// Impulse response of the linearized evolution to the control shape.
pub fn control_impulse_response(
    ops: &SpatialOperators,
    lin: &LinearizedOperator,
) -> Result<Trajectory> {
    solve_impulse_theta(&lin.scheme, &ops.f_h, lin.params.k_steps)
}

/// Response to the constant load `b M ybar^3` with zero initial value; the
/// non-convolutional part of the second step.
pub fn nonlinearity_background(
    ops: &SpatialOperators,
    lin: &LinearizedOperator,
) -> Result<Trajectory> {
    let load = &ops.cubic_load(&lin.ybar) * lin.params.b;
    let loads = vec![load; lin.params.k_steps];
    solve_linear_theta(&lin.scheme, &loads, &DVector::zeros(lin.ybar.len()))
}

/// Nodal impulse shapes `3 b ybar^2 o psi` for the first-stage basis
/// vectors; their responses carry the linearized-reaction part of the
/// second step.
pub fn reaction_impulse_shapes(
    lin: &LinearizedOperator,
    basis: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let ybar_sq = lin.ybar.component_mul(&lin.ybar) * (3.0 * lin.params.b);
    basis.iter().map(|psi| ybar_sq.component_mul(psi)).collect()
}

/// Impulse responses for a batch of shapes, computed in parallel in input
/// order.
pub fn impulse_responses(
    lin: &LinearizedOperator,
    shapes: &[DVector<f64>],
) -> Result<Vec<Trajectory>> {
    shapes
        .par_iter()
        .map(|f| solve_impulse_theta(&lin.scheme, f, lin.params.k_steps))
        .collect()
}

/// Discrete convolution of an impulse response with a scalar signal:
/// `out_k = dt * sum_{j<k} impulse_{k-j} * q_j`, zero at `k = 0`.
pub fn convolve(impulse: &Trajectory, q: &[f64]) -> Vec<DVector<f64>> {
    let n = impulse.states[0].len();
    let k_steps = impulse.states.len() - 1;
    assert!(q.len() >= k_steps, "signal shorter than the trajectory");
    let mut out = vec![DVector::zeros(n); k_steps + 1];
    for (k, out_k) in out.iter_mut().enumerate() {
        for (j, &qj) in q.iter().take(k).enumerate() {
            out_k.axpy(impulse.dt * qj, &impulse.states[k - j], 1.0);
        }
    }
    out
}

/// Outcome of checking a convolution identity: per-step absolute H-norm
/// discrepancies and their maximum relative to the largest state norm.
#[derive(Clone, Debug)]
pub struct ConvolutionReport {
    pub step_errors: Vec<f64>,
    pub max_rel_err: f64,
}

fn compare_trajectories(
    ops: &SpatialOperators,
    reference: &Trajectory,
    candidate: &[DVector<f64>],
) -> ConvolutionReport {
    let step_errors: Vec<f64> = reference
        .states
        .iter()
        .zip(candidate)
        .map(|(a, b)| ops.h_norm(&(a - b)))
        .collect();
    let scale = reference
        .states
        .iter()
        .map(|s| ops.h_norm(s))
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let max_rel_err = step_errors.iter().fold(0.0_f64, |m, &e| m.max(e)) / scale;
    ConvolutionReport { step_errors, max_rel_err }
}

/// Checks the first-step identity
/// `d1_k = v_k + dt sum_{j<k} w_{k-j} u_j` by running both sides.
pub fn verify_convolution_first(
    ops: &SpatialOperators,
    lin: &LinearizedOperator,
    u: &[f64],
    y0: &DVector<f64>,
) -> Result<ConvolutionReport> {
    let direct = first_newton_step(ops, lin, u, y0)?;
    let v = background_response(lin, y0)?;
    let w = control_impulse_response(ops, lin)?;
    let conv = convolve(&w, u);
    let combined: Vec<DVector<f64>> = v
        .states
        .iter()
        .zip(&conv)
        .map(|(vk, ck)| vk + ck)
        .collect();
    Ok(compare_trajectories(ops, &direct, &combined))
}

/// Checks the second-step identity for supplied coefficient signals: the
/// direct solve with load
/// `M (b ybar^3 + sum_i u^i_k (3 b ybar^2 o psi^i) - sum_j v^j_k c_j)`
/// against `r + sum_i conv(beta^i, u^i) - sum_j conv(gamma^j, v^j)`.
pub fn verify_convolution_second(
    ops: &SpatialOperators,
    lin: &LinearizedOperator,
    first_basis: &[DVector<f64>],
    nonlin_basis: &[DVector<f64>],
    u_coeffs: &[Vec<f64>],
    v_coeffs: &[Vec<f64>],
) -> Result<ConvolutionReport> {
    if u_coeffs.len() != first_basis.len() {
        return Err(Error::DimensionMismatch {
            expected: first_basis.len(),
            got: u_coeffs.len(),
        });
    }
    if v_coeffs.len() != nonlin_basis.len() {
        return Err(Error::DimensionMismatch {
            expected: nonlin_basis.len(),
            got: v_coeffs.len(),
        });
    }
    let k_steps = lin.params.k_steps;
    for series in u_coeffs.iter().chain(v_coeffs) {
        if series.len() != k_steps {
            return Err(Error::DimensionMismatch {
                expected: k_steps,
                got: series.len(),
            });
        }
    }

    let beta_shapes = reaction_impulse_shapes(lin, first_basis);
    let cubic_bg = &ops.cubic_load(&lin.ybar) * lin.params.b;
    let loads: Vec<DVector<f64>> = (0..k_steps)
        .map(|k| {
            let mut nodal = DVector::zeros(lin.ybar.len());
            for (shape, series) in beta_shapes.iter().zip(u_coeffs) {
                nodal.axpy(series[k], shape, 1.0);
            }
            for (c, series) in nonlin_basis.iter().zip(v_coeffs) {
                nodal.axpy(-series[k], c, 1.0);
            }
            &cubic_bg + &ops.m * &nodal
        })
        .collect();
    let direct = solve_linear_theta(&lin.scheme, &loads, &DVector::zeros(lin.ybar.len()))?;

    let r = nonlinearity_background(ops, lin)?;
    let betas = impulse_responses(lin, &beta_shapes)?;
    let gammas = impulse_responses(lin, nonlin_basis)?;
    let mut combined = r.states.clone();
    for (beta, series) in betas.iter().zip(u_coeffs) {
        for (k, term) in convolve(beta, series).into_iter().enumerate() {
            combined[k] += term;
        }
    }
    for (gamma, series) in gammas.iter().zip(v_coeffs) {
        for (k, term) in convolve(gamma, series).into_iter().enumerate() {
            combined[k] -= term;
        }
    }
    Ok(compare_trajectories(ops, &direct, &combined))
}

/// Coefficient signals of the second step for given bases, sampled at left
/// endpoints: `u^i_k = (psi^i, d1_k)_W` and `v^j_k = (c_j, b (ybar + d1_k)^3)_H`.
pub fn second_step_coefficients(
    ops: &SpatialOperators,
    lin: &LinearizedOperator,
    first_basis: &[DVector<f64>],
    nonlin_basis: &[DVector<f64>],
    d1: &Trajectory,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let k_steps = lin.params.k_steps;
    let u_coeffs = first_basis
        .iter()
        .map(|psi| {
            (0..k_steps)
                .map(|k| ops.inner_product(psi, &d1.states[k], GramTag::W))
                .collect()
        })
        .collect();
    let cubes: Vec<DVector<f64>> = (0..k_steps)
        .map(|k| {
            let y1 = &lin.ybar + &d1.states[k];
            y1.map(|v| v * v * v) * lin.params.b
        })
        .collect();
    let v_coeffs = nonlin_basis
        .iter()
        .map(|c| cubes.iter().map(|n| ops.inner_product(c, n, GramTag::H)).collect())
        .collect();
    (u_coeffs, v_coeffs)
}

/// Adds a constant state to every row, turning deviations into iterates.
pub fn shift_by(traj: &Trajectory, offset: &DVector<f64>) -> Trajectory {
    Trajectory {
        states: traj.states.iter().map(|s| s + offset).collect(),
        dt: traj.dt,
    }
}
