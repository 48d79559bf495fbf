//! Tracking-type optimal control of the semilinear equation.
//!
//! The objective penalizes the mass-norm distance to a desired trajectory
//! at the interval right endpoints plus a quadratic control cost at the
//! left endpoints. Gradients come from the discrete adjoint of the
//! implicit Euler scheme; the adjoint steps are transposed Newton
//! Jacobians, solved by a preconditioned Richardson iteration on the full
//! grid and by dense LU in reduced space. A limited-memory BFGS loop with
//! Armijo backtracking drives the optimization.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;

use crate::error::Error;
use crate::mesh::{GramTag, PdeParams, SpatialOperators};
use crate::rom::{solve_reduced_semilinear, ReducedModel};
use crate::stepper::{sample_control, solve_semilinear, Trajectory};
use crate::Result;

/// Relative residual target of the transposed-Jacobian iteration.
const ADJOINT_TOL: f64 = 1e-13;
/// Iteration cap of the transposed-Jacobian iteration.
const ADJOINT_MAX_ITER: usize = 100;

/// Tracking problem data. The desired trajectory always lives on the full
/// grid, also when reduced models are optimized against it.
#[derive(Clone, Debug)]
pub struct OcpProblem {
    pub y_d: Trajectory,
    pub gamma: f64,
    /// Scale of the tracking term; zero turns the objective into a pure
    /// control penalty, which short-circuits the adjoint.
    pub tracking_weight: f64,
    pub y0: DVector<f64>,
    pub params: PdeParams,
}

/// Desired trajectory from a forward solve under a reference control.
pub fn make_tracking_problem(
    ops: &SpatialOperators,
    params: &PdeParams,
    u_ref: &[f64],
    y0: DVector<f64>,
    gamma: f64,
) -> Result<OcpProblem> {
    if gamma < 0.0 {
        return Err(Error::Config(format!("control cost must be nonnegative, got {gamma}")));
    }
    let y_d = solve_semilinear(ops, params, u_ref, &y0)?;
    Ok(OcpProblem { y_d, gamma, tracking_weight: 1.0, y0, params: *params })
}

/// Reference control generating the desired trajectory in the experiments.
pub fn reference_control(t_final: f64) -> impl Fn(f64) -> f64 {
    move |t| 2.0 + 1.5 * (2.0 * std::f64::consts::PI * t / t_final).sin()
}

/// Held-out control for forward-error experiments.
pub fn test_control(t_final: f64) -> impl Fn(f64) -> f64 {
    move |t| 2.0 + (2.0 * std::f64::consts::PI * t / t_final).cos()
}

/// Which dynamics the optimizer runs on.
#[derive(Clone, Copy)]
pub enum OcpModel<'a> {
    Full,
    Reduced(&'a ReducedModel),
}

impl OcpModel<'_> {
    pub fn size(&self, ops: &SpatialOperators) -> usize {
        match self {
            OcpModel::Full => ops.n_dofs(),
            OcpModel::Reduced(rm) => rm.dim(),
        }
    }
}

/// Objective and gradient at one control, together with the model-space
/// trajectory that produced them.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub objective: f64,
    pub gradient: Vec<f64>,
    pub trajectory: Trajectory,
}

fn check_control(problem: &OcpProblem, u: &[f64]) -> Result<()> {
    if u.len() != problem.params.k_steps {
        return Err(Error::DimensionMismatch {
            expected: problem.params.k_steps,
            got: u.len(),
        });
    }
    Ok(())
}

/// Tracking plus control cost for a full-space trajectory.
fn objective_of_full_states(
    ops: &SpatialOperators,
    problem: &OcpProblem,
    states: &[DVector<f64>],
    u: &[f64],
) -> f64 {
    let dt = problem.params.dt();
    let mut track = 0.0;
    if problem.tracking_weight != 0.0 {
        for k in 1..=problem.params.k_steps {
            let d = &states[k] - &problem.y_d.states[k];
            track += ops.inner_product(&d, &d, GramTag::H);
        }
    }
    let ctrl: f64 = u.iter().map(|v| v * v).sum();
    0.5 * problem.tracking_weight * dt * track + 0.5 * problem.gamma * dt * ctrl
}

fn forward_solve(
    ops: &SpatialOperators,
    problem: &OcpProblem,
    model: &OcpModel,
    u: &[f64],
) -> Result<Trajectory> {
    match model {
        OcpModel::Full => solve_semilinear(ops, &problem.params, u, &problem.y0),
        OcpModel::Reduced(rm) => {
            solve_reduced_semilinear(ops, rm, &problem.params, u, &problem.y0)
        }
    }
}

fn objective_of_trajectory(
    ops: &SpatialOperators,
    problem: &OcpProblem,
    model: &OcpModel,
    traj: &Trajectory,
    u: &[f64],
) -> f64 {
    match model {
        OcpModel::Full => objective_of_full_states(ops, problem, &traj.states, u),
        OcpModel::Reduced(rm) => {
            let lifted: Vec<DVector<f64>> =
                traj.states.iter().map(|s| rm.lift(s)).collect();
            objective_of_full_states(ops, problem, &lifted, u)
        }
    }
}

/// Forward solve plus objective, the line-search workhorse.
pub fn objective_value(
    ops: &SpatialOperators,
    problem: &OcpProblem,
    model: &OcpModel,
    u: &[f64],
) -> Result<f64> {
    check_control(problem, u)?;
    let traj = forward_solve(ops, problem, model, u)?;
    Ok(objective_of_trajectory(ops, problem, model, &traj, u))
}

/// Solves `J^T x = rhs` with `J = M + dt a K + 3 dt b M diag(q)` by
/// Richardson iteration preconditioned with the symmetric weighted-mass
/// variant of the same matrix; the two differ by an interpolation-error
/// term, so the iteration contracts fast on reasonable grids.
fn solve_transposed_jacobian(
    ops: &SpatialOperators,
    params: &PdeParams,
    q: &DVector<f64>,
    rhs: &DVector<f64>,
    step: usize,
) -> Result<DVector<f64>> {
    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return Ok(DVector::zeros(rhs.len()));
    }
    let dt = params.dt();
    let cubic_scale = 3.0 * dt * params.b;
    let precond = ops.combined_matrix(1.0, dt * params.a, cubic_scale, Some(q))?;
    let chol = CscCholesky::factor(&precond)
        .map_err(|e| Error::Factorization(format!("adjoint preconditioner: {e}")))?;

    let apply_transposed = |x: &DVector<f64>| {
        let mx = &ops.m * x;
        let mut out = &ops.k * x * (dt * params.a);
        out += &mx;
        out.axpy(cubic_scale, &q.component_mul(&mx), 1.0);
        out
    };

    let mut x = chol.solve(rhs).column(0).into_owned();
    let mut rel = f64::INFINITY;
    for _ in 0..ADJOINT_MAX_ITER {
        let r = rhs - apply_transposed(&x);
        rel = r.norm() / rhs_norm;
        if rel <= ADJOINT_TOL {
            return Ok(x);
        }
        x += chol.solve(&r).column(0).into_owned();
    }
    Err(Error::AdjointStall { step, residual: rel })
}

/// Discrete adjoint gradient on the full grid, implicit Euler only.
fn full_gradient(
    ops: &SpatialOperators,
    problem: &OcpProblem,
    y: &Trajectory,
    u: &[f64],
) -> Result<Vec<f64>> {
    let dt = problem.params.dt();
    let k_steps = problem.params.k_steps;
    let tw = problem.tracking_weight;
    let mut grad = vec![0.0; k_steps];
    let mut p_next = DVector::zeros(ops.n_dofs());
    for j in (1..=k_steps).rev() {
        let mut rhs = &ops.m * &p_next;
        if tw != 0.0 {
            let diff = &y.states[j] - &problem.y_d.states[j];
            rhs.axpy(-tw * dt, &(&ops.m * &diff), 1.0);
        }
        let q = y.states[j].map(|v| v * v);
        let p_j = solve_transposed_jacobian(ops, &problem.params, &q, &rhs, j)?;
        grad[j - 1] = problem.gamma * dt * u[j - 1] - dt * ops.load_f.dot(&p_j);
        p_next = p_j;
    }
    Ok(grad)
}

/// Discrete adjoint gradient in reduced space: dense transposed solves of
/// the exact reduced Jacobians.
fn reduced_gradient(
    ops: &SpatialOperators,
    problem: &OcpProblem,
    rm: &ReducedModel,
    yhat: &Trajectory,
    u: &[f64],
) -> Result<Vec<f64>> {
    let _ = ops;
    let dt = problem.params.dt();
    let k_steps = problem.params.k_steps;
    let tw = problem.tracking_weight;
    let mut grad = vec![0.0; k_steps];
    let mut p_next = DVector::zeros(rm.dim());
    for j in (1..=k_steps).rev() {
        let mut rhs = &rm.m_r * &p_next;
        if tw != 0.0 {
            let mut diff = &rm.m_r * &yhat.states[j];
            diff -= rm.m_psi.tr_mul(&problem.y_d.states[j]);
            rhs.axpy(-tw * dt, &diff, 1.0);
        }
        let jac = &rm.m_r
            + &rm.k_r * (dt * problem.params.a)
            + rm.cubic_jacobian(&yhat.states[j]) * (3.0 * dt * problem.params.b);
        let p_j = jac
            .transpose()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Factorization("reduced adjoint system is singular".into()))?;
        grad[j - 1] = problem.gamma * dt * u[j - 1] - dt * rm.f_r.dot(&p_j);
        p_next = p_j;
    }
    Ok(grad)
}

/// Central finite differences, the fallback for schemes other than
/// implicit Euler where the discrete adjoint above does not apply.
fn finite_difference_gradient(
    ops: &SpatialOperators,
    problem: &OcpProblem,
    model: &OcpModel,
    u: &[f64],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; u.len()];
    let mut probe = u.to_vec();
    for k in 0..u.len() {
        let h = 1e-6 * u[k].abs().max(1.0);
        probe[k] = u[k] + h;
        let plus = objective_value(ops, problem, model, &probe)?;
        probe[k] = u[k] - h;
        let minus = objective_value(ops, problem, model, &probe)?;
        probe[k] = u[k];
        grad[k] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

pub fn objective_and_gradient(
    ops: &SpatialOperators,
    problem: &OcpProblem,
    model: &OcpModel,
    u: &[f64],
) -> Result<Evaluation> {
    check_control(problem, u)?;
    let dt = problem.params.dt();
    let traj = forward_solve(ops, problem, model, u)?;
    let objective = objective_of_trajectory(ops, problem, model, &traj, u);

    let gradient = if problem.tracking_weight == 0.0 {
        u.iter().map(|&uk| problem.gamma * dt * uk).collect()
    } else if problem.params.theta == 1.0 {
        match model {
            OcpModel::Full => full_gradient(ops, problem, &traj, u)?,
            OcpModel::Reduced(rm) => reduced_gradient(ops, problem, rm, &traj, u)?,
        }
    } else {
        log::warn!(
            "discrete adjoint requires the implicit Euler scheme; \
             falling back to finite differences (theta = {})",
            problem.params.theta
        );
        finite_difference_gradient(ops, problem, model, u)?
    };

    Ok(Evaluation { objective, gradient, trajectory: traj })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitReason {
    GradientTolerance,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Clone, Debug)]
pub struct OcpResult {
    pub u: Vec<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub exit: ExitReason,
    pub objective_history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcpOptions {
    /// Exit when the gradient norm falls below `tol * max(1, |g0|)`.
    pub tol: f64,
    pub max_iters: usize,
    /// Number of curvature pairs the quasi-Newton update remembers.
    pub memory: usize,
    /// Armijo backtracking halvings before giving up on a direction.
    pub max_halvings: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
}

impl Default for OcpOptions {
    fn default() -> Self {
        OcpOptions { tol: 1e-6, max_iters: 200, memory: 10, max_halvings: 30, c1: 1e-4 }
    }
}

fn two_loop_direction(
    pairs: &VecDeque<(DVector<f64>, DVector<f64>, f64)>,
    g: &DVector<f64>,
) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let alpha = rho * s.dot(&q);
        q.axpy(-alpha, y, 1.0);
        alphas.push(alpha);
    }
    if let Some((s, y, _)) = pairs.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), alpha) in pairs.iter().zip(alphas.into_iter().rev()) {
        let beta = rho * y.dot(&q);
        q.axpy(alpha - beta, s, 1.0);
    }
    -q
}

/// Limited-memory BFGS with Armijo backtracking. Solver failures on trial
/// controls count as infinite objective, so the search backs off instead
/// of aborting.
pub fn optimize(
    ops: &SpatialOperators,
    problem: &OcpProblem,
    model: &OcpModel,
    u0: &[f64],
    opts: &OcpOptions,
) -> Result<OcpResult> {
    check_control(problem, u0)?;
    let mut u = DVector::from_column_slice(u0);
    let eval = objective_and_gradient(ops, problem, model, u.as_slice())?;
    let mut objective = eval.objective;
    let mut g = DVector::from_vec(eval.gradient);
    let threshold = opts.tol * g.norm().max(1.0);

    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut history = vec![objective];
    let mut iterations = 0;
    let mut exit = ExitReason::MaxIterations;

    while iterations < opts.max_iters {
        if g.norm() <= threshold {
            exit = ExitReason::GradientTolerance;
            break;
        }
        let mut d = two_loop_direction(&pairs, &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            d = -g.clone();
            slope = -g.norm_squared();
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = &u + &d * alpha;
            let value = objective_value(ops, problem, model, trial.as_slice())
                .unwrap_or(f64::INFINITY);
            if value <= objective + opts.c1 * alpha * slope {
                accepted = Some((trial, value));
                break;
            }
            alpha *= 0.5;
        }
        let Some((u_new, value_new)) = accepted else {
            exit = ExitReason::LineSearchFailure;
            break;
        };

        let eval_new = objective_and_gradient(ops, problem, model, u_new.as_slice())?;
        let g_new = DVector::from_vec(eval_new.gradient);
        let s = &u_new - &u;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        u = u_new;
        objective = value_new;
        g = g_new;
        history.push(objective);
        iterations += 1;
    }
    if exit == ExitReason::MaxIterations && g.norm() <= threshold {
        exit = ExitReason::GradientTolerance;
    }

    Ok(OcpResult {
        u: u.as_slice().to_vec(),
        objective,
        gradient_norm: g.norm(),
        iterations,
        exit,
        objective_history: history,
    })
}

/// One line of the model-comparison table.
#[derive(Clone, Debug)]
pub struct ComparisonRow {
    pub size: usize,
    pub relobj: f64,
    pub time: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ComparisonOptions {
    pub opt: OcpOptions,
    /// Score reduced optima by their own reduced objective instead of
    /// re-simulating the optimal control on the full model.
    pub use_reduced_objective: bool,
}

/// Optimizes the full model and every reduced model from the same initial
/// control, scoring each reduced optimum against the full optimum.
pub fn run_comparison_experiment(
    ops: &SpatialOperators,
    problem: &OcpProblem,
    reduced: &[&ReducedModel],
    u0: &[f64],
    copts: &ComparisonOptions,
) -> Result<Vec<ComparisonRow>> {
    let opts = copts.opt;
    let start = Instant::now();
    let full = optimize(ops, problem, &OcpModel::Full, u0, &opts)?;
    let full_time = start.elapsed().as_secs_f64();
    let mut rows = vec![ComparisonRow {
        size: ops.n_dofs(),
        relobj: 0.0,
        time: full_time,
        iterations: full.iterations,
    }];

    for rm in reduced {
        let model = OcpModel::Reduced(rm);
        let start = Instant::now();
        let res = optimize(ops, problem, &model, u0, &opts)?;
        let time = start.elapsed().as_secs_f64();
        let score = if copts.use_reduced_objective {
            res.objective
        } else {
            objective_value(ops, problem, &OcpModel::Full, &res.u)?
        };
        rows.push(ComparisonRow {
            size: rm.dim(),
            relobj: (score - full.objective).abs() / full.objective,
            time,
            iterations: res.iterations,
        });
    }
    Ok(rows)
}

/// Samples the experiment controls on the problem grid.
pub fn sampled_reference_control(params: &PdeParams) -> Vec<f64> {
    sample_control(params, reference_control(params.t_final))
}

pub fn sampled_test_control(params: &PdeParams) -> Vec<f64> {
    sample_control(params, test_control(params.t_final))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{assemble_operators, build_grid, csc_to_dense, DomainSpec, Mask};
    use crate::pod::{pod_basis, Cutoff, SnapshotSet};
    use crate::rom::reduce_model;
    use nalgebra::DMatrix;
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

    fn line_ops(cells: usize) -> SpatialOperators {
        let grid = build_grid(&DomainSpec {
            dimension: 1,
            cells_per_side: cells,
            mask: Mask::None,
        })
        .unwrap();
        assemble_operators(&grid).unwrap()
    }

    fn random_reduced(ops: &SpatialOperators, rank: usize, seed: u64) -> ReducedModel {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<DVector<f64>> = (0..rank)
            .map(|_| DVector::from_fn(ops.n_dofs(), |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let set = SnapshotSet::from_columns(&cols, GramTag::W).unwrap();
        let basis = pod_basis(ops, &set, Cutoff::Rank(rank)).unwrap();
        reduce_model(ops, &basis, None).unwrap()
    }

    fn small_problem(ops: &SpatialOperators, gamma: f64, k_steps: usize) -> OcpProblem {
        let params = PdeParams { a: 0.1, b: 3.0, t_final: 1.0, theta: 1.0, k_steps };
        let u_ref = sampled_reference_control(&params);
        let y0 = DVector::from_element(ops.n_dofs(), 0.5);
        make_tracking_problem(ops, &params, &u_ref, y0, gamma).unwrap()
    }

    #[test]
    fn gradient_at_the_reference_control_is_the_control_cost() {
        let ops = square_ops(5);
        let problem = small_problem(&ops, 1e-3, 8);
        let u_ref = sampled_reference_control(&problem.params);
        let dt = problem.params.dt();

        let eval = objective_and_gradient(&ops, &problem, &OcpModel::Full, &u_ref).unwrap();
        // Tracking residual vanishes at the generating control, so both the
        // objective and the gradient collapse to the control-cost parts.
        let ctrl: f64 = u_ref.iter().map(|v| v * v).sum();
        assert!((eval.objective - 0.5 * problem.gamma * dt * ctrl).abs() < 1e-10);
        for (gk, &uk) in eval.gradient.iter().zip(&u_ref) {
            assert!((gk - problem.gamma * dt * uk).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_tracking_weight_short_circuits_the_adjoint() {
        let ops = square_ops(4);
        let mut problem = small_problem(&ops, 1e-2, 6);
        problem.tracking_weight = 0.0;
        let u = vec![1.5; 6];
        let eval = objective_and_gradient(&ops, &problem, &OcpModel::Full, &u).unwrap();
        let dt = problem.params.dt();
        for gk in &eval.gradient {
            assert!((gk - problem.gamma * dt * 1.5).abs() < 1e-15);
        }
        assert!((eval.objective - 0.5 * problem.gamma * dt * 6.0 * 1.5 * 1.5).abs() < 1e-15);
    }

    fn directional_fd(
        ops: &SpatialOperators,
        problem: &OcpProblem,
        model: &OcpModel,
        u: &[f64],
        dir: &[f64],
        h: f64,
    ) -> f64 {
        let plus: Vec<f64> = u.iter().zip(dir).map(|(a, d)| a + h * d).collect();
        let minus: Vec<f64> = u.iter().zip(dir).map(|(a, d)| a - h * d).collect();
        let jp = objective_value(ops, problem, model, &plus).unwrap();
        let jm = objective_value(ops, problem, model, &minus).unwrap();
        (jp - jm) / (2.0 * h)
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let ops = square_ops(5);
        let problem = small_problem(&ops, 1e-4, 8);
        let rm = random_reduced(&ops, 4, 21);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let u: Vec<f64> = (0..8).map(|_| rng.gen_range(1.0..3.0)).collect();

        for model in [OcpModel::Full, OcpModel::Reduced(&rm)] {
            let eval = objective_and_gradient(&ops, &problem, &model, &u).unwrap();
            for _ in 0..3 {
                let dir: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let fd = directional_fd(&ops, &problem, &model, &u, &dir, 1e-5);
                let an: f64 = eval.gradient.iter().zip(&dir).map(|(g, d)| g * d).sum();
                let scale = fd.abs().max(an.abs()).max(1e-12);
                assert!(
                    (fd - an).abs() / scale < 1e-5,
                    "model size {}: fd {fd} vs adjoint {an}",
                    model.size(&ops)
                );
            }
        }
    }

    #[test]
    fn tensor_models_reproduce_the_reduced_gradient() {
        let ops = square_ops(5);
        let problem = small_problem(&ops, 1e-4, 8);
        let plain = random_reduced(&ops, 4, 23);
        let mut fast = plain.clone();
        fast.enable_cubic_tensor().unwrap();
        fast.enable_jacobian_tensor(&ops).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(24);
        let u: Vec<f64> = (0..8).map(|_| rng.gen_range(1.0..3.0)).collect();

        let a = objective_and_gradient(&ops, &problem, &OcpModel::Reduced(&plain), &u).unwrap();
        let b = objective_and_gradient(&ops, &problem, &OcpModel::Reduced(&fast), &u).unwrap();
        assert!((a.objective - b.objective).abs() <= 1e-10 * a.objective.abs().max(1.0));
        for (ga, gb) in a.gradient.iter().zip(&b.gradient) {
            assert!((ga - gb).abs() < 1e-10);
        }
    }

    #[test]
    fn finite_difference_fallback_covers_other_schemes() {
        let ops = square_ops(4);
        let params = PdeParams { a: 0.05, b: 1.0, t_final: 0.25, theta: 0.75, k_steps: 32 };
        let u_ref = sampled_reference_control(&params);
        let y0 = DVector::from_element(ops.n_dofs(), 0.5);
        let problem = make_tracking_problem(&ops, &params, &u_ref, y0, 1e-3).unwrap();
        let u = vec![1.8; 32];
        let eval = objective_and_gradient(&ops, &problem, &OcpModel::Full, &u).unwrap();
        let dir = vec![1.0; 32];
        let fd = directional_fd(&ops, &problem, &OcpModel::Full, &u, &dir, 1e-4);
        let an: f64 = eval.gradient.iter().sum();
        assert!((fd - an).abs() / fd.abs().max(1e-12) < 1e-4);
    }

    /// With a vanishing reaction coefficient the dynamics are linear, so
    /// the gradient and the optimum have closed dense-algebra forms.
    #[test]
    fn linear_limit_matches_the_dense_quadratic_oracle() {
        let ops = line_ops(9);
        let n = ops.n_dofs();
        assert_eq!(n, 8);
        let k_steps = 8;
        let params = PdeParams { a: 0.5, b: 1e-300, t_final: 1.0, theta: 1.0, k_steps };
        let dt = params.dt();
        let gamma = 1e-2;
        let u_ref = sampled_reference_control(&params);
        let y0 = DVector::from_element(n, 0.3);
        let problem = make_tracking_problem(&ops, &params, &u_ref, y0.clone(), gamma).unwrap();

        // Dense step operator: y_{k+1} = A^{-1} (M y_k + dt u_k f).
        let m = csc_to_dense(&ops.m);
        let a_mat = csc_to_dense(&ops.m) + csc_to_dense(&ops.k) * (dt * params.a);
        let a_inv = a_mat.try_inverse().unwrap();
        let prop = &a_inv * &m;
        let step_load = &a_inv * &ops.load_f * dt;

        // Sensitivities S[k][j] = d y_k / d u_j and the affine tail.
        let mut free = vec![y0.clone()];
        for k in 0..k_steps {
            free.push(&prop * &free[k]);
        }
        let mut sens = vec![vec![DVector::zeros(n); k_steps]; k_steps + 1];
        for j in 0..k_steps {
            sens[j + 1][j] = step_load.clone();
            for k in j + 1..k_steps {
                sens[k + 1][j] = &prop * &sens[k][j];
            }
        }

        // Oracle gradient at a random control.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let u: Vec<f64> = (0..k_steps).map(|_| rng.gen_range(1.0..3.0)).collect();
        let mut states = vec![y0.clone()];
        for k in 0..k_steps {
            states.push(&prop * &states[k] + &step_load * u[k]);
        }
        let mut oracle_grad = vec![0.0; k_steps];
        for j in 0..k_steps {
            let mut acc = 0.0;
            for k in 1..=k_steps {
                let diff = &states[k] - &problem.y_d.states[k];
                acc += (&m * &diff).dot(&sens[k][j]);
            }
            oracle_grad[j] = gamma * dt * u[j] + dt * acc;
        }
        let eval = objective_and_gradient(&ops, &problem, &OcpModel::Full, &u).unwrap();
        for (a, b) in eval.gradient.iter().zip(&oracle_grad) {
            assert!((a - b).abs() < 1e-10, "adjoint {a} vs oracle {b}");
        }

        // Oracle optimum from the dense normal equations
        // (dt S^T M S + gamma dt I) u = dt S^T M (y_d - free).
        let mut hess = DMatrix::zeros(k_steps, k_steps);
        let mut rhs = DVector::zeros(k_steps);
        for j in 0..k_steps {
            for l in 0..k_steps {
                let mut acc = 0.0;
                for k in 1..=k_steps {
                    acc += (&m * &sens[k][j]).dot(&sens[k][l]);
                }
                hess[(j, l)] = dt * acc;
            }
            let mut acc = 0.0;
            for k in 1..=k_steps {
                let diff = &problem.y_d.states[k] - &free[k];
                acc += (&m * &diff).dot(&sens[k][j]);
            }
            rhs[j] = dt * acc;
            hess[(j, j)] += gamma * dt;
        }
        let u_oracle = hess.lu().solve(&rhs).unwrap();

        let opts = OcpOptions { tol: 1e-12, max_iters: 400, ..OcpOptions::default() };
        let res = optimize(&ops, &problem, &OcpModel::Full, &vec![2.0; k_steps], &opts).unwrap();
        for (a, b) in res.u.iter().zip(u_oracle.iter()) {
            assert!((a - b).abs() < 1e-8, "optimizer {a} vs oracle {b}");
        }
    }

    #[test]
    fn optimizer_descends_and_reaches_the_tolerance() {
        let ops = square_ops(5);
        let problem = small_problem(&ops, 1e-5, 10);
        let u0 = vec![2.0; 10];
        let res =
            optimize(&ops, &problem, &OcpModel::Full, &u0, &OcpOptions::default()).unwrap();
        assert_eq!(res.exit, ExitReason::GradientTolerance);
        assert!(res.iterations >= 1 && res.iterations <= 200);
        for pair in res.objective_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15);
        }
        // The recovered control must beat the initial guess decisively.
        assert!(res.objective < 0.1 * res.objective_history[0]);
    }

    #[test]
    fn comparison_rows_score_reduced_models_against_the_full_optimum() {
        let ops = square_ops(4);
        let problem = small_problem(&ops, 1e-5, 6);
        let rm = random_reduced(&ops, 5, 44);
        let u0 = vec![2.0; 6];
        let rows = run_comparison_experiment(
            &ops,
            &problem,
            &[&rm],
            &u0,
            &ComparisonOptions::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].size, ops.n_dofs());
        assert_eq!(rows[0].relobj, 0.0);
        assert_eq!(rows[1].size, 5);
        assert!(rows[1].relobj.is_finite() && rows[1].relobj >= 0.0);
        assert!(rows[0].iterations >= 1 && rows[1].iterations >= 1);
        assert!(rows[0].time > 0.0 && rows[1].time > 0.0);
    }

    #[test]
    fn mismatched_control_length_is_rejected() {
        let ops = square_ops(4);
        let problem = small_problem(&ops, 1e-5, 6);
        let res = objective_value(&ops, &problem, &OcpModel::Full, &[1.0; 5]);
        assert!(matches!(res, Err(Error::DimensionMismatch { .. })));
    }
}
