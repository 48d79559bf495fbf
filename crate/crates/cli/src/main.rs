//! Command-line driver: builds run directories of steady states, snapshot
//! bases, verification reports, and experiment tables from one config file.
//!
//! Exit codes: 0 success, 1 verification failure, 2 config error,
//! 3 computation or artifact failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};

use podrom::config::RunConfig;
use podrom::mesh::{assemble_operators, build_grid, GramTag, SpatialOperators};
use podrom::newton::{
    convolve, first_newton_step, linearize, reaction_impulse_shapes, second_newton_step,
    second_step_coefficients, shift_by,
};
use podrom::ocp::{make_tracking_problem, run_comparison_experiment, ComparisonOptions};
use podrom::persist;
use podrom::pod::{rank_truncate, reconstruction_error, PodBasis, SnapshotSet};
use podrom::rom::{reduce_model, solve_reduced_semilinear, ReducedModel, TENSOR_DIM_CAP};
use podrom::snapshots::{run_pipeline, trajectory_weights};
use podrom::stepper::{
    compute_steady_state, solve_linear_theta, solve_semilinear, steady_residual,
    trajectory_relative_error, Trajectory,
};
use podrom::{Error, Result};

const VERIFY_TOL: f64 = 1e-9;

#[derive(Parser)]
#[command(
    name = "podrom",
    about = "Reduced-order models of a semilinear parabolic equation from impulse-response snapshots"
)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config and the PODROM_OUT variable.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the impulse-response solves.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Keep only this many second-stage vectors in the combined basis.
    #[arg(long, global = true)]
    truncate_b12: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Compute the steady state of the background control.
    Steady,
    /// Run the two-stage snapshot pipeline and persist every artifact.
    Snapshots,
    /// Re-check the convolution and spectral identities of a run directory.
    Verify,
    /// Compare Newton-step and reduced forward solves against the full one.
    ForwardErrors,
    /// Compare reduced tracking-control solves against the full one.
    Ocp,
    /// All of the above, in order.
    All,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(message) => {
            eprintln!("config error: {message}");
            return ExitCode::from(2);
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }

    let ws = match Workspace::new(cfg) {
        Ok(ws) => ws,
        Err(e) => return failure(&e),
    };
    let verified = match dispatch(cli.command, &ws) {
        Ok(verified) => verified,
        Err(e) => return failure(&e),
    };
    if verified {
        ExitCode::SUCCESS
    } else {
        eprintln!("verification failed: see {}", ws.dir.join("verify_report.csv").display());
        ExitCode::from(1)
    }
}

fn failure(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(3),
    }
}

fn load_config(cli: &Cli) -> std::result::Result<RunConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            toml::from_str(&text).map_err(|e| e.to_string())?
        }
        None => RunConfig::default(),
    };
    if let Some(n) = cli.truncate_b12 {
        cfg.pipeline.truncate_second = Some(n);
    }
    match std::env::var("PODROM_OUT") {
        Ok(dir) if !dir.is_empty() => cfg.output_dir = dir,
        _ => {}
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.display().to_string();
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Returns false only when a verification ran and failed.
fn dispatch(command: Command, ws: &Workspace) -> Result<bool> {
    match command {
        Command::Steady => cmd_steady(ws).map(|_| true),
        Command::Snapshots => cmd_snapshots(ws).map(|_| true),
        Command::Verify => cmd_verify(ws),
        Command::ForwardErrors => cmd_forward_errors(ws).map(|_| true),
        Command::Ocp => cmd_ocp(ws).map(|_| true),
        Command::All => {
            cmd_snapshots(ws)?;
            let verified = cmd_verify(ws)?;
            cmd_forward_errors(ws)?;
            cmd_ocp(ws)?;
            Ok(verified)
        }
    }
}

struct Workspace {
    cfg: RunConfig,
    ops: SpatialOperators,
    dir: PathBuf,
}

impl Workspace {
    fn new(cfg: RunConfig) -> Result<Self> {
        let grid = build_grid(&cfg.grid)?;
        let ops = assemble_operators(&grid)?;
        let dir = persist::ensure_dir(&cfg.output_dir)?;
        let text = serde_json::to_string_pretty(&cfg)
            .map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join("config.json"), text + "\n")?;
        persist::write_grid_spec(dir.join("grid.json"), &cfg.grid)?;
        log::info!(
            "run directory {} ({} dofs, {} steps)",
            dir.display(),
            ops.n_dofs(),
            cfg.params.k_steps
        );
        Ok(Workspace { cfg, ops, dir })
    }

    fn steady_control(&self) -> f64 {
        self.cfg.control.steady
    }
}

fn cmd_steady(ws: &Workspace) -> Result<DVector<f64>> {
    let ybar = compute_steady_state(&ws.ops, &ws.cfg.params, ws.steady_control())?;
    let residual = steady_residual(&ws.ops, &ws.cfg.params, ws.steady_control(), &ybar)?;
    persist::write_vector(ws.dir.join("ybar.mat"), &ybar)?;
    persist::write_csv(
        ws.dir.join("steady_report.csv"),
        "quantity,value",
        &[
            vec!["residual".into(), format!("{residual:.6e}")],
            vec!["dofs".into(), ws.ops.n_dofs().to_string()],
        ],
    )?;
    log::info!("steady state written, residual {residual:.3e}");
    Ok(ybar)
}

fn load_or_compute_steady(ws: &Workspace) -> Result<DVector<f64>> {
    match persist::read_vector(ws.dir.join("ybar.mat")) {
        Ok(ybar) => Ok(ybar),
        Err(Error::MissingArtifact(_)) => cmd_steady(ws),
        Err(e) => Err(e),
    }
}

fn cmd_snapshots(ws: &Workspace) -> Result<()> {
    let ybar = load_or_compute_steady(ws)?;
    let lin = linearize(&ws.ops, &ws.cfg.params, &ybar)?;
    let pipe = run_pipeline(&ws.ops, &lin, &ybar, &ws.cfg.pipeline_config())?;

    let dir = &ws.dir;
    let mut manifest = persist::Manifest::default();
    let mut traj = |name: &str, t: &Trajectory| -> Result<()> {
        persist::write_trajectory(dir, name, t, GramTag::W)?;
        manifest.record_file(dir, name, &format!("{name}.mat"), "trajectory")
    };
    traj("v", &pipe.first.background)?;
    traj("w", &pipe.first.impulse)?;
    traj("r", &pipe.second.background)?;
    for (i, t) in pipe.second.reaction_responses.iter().enumerate() {
        traj(&format!("beta_{i}"), t)?;
    }
    for (j, t) in pipe.second.load_responses.iter().enumerate() {
        traj(&format!("gamma_{j}"), t)?;
    }

    let mut basis = |name: &str, b: &PodBasis| -> Result<()> {
        persist::write_basis(dir, name, b)?;
        manifest.record_basis(dir, name, b)
    };
    basis("b1", &pipe.first.basis)?;
    basis("c", &pipe.nonlinearity)?;
    if let Some(b2) = &pipe.second.basis {
        basis("b2", b2)?;
    }
    basis("b12", &pipe.combined)?;
    persist::write_manifest(dir, &manifest)?;

    log::info!(
        "snapshots written: |B1| {}, |c| {}, |B2| {}, |B12| {}",
        pipe.first.basis.rank(),
        pipe.nonlinearity.rank(),
        pipe.second.basis.as_ref().map_or(0, PodBasis::rank),
        pipe.combined.rank()
    );
    Ok(())
}

/// Per-step relative discrepancies against the largest reference state norm.
fn relative_step_errors(
    ops: &SpatialOperators,
    reference: &Trajectory,
    candidate: &[DVector<f64>],
) -> Vec<f64> {
    let scale = reference
        .states
        .iter()
        .map(|s| ops.h_norm(s))
        .fold(f64::MIN_POSITIVE, f64::max);
    reference
        .states
        .iter()
        .zip(candidate)
        .map(|(a, b)| ops.h_norm(&(a - b)) / scale)
        .collect()
}

/// Artifacts the verification replays; reading them is separated out so a
/// corrupted file fails the verification instead of aborting it.
struct VerifyInputs {
    ybar: DVector<f64>,
    v: Trajectory,
    w: Trajectory,
    r: Trajectory,
    b1: PodBasis,
    c: PodBasis,
    betas: Vec<Trajectory>,
    gammas: Vec<Trajectory>,
}

fn verify_inputs(dir: &Path) -> Result<VerifyInputs> {
    let ybar = persist::read_vector(dir.join("ybar.mat"))?;
    let (v, _) = persist::read_trajectory(dir, "v")?;
    let (w, _) = persist::read_trajectory(dir, "w")?;
    let (r, _) = persist::read_trajectory(dir, "r")?;
    let b1 = persist::read_basis(dir, "b1")?;
    let c = persist::read_basis(dir, "c")?;
    let betas: Vec<Trajectory> = (0..b1.rank())
        .map(|i| persist::read_trajectory(dir, &format!("beta_{i}")).map(|p| p.0))
        .collect::<Result<_>>()?;
    let gammas: Vec<Trajectory> = (0..c.rank())
        .map(|j| persist::read_trajectory(dir, &format!("gamma_{j}")).map(|p| p.0))
        .collect::<Result<_>>()?;
    Ok(VerifyInputs { ybar, v, w, r, b1, c, betas, gammas })
}

fn cmd_verify(ws: &Workspace) -> Result<bool> {
    let ops = &ws.ops;
    let dir = &ws.dir;
    let params = &ws.cfg.params;

    let VerifyInputs { ybar, v, w, r, b1, c, betas, gammas } = match verify_inputs(dir) {
        Ok(inputs) => inputs,
        Err(e @ Error::Parse { .. }) => {
            log::error!("verification failed: stored artifacts are not usable: {e}");
            return Ok(false);
        }
        Err(e) => return Err(e),
    };
    let lin = linearize(ops, params, &ybar)?;

    // Random piecewise-constant probe control, reproducible from the seed.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ws.cfg.seed);
    let levels: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..4.0)).collect();
    let u: Vec<f64> = (0..params.k_steps)
        .map(|k| levels[k * levels.len() / params.k_steps])
        .collect();

    // First identity: the directly solved first step against the persisted
    // background plus the convolution with the persisted impulse response.
    let d1 = first_newton_step(ops, &lin, &u, &ybar)?;
    let conv = convolve(&w, &u);
    let candidate1: Vec<DVector<f64>> =
        v.states.iter().zip(&conv).map(|(a, b)| a + b).collect();
    let errs1 = relative_step_errors(ops, &d1, &candidate1);

    // Second identity: a direct solve of the coefficient-expanded source
    // against the persisted background and impulse responses.
    let b1_cols = b1.columns_vec();
    let c_cols = c.columns_vec();
    let (u_coeffs, v_coeffs) = second_step_coefficients(ops, &lin, &b1_cols, &c_cols, &d1);
    let shapes = reaction_impulse_shapes(&lin, &b1_cols);
    let cubic_bg = &ops.cubic_load(&lin.ybar) * params.b;
    let loads: Vec<DVector<f64>> = (0..params.k_steps)
        .map(|k| {
            let mut nodal = DVector::zeros(ybar.len());
            for (shape, series) in shapes.iter().zip(&u_coeffs) {
                nodal.axpy(series[k], shape, 1.0);
            }
            for (col, series) in c_cols.iter().zip(&v_coeffs) {
                nodal.axpy(-series[k], col, 1.0);
            }
            &cubic_bg + &ops.m * &nodal
        })
        .collect();
    let direct = solve_linear_theta(&lin.scheme, &loads, &DVector::zeros(ybar.len()))?;
    let mut candidate2 = r.states.clone();
    for (beta, series) in betas.iter().zip(&u_coeffs) {
        for (k, term) in convolve(beta, series).into_iter().enumerate() {
            candidate2[k] += term;
        }
    }
    for (gamma, series) in gammas.iter().zip(&v_coeffs) {
        for (k, term) in convolve(gamma, series).into_iter().enumerate() {
            candidate2[k] -= term;
        }
    }
    let errs2 = relative_step_errors(ops, &direct, &candidate2);

    // Spectral identity: the persisted first basis against the energy of
    // the persisted snapshot trajectories, rank by rank.
    let mut set = SnapshotSet::from_trajectories(&[&v, &w], GramTag::W)?;
    if ws.cfg.pipeline.use_trapezoid_weights {
        set = set.with_weights(trajectory_weights(&[&v, &w]))?;
    }
    let total = b1.eigenvalue_sum();
    let errs3: Vec<f64> = (0..=b1.rank())
        .map(|k| {
            let energy = reconstruction_error(ops, &rank_truncate(&b1, k), &set)?;
            Ok((energy - b1.tail_sum(k)).abs() / total)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut worst: (f64, &str) = (0.0, "none");
    for (check, errs) in [
        ("first-identity", &errs1),
        ("second-identity", &errs2),
        ("tail-sum", &errs3),
    ] {
        for (k, err) in errs.iter().enumerate() {
            rows.push(vec![check.to_string(), k.to_string(), format!("{err:.6e}")]);
        }
        let max = errs.iter().fold(0.0_f64, |m, &e| m.max(e));
        if max > worst.0 {
            worst = (max, check);
        }
    }
    rows.push(vec!["summary".into(), "max".into(), format!("{:.6e}", worst.0)]);
    persist::write_csv(dir.join("verify_report.csv"), "check,k,err", &rows)?;

    let pass = worst.0 <= VERIFY_TOL;
    if pass {
        log::info!("verification passed: max relative error {:.3e}", worst.0);
    } else {
        log::error!(
            "verification failed: {} reached {:.3e} (tolerance {VERIFY_TOL:.0e})",
            worst.1,
            worst.0
        );
    }
    Ok(pass)
}

fn cmd_forward_errors(ws: &Workspace) -> Result<()> {
    let ops = &ws.ops;
    let params = &ws.cfg.params;
    let ybar = persist::read_vector(ws.dir.join("ybar.mat"))?;
    let b1 = persist::read_basis(&ws.dir, "b1")?;
    let b12 = persist::read_basis(&ws.dir, "b12")?;

    let u = ws.cfg.control.test_control.samples(params);
    let y_full = solve_semilinear(ops, params, &u, &ybar)?;

    let lin = linearize(ops, params, &ybar)?;
    let d1 = first_newton_step(ops, &lin, &u, &ybar)?;
    let d2 = second_newton_step(ops, &lin, &d1)?;
    let y1 = shift_by(&d1, &ybar);
    let mut y2 = y1.clone();
    for (state, inc) in y2.states.iter_mut().zip(&d2.states) {
        *state += inc;
    }

    let mut rows = vec![
        ("y1".to_string(), trajectory_relative_error(&y1, &y_full, ops, GramTag::W)),
        ("y2".to_string(), trajectory_relative_error(&y2, &y_full, ops, GramTag::W)),
    ];
    for (name, basis) in [("y_b1", &b1), ("y_b12", &b12)] {
        let rm = reduce_model(ops, basis, None)?;
        let reduced = solve_reduced_semilinear(ops, &rm, params, &u, &ybar)?;
        let lifted = rm.lift_trajectory(&reduced);
        rows.push((name.to_string(), trajectory_relative_error(&lifted, &y_full, ops, GramTag::W)));
    }

    persist::write_quantity_csv(ws.dir.join("forward_errors.csv"), &rows)?;
    for (quantity, relerr) in &rows {
        log::info!("forward error {quantity}: {relerr:.4e}");
    }
    Ok(())
}

fn cmd_ocp(ws: &Workspace) -> Result<()> {
    let ops = &ws.ops;
    let params = &ws.cfg.params;
    let ybar = persist::read_vector(ws.dir.join("ybar.mat"))?;
    let b1 = persist::read_basis(&ws.dir, "b1")?;
    let b12 = persist::read_basis(&ws.dir, "b12")?;

    let u_ref = ws.cfg.ocp.reference_control.samples(params);
    let problem = make_tracking_problem(ops, params, &u_ref, ybar.clone(), ws.cfg.ocp.gamma)?;

    let base = 1 + b1.rank();
    let mut models = vec![reduce_model(ops, &b1, None)?];
    for &extra in &ws.cfg.ocp.truncations {
        models.push(reduce_model(ops, &rank_truncate(&b12, base + extra), None)?);
    }
    for rm in &mut models {
        if rm.dim() <= TENSOR_DIM_CAP {
            rm.enable_cubic_tensor()?;
            rm.enable_jacobian_tensor(ops)?;
        }
    }
    let model_refs: Vec<&ReducedModel> = models.iter().collect();

    let u0 = vec![ws.steady_control(); params.k_steps];
    let copts = ComparisonOptions { opt: ws.cfg.ocp_options(), use_reduced_objective: false };
    let rows = run_comparison_experiment(ops, &problem, &model_refs, &u0, &copts)?;
    persist::write_comparison_csv(ws.dir.join("ocp.csv"), &rows)?;
    for row in &rows {
        log::info!(
            "ocp size {}: relobj {:.4e}, {:.2}s, {} iterations",
            row.size,
            row.relobj,
            row.time,
            row.iterations
        );
    }
    Ok(())
}
