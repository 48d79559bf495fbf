//! Two-stage snapshot generation.
//!
//! Stage one compresses the background and control-impulse responses of the
//! linearized problem into a basis `B1`. Its triple products seed a basis
//! for the cubic nonlinearity, whose impulse responses (together with the
//! reaction responses of `B1` and the nonlinearity background) form the
//! second-stage rows behind `B2`. The combined basis collects the
//! linearization state, `B1`, and `B2` in one final decomposition.

use nalgebra::DVector;

use crate::error::Error;
use crate::mesh::{GramTag, SpatialOperators};
use crate::newton::{
    background_response, control_impulse_response, impulse_responses, nonlinearity_background,
    reaction_impulse_shapes, LinearizedOperator,
};
use crate::pod::{pod_basis, rank_truncate, Cutoff, PodBasis, SnapshotSet};
use crate::stepper::Trajectory;
use crate::Result;

/// Most triple products accepted as input to the nonlinearity
/// decomposition; reached only when the first-stage cutoff is far too
/// loose.
pub const CANDIDATE_CAP: usize = 10_000;

#[derive(Clone, Copy, Debug)]
pub struct SnapshotPipelineConfig {
    pub cutoff_first: Cutoff,
    pub cutoff_nonlin: Cutoff,
    pub cutoff_second: Cutoff,
    pub cutoff_combined: Cutoff,
    /// Use the linearization state as a product factor and combined-basis
    /// member.
    pub include_ybar: bool,
    /// Optional cap on the nonlinearity basis size.
    pub max_nonlin_basis: Option<usize>,
    /// Trapezoidal time weights for trajectory snapshots instead of
    /// uniform ones.
    pub use_trapezoid_weights: bool,
    /// Keep only the leading `base + n` combined vectors, where `base`
    /// counts the first-stage vectors plus the linearization state when
    /// included.
    pub truncate_second: Option<usize>,
}

impl Default for SnapshotPipelineConfig {
    fn default() -> Self {
        SnapshotPipelineConfig {
            cutoff_first: Cutoff::Threshold(1e-8),
            cutoff_nonlin: Cutoff::Threshold(1e-8),
            cutoff_second: Cutoff::Threshold(1e-8),
            cutoff_combined: Cutoff::Threshold(1e-8),
            include_ybar: true,
            max_nonlin_basis: None,
            use_trapezoid_weights: false,
            truncate_second: None,
        }
    }
}

/// Background and control-impulse responses with their basis `B1`.
#[derive(Clone, Debug)]
pub struct FirstStage {
    pub background: Trajectory,
    pub impulse: Trajectory,
    pub basis: PodBasis,
}

/// Second-stage rows with their basis `B2`; `basis` is `None` when no
/// eigenvalue survives the cutoff, which is legitimate for weak
/// nonlinearities.
#[derive(Clone, Debug)]
pub struct SecondStage {
    pub background: Trajectory,
    pub reaction_responses: Vec<Trajectory>,
    pub load_responses: Vec<Trajectory>,
    pub basis: Option<PodBasis>,
}

/// Everything the snapshot pipeline produces.
#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub first: FirstStage,
    pub nonlinearity: PodBasis,
    pub second: SecondStage,
    pub combined: PodBasis,
}

/// Trapezoidal time weights for the concatenated states of `trajectories`:
/// `dt` per interior state, `dt/2` at both endpoints.
pub fn trajectory_weights(trajectories: &[&Trajectory]) -> Vec<f64> {
    let mut weights = Vec::new();
    for t in trajectories {
        let last = t.states.len() - 1;
        for i in 0..=last {
            let w = if i == 0 || i == last { 0.5 } else { 1.0 };
            weights.push(w * t.dt);
        }
    }
    weights
}

fn pod_of_trajectories(
    ops: &SpatialOperators,
    trajectories: &[&Trajectory],
    cutoff: Cutoff,
    cfg: &SnapshotPipelineConfig,
) -> Result<PodBasis> {
    let mut set = SnapshotSet::from_trajectories(trajectories, GramTag::W)?;
    if cfg.use_trapezoid_weights {
        set = set.with_weights(trajectory_weights(trajectories))?;
    }
    pod_basis(ops, &set, cutoff)
}

pub fn generate_first_stage(
    ops: &SpatialOperators,
    lin: &LinearizedOperator,
    y0: &DVector<f64>,
    cfg: &SnapshotPipelineConfig,
) -> Result<FirstStage> {
    let background = background_response(lin, y0)?;
    let impulse = control_impulse_response(ops, lin)?;
    let basis = pod_of_trajectories(ops, &[&background, &impulse], cfg.cutoff_first, cfg)?;
    Ok(FirstStage { background, impulse, basis })
}

/// Number of multisets of size three from a pool of `p` factors.
fn multiset_count(p: usize) -> usize {
    p * (p + 1) * (p + 2) / 6
}

/// Nodal triple products of all multisets of size three from the pool.
fn candidate_products(pool: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let p = pool.len();
    let mut out = Vec::with_capacity(multiset_count(p));
    for a in 0..p {
        for b in a..p {
            let ab = pool[a].component_mul(&pool[b]);
            for c in b..p {
                out.push(ab.component_mul(&pool[c]));
            }
        }
    }
    out
}

/// Basis for the range of the cubic nonlinearity over the first-stage
/// span, orthonormal in the state space.
pub fn nonlinearity_basis(
    ops: &SpatialOperators,
    lin: &LinearizedOperator,
    first: &PodBasis,
    cfg: &SnapshotPipelineConfig,
) -> Result<PodBasis> {
    let mut pool = Vec::with_capacity(first.rank() + 1);
    if cfg.include_ybar {
        pool.push(lin.ybar.clone());
    }
    pool.extend(first.columns_vec());
    let count = multiset_count(pool.len());
    if count > CANDIDATE_CAP {
        return Err(Error::CandidateCap { count, cap: CANDIDATE_CAP });
    }
    let candidates = candidate_products(&pool);
    let set = SnapshotSet::from_columns(&candidates, GramTag::H)?;
    let mut basis = pod_basis(ops, &set, cfg.cutoff_nonlin)?;
    if let Some(cap) = cfg.max_nonlin_basis {
        if basis.rank() > cap {
            basis = rank_truncate(&basis, cap);
        }
    }
    Ok(basis)
}

pub fn generate_second_stage(
    ops: &SpatialOperators,
    lin: &LinearizedOperator,
    first: &PodBasis,
    nonlin: &PodBasis,
    cfg: &SnapshotPipelineConfig,
) -> Result<SecondStage> {
    let background = nonlinearity_background(ops, lin)?;
    let shapes = reaction_impulse_shapes(lin, &first.columns_vec());
    let reaction_responses = impulse_responses(lin, &shapes)?;
    let load_responses = impulse_responses(lin, &nonlin.columns_vec())?;

    let mut rows: Vec<&Trajectory> = Vec::with_capacity(
        1 + reaction_responses.len() + load_responses.len(),
    );
    rows.push(&background);
    rows.extend(reaction_responses.iter());
    rows.extend(load_responses.iter());
    let basis = match pod_of_trajectories(ops, &rows, cfg.cutoff_second, cfg) {
        Ok(b) => Some(b),
        Err(Error::EmptyBasis) => None,
        Err(e) => return Err(e),
    };

    Ok(SecondStage { background, reaction_responses, load_responses, basis })
}

/// Joint decomposition of the linearization state, `B1`, and `B2`, with the
/// optional eigenvalue-ordered truncation from the configuration.
pub fn combine_bases(
    ops: &SpatialOperators,
    lin: &LinearizedOperator,
    first: &PodBasis,
    second: Option<&PodBasis>,
    cfg: &SnapshotPipelineConfig,
) -> Result<PodBasis> {
    let mut columns = Vec::new();
    let mut base = first.rank();
    if cfg.include_ybar {
        columns.push(lin.ybar.clone());
        base += 1;
    }
    columns.extend(first.columns_vec());
    if let Some(b2) = second {
        columns.extend(b2.columns_vec());
    }
    let set = SnapshotSet::from_columns(&columns, GramTag::W)?;
    let mut combined = pod_basis(ops, &set, cfg.cutoff_combined)?;
    if let Some(n2) = cfg.truncate_second {
        combined = rank_truncate(&combined, (base + n2).min(combined.rank()));
    }
    Ok(combined)
}

pub fn run_pipeline(
    ops: &SpatialOperators,
    lin: &LinearizedOperator,
    y0: &DVector<f64>,
    cfg: &SnapshotPipelineConfig,
) -> Result<PipelineResult> {
    let first = generate_first_stage(ops, lin, y0, cfg)?;
    let nonlinearity = nonlinearity_basis(ops, lin, &first.basis, cfg)?;
    let second = generate_second_stage(ops, lin, &first.basis, &nonlinearity, cfg)?;
    let combined = combine_bases(ops, lin, &first.basis, second.basis.as_ref(), cfg)?;
    Ok(PipelineResult { first, nonlinearity, second, combined })
}
