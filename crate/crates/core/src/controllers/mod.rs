//! Signal-control strategies behind one interface: fixed-time, max-pressure,
//! road-aggregated MPC, per-intersection distributed MPC coordinated by
//! ADMM, and a centralized reference that solves the whole network as one
//! quadratic program with oracle knowledge of the coupling matrices.
//!
//! The harness calls [`SignalController::plan`] once per control cycle with
//! a measurement per intersection and applies the returned green times. All
//! message passing between distributed agents happens inside the controller:
//! agents exchange immutable broadcasts through a board that is swapped only
//! between cycles, so results never depend on agent execution order.

pub mod centralized;
pub mod cost;
pub mod dmpc;
pub mod fixed_time;
pub mod max_pressure;
pub mod road;

use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::admm::{BlockAdmmSettings, SolverError, StopReason};
use crate::config::ControllerConfig;
use crate::estimation::EstimationError;
use crate::plant::CouplingOracle;
use crate::prediction::PredictionError;
use crate::qp::QpError;
use crate::topology::NetworkTopology;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("intersection {} never received the step message from neighbor {}", intersection + 1, neighbor + 1)]
    MissingMessage { intersection: usize, neighbor: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("controller requires oracle access to the plant's coupling model: {0}")]
    MissingOracle(String),
    #[error("solver did not converge: {0}")]
    NotConverged(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// The strategies the harness can run. Parsed from CLI/config strings via
/// [`FromStr`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    FixedTime,
    MaxPressure,
    MpcRoad,
    DmpcAdmm,
    /// Distributed MPC with the true coupling matrices substituted for the
    /// online estimate; isolates estimation error in comparisons.
    DmpcAdmmOracle,
    CentralizedReference,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 6] = [
        ControllerKind::FixedTime,
        ControllerKind::MaxPressure,
        ControllerKind::MpcRoad,
        ControllerKind::DmpcAdmm,
        ControllerKind::DmpcAdmmOracle,
        ControllerKind::CentralizedReference,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::FixedTime => "fixed_time",
            ControllerKind::MaxPressure => "max_pressure",
            ControllerKind::MpcRoad => "mpc_road",
            ControllerKind::DmpcAdmm => "dmpc_admm",
            ControllerKind::DmpcAdmmOracle => "dmpc_admm_oracle",
            ControllerKind::CentralizedReference => "centralized_ref",
        }
    }

    /// Whether the strategy needs oracle access to the plant's true coupling
    /// model.
    pub fn needs_oracle(&self) -> bool {
        matches!(self, ControllerKind::DmpcAdmmOracle | ControllerKind::CentralizedReference)
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ControllerKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ControllerKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown controller '{s}'; expected one of {}", names.join(", "))
            })
    }
}

/// What every controller sees of one intersection at the start of a cycle.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub step: usize,
    /// Lane counts `x_i(k)`.
    pub counts: DVector<f64>,
    /// Measured outflow matrix `B_i(k)` (saturation at each lane's phase).
    pub outflow: DMatrix<f64>,
}

/// One agent's broadcast after planning a step: the planned control sequence
/// (step-major, `4*M`) and the predicted trajectory it implies.
#[derive(Debug, Clone)]
pub struct NeighborMessage {
    pub sender: usize,
    /// Planning step the message was produced at; -1 marks the synthetic
    /// bootstrap round.
    pub step: i64,
    pub planned: DVector<f64>,
    pub trajectory: DVector<f64>,
}

/// Per-intersection solve diagnostics attached to each output.
#[derive(Debug, Clone, Default)]
pub struct SolveDiagnostics {
    /// Wall time attributable to this intersection's own computation.
    pub wall_s: f64,
    /// ADMM sweeps or gradient iterations, when applicable.
    pub iterations: usize,
    pub stop: Option<StopReason>,
    /// Objective value of the solved program, when applicable.
    pub objective: f64,
    /// Set when coefficient forecasts fell back to holding current values.
    pub forecast_held: bool,
}

#[derive(Debug, Clone)]
pub struct ControllerOutput {
    pub greens: [f64; 4],
    pub diagnostics: SolveDiagnostics,
}

/// All outputs for one planning cycle.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub outputs: Vec<ControllerOutput>,
}

impl PlanOutcome {
    pub fn controls(&self) -> Vec<[f64; 4]> {
        self.outputs.iter().map(|o| o.greens).collect()
    }

    /// Mean per-intersection solve wall time for this cycle.
    pub fn mean_wall_s(&self) -> f64 {
        if self.outputs.is_empty() {
            return 0.0;
        }
        self.outputs.iter().map(|o| o.diagnostics.wall_s).sum::<f64>() / self.outputs.len() as f64
    }
}

/// Uniform interface over all strategies. `measurements` carries one entry
/// per intersection, indexed consistently with the topology.
pub trait SignalController {
    fn kind(&self) -> ControllerKind;
    fn plan(&mut self, measurements: &[Measurement]) -> Result<PlanOutcome, ControllerError>;
}

/// Shared numeric parameters extracted from the controller config block.
#[derive(Debug, Clone)]
pub struct ControlParams {
    pub horizon: usize,
    pub budget: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub control_penalty: f64,
    pub mu: f64,
    pub delta: f64,
    pub ar_order: usize,
    pub admm: BlockAdmmSettings,
    pub constrain_first: bool,
    pub warm_start: bool,
}

impl ControlParams {
    pub fn from_config(cfg: &ControllerConfig) -> Self {
        ControlParams {
            horizon: cfg.horizon,
            budget: cfg.cycle_s - cfg.lost_time_s,
            u_min: cfg.u_min_s,
            u_max: cfg.u_max_s,
            control_penalty: cfg.control_penalty,
            mu: cfg.estimator.mu,
            delta: cfg.estimator.delta,
            ar_order: cfg.estimator.ar_order,
            admm: BlockAdmmSettings {
                rho: cfg.admm.penalty,
                max_sweeps: cfg.admm.max_sweeps,
                eps_stop: cfg.admm.eps_stop,
                t_max: std::time::Duration::from_secs_f64(cfg.admm.t_max_s),
                block_tol: cfg.admm.block_tol,
                stop_rule: cfg.admm.stop_rule,
            },
            constrain_first: cfg.admm.constrain_first_step,
            warm_start: cfg.admm.warm_start,
        }
    }

    pub fn equal_split(&self) -> f64 {
        (self.budget / 4.0).clamp(self.u_min, self.u_max)
    }
}

/// Builds a controller of the requested kind. Oracle-needing kinds require
/// `oracle`; the others ignore it.
pub fn build_controller(
    kind: ControllerKind,
    topo: Arc<NetworkTopology>,
    cfg: &ControllerConfig,
    oracle: Option<CouplingOracle>,
) -> Result<Box<dyn SignalController>, ControllerError> {
    let params = ControlParams::from_config(cfg);
    if kind.needs_oracle() && oracle.is_none() {
        return Err(ControllerError::MissingOracle(kind.name().into()));
    }
    Ok(match kind {
        ControllerKind::FixedTime => {
            Box::new(fixed_time::FixedTimeController::new(topo.n(), &params)?)
        }
        ControllerKind::MaxPressure => {
            Box::new(max_pressure::MaxPressureController::new(topo, params))
        }
        ControllerKind::MpcRoad => Box::new(road::RoadController::new(topo, params)),
        ControllerKind::DmpcAdmm => Box::new(dmpc::DistributedController::new(topo, params, None)),
        ControllerKind::DmpcAdmmOracle => {
            Box::new(dmpc::DistributedController::new(topo, params, oracle))
        }
        ControllerKind::CentralizedReference => Box::new(centralized::CentralizedController::new(
            topo,
            params,
            oracle.expect("checked above"),
        )),
    })
}

// ---------------------------------------------------------------------------
// Sequence layout helpers
// ---------------------------------------------------------------------------

/// Interleaves four per-phase sequences of length `M` into one step-major
/// vector `[u(k); u(k+1); ...]`.
pub fn step_major_from_phase_blocks(blocks: &[DVector<f64>]) -> DVector<f64> {
    assert_eq!(blocks.len(), 4, "expected four phase blocks");
    let m = blocks[0].len();
    DVector::from_fn(4 * m, |idx, _| blocks[idx % 4][idx / 4])
}

/// Splits a step-major sequence back into four per-phase blocks.
pub fn phase_blocks_from_step_major(u: &DVector<f64>) -> Vec<DVector<f64>> {
    assert_eq!(u.len() % 4, 0, "step-major length must be a multiple of 4");
    let m = u.len() / 4;
    (0..4).map(|phase| DVector::from_fn(m, |h, _| u[4 * h + phase])).collect()
}

/// The first step's four green times from a step-major sequence.
pub fn first_step_controls(u: &DVector<f64>) -> [f64; 4] {
    [u[0], u[1], u[2], u[3]]
}

/// Stacks the in-neighbors' planned controls over the horizon into the
/// coupling input sequence `[z(k); ...; z(k+M-1)]`. Plans on the board are
/// one cycle old, so each is shifted forward one step with its last block
/// held: `z_j(k+h) = plan_j(min(h+1, M-1))`.
pub fn stack_neighbor_horizon(
    board: &[NeighborMessage],
    in_neighbors: &[usize],
    horizon: usize,
) -> DVector<f64> {
    let ni = in_neighbors.len();
    DVector::from_iterator(
        4 * ni * horizon,
        (0..horizon).flat_map(|h| {
            in_neighbors.iter().flat_map(move |&j| {
                let blocks = board[j].planned.len() / 4;
                let src = 4 * (h + 1).min(blocks - 1);
                (0..4).map(move |p| board[j].planned[src + p])
            })
        }),
    )
}

/// Advances a block sequence one step: drops the first block and repeats the
/// last. Used to turn last cycle's plans and trajectories into this cycle's
/// horizon-aligned inputs.
pub fn shift_hold_last(seq: &DVector<f64>, block: usize) -> DVector<f64> {
    assert!(block > 0 && seq.len() % block == 0, "sequence must be whole blocks");
    let m = seq.len() / block;
    DVector::from_fn(seq.len(), |idx, _| {
        let (h, r) = (idx / block, idx % block);
        let src = (h + 1).min(m - 1);
        seq[src * block + r]
    })
}
