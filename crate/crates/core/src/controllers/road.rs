//! MPC on road-aggregated states: the eight lanes of an intersection are
//! folded pairwise into four roads (lanes 0-1, 2-3, 4-5, 6-7), and the
//! controller predicts and penalizes road densities instead of lane
//! densities.
//!
//! Each road mixes two signal phases — its two lanes are served by different
//! phases — so the per-phase decoupling used by the lane-level agents does
//! not apply. The horizon problem is solved jointly over all `4M` green
//! times by projected gradient, with the cycle budget enforced per step via
//! Euclidean projection. Messaging, plan shifting, and the bootstrap round
//! follow the lane-level protocol, only at road granularity (four trajectory
//! entries per step).

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{
    cost::{joint_cost, CostInputs},
    first_step_controls, shift_hold_last, stack_neighbor_horizon, ControlParams, ControllerError,
    ControllerKind, ControllerOutput, Measurement, NeighborMessage, PlanOutcome, SignalController,
    SolveDiagnostics,
};
use crate::estimation::{CoefficientForecaster, RecursiveRidge};
use crate::prediction::{assemble_stacked, predict_trajectory, PredictionError};
use crate::qp::{project_capped_simplex, solve_projected_gradient, QpError};
use crate::topology::{LaneId, NetworkTopology, PHASE_OF_LANE};

const ROADS: usize = 4;
const PG_TOL: f64 = 1e-8;
const PG_MAX_ITER: usize = 50_000;

/// Sums lane counts pairwise into road counts.
pub fn road_counts(counts: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(ROADS, |r, _| counts[2 * r] + counts[2 * r + 1])
}

/// Folds the 8x4 lane outflow matrix into the 4x4 road version; each road
/// row carries the saturation rates of its two lanes in their phase columns.
pub fn road_outflow(outflow: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(ROADS, 4, |r, p| outflow[(2 * r, p)] + outflow[(2 * r + 1, p)])
}

/// Road lengths: the summed lengths of the two constituent lanes.
pub fn road_lengths(topo: &NetworkTopology, i: usize) -> [f64; ROADS] {
    let lanes = topo.lengths_of(i);
    std::array::from_fn(|r| lanes[2 * r] + lanes[2 * r + 1])
}

/// Structural nonzeros of the road-level transfer matrix: lane-level rows
/// collapse pairwise, duplicates merge.
pub fn road_transfer_pattern(topo: &NetworkTopology, i: usize) -> Vec<(usize, usize)> {
    let set: std::collections::BTreeSet<(usize, usize)> =
        topo.transfer_pattern(i).into_iter().map(|(m, col)| (m / 2, col)).collect();
    set.into_iter().collect()
}

fn road_b_pattern() -> Vec<(usize, usize)> {
    let mut pattern: Vec<(usize, usize)> =
        (0..8).map(|m| (m / 2, PHASE_OF_LANE[m])).collect();
    pattern.sort_unstable();
    pattern
}

/// Roads with at least one in-network downstream lane; only those carry a
/// deviation term.
pub fn road_deviation_mask(topo: &NetworkTopology, i: usize) -> [bool; ROADS] {
    std::array::from_fn(|r| {
        (2 * r..2 * r + 2).any(|m| {
            let set = topo.downstream_lanes(LaneId::new(i, m)).expect("lane in range");
            !set.lanes.is_empty()
        })
    })
}

/// Mean downstream road density per own road and horizon step, from the
/// out-neighbors' broadcast road trajectories (4 entries per step). Each
/// in-network downstream lane of either constituent lane contributes the
/// density of the road containing it.
pub fn road_density_targets(
    topo: &NetworkTopology,
    i: usize,
    horizon: usize,
    trajectories: &BTreeMap<usize, DVector<f64>>,
) -> Result<DMatrix<f64>, PredictionError> {
    let mut targets = DMatrix::zeros(ROADS, horizon);
    for r in 0..ROADS {
        let mut sums = vec![0.0; horizon];
        let mut count = 0usize;
        for m in 2 * r..2 * r + 2 {
            let set = topo.downstream_lanes(LaneId::new(i, m)).expect("lane in range");
            for &target in &set.lanes {
                let traj = trajectories.get(&target.intersection).ok_or(
                    PredictionError::MissingNeighborTrajectory {
                        intersection: target.intersection,
                    },
                )?;
                let road = target.lane / 2;
                let length = road_lengths(topo, target.intersection)[road];
                for (h, sum) in sums.iter_mut().enumerate() {
                    *sum += traj[ROADS * h + road] / length;
                }
                count += 1;
            }
        }
        if count > 0 {
            for h in 0..horizon {
                targets[(r, h)] = sums[h] / count as f64;
            }
        }
    }
    Ok(targets)
}

#[derive(Debug, Clone)]
struct PrevStep {
    x: DVector<f64>,
    b: DMatrix<f64>,
    u: DVector<f64>,
}

/// One intersection's road-level planner.
pub struct RoadAgent {
    id: usize,
    topo: Arc<NetworkTopology>,
    params: ControlParams,
    estimator: RecursiveRidge,
    forecaster: CoefficientForecaster,
    prev: Option<PrevStep>,
    warm: Option<DVector<f64>>,
}

impl RoadAgent {
    pub fn new(id: usize, topo: Arc<NetworkTopology>, params: ControlParams) -> Self {
        let ni = topo.in_neighbors(id).len();
        let estimator = RecursiveRidge::new(ROADS, 4 * ni, params.mu);
        let forecaster = CoefficientForecaster::new(
            ROADS,
            4,
            4 * ni,
            road_b_pattern(),
            road_transfer_pattern(&topo, id),
            params.ar_order,
            params.delta,
        );
        RoadAgent { id, topo, params, estimator, forecaster, prev: None, warm: None }
    }

    pub fn step(
        &mut self,
        meas: &Measurement,
        board: &[NeighborMessage],
    ) -> Result<(ControllerOutput, NeighborMessage), ControllerError> {
        let start = Instant::now();
        let k = meas.step;
        let m = self.params.horizon;
        let in_neighbors = self.topo.in_neighbors(self.id);
        let ni = in_neighbors.len();
        if 4.0 * self.params.u_min > self.params.budget + 1e-9
            || 4.0 * self.params.u_max < self.params.budget - 1e-9
        {
            return Err(ControllerError::Qp(QpError::InfeasibleBox(format!(
                "cycle budget {} unreachable with four phases in [{}, {}]",
                self.params.budget, self.params.u_min, self.params.u_max
            ))));
        }

        let expected_step = k as i64 - 1;
        for &j in self.topo.comm_neighbors(self.id) {
            let ok = board
                .get(j)
                .is_some_and(|msg| msg.sender == j && msg.step == expected_step);
            if !ok {
                return Err(ControllerError::MissingMessage {
                    intersection: self.id,
                    neighbor: j,
                });
            }
        }

        let counts = road_counts(&meas.counts);
        let outflow = road_outflow(&meas.outflow);

        if let Some(prev) = &self.prev {
            if ni > 0 {
                let z_prev = DVector::from_iterator(
                    4 * ni,
                    in_neighbors.iter().flat_map(|&j| (0..4).map(move |p| board[j].planned[p])),
                );
                self.estimator.update(&counts, &prev.x, &prev.b, &prev.u, &z_prev)?;
            }
        }

        let c_now = self.estimator.matrix().clone();
        self.forecaster.observe(&outflow, &c_now)?;
        let forecast = self.forecaster.forecast_or_hold(&outflow, &c_now, m - 1);
        let mut b_seq = vec![outflow.clone()];
        b_seq.extend(forecast.b);
        let mut c_seq = vec![c_now];
        c_seq.extend(forecast.c);
        let model = assemble_stacked(&b_seq, &c_seq)?;

        let z_horizon = stack_neighbor_horizon(board, in_neighbors, m);
        let base = predict_trajectory(&model, &counts, &DVector::zeros(4 * m), &z_horizon)?;

        let mut trajectories = BTreeMap::new();
        for &j in self.topo.out_neighbors(self.id) {
            trajectories.insert(j, shift_hold_last(&board[j].trajectory, ROADS));
        }
        let targets = road_density_targets(&self.topo, self.id, m, &trajectories)?;
        let mask = road_deviation_mask(&self.topo, self.id);
        let lengths = road_lengths(&self.topo, self.id);

        let inputs = CostInputs {
            model: &model,
            base: &base,
            targets: &targets,
            mask: &mask,
            lengths: &lengths,
            control_penalty: self.params.control_penalty,
        };
        let q = joint_cost(&inputs);

        let (u_min, u_max, budget) = (self.params.u_min, self.params.u_max, self.params.budget);
        let project = |u: &DVector<f64>| -> DVector<f64> {
            let mut out = DVector::zeros(4 * m);
            for h in 0..m {
                let slice = u.rows(4 * h, 4).into_owned();
                let projected = project_capped_simplex(&slice, u_min, u_max, budget)
                    .expect("budget feasibility checked above");
                out.rows_mut(4 * h, 4).copy_from(&projected);
            }
            out
        };
        let x0 = match (&self.warm, self.params.warm_start) {
            (Some(w), true) => shift_hold_last(w, 4),
            _ => DVector::from_element(4 * m, self.params.equal_split()),
        };
        let sol = solve_projected_gradient(&q, project, &x0, PG_TOL, PG_MAX_ITER);
        if !sol.converged {
            return Err(ControllerError::NotConverged(format!(
                "road horizon program at intersection {}, step {k}: projected gradient \
                 still moving after {PG_MAX_ITER} iterations",
                self.id + 1
            )));
        }
        self.warm = Some(sol.x.clone());

        let trajectory = predict_trajectory(&model, &counts, &sol.x, &z_horizon)?;
        let greens = first_step_controls(&sol.x);
        self.prev = Some(PrevStep { x: counts, b: outflow, u: DVector::from_row_slice(&greens) });

        let output = ControllerOutput {
            greens,
            diagnostics: SolveDiagnostics {
                wall_s: start.elapsed().as_secs_f64(),
                iterations: sol.iterations,
                stop: None,
                objective: q.eval(&sol.x),
                forecast_held: forecast.held,
            },
        };
        let message =
            NeighborMessage { sender: self.id, step: k as i64, planned: sol.x, trajectory };
        Ok((output, message))
    }
}

/// All road-level agents plus the shared message board.
pub struct RoadController {
    topo: Arc<NetworkTopology>,
    params: ControlParams,
    agents: Vec<RoadAgent>,
    board: Vec<NeighborMessage>,
}

impl RoadController {
    pub fn new(topo: Arc<NetworkTopology>, params: ControlParams) -> Self {
        let agents =
            (0..topo.n()).map(|i| RoadAgent::new(i, Arc::clone(&topo), params.clone())).collect();
        RoadController { topo, params, agents, board: Vec::new() }
    }

    fn bootstrap_board(&self, measurements: &[Measurement]) -> Vec<NeighborMessage> {
        let m = self.params.horizon;
        let equal = self.params.equal_split();
        measurements
            .iter()
            .enumerate()
            .map(|(i, meas)| {
                let counts = road_counts(&meas.counts);
                NeighborMessage {
                    sender: i,
                    step: meas.step as i64 - 1,
                    planned: DVector::from_element(4 * m, equal),
                    trajectory: DVector::from_fn(ROADS * m, |idx, _| counts[idx % ROADS]),
                }
            })
            .collect()
    }
}

impl SignalController for RoadController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::MpcRoad
    }

    fn plan(&mut self, measurements: &[Measurement]) -> Result<PlanOutcome, ControllerError> {
        if measurements.len() != self.topo.n() {
            return Err(ControllerError::ShapeMismatch(format!(
                "{} measurements for {} intersections",
                measurements.len(),
                self.topo.n()
            )));
        }
        if self.board.is_empty() {
            self.board = self.bootstrap_board(measurements);
        }
        let mut outputs = Vec::with_capacity(self.topo.n());
        let mut next_board = Vec::with_capacity(self.topo.n());
        for (i, meas) in measurements.iter().enumerate() {
            let (output, message) = self.agents[i].step(meas, &self.board)?;
            outputs.push(output);
            next_board.push(message);
        }
        self.board = next_board;
        Ok(PlanOutcome { outputs })
    }
}
