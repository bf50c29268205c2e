//! Distributed MPC: one agent per intersection, coordinated only through
//! broadcast messages, each solving its own horizon problem with the
//! block-coordinate ADMM solver.
//!
//! Per cycle each agent: updates its coupling estimate from what neighbors
//! actually applied last cycle, forecasts the model coefficients over the
//! horizon, assembles the stacked prediction with neighbor plans shifted one
//! step (holding the last block), builds the four per-phase cost blocks
//! against downstream density targets taken from neighbors' broadcast
//! trajectories, solves, applies the first control, and broadcasts its own
//! plan and predicted trajectory for the next cycle.
//!
//! Agents only read the previous cycle's board, which is swapped after every
//! agent has planned, so outcomes are independent of execution order.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{
    cost::{phase_cost_blocks, CostInputs},
    first_step_controls, shift_hold_last, step_major_from_phase_blocks, ControlParams,
    ControllerError, ControllerKind, ControllerOutput, Measurement, NeighborMessage, PlanOutcome,
    SignalController, SolveDiagnostics,
};
use crate::admm::{solve_block_admm, CycleProblem, WarmStart};
use crate::estimation::{CoefficientForecaster, RecursiveRidge};
use crate::plant::CouplingOracle;
use crate::prediction::{
    assemble_stacked, deviation_mask, downstream_density_targets, predict_trajectory,
};
use crate::topology::{NetworkTopology, LANES_OF_PHASE, PHASE_OF_LANE};

#[derive(Debug, Clone)]
struct PrevStep {
    x: DVector<f64>,
    b: DMatrix<f64>,
    u: DVector<f64>,
}

/// One intersection's controller state.
pub struct DistributedAgent {
    id: usize,
    topo: Arc<NetworkTopology>,
    params: ControlParams,
    oracle: Option<CouplingOracle>,
    estimator: RecursiveRidge,
    forecaster: CoefficientForecaster,
    prev: Option<PrevStep>,
    warm: Option<WarmStart>,
}

impl DistributedAgent {
    pub fn new(
        id: usize,
        topo: Arc<NetworkTopology>,
        params: ControlParams,
        oracle: Option<CouplingOracle>,
    ) -> Self {
        let ni = topo.in_neighbors(id).len();
        let b_pattern: Vec<(usize, usize)> = (0..8).map(|m| (m, PHASE_OF_LANE[m])).collect();
        let c_pattern = topo.transfer_pattern(id);
        let estimator = RecursiveRidge::new(8, 4 * ni, params.mu);
        let forecaster = CoefficientForecaster::new(
            8,
            4,
            4 * ni,
            b_pattern,
            c_pattern,
            params.ar_order,
            params.delta,
        );
        DistributedAgent { id, topo, params, oracle, estimator, forecaster, prev: None, warm: None }
    }

    pub fn estimate(&self) -> &DMatrix<f64> {
        self.estimator.matrix()
    }

    /// Plans one cycle. `board` holds the previous cycle's broadcast from
    /// every intersection (or the bootstrap round at the first step).
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

        // Synchronous-round contract: a current message from every
        // communication neighbor.
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

        // Coupling estimate from what the neighbors actually applied last
        // cycle (the first block of their previous plan).
        if self.oracle.is_none() {
            if let Some(prev) = &self.prev {
                if ni > 0 {
                    let z_prev = DVector::from_iterator(
                        4 * ni,
                        in_neighbors.iter().flat_map(|&j| {
                            (0..4).map(move |p| board[j].planned[p])
                        }),
                    );
                    self.estimator.update(&meas.counts, &prev.x, &prev.b, &prev.u, &z_prev)?;
                }
            }
        }

        // Coefficient sequences over the horizon.
        let (b_seq, c_seq, forecast_held) = match &self.oracle {
            Some(oracle) => {
                let b_seq = vec![meas.outflow.clone(); m];
                let c_seq: Vec<DMatrix<f64>> =
                    (0..m).map(|h| oracle.transfer_matrix(self.id, k + h)).collect();
                (b_seq, c_seq, false)
            }
            None => {
                let c_now = self.estimator.matrix().clone();
                self.forecaster.observe(&meas.outflow, &c_now)?;
                let forecast = self.forecaster.forecast_or_hold(&meas.outflow, &c_now, m - 1);
                let mut b_seq = vec![meas.outflow.clone()];
                b_seq.extend(forecast.b);
                let mut c_seq = vec![c_now];
                c_seq.extend(forecast.c);
                (b_seq, c_seq, forecast.held)
            }
        };
        let model = assemble_stacked(&b_seq, &c_seq)?;

        let z_horizon = super::stack_neighbor_horizon(board, in_neighbors, m);
        let base = predict_trajectory(&model, &meas.counts, &DVector::zeros(4 * m), &z_horizon)?;

        // Downstream density targets from neighbors' broadcast trajectories,
        // shifted one step with the last block held.
        let mut trajectories = std::collections::BTreeMap::new();
        for &j in self.topo.out_neighbors(self.id) {
            trajectories.insert(j, shift_hold_last(&board[j].trajectory, 8));
        }
        let targets = downstream_density_targets(&self.topo, self.id, m, &trajectories)?;
        let mask = deviation_mask(&self.topo, self.id);

        let inputs = CostInputs {
            model: &model,
            base: &base,
            targets: &targets,
            mask: &mask,
            lengths: self.topo.lengths_of(self.id),
            control_penalty: self.params.control_penalty,
        };
        let blocks = phase_cost_blocks(&inputs, &LANES_OF_PHASE);
        let problem = CycleProblem::new(
            m,
            blocks,
            self.params.u_min,
            self.params.u_max,
            self.params.budget,
            self.params.constrain_first,
        )?;
        let warm = if self.params.warm_start {
            self.warm.as_ref().map(|w| WarmStart {
                u: w.u.iter().map(|seq| shift_hold_last(seq, 1)).collect(),
                lambda: shift_hold_last(&w.lambda, 1),
            })
        } else {
            None
        };
        let outcome = solve_block_admm(&problem, warm.as_ref(), &self.params.admm)?;
        self.warm = Some(WarmStart { u: outcome.u.clone(), lambda: outcome.lambda.clone() });

        let planned = step_major_from_phase_blocks(&outcome.u);
        let trajectory = predict_trajectory(&model, &meas.counts, &planned, &z_horizon)?;
        let greens = first_step_controls(&planned);
        self.prev = Some(PrevStep {
            x: meas.counts.clone(),
            b: meas.outflow.clone(),
            u: DVector::from_row_slice(&greens),
        });

        let output = ControllerOutput {
            greens,
            diagnostics: SolveDiagnostics {
                wall_s: start.elapsed().as_secs_f64(),
                iterations: outcome.sweeps,
                stop: Some(outcome.trace.stop),
                objective: outcome.objective,
                forecast_held,
            },
        };
        let message = NeighborMessage {
            sender: self.id,
            step: k as i64,
            planned,
            trajectory,
        };
        Ok((output, message))
    }
}

/// The full distributed controller: all agents plus the message board.
pub struct DistributedController {
    topo: Arc<NetworkTopology>,
    params: ControlParams,
    agents: Vec<DistributedAgent>,
    board: Vec<NeighborMessage>,
    order: Vec<usize>,
    oracle_mode: bool,
}

impl DistributedController {
    pub fn new(
        topo: Arc<NetworkTopology>,
        params: ControlParams,
        oracle: Option<CouplingOracle>,
    ) -> Self {
        let oracle_mode = oracle.is_some();
        let agents = (0..topo.n())
            .map(|i| DistributedAgent::new(i, Arc::clone(&topo), params.clone(), oracle.clone()))
            .collect();
        let order = (0..topo.n()).collect();
        DistributedController { topo, params, agents, board: Vec::new(), order, oracle_mode }
    }

    /// Overrides the sequence in which agents compute within a cycle. The
    /// result must not depend on it; tests permute it to prove that.
    pub fn set_execution_order(&mut self, order: Vec<usize>) -> Result<(), ControllerError> {
        let mut seen = vec![false; self.topo.n()];
        for &i in &order {
            if i >= seen.len() || seen[i] {
                return Err(ControllerError::ShapeMismatch(format!(
                    "execution order is not a permutation of 0..{}",
                    seen.len()
                )));
            }
            seen[i] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(ControllerError::ShapeMismatch(
                "execution order misses intersections".into(),
            ));
        }
        self.order = order;
        Ok(())
    }

    pub fn agent(&self, i: usize) -> &DistributedAgent {
        &self.agents[i]
    }

    fn bootstrap_board(&self, measurements: &[Measurement]) -> Vec<NeighborMessage> {
        let m = self.params.horizon;
        let equal = self.params.equal_split();
        measurements
            .iter()
            .enumerate()
            .map(|(i, meas)| NeighborMessage {
                sender: i,
                step: meas.step as i64 - 1,
                planned: DVector::from_element(4 * m, equal),
                trajectory: DVector::from_fn(8 * m, |idx, _| meas.counts[idx % 8]),
            })
            .collect()
    }
}

impl SignalController for DistributedController {
    fn kind(&self) -> ControllerKind {
        if self.oracle_mode {
            ControllerKind::DmpcAdmmOracle
        } else {
            ControllerKind::DmpcAdmm
        }
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
        let mut outputs: Vec<Option<ControllerOutput>> = vec![None; self.topo.n()];
        let mut next_board: Vec<Option<NeighborMessage>> = vec![None; self.topo.n()];
        for &i in &self.order {
            let (output, message) = self.agents[i].step(&measurements[i], &self.board)?;
            outputs[i] = Some(output);
            next_board[i] = Some(message);
        }
        self.board = next_board.into_iter().map(|m| m.expect("all agents ran")).collect();
        Ok(PlanOutcome { outputs: outputs.into_iter().map(|o| o.expect("all agents ran")).collect() })
    }
}
