//! Centralized reference controller: one joint horizon program over every
//! intersection's green times, solved with full knowledge of the true
//! coupling model and everyone's current counts.
//!
//! This is the benchmark the distributed scheme is measured against, not a
//! deployable strategy: it assumes a central solver that sees the whole
//! network each cycle. Lane densities and their downstream targets are both
//! expressed as affine functions of the joint decision vector, so the
//! balancing objective is exact rather than frozen at last cycle's
//! trajectories, and there is no message lag anywhere.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{
    shift_hold_last, ControlParams, ControllerError, ControllerKind, ControllerOutput,
    Measurement, PlanOutcome, SignalController, SolveDiagnostics,
};
use crate::plant::CouplingOracle;
use crate::prediction::deviation_mask;
use crate::qp::{project_capped_simplex, solve_projected_gradient, QpError, Quadratic};
use crate::topology::{LaneId, NetworkTopology};

const PG_TOL: f64 = 1e-8;
const PG_MAX_ITER: usize = 200_000;

/// Joint program over `U in R^{4*M*N}`, laid out intersection-major then
/// step-major: the 4-slice for intersection `i` at horizon step `h` starts
/// at `4 * (i * M + h)`.
pub struct CentralizedController {
    topo: Arc<NetworkTopology>,
    params: ControlParams,
    oracle: CouplingOracle,
    warm: Option<DVector<f64>>,
}

impl CentralizedController {
    pub fn new(topo: Arc<NetworkTopology>, params: ControlParams, oracle: CouplingOracle) -> Self {
        CentralizedController { topo, params, oracle, warm: None }
    }

    fn slice_base(&self, i: usize, h: usize) -> usize {
        4 * (i * self.params.horizon + h)
    }

    /// Lane counts at `k+h+1` for every intersection and horizon step, as
    /// affine functions of the joint decision vector: `x = rows * U + const`
    /// where the constant is the current count (the dynamics couple through
    /// controls only, so each intersection's rows accumulate independently).
    fn affine_states(
        &self,
        measurements: &[Measurement],
        k: usize,
        dim: usize,
    ) -> Vec<Vec<DMatrix<f64>>> {
        let m = self.params.horizon;
        let n = self.topo.n();
        let mut all = Vec::with_capacity(n);
        for (i, meas) in measurements.iter().enumerate() {
            let in_neighbors = self.topo.in_neighbors(i);
            let mut coeff = DMatrix::zeros(8, dim);
            let mut snapshots = Vec::with_capacity(m);
            for h in 0..m {
                let own = self.slice_base(i, h);
                for phase in 0..4 {
                    let mut col = coeff.column_mut(own + phase);
                    col -= meas.outflow.column(phase);
                }
                if !in_neighbors.is_empty() {
                    let c = self.oracle.transfer_matrix(i, k + h);
                    for (l, &j) in in_neighbors.iter().enumerate() {
                        let neighbor = self.slice_base(j, h);
                        for g in 0..4 {
                            let mut col = coeff.column_mut(neighbor + g);
                            col += c.column(4 * l + g);
                        }
                    }
                }
                snapshots.push(coeff.clone());
            }
            all.push(snapshots);
        }
        all
    }

    fn build_objective(
        &self,
        measurements: &[Measurement],
        states: &[Vec<DMatrix<f64>>],
        dim: usize,
    ) -> Quadratic {
        let m = self.params.horizon;
        let mut q = Quadratic::zero(dim);
        for i in 0..self.topo.n() {
            let mask = deviation_mask(&self.topo, i);
            let lengths = self.topo.lengths_of(i);
            for lane in 0..8 {
                if !mask[lane] {
                    continue;
                }
                let set = self.topo.downstream_lanes(LaneId::new(i, lane)).expect("lane in range");
                let share = 1.0 / set.lanes.len() as f64;
                for hp in 0..m {
                    // Own density minus the mean downstream density, both
                    // affine in U.
                    let mut a = DVector::zeros(dim);
                    a.axpy(1.0 / lengths[lane], &states[i][hp].row(lane).transpose(), 1.0);
                    let mut offset = measurements[i].counts[lane] / lengths[lane];
                    for &target in &set.lanes {
                        let l_down = self.topo.lengths_of(target.intersection)[target.lane];
                        a.axpy(
                            -share / l_down,
                            &states[target.intersection][hp].row(target.lane).transpose(),
                            1.0,
                        );
                        offset -=
                            share * measurements[target.intersection].counts[target.lane] / l_down;
                    }
                    q.add_squared_affine(&a, offset);
                }
            }
        }
        q.add_ridge(self.params.control_penalty);
        q
    }
}

impl SignalController for CentralizedController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::CentralizedReference
    }

    fn plan(&mut self, measurements: &[Measurement]) -> Result<PlanOutcome, ControllerError> {
        let start = Instant::now();
        let n = self.topo.n();
        let m = self.params.horizon;
        if measurements.len() != n {
            return Err(ControllerError::ShapeMismatch(format!(
                "{} measurements for {n} intersections",
                measurements.len()
            )));
        }
        let k = measurements[0].step;
        if measurements.iter().any(|meas| meas.step != k) {
            return Err(ControllerError::ShapeMismatch(
                "measurements span different steps".into(),
            ));
        }
        if 4.0 * self.params.u_min > self.params.budget + 1e-9
            || 4.0 * self.params.u_max < self.params.budget - 1e-9
        {
            return Err(ControllerError::Qp(QpError::InfeasibleBox(format!(
                "cycle budget {} unreachable with four phases in [{}, {}]",
                self.params.budget, self.params.u_min, self.params.u_max
            ))));
        }

        let dim = 4 * m * n;
        let states = self.affine_states(measurements, k, dim);
        let q = self.build_objective(measurements, &states, dim);

        let (u_min, u_max, budget) = (self.params.u_min, self.params.u_max, self.params.budget);
        let slices = n * m;
        let project = |u: &DVector<f64>| -> DVector<f64> {
            let mut out = DVector::zeros(dim);
            for s in 0..slices {
                let slice = u.rows(4 * s, 4).into_owned();
                let projected = project_capped_simplex(&slice, u_min, u_max, budget)
                    .expect("budget feasibility checked above");
                out.rows_mut(4 * s, 4).copy_from(&projected);
            }
            out
        };
        let x0 = match (&self.warm, self.params.warm_start) {
            (Some(w), true) => {
                let mut shifted = DVector::zeros(dim);
                for i in 0..n {
                    let block = w.rows(4 * m * i, 4 * m).into_owned();
                    shifted.rows_mut(4 * m * i, 4 * m).copy_from(&shift_hold_last(&block, 4));
                }
                shifted
            }
            _ => DVector::from_element(dim, self.params.equal_split()),
        };
        let sol = solve_projected_gradient(&q, project, &x0, PG_TOL, PG_MAX_ITER);
        if !sol.converged {
            return Err(ControllerError::NotConverged(format!(
                "joint horizon program at step {k}: projected gradient still moving after \
                 {PG_MAX_ITER} iterations"
            )));
        }
        self.warm = Some(sol.x.clone());

        let wall_s = start.elapsed().as_secs_f64();
        let objective = q.eval(&sol.x);
        let outputs = (0..n)
            .map(|i| {
                let base = self.slice_base(i, 0);
                ControllerOutput {
                    greens: [sol.x[base], sol.x[base + 1], sol.x[base + 2], sol.x[base + 3]],
                    diagnostics: SolveDiagnostics {
                        wall_s,
                        iterations: sol.iterations,
                        stop: None,
                        objective,
                        forecast_held: false,
                    },
                }
            })
            .collect();
        Ok(PlanOutcome { outputs })
    }
}
