//! Pressure-based baseline: each phase's pressure is the saturation-weighted
//! difference between its lanes' densities and their mean downstream
//! densities, and green time is split proportionally to positive pressure.

use std::sync::Arc;

use nalgebra::DVector;

use super::{
    ControlParams, ControllerError, ControllerKind, ControllerOutput, Measurement, PlanOutcome,
    SignalController, SolveDiagnostics,
};
use crate::qp::project_capped_simplex;
use crate::topology::{LaneId, NetworkTopology, LANES_OF_PHASE, PHASE_OF_LANE};

#[derive(Debug, Clone)]
pub struct MaxPressureController {
    topo: Arc<NetworkTopology>,
    params: ControlParams,
}

impl MaxPressureController {
    pub fn new(topo: Arc<NetworkTopology>, params: ControlParams) -> Self {
        MaxPressureController { topo, params }
    }
}

/// Pressure of each phase at one intersection: for every lane the phase
/// serves, saturation times (own density minus the mean density of its
/// in-network downstream lanes; sink-only lanes compare against zero).
pub fn phase_pressures(
    topo: &NetworkTopology,
    intersection: usize,
    measurements: &[Measurement],
) -> [f64; 4] {
    let mut pressures = [0.0; 4];
    let own = &measurements[intersection];
    let lengths = topo.lengths_of(intersection);
    for (phase, lanes) in LANES_OF_PHASE.iter().enumerate() {
        for &m in lanes {
            let saturation = own.outflow[(m, PHASE_OF_LANE[m])];
            let density = own.counts[m] / lengths[m];
            let ds = topo
                .downstream_lanes(LaneId::new(intersection, m))
                .expect("validated lane");
            let downstream = if ds.lanes.is_empty() {
                0.0
            } else {
                ds.lanes
                    .iter()
                    .map(|t| {
                        measurements[t.intersection].counts[t.lane]
                            / topo.lane_length(*t).expect("validated lane")
                    })
                    .sum::<f64>()
                    / ds.lanes.len() as f64
            };
            pressures[phase] += saturation * (density - downstream);
        }
    }
    pressures
}

/// Splits the cycle budget proportionally to positive pressures, then
/// projects onto the feasible set (per-phase bounds, exact budget), which
/// caps dominant phases at the maximum green and floors starved ones at the
/// minimum with the residual shared. All-nonpositive pressures fall back to
/// the equal split.
pub fn allocate_by_pressure(
    pressures: &[f64; 4],
    budget: f64,
    u_min: f64,
    u_max: f64,
) -> Result<[f64; 4], ControllerError> {
    let positive: f64 = pressures.iter().map(|p| p.max(0.0)).sum();
    let raw = if positive > 1e-12 {
        DVector::from_iterator(4, pressures.iter().map(|p| budget * p.max(0.0) / positive))
    } else {
        DVector::from_element(4, budget / 4.0)
    };
    let u = project_capped_simplex(&raw, u_min, u_max, budget)?;
    Ok([u[0], u[1], u[2], u[3]])
}

impl SignalController for MaxPressureController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::MaxPressure
    }

    fn plan(&mut self, measurements: &[Measurement]) -> Result<PlanOutcome, ControllerError> {
        if measurements.len() != self.topo.n() {
            return Err(ControllerError::ShapeMismatch(format!(
                "{} measurements for {} intersections",
                measurements.len(),
                self.topo.n()
            )));
        }
        let mut outputs = Vec::with_capacity(self.topo.n());
        for i in 0..self.topo.n() {
            let start = std::time::Instant::now();
            let pressures = phase_pressures(&self.topo, i, measurements);
            let greens = allocate_by_pressure(
                &pressures,
                self.params.budget,
                self.params.u_min,
                self.params.u_max,
            )?;
            outputs.push(ControllerOutput {
                greens,
                diagnostics: SolveDiagnostics {
                    wall_s: start.elapsed().as_secs_f64(),
                    ..Default::default()
                },
            });
        }
        Ok(PlanOutcome { outputs })
    }
}
