//! The quarter-cycle baseline: every phase receives the same share of the
//! usable cycle, at every intersection, at every step.

use super::{
    ControlParams, ControllerError, ControllerKind, ControllerOutput, Measurement, PlanOutcome,
    SignalController, SolveDiagnostics,
};
use crate::qp::QpError;

#[derive(Debug, Clone)]
pub struct FixedTimeController {
    n: usize,
    greens: [f64; 4],
}

impl FixedTimeController {
    pub fn new(n: usize, params: &ControlParams) -> Result<Self, ControllerError> {
        Ok(FixedTimeController {
            n,
            greens: fixed_time_greens(params.budget, params.u_min, params.u_max)?,
        })
    }
}

/// Equal split of the usable cycle over the four phases. Errors when the
/// split cannot respect the green-time bounds.
pub fn fixed_time_greens(budget: f64, u_min: f64, u_max: f64) -> Result<[f64; 4], QpError> {
    let share = budget / 4.0;
    if share < u_min - 1e-9 || share > u_max + 1e-9 {
        return Err(QpError::InfeasibleBox(format!(
            "equal split {share} s per phase violates green-time bounds [{u_min}, {u_max}]"
        )));
    }
    Ok([share; 4])
}

impl SignalController for FixedTimeController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::FixedTime
    }

    fn plan(&mut self, measurements: &[Measurement]) -> Result<PlanOutcome, ControllerError> {
        if measurements.len() != self.n {
            return Err(ControllerError::ShapeMismatch(format!(
                "{} measurements for {} intersections",
                measurements.len(),
                self.n
            )));
        }
        Ok(PlanOutcome {
            outputs: (0..self.n)
                .map(|_| ControllerOutput {
                    greens: self.greens,
                    diagnostics: SolveDiagnostics::default(),
                })
                .collect(),
        })
    }
}
