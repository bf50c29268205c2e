//! Quadratic cost assembly for the predictive controllers.
//!
//! The balancing objective for one intersection sums, over the horizon and
//! over every lane with an in-network downstream set, the squared gap
//! between the lane's predicted density and its downstream average, plus a
//! small quadratic control effort. Because each lane is served by exactly
//! one phase and the outflow matrices carry one nonzero per lane row, the
//! objective splits exactly into four per-phase blocks, each a function of
//! that phase's green sequence alone; the cycle budget is the only coupling.
//! The same terms can also be accumulated into one joint quadratic over the
//! step-major control sequence, which is what the dense reference paths use.

use nalgebra::{DMatrix, DVector};

use crate::prediction::StackedModel;
use crate::qp::Quadratic;

/// Inputs shared by both assemblies. `base` is the predicted trajectory with
/// the own controls zeroed (current state replicated plus the neighbor
/// contribution), `targets[(row, h)]` the downstream average density for
/// state row `row` at horizon step `h`, `mask[row]` whether that row's
/// deviation participates, `lengths[row]` the dividing length that turns
/// counts into densities.
pub struct CostInputs<'a> {
    pub model: &'a StackedModel,
    pub base: &'a DVector<f64>,
    pub targets: &'a DMatrix<f64>,
    pub mask: &'a [bool],
    pub lengths: &'a [f64],
    pub control_penalty: f64,
}

impl CostInputs<'_> {
    fn check(&self) {
        let d = self.model.state_dim();
        let m = self.model.horizon();
        assert_eq!(self.base.len(), d * m, "base trajectory length");
        assert_eq!(self.targets.shape(), (d, m), "target grid shape");
        assert_eq!(self.mask.len(), d, "mask length");
        assert_eq!(self.lengths.len(), d, "lengths length");
    }
}

/// Per-phase quadratic blocks over each phase's green sequence (length `M`).
/// `lanes_of_phase[p]` lists the state rows phase `p` serves; every listed
/// row must have its outflow confined to phase `p`'s columns, which holds by
/// construction for lane-level models.
pub fn phase_cost_blocks(
    inputs: &CostInputs<'_>,
    lanes_of_phase: &[[usize; 2]; 4],
) -> Vec<Quadratic> {
    inputs.check();
    let d = inputs.model.state_dim();
    let m = inputs.model.horizon();
    let b_stack = inputs.model.b_stack();
    let mut blocks: Vec<Quadratic> = (0..4).map(|_| Quadratic::zero(m)).collect();
    for (phase, lanes) in lanes_of_phase.iter().enumerate() {
        for &lane in lanes {
            if !inputs.mask[lane] {
                continue;
            }
            let len = inputs.lengths[lane];
            for h in 0..m {
                let row = h * d + lane;
                let coeff = DVector::from_fn(m, |hp, _| -b_stack[(row, 4 * hp + phase)] / len);
                let offset = inputs.base[row] / len - inputs.targets[(lane, h)];
                blocks[phase].add_squared_affine(&coeff, offset);
            }
        }
        blocks[phase].add_ridge(inputs.control_penalty);
    }
    blocks
}

/// The same objective as one quadratic over the step-major control sequence
/// (length `4*M`). Unlike the per-phase split this works for models whose
/// rows couple several phases (the road aggregation), and it is the oracle
/// assembly the solver comparisons use.
pub fn joint_cost(inputs: &CostInputs<'_>) -> Quadratic {
    inputs.check();
    let d = inputs.model.state_dim();
    let m = inputs.model.horizon();
    let b_stack = inputs.model.b_stack();
    let mut q = Quadratic::zero(4 * m);
    for row_state in 0..d {
        if !inputs.mask[row_state] {
            continue;
        }
        let len = inputs.lengths[row_state];
        for h in 0..m {
            let row = h * d + row_state;
            let coeff = DVector::from_fn(4 * m, |col, _| -b_stack[(row, col)] / len);
            let offset = inputs.base[row] / len - inputs.targets[(row_state, h)];
            q.add_squared_affine(&coeff, offset);
        }
    }
    q.add_ridge(inputs.control_penalty);
    q
}
