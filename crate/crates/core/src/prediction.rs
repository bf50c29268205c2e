//! Multi-step prediction: stacks per-step model matrices into one affine map
//! from a control sequence to the predicted state trajectory, and turns
//! predicted counts into the lane densities the balancing cost compares.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::topology::{NetworkTopology, LANES_PER_INTERSECTION};

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing predicted trajectory for intersection {}", intersection + 1)]
    MissingNeighborTrajectory { intersection: usize },
}

/// The horizon-stacked prediction model. With state dimension `d` and control
/// dimension `c` per step, the trajectory over `M` steps is
///
/// ```text
/// y = rep(x) - B_stack * U + C_stack * Z
/// ```
///
/// where `rep(x)` repeats the current state `M` times and both stacks are
/// lower block triangular: block row `r` applies the step matrices for
/// offsets `0..=r`.
#[derive(Debug, Clone)]
pub struct StackedModel {
    horizon: usize,
    state_dim: usize,
    b_stack: DMatrix<f64>,
    c_stack: DMatrix<f64>,
}

impl StackedModel {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn b_stack(&self) -> &DMatrix<f64> {
        &self.b_stack
    }

    pub fn c_stack(&self) -> &DMatrix<f64> {
        &self.c_stack
    }
}

/// Builds the stacked model from the per-step matrices `B(k..k+M-1)` and
/// `C(k..k+M-1)`.
pub fn assemble_stacked(
    b_seq: &[DMatrix<f64>],
    c_seq: &[DMatrix<f64>],
) -> Result<StackedModel, PredictionError> {
    if b_seq.is_empty() || b_seq.len() != c_seq.len() {
        return Err(PredictionError::ShapeMismatch(format!(
            "{} outflow matrices against {} coupling matrices",
            b_seq.len(),
            c_seq.len()
        )));
    }
    let m = b_seq.len();
    let (rows, b_cols) = b_seq[0].shape();
    let c_cols = c_seq[0].ncols();
    for mat in b_seq {
        if mat.shape() != (rows, b_cols) {
            return Err(PredictionError::ShapeMismatch(
                "outflow matrices differ in shape across the horizon".into(),
            ));
        }
    }
    for mat in c_seq {
        if mat.shape() != (rows, c_cols) {
            return Err(PredictionError::ShapeMismatch(
                "coupling matrices differ in shape across the horizon".into(),
            ));
        }
    }
    let mut b_stack = DMatrix::zeros(rows * m, b_cols * m);
    let mut c_stack = DMatrix::zeros(rows * m, c_cols * m);
    for r in 0..m {
        for c in 0..=r {
            b_stack.view_mut((r * rows, c * b_cols), (rows, b_cols)).copy_from(&b_seq[c]);
            c_stack.view_mut((r * rows, c * c_cols), (rows, c_cols)).copy_from(&c_seq[c]);
        }
    }
    Ok(StackedModel { horizon: m, state_dim: rows, b_stack, c_stack })
}

/// Evaluates the stacked model: returns the predicted states for steps
/// `k+1 ..= k+M`, stacked into one vector.
pub fn predict_trajectory(
    model: &StackedModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<DVector<f64>, PredictionError> {
    if x.len() != model.state_dim {
        return Err(PredictionError::ShapeMismatch(format!(
            "state length {} for model with state dimension {}",
            x.len(),
            model.state_dim
        )));
    }
    if u.len() != model.b_stack.ncols() {
        return Err(PredictionError::ShapeMismatch(format!(
            "control sequence length {} for stacked width {}",
            u.len(),
            model.b_stack.ncols()
        )));
    }
    if z.len() != model.c_stack.ncols() {
        return Err(PredictionError::ShapeMismatch(format!(
            "neighbor sequence length {} for stacked width {}",
            z.len(),
            model.c_stack.ncols()
        )));
    }
    let mut y = DVector::zeros(model.state_dim * model.horizon);
    for r in 0..model.horizon {
        y.rows_mut(r * model.state_dim, model.state_dim).copy_from(x);
    }
    y.gemv(-1.0, &model.b_stack, u, 1.0);
    y.gemv(1.0, &model.c_stack, z, 1.0);
    Ok(y)
}

/// Lane densities (vehicles per meter) for one intersection's predicted
/// trajectory: entry `(m, h)` is the density of lane `m` at step `k+1+h`.
pub fn lane_densities(
    topo: &NetworkTopology,
    intersection: usize,
    trajectory: &DVector<f64>,
) -> Result<DMatrix<f64>, PredictionError> {
    let d = LANES_PER_INTERSECTION;
    if trajectory.len() % d != 0 || trajectory.is_empty() {
        return Err(PredictionError::ShapeMismatch(format!(
            "trajectory length {} is not a positive multiple of {d}",
            trajectory.len()
        )));
    }
    let m = trajectory.len() / d;
    let lengths = topo.lengths_of(intersection);
    Ok(DMatrix::from_fn(d, m, |lane, h| trajectory[h * d + lane] / lengths[lane]))
}

/// Average downstream density per lane and horizon step: entry `(m, h)` is
/// the mean density over lane `m`'s in-network downstream lanes at step
/// `k+1+h`, the target its own density is balanced toward. Lanes without
/// in-network downstream lanes get zero (their deviation carries no cost).
///
/// `trajectories` must contain a predicted trajectory (stacked `8*M` vector)
/// for every intersection owning a downstream lane of `intersection`.
pub fn downstream_density_targets(
    topo: &NetworkTopology,
    intersection: usize,
    horizon: usize,
    trajectories: &BTreeMap<usize, DVector<f64>>,
) -> Result<DMatrix<f64>, PredictionError> {
    let d = LANES_PER_INTERSECTION;
    let mut targets = DMatrix::zeros(d, horizon);
    for m in 0..d {
        let ds = topo
            .downstream_lanes(crate::topology::LaneId::new(intersection, m))
            .expect("validated lane");
        if ds.lanes.is_empty() {
            continue;
        }
        let mut columns = DVector::zeros(horizon);
        for target in &ds.lanes {
            let y = trajectories.get(&target.intersection).ok_or(
                PredictionError::MissingNeighborTrajectory { intersection: target.intersection },
            )?;
            if y.len() != d * horizon {
                return Err(PredictionError::ShapeMismatch(format!(
                    "trajectory for intersection {} has length {}, expected {}",
                    target.intersection + 1,
                    y.len(),
                    d * horizon
                )));
            }
            let len = topo.lane_length(*target).expect("validated lane");
            for h in 0..horizon {
                columns[h] += y[h * d + target.lane] / len;
            }
        }
        columns /= ds.lanes.len() as f64;
        targets.set_row(m, &columns.transpose());
    }
    Ok(targets)
}

/// Lanes whose density deviation participates in the balancing cost: those
/// with at least one in-network downstream lane.
pub fn deviation_mask(topo: &NetworkTopology, intersection: usize) -> [bool; 8] {
    std::array::from_fn(|m| {
        !topo
            .downstream_lanes(crate::topology::LaneId::new(intersection, m))
            .expect("validated lane")
            .lanes
            .is_empty()
    })
}
