//! The simulated network truth: store-and-forward vehicle counts, clamped
//! discharge, time-varying turn ratios, boundary demand, and the oracle
//! transfer matrices that controllers are never shown.
//!
//! Per lane, the requested discharge over one cycle is `s * u_phase` (green
//! time times saturation rate); the plant releases at most the vehicles
//! present and splits the released flow over the declared downstream lanes
//! and the exit share, scaled proportionally. Vehicles are conserved to
//! floating-point accuracy: every vehicle entering either occupies a lane or
//! has left through a sink.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    ArrivalsConfig, InitialCountsConfig, ScenarioConfig, SplitProfileConfig,
};
use crate::topology::{LaneId, NetworkTopology, LANES_PER_INTERSECTION, PHASE_OF_LANE};

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("infeasible control at intersection {}: {detail}", intersection + 1)]
    InfeasibleControl { intersection: usize, detail: String },
    #[error("bad demand: {0}")]
    BadDemand(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Feasibility limits the plant enforces on every applied control.
#[derive(Debug, Clone, Copy)]
pub struct ControlLimits {
    pub cycle_s: f64,
    pub lost_time_s: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl ControlLimits {
    pub fn budget(&self) -> f64 {
        self.cycle_s - self.lost_time_s
    }
}

/// One lane's ledger for one step. `count` is the post-step count;
/// intersection and lane ids are 1-based, matching the config convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub step: usize,
    pub intersection: usize,
    pub lane: usize,
    pub count: f64,
    pub inflow: f64,
    pub outflow: f64,
    pub demand: f64,
}

impl FlowRecord {
    /// Count at the start of the step, reconstructed from the ledger.
    pub fn pre_count(&self) -> f64 {
        self.count - self.inflow - self.demand + self.outflow
    }

    /// Vehicles present at step start that were not discharged: the queue
    /// carried across the step boundary.
    pub fn carried(&self) -> f64 {
        (self.count - self.inflow - self.demand).max(0.0)
    }
}

// ---------------------------------------------------------------------------
// Turn-ratio schedule (plant truth)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum SplitProfile {
    Constant,
    Sinusoid { amplitude: f64, period_steps: f64 },
    /// Pre-drawn multiplier per (lane, segment, slot).
    Piecewise { segment_steps: usize, draws: Vec<Vec<Vec<f64>>> },
}

/// Deterministic time-varying split ratios per lane. The exit share, when
/// present, occupies the last slot.
#[derive(Debug, Clone)]
pub struct SplitSchedule {
    topo: Arc<NetworkTopology>,
    profile: SplitProfile,
}

impl SplitSchedule {
    pub fn generate(
        topo: Arc<NetworkTopology>,
        profile: &SplitProfileConfig,
        seed: u64,
        max_steps: usize,
    ) -> Self {
        let profile = match profile {
            SplitProfileConfig::Constant => SplitProfile::Constant,
            SplitProfileConfig::Sinusoid { amplitude, period_steps } => {
                SplitProfile::Sinusoid { amplitude: *amplitude, period_steps: *period_steps }
            }
            SplitProfileConfig::PiecewiseRandom { jitter, segment_steps } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1);
                let segments = max_steps / segment_steps + 2;
                let mut draws = Vec::new();
                for lane in topo.lanes() {
                    let ds = topo.downstream_lanes(lane).expect("validated lane");
                    let slots = ds.lanes.len() + usize::from(ds.exits());
                    let per_lane: Vec<Vec<f64>> = (0..segments)
                        .map(|_| {
                            (0..slots)
                                .map(|_| 1.0 + jitter * (2.0 * rng.random::<f64>() - 1.0))
                                .collect()
                        })
                        .collect();
                    draws.push(per_lane);
                }
                SplitProfile::Piecewise { segment_steps: *segment_steps, draws }
            }
        };
        SplitSchedule { topo, profile }
    }

    /// Ratios over the lane's declared downstream lanes plus the exit share,
    /// normalized to sum to one.
    pub fn ratios(&self, lane: LaneId, step: usize) -> (Vec<f64>, f64) {
        let ds = self.topo.downstream_lanes(lane).expect("validated lane");
        let has_exit = ds.exits();
        let mut weights: Vec<f64> = ds.base_weights.clone();
        if has_exit {
            weights.push(ds.exit_weight);
        }
        if weights.is_empty() {
            // Defensive; build_network rejects this shape.
            return (Vec::new(), 1.0);
        }
        match &self.profile {
            SplitProfile::Constant => {}
            SplitProfile::Sinusoid { amplitude, period_steps } => {
                let slots = weights.len() as f64;
                for (t, w) in weights.iter_mut().enumerate() {
                    let phase = 2.0 * std::f64::consts::PI
                        * (step as f64 / period_steps + t as f64 / slots);
                    *w = (*w * (1.0 + amplitude * phase.sin())).max(0.0);
                }
            }
            SplitProfile::Piecewise { segment_steps, draws } => {
                let flat = lane.intersection * LANES_PER_INTERSECTION + lane.lane;
                let per_lane = &draws[flat];
                let seg = (step / segment_steps).min(per_lane.len() - 1);
                for (t, w) in weights.iter_mut().enumerate() {
                    *w *= per_lane[seg][t];
                }
            }
        }
        let mut total: f64 = weights.iter().sum();
        if !(total > 1e-12) {
            weights = ds.base_weights.clone();
            if has_exit {
                weights.push(ds.exit_weight);
            }
            total = weights.iter().sum();
        }
        for w in weights.iter_mut() {
            *w /= total;
        }
        let exit = if has_exit { weights.pop().unwrap() } else { 0.0 };
        (weights, exit)
    }
}

// ---------------------------------------------------------------------------
// Demand schedule
// ---------------------------------------------------------------------------

/// Pre-generated arrivals (vehicles per step) for every boundary lane.
#[derive(Debug, Clone)]
pub struct DemandSchedule {
    table: Vec<Vec<[f64; 8]>>,
}

impl DemandSchedule {
    pub fn generate(
        topo: &NetworkTopology,
        arrivals: &ArrivalsConfig,
        cycle_s: f64,
        seed: u64,
        steps: usize,
    ) -> Self {
        let veh_per_step = |vph: f64| vph * cycle_s / 3600.0;
        let mut table = vec![vec![[0.0; 8]; topo.n()]; steps];
        match arrivals {
            ArrivalsConfig::None => {}
            ArrivalsConfig::Constant { rate_vph } => {
                for k in 0..steps {
                    for i in 0..topo.n() {
                        for m in topo.boundary_lanes(i) {
                            table[k][i][m] = veh_per_step(*rate_vph);
                        }
                    }
                }
            }
            ArrivalsConfig::PiecewiseRandom { rate_range_vph, segment_steps, turn_lane_factor } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(2);
                let segments = steps / segment_steps + 1;
                for i in 0..topo.n() {
                    for m in topo.boundary_lanes(i).collect::<Vec<_>>() {
                        let scale = if m % 2 == 1 { *turn_lane_factor } else { 1.0 };
                        let rates: Vec<f64> = (0..segments)
                            .map(|_| rng.random_range(rate_range_vph[0]..=rate_range_vph[1]))
                            .collect();
                        for (k, row) in table.iter_mut().enumerate() {
                            row[i][m] = scale * veh_per_step(rates[k / segment_steps]);
                        }
                    }
                }
            }
        }
        DemandSchedule { table }
    }

    pub fn zeros(n: usize, steps: usize) -> Self {
        DemandSchedule { table: vec![vec![[0.0; 8]; n]; steps] }
    }

    pub fn steps(&self) -> usize {
        self.table.len()
    }

    pub fn at(&self, step: usize) -> &[[f64; 8]] {
        &self.table[step]
    }
}

// ---------------------------------------------------------------------------
// Plant
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct PlantTotals {
    pub entered: f64,
    pub exited: f64,
    pub discharged: f64,
    pub delay_veh_steps: f64,
}

#[derive(Debug, Clone)]
pub struct Plant {
    topo: Arc<NetworkTopology>,
    saturation: Vec<[f64; 8]>,
    splits: SplitSchedule,
    limits: ControlLimits,
    counts: Vec<[f64; 8]>,
    step: usize,
    totals: PlantTotals,
}

impl Plant {
    pub fn new(
        topo: Arc<NetworkTopology>,
        saturation: Vec<[f64; 8]>,
        splits: SplitSchedule,
        initial: Vec<[f64; 8]>,
        limits: ControlLimits,
    ) -> Result<Self, PlantError> {
        if saturation.len() != topo.n() || initial.len() != topo.n() {
            return Err(PlantError::ShapeMismatch(format!(
                "saturation rows {} / initial rows {} for {} intersections",
                saturation.len(),
                initial.len(),
                topo.n()
            )));
        }
        Ok(Plant { topo, saturation, splits, limits, counts: initial, step: 0, totals: PlantTotals::default() })
    }

    /// Builds the plant exactly as a scenario run does: saturation rates from
    /// the network block, split schedule and initial counts from the seeded
    /// streams.
    pub fn from_config(
        topo: Arc<NetworkTopology>,
        cfg: &ScenarioConfig,
        seed: u64,
    ) -> Result<Self, PlantError> {
        let saturation: Vec<[f64; 8]> =
            cfg.network.intersections.iter().map(|ic| ic.saturation_veh_s).collect();
        let splits = SplitSchedule::generate(
            Arc::clone(&topo),
            &cfg.demand.splits,
            seed,
            cfg.simulation.horizon_steps + cfg.controller.horizon + 1,
        );
        let initial = initial_counts(&topo, &cfg.simulation.initial, seed)?;
        let limits = ControlLimits {
            cycle_s: cfg.controller.cycle_s,
            lost_time_s: cfg.controller.lost_time_s,
            u_min: cfg.controller.u_min_s,
            u_max: cfg.controller.u_max_s,
        };
        Plant::new(topo, saturation, splits, initial, limits)
    }

    pub fn topology(&self) -> &Arc<NetworkTopology> {
        &self.topo
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn limits(&self) -> ControlLimits {
        self.limits
    }

    pub fn totals(&self) -> PlantTotals {
        self.totals
    }

    pub fn counts_of(&self, intersection: usize) -> DVector<f64> {
        DVector::from_row_slice(&self.counts[intersection])
    }

    pub fn total_count(&self) -> f64 {
        self.counts.iter().flatten().sum()
    }

    /// Measured outflow matrix `B_i(k)`: one nonzero per lane row, at the
    /// serving phase's column. Road sensors expose this; it is not hidden.
    pub fn outflow_matrix(&self, intersection: usize) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(8, 4);
        for m in 0..8 {
            b[(m, PHASE_OF_LANE[m])] = self.saturation[intersection][m];
        }
        b
    }

    /// Oracle access to the true lane-level transfer matrix `C_i(k)`
    /// (8 x 4*|in-neighbors|). Hidden from every controller except the
    /// oracle variants; tests use it as the estimation ground truth.
    pub fn true_transfer_matrix(&self, intersection: usize, step: usize) -> DMatrix<f64> {
        transfer_matrix_impl(&self.topo, &self.saturation, &self.splits, intersection, step)
    }

    /// A read-only handle on the true coefficient model, for the controllers
    /// that are explicitly allowed to cheat (the centralized reference and
    /// the oracle-coupling variant).
    pub fn coupling_oracle(&self) -> CouplingOracle {
        CouplingOracle {
            topo: Arc::clone(&self.topo),
            saturation: self.saturation.clone(),
            splits: self.splits.clone(),
        }
    }

    pub fn split_ratios(&self, lane: LaneId, step: usize) -> (Vec<f64>, f64) {
        self.splits.ratios(lane, step)
    }

    /// Advances one control interval. Controls are green seconds per phase;
    /// demand is vehicles arriving this step per lane (boundary lanes only).
    pub fn step_plant(
        &mut self,
        controls: &[[f64; 4]],
        demand: &[[f64; 8]],
    ) -> Result<Vec<FlowRecord>, PlantError> {
        let n = self.topo.n();
        if controls.len() != n {
            return Err(PlantError::ShapeMismatch(format!(
                "{} control vectors for {n} intersections",
                controls.len()
            )));
        }
        if demand.len() != n {
            return Err(PlantError::ShapeMismatch(format!(
                "{} demand rows for {n} intersections",
                demand.len()
            )));
        }
        let tol = 1e-6;
        for (i, u) in controls.iter().enumerate() {
            if u.iter().any(|v| !v.is_finite()) {
                return Err(PlantError::InfeasibleControl {
                    intersection: i,
                    detail: format!("non-finite green times {u:?}"),
                });
            }
            if u.iter().any(|&v| v < self.limits.u_min - tol || v > self.limits.u_max + tol) {
                return Err(PlantError::InfeasibleControl {
                    intersection: i,
                    detail: format!(
                        "green times {u:?} outside [{}, {}]",
                        self.limits.u_min, self.limits.u_max
                    ),
                });
            }
            let total: f64 = u.iter().sum();
            if (total - self.limits.budget()).abs() > tol {
                return Err(PlantError::InfeasibleControl {
                    intersection: i,
                    detail: format!(
                        "green times sum to {total}, cycle budget is {}",
                        self.limits.budget()
                    ),
                });
            }
        }
        for (i, row) in demand.iter().enumerate() {
            for (m, &d) in row.iter().enumerate() {
                if !(d >= 0.0) {
                    return Err(PlantError::BadDemand(format!(
                        "negative or non-finite demand {d} at lane {:?}",
                        LaneId::new(i, m)
                    )));
                }
                if d > 0.0 && !self.topo.is_boundary(LaneId::new(i, m)) {
                    return Err(PlantError::BadDemand(format!(
                        "demand {d} on non-boundary lane {:?}",
                        LaneId::new(i, m)
                    )));
                }
            }
        }

        let mut outflow = vec![[0.0; 8]; n];
        let mut inflow = vec![[0.0; 8]; n];
        let mut exited = 0.0;
        for i in 0..n {
            for m in 0..8 {
                let requested = self.saturation[i][m] * controls[i][PHASE_OF_LANE[m]];
                let released = requested.min(self.counts[i][m]);
                outflow[i][m] = released;
                if released == 0.0 {
                    continue;
                }
                let lane = LaneId::new(i, m);
                let ds = self.topo.downstream_lanes(lane).expect("validated lane");
                let (ratios, exit_ratio) = self.splits.ratios(lane, self.step);
                for (t_idx, target) in ds.lanes.iter().enumerate() {
                    inflow[target.intersection][target.lane] += released * ratios[t_idx];
                }
                exited += released * exit_ratio;
            }
        }

        let mut records = Vec::with_capacity(n * 8);
        let mut entered = 0.0;
        let mut carried_total = 0.0;
        let mut discharged = 0.0;
        for i in 0..n {
            for m in 0..8 {
                let pre = self.counts[i][m];
                let out = outflow[i][m];
                let inn = inflow[i][m];
                let dem = demand[i][m];
                let post = pre - out + inn + dem;
                self.counts[i][m] = post;
                entered += dem;
                carried_total += pre - out;
                discharged += out;
                records.push(FlowRecord {
                    step: self.step,
                    intersection: i + 1,
                    lane: m + 1,
                    count: post,
                    inflow: inn,
                    outflow: out,
                    demand: dem,
                });
            }
        }

        self.totals.entered += entered;
        self.totals.exited += exited;
        self.totals.discharged += discharged;
        self.totals.delay_veh_steps += carried_total;
        self.step += 1;
        Ok(records)
    }
}

fn transfer_matrix_impl(
    topo: &NetworkTopology,
    saturation: &[[f64; 8]],
    splits: &SplitSchedule,
    intersection: usize,
    step: usize,
) -> DMatrix<f64> {
    let neighbors = topo.in_neighbors(intersection);
    let mut c = DMatrix::zeros(8, 4 * neighbors.len());
    for (l, &j) in neighbors.iter().enumerate() {
        for q in 0..8 {
            let lane = LaneId::new(j, q);
            let ds = topo.downstream_lanes(lane).expect("validated lane");
            if ds.lanes.is_empty() {
                continue;
            }
            let (ratios, _) = splits.ratios(lane, step);
            let col = 4 * l + PHASE_OF_LANE[q];
            for (t_idx, target) in ds.lanes.iter().enumerate() {
                if target.intersection == intersection {
                    c[(target.lane, col)] += saturation[j][q] * ratios[t_idx];
                }
            }
        }
    }
    c
}

/// True coefficient model of the plant: enough to reproduce the transfer and
/// outflow matrices at any step, nothing else. Regular controllers never
/// receive one.
#[derive(Debug, Clone)]
pub struct CouplingOracle {
    topo: Arc<NetworkTopology>,
    saturation: Vec<[f64; 8]>,
    splits: SplitSchedule,
}

impl CouplingOracle {
    pub fn transfer_matrix(&self, intersection: usize, step: usize) -> DMatrix<f64> {
        transfer_matrix_impl(&self.topo, &self.saturation, &self.splits, intersection, step)
    }

    pub fn outflow_matrix(&self, intersection: usize) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(8, 4);
        for m in 0..8 {
            b[(m, PHASE_OF_LANE[m])] = self.saturation[intersection][m];
        }
        b
    }
}

pub fn initial_counts(
    topo: &NetworkTopology,
    cfg: &InitialCountsConfig,
    seed: u64,
) -> Result<Vec<[f64; 8]>, PlantError> {
    Ok(match cfg {
        InitialCountsConfig::Zero => vec![[0.0; 8]; topo.n()],
        InitialCountsConfig::Constant { veh } => vec![[*veh; 8]; topo.n()],
        InitialCountsConfig::UniformRandom { low, high } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(3);
            (0..topo.n())
                .map(|_| std::array::from_fn(|_| rng.random_range(*low..=*high)))
                .collect()
        }
        InitialCountsConfig::Explicit { counts } => {
            if counts.len() != topo.n() {
                return Err(PlantError::ShapeMismatch(format!(
                    "{} explicit count rows for {} intersections",
                    counts.len(),
                    topo.n()
                )));
            }
            counts.clone()
        }
    })
}
