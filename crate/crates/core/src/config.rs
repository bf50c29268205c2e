//! Scenario configuration: one JSON document describing network, demand,
//! controller parameters, and simulation settings.
//!
//! Indices in the file are 1-based (intersections `1..=N`, lanes `1..=8`,
//! phases `1..=4`); everything internal is 0-based. [`ScenarioConfig::validate`]
//! checks scalar ranges here; graph consistency is checked by
//! [`crate::topology::build_network`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub network: NetworkConfig,
    pub demand: DemandConfig,
    pub controller: ControllerConfig,
    pub simulation: SimulationConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// One entry per intersection; position in the list is the 1-based id minus one.
    pub intersections: Vec<IntersectionConfig>,
    /// Directed coupling edges `[from, to]` (1-based): `from` discharges into `to`.
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntersectionConfig {
    /// Lane lengths in meters, lanes 1..=8.
    pub lane_lengths_m: [f64; 8],
    /// Saturation outflow per lane in veh/s of green.
    pub saturation_veh_s: [f64; 8],
    /// Where each lane's discharge goes.
    pub downstream: [DownstreamConfig; 8],
    /// 1-based lane indices fed by external demand.
    #[serde(default)]
    pub boundary_lanes: Vec<usize>,
}

/// Downstream declaration for one lane: either the literal string `"sink"`
/// (all discharge leaves the network) or a split over in-network lanes with
/// an optional share that exits.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DownstreamConfig {
    Tag(String),
    Split(SplitConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Receiving lanes as `[intersection, lane]`, 1-based.
    pub lanes: Vec<[usize; 2]>,
    /// Base weights over `lanes`; uniform when omitted.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// Base weight of the share that leaves the network.
    #[serde(default)]
    pub exit_weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandConfig {
    pub arrivals: ArrivalsConfig,
    #[serde(default)]
    pub splits: SplitProfileConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalsConfig {
    /// No external demand.
    None,
    /// Every boundary lane receives this constant rate.
    Constant { rate_vph: f64 },
    /// Each boundary lane redraws a rate from the range every `segment_steps`.
    /// Odd (turn) lanes scale their draw by `turn_lane_factor`, reflecting
    /// that traffic entering a corridor is predominantly through-moving.
    PiecewiseRandom {
        rate_range_vph: [f64; 2],
        segment_steps: usize,
        #[serde(default = "default_turn_lane_factor")]
        turn_lane_factor: f64,
    },
}

fn default_turn_lane_factor() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitProfileConfig {
    /// Split ratios stay at their base weights.
    #[default]
    Constant,
    /// Base weights modulated by staggered sinusoids, then renormalized.
    Sinusoid { amplitude: f64, period_steps: f64 },
    /// Base weights jittered by a fresh uniform multiplier every `segment_steps`.
    PiecewiseRandom { jitter: f64, segment_steps: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Cycle length S in seconds.
    #[serde(default = "default_cycle")]
    pub cycle_s: f64,
    /// Lost time Q per cycle in seconds (applied uniformly).
    #[serde(default = "default_lost_time")]
    pub lost_time_s: f64,
    #[serde(default = "default_u_min")]
    pub u_min_s: f64,
    #[serde(default = "default_u_max")]
    pub u_max_s: f64,
    /// Prediction horizon M in control steps.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Quadratic green-time penalty r (per phase, per step).
    #[serde(default = "default_control_penalty")]
    pub control_penalty: f64,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub admm: AdmmConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            cycle_s: default_cycle(),
            lost_time_s: default_lost_time(),
            u_min_s: default_u_min(),
            u_max_s: default_u_max(),
            horizon: default_horizon(),
            control_penalty: default_control_penalty(),
            estimator: EstimatorConfig::default(),
            admm: AdmmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Ridge weight mu in the transfer-matrix update.
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Normalization offset delta in the forecaster weight update, in (0, 1].
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Autoregressive order p.
    #[serde(default = "default_ar_order")]
    pub ar_order: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig { mu: default_mu(), delta: default_delta(), ar_order: default_ar_order() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmConfig {
    /// Penalty parameter rho.
    #[serde(default = "default_penalty")]
    pub penalty: f64,
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
    /// Stopping threshold for the dual-mismatch rule.
    #[serde(default = "default_eps_stop")]
    pub eps_stop: f64,
    /// Wall-clock budget per solve in seconds.
    #[serde(default = "default_t_max")]
    pub t_max_s: f64,
    /// Include the first horizon step in the relaxed cycle constraint.
    #[serde(default = "default_true")]
    pub constrain_first_step: bool,
    /// Carry solution and multipliers to the next control step (shifted).
    #[serde(default = "default_true")]
    pub warm_start: bool,
    /// Tolerance for each per-phase box-QP block solve.
    #[serde(default = "default_block_tol")]
    pub block_tol: f64,
    #[serde(default)]
    pub stop_rule: StopRuleConfig,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            penalty: default_penalty(),
            max_sweeps: default_max_sweeps(),
            eps_stop: default_eps_stop(),
            t_max_s: default_t_max(),
            constrain_first_step: true,
            warm_start: true,
            block_tol: default_block_tol(),
            stop_rule: StopRuleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRuleConfig {
    /// `eps = ||lambda - theta||_inf < eps_stop`, as written in the block
    /// coordinate-descent recursion.
    #[default]
    DualMismatch,
    /// Standard residual rule: `||theta||_inf < eps_stop` and
    /// `rho * ||u - u_prev||_inf < eps_stop`.
    Residual,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Number of control intervals to simulate.
    pub horizon_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub initial: InitialCountsConfig,
    /// Free-flow speed used by the loss-time metric.
    #[serde(default = "default_free_flow")]
    pub free_flow_kmh: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCountsConfig {
    #[default]
    Zero,
    Constant { veh: f64 },
    UniformRandom { low: f64, high: f64 },
    /// Explicit counts, one `[f64; 8]` row per intersection.
    Explicit { counts: Vec<[f64; 8]> },
}

fn default_cycle() -> f64 {
    120.0
}
fn default_lost_time() -> f64 {
    8.0
}
fn default_u_min() -> f64 {
    10.0
}
fn default_u_max() -> f64 {
    70.0
}
fn default_horizon() -> usize {
    5
}
fn default_control_penalty() -> f64 {
    1e-4
}
fn default_mu() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    0.5
}
fn default_ar_order() -> usize {
    3
}
fn default_penalty() -> f64 {
    1.0
}
fn default_max_sweeps() -> usize {
    50
}
fn default_eps_stop() -> f64 {
    1e-3
}
fn default_t_max() -> f64 {
    2.0
}
fn default_block_tol() -> f64 {
    1e-8
}
fn default_free_flow() -> f64 {
    50.0
}
fn default_true() -> bool {
    true
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Scalar-range checks. Graph consistency lives in `build_network`.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.controller;
        let err = |msg: String| Err(ConfigError::Invalid(msg));
        if self.network.intersections.is_empty() {
            return err("network must declare at least one intersection".into());
        }
        if !(c.cycle_s > 0.0) {
            return err(format!("cycle_s must be positive, got {}", c.cycle_s));
        }
        if !(c.lost_time_s >= 0.0) {
            return err(format!("lost_time_s must be non-negative, got {}", c.lost_time_s));
        }
        if !(c.u_min_s > 0.0 && c.u_min_s <= c.u_max_s) {
            return err(format!("need 0 < u_min_s <= u_max_s, got [{}, {}]", c.u_min_s, c.u_max_s));
        }
        let budget = c.cycle_s - c.lost_time_s;
        if 4.0 * c.u_min_s > budget || 4.0 * c.u_max_s < budget {
            return err(format!(
                "green bounds [{}, {}] cannot fill cycle budget {} over 4 phases",
                c.u_min_s, c.u_max_s, budget
            ));
        }
        if c.horizon == 0 {
            return err("horizon must be at least 1".into());
        }
        if !(c.control_penalty >= 0.0) {
            return err(format!("control_penalty must be non-negative, got {}", c.control_penalty));
        }
        if !(c.estimator.mu > 0.0) {
            return err(format!("estimator.mu must be positive, got {}", c.estimator.mu));
        }
        if !(c.estimator.delta > 0.0 && c.estimator.delta <= 1.0) {
            return err(format!("estimator.delta must lie in (0, 1], got {}", c.estimator.delta));
        }
        if !(2..=7).contains(&c.estimator.ar_order) {
            return err(format!("estimator.ar_order must lie in 2..=7, got {}", c.estimator.ar_order));
        }
        if !(c.admm.penalty > 0.0) {
            return err(format!("admm.penalty must be positive, got {}", c.admm.penalty));
        }
        if c.admm.max_sweeps == 0 {
            return err("admm.max_sweeps must be at least 1".into());
        }
        if !(c.admm.t_max_s > 0.0) {
            return err(format!("admm.t_max_s must be positive, got {}", c.admm.t_max_s));
        }
        if !(c.admm.block_tol > 0.0) {
            return err(format!("admm.block_tol must be positive, got {}", c.admm.block_tol));
        }
        match &self.demand.arrivals {
            ArrivalsConfig::None => {}
            ArrivalsConfig::Constant { rate_vph } => {
                if !(*rate_vph >= 0.0) {
                    return err(format!("arrival rate must be non-negative, got {rate_vph}"));
                }
            }
            ArrivalsConfig::PiecewiseRandom { rate_range_vph, segment_steps, turn_lane_factor } => {
                if !(rate_range_vph[0] >= 0.0 && rate_range_vph[0] <= rate_range_vph[1]) {
                    return err(format!("bad arrival rate range {rate_range_vph:?}"));
                }
                if *segment_steps == 0 {
                    return err("arrival segment_steps must be at least 1".into());
                }
                if !(*turn_lane_factor >= 0.0) {
                    return err(format!(
                        "turn_lane_factor must be non-negative, got {turn_lane_factor}"
                    ));
                }
            }
        }
        match &self.demand.splits {
            SplitProfileConfig::Constant => {}
            SplitProfileConfig::Sinusoid { amplitude, period_steps } => {
                if !(*amplitude >= 0.0 && *amplitude <= 1.0) {
                    return err(format!("split amplitude must lie in [0, 1], got {amplitude}"));
                }
                if !(*period_steps > 0.0) {
                    return err(format!("split period_steps must be positive, got {period_steps}"));
                }
            }
            SplitProfileConfig::PiecewiseRandom { jitter, segment_steps } => {
                if !(*jitter >= 0.0 && *jitter < 1.0) {
                    return err(format!("split jitter must lie in [0, 1), got {jitter}"));
                }
                if *segment_steps == 0 {
                    return err("split segment_steps must be at least 1".into());
                }
            }
        }
        if self.simulation.horizon_steps == 0 {
            return err("simulation.horizon_steps must be at least 1".into());
        }
        if !(self.simulation.free_flow_kmh > 0.0) {
            return err(format!(
                "free_flow_kmh must be positive, got {}",
                self.simulation.free_flow_kmh
            ));
        }
        if let InitialCountsConfig::UniformRandom { low, high } = self.simulation.initial {
            if !(low >= 0.0 && low <= high) {
                return err(format!("bad initial count range [{low}, {high}]"));
            }
        }
        if let InitialCountsConfig::Explicit { counts } = &self.simulation.initial {
            if counts.len() != self.network.intersections.len() {
                return err(format!(
                    "explicit initial counts cover {} intersections, network has {}",
                    counts.len(),
                    self.network.intersections.len()
                ));
            }
            if counts.iter().flatten().any(|v| !(*v >= 0.0)) {
                return err("initial counts must be non-negative".into());
            }
        }
        Ok(())
    }
}
