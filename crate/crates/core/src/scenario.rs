//! Bundled scenario: a 2x3 grid of six intersections under rush-hour style
//! demand, built programmatically so its geometry is explained by code
//! rather than by a thousand-line JSON blob. The checked-in
//! `scenarios/grid2x3.json` is generated from [`grid2x3`] and a test keeps
//! the two in sync.
//!
//! Grid layout (1-based ids):
//!
//! ```text
//!   1 - 2 - 3
//!   |   |   |
//!   4 - 5 - 6
//! ```
//!
//! Each intersection has four approach roads of two lanes each. Road 0
//! carries traffic arriving from the north (traveling south), road 1 from
//! the east (traveling west), road 2 from the south (traveling north), and
//! road 3 from the west (traveling east). The even lane of each road takes
//! straight and right-turn movements, the odd lane left turns. Movements
//! that would leave the grid exit the network instead; their share folds
//! into the lane's exit weight so total turning mass is identical at every
//! position.

use crate::config::{
    AdmmConfig, ArrivalsConfig, ControllerConfig, DemandConfig, DownstreamConfig,
    EstimatorConfig, InitialCountsConfig, IntersectionConfig, NetworkConfig, ScenarioConfig,
    SimulationConfig, SplitConfig, SplitProfileConfig, StopRuleConfig,
};

const ROWS: usize = 2;
const COLS: usize = 3;

/// Travel directions on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    North,
    East,
    South,
    West,
}

impl Dir {
    /// The direction traffic on approach road `a` travels through the
    /// intersection (road 0 arrives from the north, so it travels south).
    fn of_approach(a: usize) -> Dir {
        [Dir::South, Dir::West, Dir::North, Dir::East][a]
    }

    /// The approach road a vehicle lands on after traveling in `self` into
    /// the next intersection (traveling south means entering from the
    /// north side, which is approach road 0).
    fn receiving_road(self) -> usize {
        match self {
            Dir::South => 0,
            Dir::West => 1,
            Dir::North => 2,
            Dir::East => 3,
        }
    }

    fn right_turn(self) -> Dir {
        match self {
            Dir::North => Dir::East,
            Dir::East => Dir::South,
            Dir::South => Dir::West,
            Dir::West => Dir::North,
        }
    }

    fn left_turn(self) -> Dir {
        match self {
            Dir::North => Dir::West,
            Dir::West => Dir::South,
            Dir::South => Dir::East,
            Dir::East => Dir::North,
        }
    }

    fn opposite(self) -> Dir {
        match self {
            Dir::North => Dir::South,
            Dir::South => Dir::North,
            Dir::East => Dir::West,
            Dir::West => Dir::East,
        }
    }

    /// Grid cell reached by traveling one block in `self` from `(r, c)`.
    fn step(self, r: usize, c: usize) -> Option<(usize, usize)> {
        let (nr, nc) = match self {
            Dir::North => (r.checked_sub(1)?, c),
            Dir::South => (r + 1, c),
            Dir::West => (r, c.checked_sub(1)?),
            Dir::East => (r, c + 1),
        };
        (nr < ROWS && nc < COLS).then_some((nr, nc))
    }
}

fn id(r: usize, c: usize) -> usize {
    r * COLS + c + 1 // 1-based
}

/// One outgoing movement: a turn relation plus how its mass is split over
/// the receiving road's two lanes.
struct Movement {
    travel: Dir,
    /// (weight on the receiving even lane, weight on the receiving odd lane).
    weights: (f64, f64),
}

fn lane_downstream(r: usize, c: usize, road: usize, left_lane: bool) -> DownstreamConfig {
    let travel = Dir::of_approach(road);
    let (movements, mut exit_weight) = if left_lane {
        (vec![Movement { travel: travel.left_turn(), weights: (0.40, 0.35) }], 0.25)
    } else {
        (
            vec![
                Movement { travel, weights: (0.40, 0.20) },
                Movement { travel: travel.right_turn(), weights: (0.25, 0.0) },
            ],
            0.15,
        )
    };

    let mut lanes = Vec::new();
    let mut weights = Vec::new();
    for mv in movements {
        match mv.travel.step(r, c) {
            Some((nr, nc)) => {
                let target = id(nr, nc);
                let recv = mv.travel.receiving_road();
                if mv.weights.0 > 0.0 {
                    lanes.push([target, 2 * recv + 1]); // even lane, 1-based
                    weights.push(mv.weights.0);
                }
                if mv.weights.1 > 0.0 {
                    lanes.push([target, 2 * recv + 2]); // odd lane, 1-based
                    weights.push(mv.weights.1);
                }
            }
            None => exit_weight += mv.weights.0 + mv.weights.1,
        }
    }
    if lanes.is_empty() {
        DownstreamConfig::Tag("sink".into())
    } else {
        DownstreamConfig::Split(SplitConfig { lanes, weights: Some(weights), exit_weight })
    }
}

fn intersection(r: usize, c: usize) -> IntersectionConfig {
    // North/south roads are shorter blocks than east/west ones.
    let lane_lengths_m =
        std::array::from_fn(|m| if (m / 2) % 2 == 0 { 430.0 } else { 470.0 });
    // Straight/right lanes discharge faster than left-turn lanes.
    let saturation_veh_s = std::array::from_fn(|m| if m % 2 == 0 { 0.55 } else { 0.45 });
    let downstream = std::array::from_fn(|m| lane_downstream(r, c, m / 2, m % 2 == 1));

    // Approaches whose feeder block is off-grid are fed by external demand.
    let mut boundary_lanes = Vec::new();
    for road in 0..4 {
        let feeder_cell = Dir::of_approach(road).opposite().step(r, c);
        if feeder_cell.is_none() {
            boundary_lanes.push(2 * road + 1);
            boundary_lanes.push(2 * road + 2);
        }
    }
    IntersectionConfig { lane_lengths_m, saturation_veh_s, downstream, boundary_lanes }
}

/// The bundled six-intersection benchmark scenario.
pub fn grid2x3() -> ScenarioConfig {
    let intersections: Vec<IntersectionConfig> =
        (0..ROWS).flat_map(|r| (0..COLS).map(move |c| intersection(r, c))).collect();

    // Coupling edges follow directly from the declared downstream sets.
    let mut edges = std::collections::BTreeSet::new();
    for (idx, ic) in intersections.iter().enumerate() {
        for ds in &ic.downstream {
            if let DownstreamConfig::Split(split) = ds {
                for lane in &split.lanes {
                    if lane[0] != idx + 1 {
                        edges.insert([idx + 1, lane[0]]);
                    }
                }
            }
        }
    }

    ScenarioConfig {
        name: "grid2x3-rush".into(),
        network: NetworkConfig { intersections, edges: edges.into_iter().collect() },
        demand: DemandConfig {
            arrivals: ArrivalsConfig::PiecewiseRandom {
                rate_range_vph: [200.0, 600.0],
                segment_steps: 15,
                turn_lane_factor: 0.25,
            },
            splits: SplitProfileConfig::Sinusoid { amplitude: 0.35, period_steps: 24.0 },
        },
        controller: ControllerConfig {
            // A light green-time regularizer: the queue-deviation gradients on
            // these block lengths are of order 1e-3, so the default penalty
            // would pin every predictive controller at the equal split.
            control_penalty: 1e-6,
            admm: AdmmConfig {
                // Penalty on the same scale as the objective curvature;
                // with the default 1.0 a sweep barely moves the iterate and
                // the sweep budget runs out next to the warm start.
                penalty: 1e-2,
                eps_stop: 1e-6,
                max_sweeps: 200,
                stop_rule: StopRuleConfig::Residual,
                ..AdmmConfig::default()
            },
            estimator: EstimatorConfig::default(),
            ..ControllerConfig::default()
        },
        simulation: SimulationConfig {
            horizon_steps: 60,
            seed: 2024,
            initial: InitialCountsConfig::UniformRandom { low: 4.0, high: 18.0 },
            free_flow_kmh: 50.0,
        },
    }
}

/// Canonical JSON form used for the checked-in scenario files.
pub fn to_pretty_json(cfg: &ScenarioConfig) -> String {
    let mut s = serde_json::to_string_pretty(cfg).expect("config serializes");
    s.push('\n');
    s
}
