//! Network graph: intersections, lanes, the fixed phase map, downstream
//! connectivity, and neighbor sets. Built once from config and frozen.
//!
//! Every intersection has eight incoming lanes (four roads of two lanes) and
//! four phases. The phase map is fixed: phase 1 serves lanes {2,6}, phase 2
//! serves {3,7}, phase 3 serves {4,8}, phase 4 serves {1,5} (1-based). Each
//! lane is served by exactly one phase.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DownstreamConfig, NetworkConfig};

pub const LANES_PER_INTERSECTION: usize = 8;
pub const PHASES_PER_INTERSECTION: usize = 4;

/// Phase serving each lane, 0-based both ways.
pub const PHASE_OF_LANE: [usize; 8] = [3, 0, 1, 2, 3, 0, 1, 2];
/// The two lanes served by each phase, 0-based.
pub const LANES_OF_PHASE: [[usize; 2]; 4] = [[1, 5], [2, 6], [3, 7], [0, 4]];

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("malformed network config: {0}")]
    MalformedConfig(String),
    #[error("inconsistent graph: {0}")]
    InconsistentGraph(String),
    #[error("unknown lane: intersection {} lane {}", intersection + 1, lane + 1)]
    UnknownLane { intersection: usize, lane: usize },
}

/// 0-based lane address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LaneId {
    pub intersection: usize,
    pub lane: usize,
}

impl LaneId {
    pub fn new(intersection: usize, lane: usize) -> Self {
        LaneId { intersection, lane }
    }

    /// Phase serving this lane.
    pub fn phase(&self) -> usize {
        PHASE_OF_LANE[self.lane]
    }
}

impl fmt::Debug for LaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // 1-based, matching the config convention.
        write!(f, "({},{})", self.intersection + 1, self.lane + 1)
    }
}

/// Declared discharge targets of one lane. `lanes` keeps the declared order.
/// An empty `lanes` with `exits = true` is a pure sink lane.
#[derive(Debug, Clone)]
pub struct DownstreamSet {
    pub lanes: Vec<LaneId>,
    /// Base split weights over `lanes` (same length), plus the exit share.
    pub base_weights: Vec<f64>,
    pub exit_weight: f64,
}

impl DownstreamSet {
    pub fn exits(&self) -> bool {
        self.exit_weight > 0.0
    }

    /// True when all discharge leaves the network.
    pub fn is_sink_only(&self) -> bool {
        self.lanes.is_empty()
    }
}

#[derive(Debug)]
pub struct NetworkTopology {
    n: usize,
    lane_lengths: Vec<[f64; 8]>,
    downstream: Vec<Vec<DownstreamSet>>,
    boundary: Vec<[bool; 8]>,
    edges: BTreeSet<(usize, usize)>,
    in_neighbors: Vec<Vec<usize>>,
    out_neighbors: Vec<Vec<usize>>,
    comm_neighbors: Vec<Vec<usize>>,
    upstream: Vec<Vec<Vec<LaneId>>>,
}

impl NetworkTopology {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn check_lane(&self, lane: LaneId) -> Result<(), TopologyError> {
        if lane.intersection >= self.n || lane.lane >= LANES_PER_INTERSECTION {
            return Err(TopologyError::UnknownLane {
                intersection: lane.intersection,
                lane: lane.lane,
            });
        }
        Ok(())
    }

    pub fn lane_length(&self, lane: LaneId) -> Result<f64, TopologyError> {
        self.check_lane(lane)?;
        Ok(self.lane_lengths[lane.intersection][lane.lane])
    }

    pub fn lengths_of(&self, intersection: usize) -> &[f64; 8] {
        &self.lane_lengths[intersection]
    }

    /// Downstream set exactly as declared (no reordering). Sink lanes return
    /// an empty lane list with the exit marker set.
    pub fn downstream_lanes(&self, lane: LaneId) -> Result<&DownstreamSet, TopologyError> {
        self.check_lane(lane)?;
        Ok(&self.downstream[lane.intersection][lane.lane])
    }

    pub fn is_boundary(&self, lane: LaneId) -> bool {
        self.boundary[lane.intersection][lane.lane]
    }

    pub fn boundary_lanes(&self, intersection: usize) -> impl Iterator<Item = usize> + '_ {
        self.boundary[intersection]
            .iter()
            .enumerate()
            .filter_map(|(m, b)| b.then_some(m))
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    /// Intersections discharging into `i`, sorted ascending. Block `l` of the
    /// neighbor control stack corresponds to `in_neighbors(i)[l]`.
    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_neighbors[i]
    }

    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out_neighbors[i]
    }

    /// Union of in- and out-neighbors: who `i` must exchange messages with.
    pub fn comm_neighbors(&self, i: usize) -> &[usize] {
        &self.comm_neighbors[i]
    }

    /// Lanes whose downstream set contains `lane`.
    pub fn upstream_feeders(&self, lane: LaneId) -> &[LaneId] {
        &self.upstream[lane.intersection][lane.lane]
    }

    pub fn lanes(&self) -> impl Iterator<Item = LaneId> + '_ {
        (0..self.n).flat_map(|i| (0..LANES_PER_INTERSECTION).map(move |m| LaneId::new(i, m)))
    }

    /// Structural nonzero positions of the lane-level transfer matrix of
    /// intersection `i` (8 rows by `4 * in_neighbors(i).len()` columns):
    /// entry `(m, 4l + g)` is present when some lane of neighbor `l` served
    /// by phase `g` lists lane `(i, m)` downstream. Sorted by column block,
    /// then column, then row; forecast vectors flatten in this order.
    pub fn transfer_pattern(&self, i: usize) -> Vec<(usize, usize)> {
        let mut pattern = Vec::new();
        for (l, &j) in self.in_neighbors[i].iter().enumerate() {
            for g in 0..PHASES_PER_INTERSECTION {
                for m in 0..LANES_PER_INTERSECTION {
                    let feeds = LANES_OF_PHASE[g].iter().any(|&q| {
                        self.downstream[j][q].lanes.contains(&LaneId::new(i, m))
                    });
                    if feeds {
                        pattern.push((m, 4 * l + g));
                    }
                }
            }
        }
        pattern
    }
}

/// Validates the declared network and freezes it. All graph-consistency
/// checks live here; downstream of this call the topology can be indexed
/// without re-checking.
pub fn build_network(config: &NetworkConfig) -> Result<NetworkTopology, TopologyError> {
    let n = config.intersections.len();
    if n == 0 {
        return Err(TopologyError::MalformedConfig("no intersections declared".into()));
    }

    let mut edges = BTreeSet::new();
    for e in &config.edges {
        let (from, to) = (e[0], e[1]);
        if from == 0 || from > n || to == 0 || to > n {
            return Err(TopologyError::InconsistentGraph(format!(
                "edge [{from}, {to}] references an intersection outside 1..={n}"
            )));
        }
        if from == to {
            return Err(TopologyError::InconsistentGraph(format!(
                "edge [{from}, {to}] is a self-loop"
            )));
        }
        if !edges.insert((from - 1, to - 1)) {
            return Err(TopologyError::MalformedConfig(format!(
                "edge [{from}, {to}] declared twice"
            )));
        }
    }

    let mut lane_lengths = Vec::with_capacity(n);
    let mut downstream: Vec<Vec<DownstreamSet>> = Vec::with_capacity(n);
    let mut boundary = vec![[false; 8]; n];

    for (i, ic) in config.intersections.iter().enumerate() {
        for (m, &len) in ic.lane_lengths_m.iter().enumerate() {
            if !(len > 0.0) {
                return Err(TopologyError::MalformedConfig(format!(
                    "lane {:?} has non-positive length {len}",
                    LaneId::new(i, m)
                )));
            }
        }
        for (m, &s) in ic.saturation_veh_s.iter().enumerate() {
            if !(s > 0.0) {
                return Err(TopologyError::MalformedConfig(format!(
                    "lane {:?} has non-positive saturation rate {s}",
                    LaneId::new(i, m)
                )));
            }
        }
        lane_lengths.push(ic.lane_lengths_m);

        let mut sets = Vec::with_capacity(8);
        for (m, dc) in ic.downstream.iter().enumerate() {
            let set = parse_downstream(dc, i, m, n)?;
            sets.push(set);
        }
        downstream.push(sets);

        let mut seen = [false; 8];
        for &lane1 in &ic.boundary_lanes {
            if lane1 == 0 || lane1 > 8 {
                return Err(TopologyError::MalformedConfig(format!(
                    "boundary lane index {lane1} at intersection {} outside 1..=8",
                    i + 1
                )));
            }
            if seen[lane1 - 1] {
                return Err(TopologyError::MalformedConfig(format!(
                    "boundary lane {lane1} at intersection {} declared twice",
                    i + 1
                )));
            }
            seen[lane1 - 1] = true;
            boundary[i][lane1 - 1] = true;
        }
    }

    // Cross-intersection flow must ride on a declared edge, and every
    // declared edge must carry at least one lane connection.
    let mut used_edges = BTreeSet::new();
    for i in 0..n {
        for m in 0..8 {
            for target in &downstream[i][m].lanes {
                if target.intersection == i {
                    return Err(TopologyError::InconsistentGraph(format!(
                        "lane {:?} lists downstream lane {:?} at its own intersection",
                        LaneId::new(i, m),
                        target
                    )));
                }
                if !edges.contains(&(i, target.intersection)) {
                    return Err(TopologyError::InconsistentGraph(format!(
                        "lane {:?} feeds {:?} but edge [{}, {}] is not declared",
                        LaneId::new(i, m),
                        target,
                        i + 1,
                        target.intersection + 1
                    )));
                }
                used_edges.insert((i, target.intersection));
            }
        }
    }
    if let Some(&(from, to)) = edges.difference(&used_edges).next() {
        return Err(TopologyError::InconsistentGraph(format!(
            "edge [{}, {}] declared but no lane of {} feeds {}",
            from + 1,
            to + 1,
            from + 1,
            to + 1
        )));
    }

    let mut upstream: Vec<Vec<Vec<LaneId>>> = vec![vec![Vec::new(); 8]; n];
    for i in 0..n {
        for m in 0..8 {
            for target in &downstream[i][m].lanes {
                upstream[target.intersection][target.lane].push(LaneId::new(i, m));
            }
        }
    }

    for i in 0..n {
        for m in 0..8 {
            if !boundary[i][m] && upstream[i][m].is_empty() {
                return Err(TopologyError::InconsistentGraph(format!(
                    "lane {:?} is neither boundary-fed nor fed by any upstream lane",
                    LaneId::new(i, m)
                )));
            }
        }
    }

    let mut in_neighbors = vec![Vec::new(); n];
    let mut out_neighbors = vec![Vec::new(); n];
    for &(from, to) in &edges {
        in_neighbors[to].push(from);
        out_neighbors[from].push(to);
    }
    // BTreeSet iteration is ordered, so these are already sorted.
    let comm_neighbors = (0..n)
        .map(|i| {
            let mut s: BTreeSet<usize> = in_neighbors[i].iter().copied().collect();
            s.extend(out_neighbors[i].iter().copied());
            s.into_iter().collect::<Vec<_>>()
        })
        .collect();

    Ok(NetworkTopology {
        n,
        lane_lengths,
        downstream,
        boundary,
        edges,
        in_neighbors,
        out_neighbors,
        comm_neighbors,
        upstream,
    })
}

fn parse_downstream(
    dc: &DownstreamConfig,
    i: usize,
    m: usize,
    n: usize,
) -> Result<DownstreamSet, TopologyError> {
    let lane = LaneId::new(i, m);
    match dc {
        DownstreamConfig::Tag(tag) => {
            if tag != "sink" {
                return Err(TopologyError::MalformedConfig(format!(
                    "lane {lane:?}: unknown downstream tag {tag:?} (expected \"sink\")"
                )));
            }
            Ok(DownstreamSet { lanes: Vec::new(), base_weights: Vec::new(), exit_weight: 1.0 })
        }
        DownstreamConfig::Split(split) => {
            if split.lanes.is_empty() && !(split.exit_weight > 0.0) {
                return Err(TopologyError::MalformedConfig(format!(
                    "lane {lane:?}: empty downstream set without an exit share"
                )));
            }
            let mut lanes = Vec::with_capacity(split.lanes.len());
            for t in &split.lanes {
                let (ti, tm) = (t[0], t[1]);
                if ti == 0 || ti > n || tm == 0 || tm > 8 {
                    return Err(TopologyError::InconsistentGraph(format!(
                        "lane {lane:?} lists downstream lane ({ti},{tm}) outside the declared network"
                    )));
                }
                let target = LaneId::new(ti - 1, tm - 1);
                if lanes.contains(&target) {
                    return Err(TopologyError::MalformedConfig(format!(
                        "lane {lane:?} lists downstream lane {target:?} twice"
                    )));
                }
                lanes.push(target);
            }
            let base_weights = match &split.weights {
                Some(w) => {
                    if w.len() != lanes.len() {
                        return Err(TopologyError::MalformedConfig(format!(
                            "lane {lane:?}: {} weights for {} downstream lanes",
                            w.len(),
                            lanes.len()
                        )));
                    }
                    if w.iter().any(|v| !(*v >= 0.0)) {
                        return Err(TopologyError::MalformedConfig(format!(
                            "lane {lane:?}: negative split weight"
                        )));
                    }
                    w.clone()
                }
                None => vec![1.0; lanes.len()],
            };
            if !(split.exit_weight >= 0.0) {
                return Err(TopologyError::MalformedConfig(format!(
                    "lane {lane:?}: negative exit weight"
                )));
            }
            let total: f64 = base_weights.iter().sum::<f64>() + split.exit_weight;
            if !(total > 0.0) {
                return Err(TopologyError::MalformedConfig(format!(
                    "lane {lane:?}: split weights sum to zero"
                )));
            }
            Ok(DownstreamSet { lanes, base_weights, exit_weight: split.exit_weight })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{IntersectionConfig, SplitConfig};

    fn sink_intersection() -> IntersectionConfig {
        IntersectionConfig {
            lane_lengths_m: [400.0; 8],
            saturation_veh_s: [0.5; 8],
            downstream: std::array::from_fn(|_| DownstreamConfig::Tag("sink".into())),
            boundary_lanes: (1..=8).collect(),
        }
    }

    #[test]
    fn phase_map_partitions_lanes() {
        let mut seen = [0usize; 8];
        for (phase, lanes) in LANES_OF_PHASE.iter().enumerate() {
            for &m in lanes {
                seen[m] += 1;
                assert_eq!(PHASE_OF_LANE[m], phase);
            }
        }
        assert_eq!(seen, [1; 8]);
    }

    #[test]
    fn single_isolated_intersection_is_valid() {
        let cfg = NetworkConfig { intersections: vec![sink_intersection()], edges: vec![] };
        let topo = build_network(&cfg).unwrap();
        assert_eq!(topo.n(), 1);
        assert!(topo.in_neighbors(0).is_empty());
        assert!(topo.out_neighbors(0).is_empty());
        let ds = topo.downstream_lanes(LaneId::new(0, 3)).unwrap();
        assert!(ds.lanes.is_empty());
        assert!(ds.exits());
        assert!(ds.is_sink_only());
        assert!(topo.transfer_pattern(0).is_empty());
    }

    #[test]
    fn downstream_outside_network_is_rejected() {
        let mut ic = sink_intersection();
        ic.downstream[2] = DownstreamConfig::Split(SplitConfig {
            lanes: vec![[9, 1]],
            weights: None,
            exit_weight: 0.0,
        });
        let cfg = NetworkConfig { intersections: vec![ic; 6], edges: vec![] };
        let err = build_network(&cfg).unwrap_err();
        assert!(matches!(err, TopologyError::InconsistentGraph(_)), "{err}");
        assert!(err.to_string().contains("(9,1)"), "{err}");
    }

    #[test]
    fn cross_flow_requires_declared_edge() {
        let mut a = sink_intersection();
        a.downstream[1] = DownstreamConfig::Split(SplitConfig {
            lanes: vec![[2, 1]],
            weights: None,
            exit_weight: 0.1,
        });
        let cfg = NetworkConfig { intersections: vec![a, sink_intersection()], edges: vec![] };
        let err = build_network(&cfg).unwrap_err();
        assert!(err.to_string().contains("edge [1, 2]"), "{err}");
    }

    #[test]
    fn vacuous_edge_is_rejected() {
        let cfg = NetworkConfig {
            intersections: vec![sink_intersection(), sink_intersection()],
            edges: vec![[1, 2]],
        };
        let err = build_network(&cfg).unwrap_err();
        assert!(err.to_string().contains("no lane of 1 feeds 2"), "{err}");
    }

    #[test]
    fn non_boundary_lane_without_feeder_is_rejected() {
        let mut ic = sink_intersection();
        ic.boundary_lanes = vec![1, 2, 3, 4, 5, 6, 7]; // lane 8 starves
        let cfg = NetworkConfig { intersections: vec![ic], edges: vec![] };
        let err = build_network(&cfg).unwrap_err();
        assert!(err.to_string().contains("(1,8)"), "{err}");
    }

    #[test]
    fn two_way_pair_builds_neighbor_sets_and_pattern() {
        // 1 and 2 feed each other: lane (1,2) -> (2,1)+(2,2), lane (2,6) -> (1,5).
        let mut a = sink_intersection();
        a.downstream[1] = DownstreamConfig::Split(SplitConfig {
            lanes: vec![[2, 1], [2, 2]],
            weights: Some(vec![0.3, 0.6]),
            exit_weight: 0.1,
        });
        let mut b = sink_intersection();
        b.downstream[5] = DownstreamConfig::Split(SplitConfig {
            lanes: vec![[1, 5]],
            weights: None,
            exit_weight: 0.0,
        });
        let cfg = NetworkConfig { intersections: vec![a, b], edges: vec![[1, 2], [2, 1]] };
        let topo = build_network(&cfg).unwrap();

        assert_eq!(topo.in_neighbors(0), &[1]);
        assert_eq!(topo.in_neighbors(1), &[0]);
        assert_eq!(topo.comm_neighbors(0), &[1]);
        assert_eq!(topo.upstream_feeders(LaneId::new(0, 4)), &[LaneId::new(1, 5)]);

        // Lane (1,2) is served by phase 1 (0-based 0): pattern of intersection 2
        // holds rows 1 and 2 (0-based 0 and 1) in the phase-0 column.
        let p2 = topo.transfer_pattern(1);
        assert_eq!(p2, vec![(0, 0), (1, 0)]);
        // Lane (2,6) is phase 1 (0-based 0) feeding row 5 (0-based 4).
        let p1 = topo.transfer_pattern(0);
        assert_eq!(p1, vec![(4, 0)]);

        let ds = topo.downstream_lanes(LaneId::new(0, 1)).unwrap();
        assert_eq!(ds.lanes, vec![LaneId::new(1, 0), LaneId::new(1, 1)]);
        assert_eq!(ds.base_weights, vec![0.3, 0.6]);
        assert!(ds.exits() && !ds.is_sink_only());
    }

    #[test]
    fn unknown_lane_lookup_fails() {
        let cfg = NetworkConfig { intersections: vec![sink_intersection()], edges: vec![] };
        let topo = build_network(&cfg).unwrap();
        let err = topo.downstream_lanes(LaneId::new(0, 8)).unwrap_err();
        assert!(matches!(err, TopologyError::UnknownLane { .. }));
        let err = topo.lane_length(LaneId::new(1, 0)).unwrap_err();
        assert!(matches!(err, TopologyError::UnknownLane { .. }));
    }
}
