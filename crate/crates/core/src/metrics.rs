//! Evaluation indicators computed as a pure fold over the plant's flow
//! records: density, flow, relative loss time, delay, stops, and total
//! travel time.
//!
//! The flow model has no per-vehicle trajectories, so the vehicle-level
//! indicators are documented proxies:
//!
//! * a vehicle-equivalent waiting across a step boundary (present at the
//!   start of a step but not discharged during it) accrues one step of delay
//!   and one stop;
//! * total travel time is presence time, `sum over steps of (vehicles
//!   present * cycle seconds)`, which decomposes exactly into total delay
//!   plus one service step per discharged vehicle;
//! * relative loss time compares the time lost by carried vehicles against
//!   the free-flow traversal time of the lanes they occupy, so it is zero
//!   exactly when no queue is ever carried over.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::FlowRecord;
use crate::topology::{LaneId, NetworkTopology};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty run: no flow records to evaluate")]
    EmptyRun,
    #[error("record references unknown lane ({intersection},{lane})")]
    UnknownLane { intersection: usize, lane: usize },
}

/// Unit conversions and definitions shared by all indicators.
#[derive(Debug, Clone, Copy)]
pub struct MetricsParams {
    pub cycle_s: f64,
    pub free_flow_m_s: f64,
}

impl MetricsParams {
    pub fn new(cycle_s: f64, free_flow_kmh: f64) -> Self {
        MetricsParams { cycle_s, free_flow_m_s: free_flow_kmh / 3.6 }
    }
}

/// Network-wide indicators for a single step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepKpis {
    pub step: usize,
    /// Mean of lane densities (veh/m), over end-of-step counts.
    pub avg_density_veh_m: f64,
    /// Total discharge divided by lane count and cycle length (veh/s).
    pub avg_flow_veh_s: f64,
    /// Space-mean speed proxy: flow over density, capped at free flow (m/s).
    pub avg_speed_proxy_m_s: f64,
    /// Loss of carried vehicles over the free-flow baseline, this step.
    pub relative_loss_time: f64,
    /// Vehicles present at the start of the step.
    pub vehicles_present: f64,
    /// Vehicle-equivalents carried across the step boundary.
    pub carried_veh: f64,
}

/// Whole-run indicators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunKpis {
    pub steps: usize,
    pub avg_delay_s_per_veh: f64,
    pub avg_stops_per_veh: f64,
    pub total_travel_time_min: f64,
    pub relative_loss_time: f64,
    pub avg_density_veh_m: f64,
    pub avg_flow_veh_s: f64,
    pub vehicles_served: f64,
    pub total_delay_veh_s: f64,
    pub total_discharged_veh: f64,
    /// Mean controller wall time per step (s); supplied by the caller, zero
    /// when timing was not collected.
    pub mean_controller_wall_s: f64,
}

/// Per-step rows plus the run summary.
#[derive(Debug, Clone)]
pub struct KpiSeries {
    pub steps: Vec<StepKpis>,
    pub run: RunKpis,
}

#[derive(Default)]
struct StepAccum {
    density_sum: f64,
    lane_count: usize,
    outflow: f64,
    present: f64,
    carried: f64,
    loss: f64,
    baseline: f64,
}

/// Computes every indicator from the flow records of one run. Records may
/// arrive in any order; they are sorted by (step, intersection, lane)
/// internally so the floating-point accumulation — and therefore every
/// reported figure — is byte-identical regardless of input order.
pub fn compute_kpis(
    records: &[FlowRecord],
    topo: &NetworkTopology,
    params: MetricsParams,
    mean_controller_wall_s: f64,
) -> Result<KpiSeries, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let mut ordered: Vec<&FlowRecord> = records.iter().collect();
    ordered.sort_by_key(|r| (r.step, r.intersection, r.lane));
    let mut per_step: BTreeMap<usize, StepAccum> = BTreeMap::new();
    let mut total_demand = 0.0;
    let first_step = ordered.first().map(|r| r.step).expect("nonempty");
    let mut initial_present = 0.0;
    for r in ordered {
        let lane = LaneId::new(r.intersection - 1, r.lane - 1);
        let length = topo.lane_length(lane).map_err(|_| MetricsError::UnknownLane {
            intersection: r.intersection,
            lane: r.lane,
        })?;
        let acc = per_step.entry(r.step).or_default();
        let free_flow_time = length / params.free_flow_m_s;
        let carried = r.carried();
        acc.density_sum += r.count / length;
        acc.lane_count += 1;
        acc.outflow += r.outflow;
        acc.present += r.pre_count();
        acc.carried += carried;
        acc.loss += carried * (params.cycle_s - free_flow_time).max(0.0);
        acc.baseline += r.pre_count() * free_flow_time;
        total_demand += r.demand;
        if r.step == first_step {
            initial_present += r.pre_count();
        }
    }

    let mut steps = Vec::with_capacity(per_step.len());
    let mut total_present = 0.0;
    let mut total_carried = 0.0;
    let mut total_outflow = 0.0;
    let mut total_loss = 0.0;
    let mut total_baseline = 0.0;
    let mut density_sum = 0.0;
    let mut flow_sum = 0.0;
    for (&step, acc) in &per_step {
        let lanes = acc.lane_count.max(1) as f64;
        let avg_density = acc.density_sum / lanes;
        let avg_flow = acc.outflow / (lanes * params.cycle_s);
        let speed = if avg_density > 1e-12 {
            (avg_flow / avg_density).min(params.free_flow_m_s)
        } else {
            params.free_flow_m_s
        };
        steps.push(StepKpis {
            step,
            avg_density_veh_m: avg_density,
            avg_flow_veh_s: avg_flow,
            avg_speed_proxy_m_s: speed,
            relative_loss_time: if acc.baseline > 0.0 { acc.loss / acc.baseline } else { 0.0 },
            vehicles_present: acc.present,
            carried_veh: acc.carried,
        });
        total_present += acc.present;
        total_carried += acc.carried;
        total_outflow += acc.outflow;
        total_loss += acc.loss;
        total_baseline += acc.baseline;
        density_sum += avg_density;
        flow_sum += avg_flow;
        let _ = step;
    }

    let n_steps = steps.len();
    let vehicles_served = initial_present + total_demand;
    let total_delay_veh_s = total_carried * params.cycle_s;
    let run = RunKpis {
        steps: n_steps,
        avg_delay_s_per_veh: if vehicles_served > 0.0 {
            total_delay_veh_s / vehicles_served
        } else {
            0.0
        },
        avg_stops_per_veh: if vehicles_served > 0.0 { total_carried / vehicles_served } else { 0.0 },
        total_travel_time_min: total_present * params.cycle_s / 60.0,
        relative_loss_time: if total_baseline > 0.0 { total_loss / total_baseline } else { 0.0 },
        avg_density_veh_m: density_sum / n_steps as f64,
        avg_flow_veh_s: flow_sum / n_steps as f64,
        vehicles_served,
        total_delay_veh_s,
        total_discharged_veh: total_outflow,
        mean_controller_wall_s,
    };
    Ok(KpiSeries { steps, run })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DownstreamConfig, IntersectionConfig, NetworkConfig};
    use crate::topology::build_network;
    use approx::assert_abs_diff_eq;

    fn one_intersection(lengths: [f64; 8]) -> NetworkTopology {
        let cfg = NetworkConfig {
            intersections: vec![IntersectionConfig {
                lane_lengths_m: lengths,
                saturation_veh_s: [0.5; 8],
                downstream: std::array::from_fn(|_| DownstreamConfig::Tag("sink".into())),
                boundary_lanes: (1..=8).collect(),
            }],
            edges: vec![],
        };
        build_network(&cfg).unwrap()
    }

    fn record(step: usize, lane: usize, count: f64, inflow: f64, outflow: f64, demand: f64) -> FlowRecord {
        FlowRecord { step, intersection: 1, lane, count, inflow, outflow, demand }
    }

    fn params() -> MetricsParams {
        MetricsParams::new(120.0, 50.0)
    }

    #[test]
    fn no_records_is_an_error() {
        let topo = one_intersection([400.0; 8]);
        assert!(matches!(
            compute_kpis(&[], &topo, params(), 0.0),
            Err(MetricsError::EmptyRun)
        ));
    }

    #[test]
    fn average_density_is_the_lane_mean() {
        let topo = one_intersection([500.0; 8]);
        let records = vec![
            record(0, 1, 10.0, 0.0, 0.0, 0.0),
            record(0, 2, 30.0, 0.0, 0.0, 0.0),
        ];
        let kpis = compute_kpis(&records, &topo, params(), 0.0).unwrap();
        assert_abs_diff_eq!(kpis.steps[0].avg_density_veh_m, 0.04, epsilon = 1e-12);
    }

    #[test]
    fn step_kpis_are_invariant_under_record_order() {
        let topo = one_intersection([400.0; 8]);
        let mut records = Vec::new();
        for lane in 1..=8 {
            records.push(record(0, lane, lane as f64, 1.0, 2.0, 0.5));
        }
        let a = compute_kpis(&records, &topo, params(), 0.0).unwrap();
        records.reverse();
        let b = compute_kpis(&records, &topo, params(), 0.0).unwrap();
        assert_eq!(a.steps[0].avg_density_veh_m, b.steps[0].avg_density_veh_m);
        assert_eq!(a.steps[0].avg_flow_veh_s, b.steps[0].avg_flow_veh_s);
        assert_eq!(a.run.total_travel_time_min, b.run.total_travel_time_min);
    }

    #[test]
    fn free_flowing_vehicles_accrue_no_delay_or_stops() {
        let topo = one_intersection([400.0; 8]);
        // Each step: 5 vehicles present at start, all discharged; 5 new
        // arrivals land for the next step.
        let mut records = Vec::new();
        for step in 0..4 {
            records.push(record(step, 1, 5.0, 0.0, 5.0, 5.0));
        }
        let kpis = compute_kpis(&records, &topo, params(), 0.0).unwrap();
        assert_eq!(kpis.run.avg_delay_s_per_veh, 0.0);
        assert_eq!(kpis.run.avg_stops_per_veh, 0.0);
        assert_eq!(kpis.run.relative_loss_time, 0.0);
        for s in &kpis.steps {
            assert_eq!(s.relative_loss_time, 0.0);
            assert_eq!(s.carried_veh, 0.0);
        }
        // Presence time is exactly one service step per discharged vehicle.
        assert_abs_diff_eq!(
            kpis.run.total_travel_time_min,
            kpis.run.total_discharged_veh * 120.0 / 60.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn vehicles_held_three_cycles_accrue_three_cycles_of_delay() {
        let topo = one_intersection([400.0; 8]);
        let records = vec![
            record(0, 1, 10.0, 0.0, 0.0, 0.0), // 10 present, nothing moves
            record(1, 1, 10.0, 0.0, 0.0, 0.0),
            record(2, 1, 10.0, 0.0, 0.0, 0.0),
            record(3, 1, 0.0, 0.0, 10.0, 0.0), // all discharged
        ];
        let kpis = compute_kpis(&records, &topo, params(), 0.0).unwrap();
        assert_abs_diff_eq!(kpis.run.vehicles_served, 10.0, epsilon = 1e-12);
        // Three carried boundaries before service: 3 * 120 s each.
        assert_abs_diff_eq!(kpis.run.avg_delay_s_per_veh, 360.0, epsilon = 1e-12);
        assert_abs_diff_eq!(kpis.run.avg_stops_per_veh, 3.0, epsilon = 1e-12);
        assert!(kpis.run.relative_loss_time > 0.0);
    }

    #[test]
    fn travel_time_splits_into_delay_plus_service() {
        let topo = one_intersection([300.0; 8]);
        // Irregular but conserved flows.
        let records = vec![
            record(0, 1, 8.0, 0.0, 4.0, 2.0), // pre 10, out 4, dem 2
            record(0, 2, 3.0, 0.0, 1.0, 0.0), // pre 4, out 1
            record(1, 1, 6.0, 0.0, 3.0, 1.0), // pre 8, out 3
            record(1, 2, 4.0, 0.0, 2.0, 3.0), // pre 3, out 2
        ];
        let kpis = compute_kpis(&records, &topo, params(), 0.0).unwrap();
        let ttt_s = kpis.run.total_travel_time_min * 60.0;
        let service_s = kpis.run.total_discharged_veh * 120.0;
        assert_abs_diff_eq!(ttt_s, kpis.run.total_delay_veh_s + service_s, epsilon = 1e-9);
    }

    #[test]
    fn empty_network_step_reports_zeros_and_free_flow_speed() {
        let topo = one_intersection([400.0; 8]);
        let records: Vec<FlowRecord> =
            (1..=8).map(|lane| record(0, lane, 0.0, 0.0, 0.0, 0.0)).collect();
        let kpis = compute_kpis(&records, &topo, params(), 0.0).unwrap();
        let s = &kpis.steps[0];
        assert_eq!(s.avg_density_veh_m, 0.0);
        assert_eq!(s.avg_flow_veh_s, 0.0);
        assert_eq!(s.relative_loss_time, 0.0);
        assert_abs_diff_eq!(s.avg_speed_proxy_m_s, 50.0 / 3.6, epsilon = 1e-12);
    }

    #[test]
    fn unknown_lane_in_record_is_rejected() {
        let topo = one_intersection([400.0; 8]);
        let bad = vec![FlowRecord {
            step: 0,
            intersection: 2,
            lane: 1,
            count: 0.0,
            inflow: 0.0,
            outflow: 0.0,
            demand: 0.0,
        }];
        assert!(matches!(
            compute_kpis(&bad, &topo, params(), 0.0),
            Err(MetricsError::UnknownLane { intersection: 2, lane: 1 })
        ));
    }
}
