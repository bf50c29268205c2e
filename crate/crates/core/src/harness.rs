//! Scenario execution and run artifacts.
//!
//! [`run_scenario`] simulates one controller on one scenario: it builds the
//! network, seeds a fresh plant, and alternates measure / plan / step for the
//! configured number of cycles. Every controller sees an identical plant
//! because the plant, demand, and split schedules derive only from the
//! scenario seed, never from controller actions' timing.
//!
//! Artifacts are split by determinism guarantee. `flows.csv`, `steps.csv`,
//! `controls.csv`, `summary.csv`, and `manifest.json` depend only on the
//! configuration and seed and are byte-identical across reruns. Solver traces
//! (`traces.csv`, opt-in) carry wall-clock times and are exempt from that
//! guarantee.
//!
//! [`compare`] joins summary rows from several runs of the same scenario and
//! ranks the controllers per indicator; [`assert_ordering`] turns an expected
//! ranking such as `avg_delay_s_per_veh:dmpc_admm<fixed_time` into a check.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig};
use crate::controllers::{
    build_controller, ControllerError, ControllerKind, Measurement, SignalController,
};
use crate::metrics::{compute_kpis, KpiSeries, MetricsError, MetricsParams};
use crate::plant::{DemandSchedule, FlowRecord, Plant, PlantError};
use crate::scenario::to_pretty_json;
use crate::topology::{build_network, TopologyError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("summaries describe different runs: {0}")]
    MismatchedScenario(String),
    #[error("bad summary input: {0}")]
    BadSummary(String),
    #[error("bad ordering spec '{spec}': {detail}")]
    BadOrderingSpec { spec: String, detail: String },
    #[error("ordering violated: {0}")]
    OrderingViolation(String),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Run options and artifacts
// ---------------------------------------------------------------------------

/// Knobs that vary per invocation rather than per scenario.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Parent directory for artifacts; each run writes into
    /// `<out_dir>/<controller_name>/`. `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Replaces the scenario's seed for this run (and in its manifest).
    pub seed_override: Option<u64>,
    /// Also write `traces.csv` with per-solve diagnostics. Off by default
    /// because wall times are not reproducible.
    pub solver_traces: bool,
}

/// Everything needed to re-create and audit a run. `config` embeds the full
/// effective scenario (seed override applied), so a manifest alone suffices
/// to reproduce the run bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub controller: String,
    pub seed: u64,
    /// SHA-256 of the canonical JSON form of `config`.
    pub config_sha256: String,
    pub horizon_steps: usize,
    pub intersections: usize,
    pub package: String,
    pub package_version: String,
    /// Artifact files the run writes, relative to its output directory.
    pub files: Vec<String>,
    pub config: ScenarioConfig,
}

/// One applied control, 1-based intersection ids to match the config format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlRow {
    pub step: usize,
    pub intersection: usize,
    pub phase1_green_s: f64,
    pub phase2_green_s: f64,
    pub phase3_green_s: f64,
    pub phase4_green_s: f64,
}

/// Per-solve diagnostics; wall times make this file non-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub intersection: usize,
    pub wall_s: f64,
    pub iterations: usize,
    pub stop: String,
    pub objective: f64,
    pub forecast_held: bool,
}

/// One line of `summary.csv`. The identity columns (`scenario`, `seed`,
/// `config_sha256`) gate comparisons; the rest are run-level indicators.
/// Controller wall time is deliberately absent so the file stays
/// byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub controller: String,
    pub seed: u64,
    pub config_sha256: String,
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
}

/// In-memory results of one run, plus the paths written (if any).
#[derive(Debug)]
pub struct RunArtifacts {
    pub manifest: RunManifest,
    pub kpis: KpiSeries,
    pub records: Vec<FlowRecord>,
    pub controls: Vec<ControlRow>,
    pub traces: Vec<TraceRow>,
    pub written: Vec<PathBuf>,
}

impl RunArtifacts {
    pub fn summary_row(&self) -> SummaryRow {
        let r = &self.kpis.run;
        SummaryRow {
            scenario: self.manifest.scenario.clone(),
            controller: self.manifest.controller.clone(),
            seed: self.manifest.seed,
            config_sha256: self.manifest.config_sha256.clone(),
            steps: r.steps,
            avg_delay_s_per_veh: r.avg_delay_s_per_veh,
            avg_stops_per_veh: r.avg_stops_per_veh,
            total_travel_time_min: r.total_travel_time_min,
            relative_loss_time: r.relative_loss_time,
            avg_density_veh_m: r.avg_density_veh_m,
            avg_flow_veh_s: r.avg_flow_veh_s,
            vehicles_served: r.vehicles_served,
            total_delay_veh_s: r.total_delay_veh_s,
            total_discharged_veh: r.total_discharged_veh,
        }
    }
}

/// SHA-256 of the canonical JSON serialization, so semantically equal configs
/// hash equal regardless of the formatting of the file they came from.
pub fn config_hash(cfg: &ScenarioConfig) -> String {
    let digest = Sha256::digest(to_pretty_json(cfg).as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

// ---------------------------------------------------------------------------
// Running a scenario
// ---------------------------------------------------------------------------

/// Simulates `kind` on `cfg` and returns (and optionally writes) artifacts.
///
/// Each call builds a fresh plant from the scenario seed, so running several
/// controllers on the same config compares them against identical demand,
/// turn ratios, and initial state.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    kind: ControllerKind,
    opts: &RunOptions,
) -> Result<RunArtifacts, HarnessError> {
    cfg.validate()?;
    let mut effective = cfg.clone();
    if let Some(seed) = opts.seed_override {
        effective.simulation.seed = seed;
    }
    let seed = effective.simulation.seed;

    let topo = Arc::new(build_network(&effective.network)?);
    let mut plant = Plant::from_config(Arc::clone(&topo), &effective, seed)?;
    let demand = DemandSchedule::generate(
        &topo,
        &effective.demand.arrivals,
        effective.controller.cycle_s,
        seed,
        effective.simulation.horizon_steps,
    );
    let oracle = if kind.needs_oracle() { Some(plant.coupling_oracle()) } else { None };
    let mut controller: Box<dyn SignalController> =
        build_controller(kind, Arc::clone(&topo), &effective.controller, oracle)?;

    let n = topo.n();
    let steps = effective.simulation.horizon_steps;
    let mut records = Vec::with_capacity(steps * n * 8);
    let mut controls = Vec::with_capacity(steps * n);
    let mut traces = Vec::with_capacity(steps * n);
    let mut wall_sum = 0.0;

    for k in 0..steps {
        let measurements: Vec<Measurement> = (0..n)
            .map(|i| Measurement {
                step: k,
                counts: plant.counts_of(i),
                outflow: plant.outflow_matrix(i),
            })
            .collect();
        let outcome = controller.plan(&measurements)?;
        wall_sum += outcome.mean_wall_s();
        for (i, out) in outcome.outputs.iter().enumerate() {
            let [p1, p2, p3, p4] = out.greens;
            controls.push(ControlRow {
                step: k,
                intersection: i + 1,
                phase1_green_s: p1,
                phase2_green_s: p2,
                phase3_green_s: p3,
                phase4_green_s: p4,
            });
            traces.push(TraceRow {
                step: k,
                intersection: i + 1,
                wall_s: out.diagnostics.wall_s,
                iterations: out.diagnostics.iterations,
                stop: out.diagnostics.stop.map(|s| format!("{s:?}")).unwrap_or_default(),
                objective: out.diagnostics.objective,
                forecast_held: out.diagnostics.forecast_held,
            });
        }
        records.extend(plant.step_plant(&outcome.controls(), demand.at(k))?);
    }

    let mean_wall = if steps == 0 { 0.0 } else { wall_sum / steps as f64 };
    let kpis = compute_kpis(
        &records,
        &topo,
        MetricsParams::new(effective.controller.cycle_s, effective.simulation.free_flow_kmh),
        mean_wall,
    )?;

    let mut files =
        vec!["flows.csv".into(), "steps.csv".into(), "controls.csv".into(), "summary.csv".into()];
    if opts.solver_traces {
        files.push("traces.csv".into());
    }
    files.push("manifest.json".into());
    let manifest = RunManifest {
        scenario: effective.name.clone(),
        controller: kind.name().into(),
        seed,
        config_sha256: config_hash(&effective),
        horizon_steps: steps,
        intersections: n,
        package: env!("CARGO_PKG_NAME").into(),
        package_version: env!("CARGO_PKG_VERSION").into(),
        files,
        config: effective,
    };

    let mut artifacts =
        RunArtifacts { manifest, kpis, records, controls, traces, written: Vec::new() };
    if let Some(dir) = &opts.out_dir {
        artifacts.written = write_artifacts(&artifacts, dir, opts.solver_traces)?;
    }
    Ok(artifacts)
}

fn write_artifacts(
    art: &RunArtifacts,
    out_dir: &Path,
    solver_traces: bool,
) -> Result<Vec<PathBuf>, HarnessError> {
    let dir = out_dir.join(&art.manifest.controller);
    fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    let mut written = Vec::new();

    let flows = dir.join("flows.csv");
    {
        let mut w = csv::Writer::from_path(&flows)?;
        w.write_record(["step", "intersection", "lane", "count_veh", "inflow_veh", "outflow_veh", "demand_veh"])?;
        for r in &art.records {
            w.serialize((r.step, r.intersection, r.lane, r.count, r.inflow, r.outflow, r.demand))?;
        }
        w.flush().map_err(io_at(&flows))?;
    }
    written.push(flows);

    let steps = dir.join("steps.csv");
    {
        let mut w = csv::Writer::from_path(&steps)?;
        for s in &art.kpis.steps {
            w.serialize(s)?;
        }
        w.flush().map_err(io_at(&steps))?;
    }
    written.push(steps);

    let controls = dir.join("controls.csv");
    {
        let mut w = csv::Writer::from_path(&controls)?;
        for c in &art.controls {
            w.serialize(c)?;
        }
        w.flush().map_err(io_at(&controls))?;
    }
    written.push(controls);

    let summary = dir.join("summary.csv");
    write_summary_rows(&summary, &[art.summary_row()])?;
    written.push(summary);

    if solver_traces {
        let traces = dir.join("traces.csv");
        let mut w = csv::Writer::from_path(&traces)?;
        for t in &art.traces {
            w.serialize(t)?;
        }
        w.flush().map_err(io_at(&traces))?;
        written.push(traces);
    }

    let manifest = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&art.manifest)
        .map_err(|e| HarnessError::Config(ConfigError::Parse(e)))?;
    text.push('\n');
    fs::write(&manifest, text).map_err(io_at(&manifest))?;
    written.push(manifest);

    Ok(written)
}

/// Writes summary rows to one CSV; used both per run and for the combined
/// cross-controller summary.
pub fn write_summary_rows(path: &Path, rows: &[SummaryRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_at(path))?;
    Ok(())
}

pub fn read_summary_rows(path: &Path) -> Result<Vec<SummaryRow>, HarnessError> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows: Result<Vec<SummaryRow>, csv::Error> = reader.deserialize().collect();
    let rows = rows?;
    if rows.is_empty() {
        return Err(HarnessError::BadSummary(format!("{} contains no rows", path.display())));
    }
    Ok(rows)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(ConfigError::Parse(e)))
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    Ok(ScenarioConfig::from_json(&text)?)
}

// ---------------------------------------------------------------------------
// Comparing runs
// ---------------------------------------------------------------------------

/// Indicators the comparison ranks, with their preferred direction.
pub const COMPARED_METRICS: [(&str, bool); 7] = [
    ("avg_delay_s_per_veh", true),
    ("avg_stops_per_veh", true),
    ("total_travel_time_min", true),
    ("relative_loss_time", true),
    ("avg_density_veh_m", true),
    ("avg_flow_veh_s", false),
    ("total_discharged_veh", false),
];

fn metric_value(row: &SummaryRow, metric: &str) -> Option<f64> {
    Some(match metric {
        "avg_delay_s_per_veh" => row.avg_delay_s_per_veh,
        "avg_stops_per_veh" => row.avg_stops_per_veh,
        "total_travel_time_min" => row.total_travel_time_min,
        "relative_loss_time" => row.relative_loss_time,
        "avg_density_veh_m" => row.avg_density_veh_m,
        "avg_flow_veh_s" => row.avg_flow_veh_s,
        "vehicles_served" => row.vehicles_served,
        "total_delay_veh_s" => row.total_delay_veh_s,
        "total_discharged_veh" => row.total_discharged_veh,
        _ => return None,
    })
}

/// Summary rows verified to describe the same scenario, seed, and config.
#[derive(Debug, Clone)]
pub struct Comparison {
    rows: Vec<SummaryRow>,
}

/// Joins rows from several runs, insisting they share scenario name, seed,
/// and config hash — results from different scenarios are not comparable.
pub fn compare(rows: &[SummaryRow]) -> Result<Comparison, HarnessError> {
    if rows.len() < 2 {
        return Err(HarnessError::BadSummary(format!(
            "need at least two summary rows to compare, got {}",
            rows.len()
        )));
    }
    let head = &rows[0];
    for row in &rows[1..] {
        if row.config_sha256 != head.config_sha256
            || row.seed != head.seed
            || row.scenario != head.scenario
        {
            return Err(HarnessError::MismatchedScenario(format!(
                "'{}' (seed {}, hash {}..) vs '{}' (seed {}, hash {}..)",
                head.scenario,
                head.seed,
                &head.config_sha256[..8.min(head.config_sha256.len())],
                row.scenario,
                row.seed,
                &row.config_sha256[..8.min(row.config_sha256.len())],
            )));
        }
    }
    Ok(Comparison { rows: rows.to_vec() })
}

impl Comparison {
    pub fn rows(&self) -> &[SummaryRow] {
        &self.rows
    }

    /// Controllers ranked on one indicator, best first. `None` for an
    /// unknown indicator name.
    pub fn ranking(&self, metric: &str, lower_is_better: bool) -> Option<Vec<(String, f64)>> {
        let mut ranked: Vec<(String, f64)> = self
            .rows
            .iter()
            .map(|r| Some((r.controller.clone(), metric_value(r, metric)?)))
            .collect::<Option<Vec<_>>>()?;
        ranked.sort_by(|a, b| {
            let ord = a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal);
            if lower_is_better {
                ord
            } else {
                ord.reverse()
            }
        });
        Some(ranked)
    }

    /// Plain-text ranking tables, one block per indicator.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let scenario = &self.rows[0].scenario;
        let _ = writeln!(out, "scenario: {scenario} (seed {})", self.rows[0].seed);
        let width =
            self.rows.iter().map(|r| r.controller.len()).max().unwrap_or(10).max("controller".len());
        for (metric, lower) in COMPARED_METRICS {
            let ranked = self.ranking(metric, lower).expect("built-in metric name");
            let _ = writeln!(
                out,
                "\n{metric} ({} is better)",
                if lower { "lower" } else { "higher" }
            );
            for (rank, (name, value)) in ranked.iter().enumerate() {
                let _ = writeln!(out, "  {}. {name:width$}  {value:.6}", rank + 1);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Ordering assertions
// ---------------------------------------------------------------------------

/// Parsed form of `metric:best<next<...<worst`, read as "strictly better
/// than" in the metric's preferred direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderingSpec {
    pub metric: String,
    pub controllers: Vec<String>,
}

pub fn parse_ordering(spec: &str) -> Result<OrderingSpec, HarnessError> {
    let bad = |detail: &str| HarnessError::BadOrderingSpec {
        spec: spec.to_string(),
        detail: detail.to_string(),
    };
    let (metric, chain) =
        spec.split_once(':').ok_or_else(|| bad("expected 'metric:a<b<...'"))?;
    let metric = metric.trim();
    let probe = SummaryRow {
        scenario: String::new(),
        controller: String::new(),
        seed: 0,
        config_sha256: String::new(),
        steps: 0,
        avg_delay_s_per_veh: 0.0,
        avg_stops_per_veh: 0.0,
        total_travel_time_min: 0.0,
        relative_loss_time: 0.0,
        avg_density_veh_m: 0.0,
        avg_flow_veh_s: 0.0,
        vehicles_served: 0.0,
        total_delay_veh_s: 0.0,
        total_discharged_veh: 0.0,
    };
    if metric_value(&probe, metric).is_none() {
        return Err(bad(&format!("unknown metric '{metric}'")));
    }
    let controllers: Vec<String> =
        chain.split('<').map(|s| s.trim().to_string()).collect();
    if controllers.len() < 2 || controllers.iter().any(String::is_empty) {
        return Err(bad("expected at least two '<'-separated controller names"));
    }
    Ok(OrderingSpec { metric: metric.to_string(), controllers })
}

/// Checks that each listed controller strictly beats the next on the spec's
/// metric (respecting the metric's preferred direction).
pub fn assert_ordering(cmp: &Comparison, spec: &OrderingSpec) -> Result<(), HarnessError> {
    let lower_is_better = COMPARED_METRICS
        .iter()
        .find(|(m, _)| *m == spec.metric)
        .map(|(_, lower)| *lower)
        .unwrap_or(true);
    let value_of = |name: &str| -> Result<f64, HarnessError> {
        let row = cmp
            .rows
            .iter()
            .find(|r| r.controller == name)
            .ok_or_else(|| {
                HarnessError::BadSummary(format!("no summary row for controller '{name}'"))
            })?;
        metric_value(row, &spec.metric).ok_or_else(|| {
            HarnessError::BadSummary(format!("unknown metric '{}'", spec.metric))
        })
    };
    for pair in spec.controllers.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let (va, vb) = (value_of(a)?, value_of(b)?);
        let holds = if lower_is_better { va < vb } else { va > vb };
        if !holds {
            return Err(HarnessError::OrderingViolation(format!(
                "{}: expected {a} ({va:.6}) {} {b} ({vb:.6})",
                spec.metric,
                if lower_is_better { "<" } else { ">" },
            )));
        }
    }
    Ok(())
}
