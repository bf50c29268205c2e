//! Store-and-forward simulation of signalized urban networks, with a family
//! of signal controllers: fixed-time, max-pressure, road-aggregated MPC,
//! distributed lane-level MPC solved by per-intersection block coordinate
//! descent with dual ascent, and a centralized reference MPC with full model
//! knowledge.
//!
//! Each intersection has eight incoming lanes grouped into four fixed phases.
//! Lane counts evolve as `x(k+1) = x(k) - B(k) u(k) + C(k) z(k)` where `u`
//! holds the four green times, `z` stacks the green times of upstream
//! neighbors, and the plant clamps outflow at the vehicles actually present.
//! Controllers never see the true transfer matrices `C`; the distributed
//! controllers estimate them online and forecast them over the horizon.

pub mod admm;
pub mod config;
pub mod controllers;
pub mod estimation;
pub mod harness;
pub mod metrics;
pub mod plant;
pub mod prediction;
pub mod qp;
pub mod scenario;
pub mod topology;
