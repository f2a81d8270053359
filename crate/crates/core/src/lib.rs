//! Software-process workflow enactment over a simulated hybrid cloud.
//!
//! The crate is split along the layers of the system:
//!
//! - [`model`]: the process definition language (parse, validate, expand, levels).
//! - [`engine`]: per-instance activity state machines driven by events.
//! - [`sim`]: a discrete-event simulator of public and private clouds with billing.
//! - [`sched`]: cost-minimizing placement and the timeout-driven elasticity controller.
//! - [`provenance`]: versioned content-addressed artifacts, the event log, replay and lineage.
//! - [`runtime`]: glue that drives instances through the simulator.
//! - [`service`]: the REST surface, its error mapping and report export.

pub mod config;
pub mod engine;
pub mod model;
pub mod money;
pub mod provenance;
pub mod report;
pub mod runtime;
pub mod sched;
pub mod service;
pub mod sim;

pub use engine::{ActivityState, EnactmentError, EventKind, ProcessInstance};
pub use model::{parse_process, Activity, ActivityKind, ProcessModel};
pub use money::Money;
pub use runtime::Runtime;
pub use sched::{next_scale, plan_placements, PlacementDecision, Scale};
pub use sim::{task_duration, CloudSim, TaskProfile};

/// The bundled `verify-release` sample process.
pub const SAMPLE_MODEL: &str = include_str!("../samples/verify-release.yaml");

/// The bundled default hybrid topology (one public, one private cloud).
pub const SAMPLE_TOPOLOGY: &str = include_str!("../samples/topology.yaml");
