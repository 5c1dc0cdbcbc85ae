//! Power-flow modeling for radial unbalanced distribution feeders.
//!
//! The crate covers the full pipeline used by the `gridlin` CLI:
//!
//! - [`network`]: radial multi-phase topology, validation, and the signed
//!   incidence blocks `(A0, A)` over phase nodes and phase circuits.
//! - [`load`]: wye and delta load models, including the voltage-dependent
//!   delta transformation matrix and its balanced constant approximation.
//! - [`sweep`]: backward/forward-sweep solver for the exact nonlinear
//!   branch-flow equations; serves as the in-repo benchmark.
//! - [`linear`]: the feedback-updated linear power-flow model (first-order
//!   Taylor expansion around a measured operating point), its compact
//!   block-matrix form, and the lossless LinDistFlow baseline.
//! - [`sim`]: time-series closed-loop simulation with measurement noise and
//!   communication-failure injection, plus MAPE metrics.
//! - [`vvc`]: an online projected-gradient Volt-VAr controller driven by the
//!   linear model's voltage/reactive-power sensitivities.
//! - [`fixture`]: deterministic test feeders (3-bus example, chains, and a
//!   synthetic 123-bus unbalanced feeder).
//! - [`io`]: file formats (network JSON, operating points, load profiles,
//!   scenarios, reports) with canonical round-trippable serialization.

pub mod error;
pub mod fixture;
pub mod io;
pub mod linear;
pub mod load;
pub mod network;
pub mod sim;
pub mod sweep;
pub mod vvc;

#[cfg(feature = "testkit")]
pub mod testkit;

pub use error::{Error, Result};
pub use linear::{
    assemble_compact, lindistflow_params, modified_impedances, nonlinear_terms,
    sensitivity_blocks, solve_linear, update_parameters, voltage_sensitivity, CompactModel,
    LinearModelParams, LinearSolution, ModifiedImpedances, SegmentParams, SensitivityBlocks,
};
pub use load::{
    balanced_delta_transform, bus_injection, delta_transform, ConnSet, DeltaLoad, DeltaPair,
    DeltaTransform, LoadSet, WyeLoad,
};
pub use network::{
    balanced_unit_voltages, build_network, incidence_blocks, Bases, Bus, IncidenceBlocks,
    LineSegment, Network, Phase, PhaseSet,
};
pub use sim::{
    apply_measurement, mape, run_timeseries, BusScope, FailureModel, MeasurementModel,
    MeasurementState, SimulationReport, StepRecord, TimeSeries,
};
pub use sweep::{
    branch_flows_from_voltages, residual, solve_exact, solve_exact_with_trace, OperatingPoint,
    SweepOptions,
};
pub use vvc::{
    objective, run_vvc_offline, run_vvc_online, run_vvc_uncontrolled, vvc_step, PvFleet,
    VvcConfig, VvcReport, VvcStepRecord,
};

/// Complex scalar used throughout (per-unit phasors, impedances, powers).
pub type C64 = num_complex::Complex<f64>;
