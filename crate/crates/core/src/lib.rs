//! Steady-state and transient analysis of radial distribution feeders in which
//! distributed generation can reverse the direction of power flow.
//!
//! The crate is organized around one sign convention, used everywhere: a load at
//! bus k with effective admittance y_k = g_k + i b_k consumes
//!
//! ```text
//! P_k = g_k |V_k|^2,    Q_k = b_k |V_k|^2
//! ```
//!
//! with P, Q > 0 meaning consumption and negative values meaning the bus feeds
//! power back into the feeder. With S = V I* the current such a load draws is
//! (g - i b) V, so a load admittance enters the bus admittance matrix as g - i b.
//! Capacitive (reactive-exporting) buses therefore carry b < 0.

pub mod algebraic;
pub mod cases;
pub mod cli;
pub mod dynsim;
pub mod homotopy;
pub mod net;
pub mod pecs;
pub mod scenario;
pub mod stability;
pub mod table;
mod trbdf2;

pub use algebraic::{
    AdmittanceState, AlgebraicSystem, BusConstraint, ConstraintSet, FreeVar, SolveStatus,
    VoltageSolution,
};
pub use cases::{builtin_case, case_names, BuiltinCase, Scenario, StartAt};
pub use dynsim::{
    simulate, simulate_from, state_derivatives, Event, PulseKind, Sample, SimModel, SimOptions,
    SimState, Termination, Trajectory,
};
pub use homotopy::{
    enumerate_zero_power_seeds, find_all_solutions, find_all_solutions_detailed, trace_branch,
    two_bus_closed_form, voltage_distance, BranchPoint, BranchTermination, SeedStatus,
    SolutionBranch, SolutionSet, SweepConfig, ZeroPowerSeed,
};
pub use net::{
    build_admittance_matrix, power_audit, slack_injection, validate_network, Branch, BusId,
    LoadModel, Network, PowerAudit, UltcDevice,
};
pub use pecs::{
    detect_entrapment, execute_pulse_recovery, lsivc_demonstration, search_pulse, shed_load,
    Detection, DetectorConfig, EmergencyReport, PulseCommand, PulseSearch, RecoveryOutcome,
};
pub use scenario::{
    load_network_file, load_scenario_file, network_from_toml, network_to_toml, scenario_from_toml,
    scenario_to_toml,
};
pub use stability::{
    attraction_probe, classified_solutions, classify_equilibrium, color_branch,
    load_state_jacobian, normal_equilibrium, phase_portrait, Classification, Equilibrium,
    PhaseField, PortraitAxes, ProbeOutcome,
};
