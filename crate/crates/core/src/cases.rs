//! Built-in test feeders and their disturbance scenarios.

use crate::dynsim::{Event, PulseKind};
use crate::net::{Branch, LoadModel, Network, UltcDevice};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// How a scenario picks its initial state before the timeline starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum StartAt {
    /// The normal operating point: among all stable solutions at the base
    /// constraints, the one with the highest minimum bus voltage.
    Normal,
    /// The solution whose voltage magnitude at `bus` is closest to `vmag`.
    NearVoltage { bus: usize, vmag: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub describe: String,
    pub start: StartAt,
    pub timeline: Vec<Event>,
    pub t_end: f64,
    pub output_interval: f64,
}

#[derive(Clone, Debug)]
pub struct BuiltinCase {
    pub name: &'static str,
    pub describe: &'static str,
    pub network: Network,
    /// First entry is the default scenario.
    pub scenarios: Vec<Scenario>,
}

impl BuiltinCase {
    pub fn scenario(&self, name: &str) -> Option<&Scenario> {
        self.scenarios.iter().find(|s| s.name == name)
    }
}

pub fn case_names() -> &'static [&'static str] {
    &[
        "three_bus_base",
        "three_bus_alt",
        "three_bus_portrait",
        "thirteen_bus",
        "ultc_deadband",
        "ultc_taplimit",
        "switch_case",
    ]
}

/// Outage duration for the three-bus loss-of-DG scenario. Several times the
/// bus-2 time constants, so the fast states fully re-equilibrate in the
/// consumption regime before the setpoint is restored.
const THREE_BUS_OUTAGE_DURATION: f64 = 0.1;

/// Recovery pulse for the three-bus case: the same brief curtailment to net
/// consumption that models a DG outage. From the low equilibrium it drives g2
/// up past the high-sheet value within a few tau1, and on release the fast
/// subsystem lands on its only attracting sheet, the high-voltage one.
const THREE_BUS_RECOVERY_P: f64 = 0.5;
const THREE_BUS_RECOVERY_Q: f64 = 0.1;
const THREE_BUS_RECOVERY_DURATION: f64 = 0.1;

/// Recovery pulse for the thirteen-bus case at T2 = 11 s: same shape as the
/// entrapping disturbance (temporary consumption), duration 10x the load time
/// constant.
const THIRTEEN_BUS_RECOVERY_P: f64 = 0.5;
const THIRTEEN_BUS_RECOVERY_DURATION: f64 = 0.1;

/// Tap ratios placing the predisturbance ULTC operating points inside the
/// deadband (deadband case: controlled voltage 1.009; taplimit case: mid-band).
/// Calibrated against the initial algebraic solve.
const ULTC_DEADBAND_K_INIT: f64 = 1.046;
const ULTC_TAPLIMIT_K_INIT: f64 = 0.97;

fn steady(t_end: f64, dt: f64) -> Scenario {
    Scenario {
        name: "steady".into(),
        describe: "no disturbances; hold the initial operating point".into(),
        start: StartAt::Normal,
        timeline: vec![],
        t_end,
        output_interval: dt,
    }
}

fn three_bus_base() -> BuiltinCase {
    let network = Network {
        n_buses: 3,
        slack_bus: 1,
        slack_voltage: Complex64::new(1.0, 0.0),
        branches: vec![Branch::line(1, 2, 0.03, 0.15), Branch::line(2, 3, 0.33, 1.65)],
        loads: vec![
            None,
            Some(LoadModel::DynamicAdmittance { tau1: 0.01, tau2: 0.01, p_set: -3.284, q_set: -0.167 }),
            Some(LoadModel::DynamicAdmittance { tau1: 3.0, tau2: 0.001, p_set: -0.189, q_set: -0.222 }),
        ],
        ultc: vec![],
    };
    let loss_of_dg = Scenario {
        name: "loss_of_dg".into(),
        describe: "temporary loss of distributed generation at bus 2 at t = 15 s; \
                   the transient dies out in a fraction of a second and the system \
                   returns to the high-voltage equilibrium"
            .into(),
        start: StartAt::Normal,
        timeline: vec![Event::Pulse {
            bus: 2,
            kind: PulseKind::PowerSetpoint { p: 0.5, q: 0.1 },
            at: 15.0,
            duration: THREE_BUS_OUTAGE_DURATION,
        }],
        t_end: 30.0,
        output_interval: 0.01,
    };
    let attraction = Scenario {
        name: "attraction".into(),
        describe: "small setpoint pulse at the low-voltage equilibrium; the state \
                   moves away and returns, demonstrating nonlinear stability"
            .into(),
        start: StartAt::NearVoltage { bus: 2, vmag: 0.560 },
        timeline: vec![Event::Pulse {
            bus: 2,
            kind: PulseKind::PowerSetpoint { p: -3.286, q: -0.167 },
            at: 2.5,
            duration: 0.01,
        }],
        t_end: 6.0,
        output_interval: 0.002,
    };
    let pecs = Scenario {
        name: "pecs".into(),
        describe: "starting entrapped at the low-voltage equilibrium, a short \
                   curtailment pulse at 25 s recovers the system to the \
                   high-voltage equilibrium"
            .into(),
        start: StartAt::NearVoltage { bus: 2, vmag: 0.560 },
        timeline: vec![Event::Pulse {
            bus: 2,
            kind: PulseKind::PowerSetpoint { p: THREE_BUS_RECOVERY_P, q: THREE_BUS_RECOVERY_Q },
            at: 25.0,
            duration: THREE_BUS_RECOVERY_DURATION,
        }],
        t_end: 45.0,
        output_interval: 0.01,
    };
    BuiltinCase {
        name: "three_bus_base",
        describe: "two dynamic DG buses on a radial feeder; two stable voltage levels at bus 2",
        network,
        scenarios: vec![loss_of_dg, steady(10.0, 0.01), attraction, pecs],
    }
}

fn three_bus_alt() -> BuiltinCase {
    let network = Network {
        n_buses: 3,
        slack_bus: 1,
        slack_voltage: Complex64::new(1.0, 0.0),
        branches: vec![Branch::line(1, 2, 0.1464, 0.5160), Branch::line(2, 3, 0.1464, 0.5160)],
        loads: vec![
            None,
            Some(LoadModel::DynamicAdmittance { tau1: 0.07, tau2: 0.07, p_set: -0.7, q_set: -0.9 }),
            Some(LoadModel::DynamicAdmittance { tau1: 0.03, tau2: 0.03, p_set: -0.75, q_set: -0.45 }),
        ],
        ultc: vec![],
    };
    let fault = Scenario {
        name: "fault".into(),
        describe: "transient short circuit at bus 3 at t = 10 s for 0.08 s; the system \
                   transitions from the high- to the low-voltage equilibrium"
            .into(),
        start: StartAt::Normal,
        timeline: vec![Event::ShortCircuitFault {
            bus: 3,
            g_fault: 1e3,
            b_fault: 1e3,
            at: 10.0,
            duration: 0.08,
        }],
        t_end: 20.0,
        output_interval: 0.005,
    };
    let mut lsivc_timeline = fault.timeline.clone();
    lsivc_timeline.push(Event::LoadShed { bus: 2, dp: 0.2, dq: 0.0, at: 25.0 });
    let lsivc = Scenario {
        name: "lsivc".into(),
        describe: "after entrapment, shedding 0.2 p.u. of load at bus 2 pushes the net \
                   export past the branch tip and collapses the feeder"
            .into(),
        start: StartAt::Normal,
        timeline: lsivc_timeline,
        t_end: 32.0,
        output_interval: 0.005,
    };
    let mut safe_timeline = fault.timeline.clone();
    safe_timeline.push(Event::LoadShed { bus: 2, dp: 0.02, dq: 0.0, at: 25.0 });
    let lsivc_safe = Scenario {
        name: "lsivc_safe".into(),
        describe: "control run: shedding less than the tip margin leaves the system \
                   on the low branch without collapse"
            .into(),
        start: StartAt::Normal,
        timeline: safe_timeline,
        t_end: 32.0,
        output_interval: 0.005,
    };
    BuiltinCase {
        name: "three_bus_alt",
        describe: "uniform-line feeder used for the load-shedding-induced collapse demonstration",
        network,
        scenarios: vec![fault, steady(10.0, 0.01), lsivc, lsivc_safe],
    }
}

fn three_bus_portrait() -> BuiltinCase {
    let network = Network {
        n_buses: 3,
        slack_bus: 1,
        slack_voltage: Complex64::new(1.0, 0.0),
        branches: vec![Branch::line(1, 2, 0.095, 0.448), Branch::line(2, 3, 0.095, 0.448)],
        loads: vec![
            None,
            Some(LoadModel::DynamicAdmittance { tau1: 0.56, tau2: 0.489, p_set: 0.235, q_set: -0.145 }),
            Some(LoadModel::TiedAdmittance { g: -0.246, b_factor: 1.46, b_source: 2 }),
        ],
        ultc: vec![],
    };
    BuiltinCase {
        name: "three_bus_portrait",
        describe: "two-state system (g2, b2) with bus 3 slaved; four equilibria, two stable",
        network,
        scenarios: vec![steady(20.0, 0.02)],
    }
}

fn thirteen_bus() -> BuiltinCase {
    let lines: [(usize, usize, f64, f64); 12] = [
        (1, 4, 0.041, 0.131),
        (2, 3, 0.027, 0.070),
        (3, 4, 0.045, 0.100),
        (4, 5, 0.032, 0.070),
        (5, 6, 0.100, 0.240),
        (7, 8, 0.015, 0.050),
        (8, 9, 0.027, 0.070),
        (4, 9, 0.041, 0.131),
        (9, 10, 0.006, 0.020),
        (10, 11, 0.027, 0.070),
        (8, 12, 0.039, 0.090),
        (9, 13, 0.020, 0.065),
    ];
    // (p0, q0) at buses 3..=13. The constant ZIP terms are derived from the
    // normalization a + b + c = 1 (see README).
    let base: [(f64, f64); 11] = [
        (0.1, 0.1),   // 3
        (0.1, 0.1),   // 4
        (0.1, 0.1),   // 5
        (0.1, 0.1),   // 6
        (0.5, 0.5),   // 7
        (0.5, 0.3),   // 8
        (0.0, -1.0),  // 9
        (0.0, -1.0),  // 10
        (0.0, 0.0),   // 11
        (0.0, -0.5),  // 12
        (0.0, -1.0),  // 13
    ];
    let mut loads: Vec<Option<LoadModel>> = vec![
        None,
        Some(LoadModel::DynamicAdmittance { tau1: 0.01, tau2: 0.01, p_set: -0.85, q_set: 0.1 }),
    ];
    loads.extend(base.iter().map(|&(p0, q0)| {
        Some(LoadModel::Polynomial {
            p0,
            q0,
            a_p: 0.01,
            b_p: 0.01,
            c_p: 0.98,
            a_q: 0.005,
            b_q: 0.005,
            c_q: 0.99,
        })
    }));
    let network = Network {
        n_buses: 13,
        slack_bus: 1,
        slack_voltage: Complex64::new(1.0, 0.0),
        branches: lines.iter().map(|&(f, t, r, x)| Branch::line(f, t, r, x)).collect(),
        loads,
        ultc: vec![],
    };
    let entrapment = Scenario {
        name: "entrapment".into(),
        describe: "temporary loss of DG at bus 2 (consumption 0.5 p.u. for 0.1 s at t = 3 s); \
                   the system settles at the second, low-voltage solution"
            .into(),
        start: StartAt::Normal,
        timeline: vec![Event::Pulse {
            bus: 2,
            kind: PulseKind::PowerSetpoint { p: 0.5, q: 0.1 },
            at: 3.0,
            duration: 0.1,
        }],
        t_end: 10.0,
        output_interval: 0.005,
    };
    let mut pecs_timeline = entrapment.timeline.clone();
    pecs_timeline.push(Event::Pulse {
        bus: 2,
        kind: PulseKind::PowerSetpoint { p: THIRTEEN_BUS_RECOVERY_P, q: 0.1 },
        at: 11.0,
        duration: THIRTEEN_BUS_RECOVERY_DURATION,
    });
    let entrapment_pecs = Scenario {
        name: "entrapment_pecs".into(),
        describe: "entrapment at t = 3 s followed by the recovery pulse at t = 11 s; \
                   the feeder returns to the normal operating point"
            .into(),
        start: StartAt::Normal,
        timeline: pecs_timeline,
        t_end: 22.0,
        output_interval: 0.005,
    };
    BuiltinCase {
        name: "thirteen_bus",
        describe: "thirteen-bus radial feeder, one dynamic DG bus, eleven polynomial loads; \
                   four power-flow solutions",
        network,
        scenarios: vec![entrapment, steady(10.0, 0.01), entrapment_pecs],
    }
}

fn ultc_network(v1: f64, k_init: f64, load_g: f64, load_b: f64) -> Network {
    Network {
        n_buses: 3,
        slack_bus: 1,
        slack_voltage: Complex64::new(v1, 0.0),
        branches: vec![Branch::line(1, 2, 0.069, 0.258), Branch {
            from: 2,
            to: 3,
            // Small leakage keeps the transformer two-port well-posed.
            z: Complex64::new(0.0, 0.02),
            tap: Some(0),
        }],
        loads: vec![None, Some(LoadModel::zero()), Some(LoadModel::constant_impedance(load_g, load_b))],
        ultc: vec![UltcDevice {
            k_init,
            k_min: 0.83,
            k_max: 1.17,
            v_min: 0.985,
            v_max: 1.015,
            controlled_bus: 3,
            rate: 1.0,
        }],
    }
}

fn ultc_deadband() -> BuiltinCase {
    // Leading (capacitive) constant-impedance load, |y| = 0.4 at cos(phi) = 0.77.
    let sin_phi = (1.0f64 - 0.77 * 0.77).sqrt();
    let (g, b) = (0.4 * 0.77, -0.4 * sin_phi);
    let network = ultc_network(1.01, ULTC_DEADBAND_K_INIT, g, b);
    let pulse = Scenario {
        name: "pulse".into(),
        describe: "load admittance pulse of magnitude 0.2 p.u. for 0.1 s; the tap walks \
                   inside the window and the voltage settles at a second in-band value"
            .into(),
        start: StartAt::Normal,
        timeline: vec![Event::Pulse {
            bus: 3,
            kind: PulseKind::Shunt { dg: 0.2 * 0.77, db: -0.2 * sin_phi },
            at: 1.0,
            duration: 0.1,
        }],
        t_end: 10.0,
        output_interval: 0.005,
    };
    BuiltinCase {
        name: "ultc_deadband",
        describe: "tap changer with a 1.5% deadband; two in-band operating points",
        network,
        scenarios: vec![pulse, steady(10.0, 0.005)],
    }
}

fn ultc_taplimit() -> BuiltinCase {
    // Lagging load (cos(phi) = 0.8, |y| = 1.0) compensated by a fixed 0.6 p.u.
    // capacitor bank; net admittance (0.8, 0.0).
    let network = ultc_network(1.03, ULTC_TAPLIMIT_K_INIT, 0.8, 1.0 * 0.6 - 0.6);
    let pulse = Scenario {
        name: "pulse".into(),
        describe: "capacitor bank (0.6 p.u.) trips for 0.25 s at t = 2.4 s; the tap runs \
                   into its lower limit and settles at a different post-disturbance ratio"
            .into(),
        start: StartAt::Normal,
        timeline: vec![Event::Pulse {
            bus: 3,
            kind: PulseKind::Shunt { dg: 0.0, db: 0.6 },
            at: 2.4,
            duration: 0.25,
        }],
        t_end: 10.0,
        output_interval: 0.005,
    };
    BuiltinCase {
        name: "ultc_taplimit",
        describe: "tap changer driven into its lower limit; pre/post disturbance ratios differ",
        network,
        scenarios: vec![pulse, steady(10.0, 0.005)],
    }
}

fn switch_case() -> BuiltinCase {
    let network = Network {
        n_buses: 3,
        slack_bus: 1,
        slack_voltage: Complex64::new(1.0, 0.0),
        branches: vec![Branch::line(1, 2, 0.01, 0.2), Branch::line(2, 3, 0.01, 0.2)],
        loads: vec![
            None,
            Some(LoadModel::DynamicAdmittance { tau1: 0.01, tau2: 0.01, p_set: 0.1, q_set: 0.5 }),
            Some(LoadModel::DynamicAdmittance { tau1: 0.01, tau2: 0.01, p_set: 0.0, q_set: 0.0 }),
        ],
        ultc: vec![],
    };
    BuiltinCase {
        name: "switch_case",
        describe: "seed-enumeration demonstration network; bus 3 active power is the swept variable",
        network,
        scenarios: vec![steady(5.0, 0.01)],
    }
}

pub fn builtin_case(name: &str) -> Result<BuiltinCase, String> {
    match name {
        "three_bus_base" => Ok(three_bus_base()),
        "three_bus_alt" => Ok(three_bus_alt()),
        "three_bus_portrait" => Ok(three_bus_portrait()),
        "thirteen_bus" => Ok(thirteen_bus()),
        "ultc_deadband" => Ok(ultc_deadband()),
        "ultc_taplimit" => Ok(ultc_taplimit()),
        "switch_case" => Ok(switch_case()),
        other => Err(format!(
            "unknown case '{}'; available: {}",
            other,
            case_names().join(", ")
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_cases_build_and_have_default_scenario() {
        for name in case_names() {
            let c = builtin_case(name).unwrap();
            assert_eq!(c.name, *name);
            assert!(!c.scenarios.is_empty(), "{} has no scenarios", name);
        }
    }

    #[test]
    fn unknown_case_is_rejected_with_listing() {
        let err = builtin_case("nope").unwrap_err();
        assert!(err.contains("three_bus_base"));
    }

    #[test]
    fn thirteen_bus_loads_match_table() {
        let c = builtin_case("thirteen_bus").unwrap();
        match c.network.load(2).unwrap() {
            LoadModel::DynamicAdmittance { p_set, q_set, .. } => {
                assert_eq!(*p_set, -0.85);
                assert_eq!(*q_set, 0.1);
            }
            other => panic!("bus 2 should be dynamic, got {:?}", other),
        }
        match c.network.load(13).unwrap() {
            LoadModel::Polynomial { p0, q0, a_p, b_p, c_p, .. } => {
                assert_eq!(*p0, 0.0);
                assert_eq!(*q0, -1.0);
                assert_eq!(a_p + b_p + c_p, 1.0);
            }
            other => panic!("bus 13 should be polynomial, got {:?}", other),
        }
    }
}
