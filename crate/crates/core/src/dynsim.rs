//! Time-domain simulation of the load admittance dynamics coupled to the
//! algebraic network equations.
//!
//! Differential states are the (g, b) pairs of the dynamic loads plus one tap
//! ratio per ULTC device. Every right-hand-side evaluation re-solves the
//! network at the instantaneous admittances, so static buses (polynomial,
//! constant-power, tied) track the dynamic states algebraically.
//!
//! Discontinuities are handled by construction rather than by the error
//! controller: integration segments end exactly on event boundaries, and ULTC
//! mode changes are located by bisection on the dense interpolant, after
//! which the integrator restarts with a fresh Jacobian.

use crate::algebraic::{AdmittanceState, AlgebraicSystem, BusConstraint, ConstraintSet};
use crate::cases::{Scenario, StartAt};
use crate::net::{slack_injection, BusId, LoadModel, Network, UltcDevice};
use crate::trbdf2::{IntegrateError, Integrator};
use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Sustained voltage threshold below which the feeder counts as collapsed.
pub const COLLAPSE_VMAG: f64 = 0.01;
/// How long the voltage must stay below the threshold.
pub const COLLAPSE_HOLD: f64 = 0.1;
/// State magnitude treated as numerical blow-up.
pub const STATE_BLOWUP: f64 = 1e6;

/// Numerical hysteresis on the ULTC switching conditions. Far below any
/// physical tolerance; only suppresses chattering at located crossings.
const SWITCH_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum PulseKind {
    /// Replace the bus power setpoints for the pulse duration.
    PowerSetpoint { p: f64, q: f64 },
    /// Add a shunt admittance (load convention) for the pulse duration.
    Shunt { dg: f64, db: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Event {
    /// Permanent setpoint change; None leaves the coordinate untouched.
    SetpointStep { bus: BusId, p_set: Option<f64>, q_set: Option<f64>, at: f64 },
    Pulse { bus: BusId, kind: PulseKind, at: f64, duration: f64 },
    /// Shunt fault applied at a bus for a fixed clearing time.
    ShortCircuitFault { bus: BusId, g_fault: f64, b_fault: f64, at: f64, duration: f64 },
    /// Permanent reduction of consumption (dp > 0 removes load).
    LoadShed { bus: BusId, dp: f64, dq: f64, at: f64 },
    /// Temporarily drive a dynamic bus as an impedance-setpoint controller.
    SetControllerMode {
        bus: BusId,
        tau_g: f64,
        tau_b: f64,
        g_set: f64,
        b_set: f64,
        at: f64,
        duration: f64,
    },
}

impl Event {
    pub fn at(&self) -> f64 {
        match self {
            Event::SetpointStep { at, .. }
            | Event::Pulse { at, .. }
            | Event::ShortCircuitFault { at, .. }
            | Event::LoadShed { at, .. }
            | Event::SetControllerMode { at, .. } => *at,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub atol: f64,
    pub rtol: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { atol: 1e-8, rtol: 1e-6 }
    }
}

/// Live integration state: differential states plus the frozen ULTC modes and
/// the warm start for the inner algebraic solve.
#[derive(Clone, Debug)]
pub struct SimState {
    pub t: f64,
    pub x: DVector<f64>,
    pub modes: Vec<i8>,
    pub warm: AdmittanceState,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub t: f64,
    pub voltages: Vec<Complex64>,
    /// Realized admittance of every constrained bus at this instant.
    pub y: AdmittanceState,
    pub taps: Vec<f64>,
    /// Complex power delivered by the slack source.
    pub slack_power: Complex64,
    /// Fault and pulse shunts active at this instant.
    pub shunts: Vec<(BusId, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Termination {
    Completed,
    Collapsed { t: f64 },
    Failed { t: f64, reason: String },
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub n_buses: usize,
    pub samples: Vec<Sample>,
    pub termination: Termination,
    pub events_applied: Vec<(f64, String)>,
}

impl Trajectory {
    pub fn vmag(&self, sample: usize, bus: BusId) -> f64 {
        self.samples[sample].voltages[bus - 1].norm()
    }

    /// Last sample at or before t.
    pub fn at(&self, t: f64) -> &Sample {
        match self.samples.binary_search_by(|s| s.t.partial_cmp(&t).unwrap()) {
            Ok(i) => &self.samples[i],
            Err(0) => &self.samples[0],
            Err(i) => &self.samples[i - 1],
        }
    }

    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectory has at least the initial sample")
    }
}

pub struct Eval {
    pub dx: DVector<f64>,
    pub voltages: Vec<Complex64>,
    pub y: AdmittanceState,
}

/// Network plus the mutable overlays the event timeline operates on.
#[derive(Clone)]
pub struct SimModel {
    pub net: Network,
    pub shunts: Vec<(BusId, f64, f64)>,
    dyn_buses: Vec<BusId>,
}

impl SimModel {
    pub fn new(net: &Network) -> Self {
        let dyn_buses = net
            .constrained_buses()
            .into_iter()
            .filter(|&b| net.load(b).map(|l| l.is_dynamic()).unwrap_or(false))
            .collect();
        SimModel { net: net.clone(), shunts: Vec::new(), dyn_buses }
    }

    pub fn dynamic_buses(&self) -> &[BusId] {
        &self.dyn_buses
    }

    pub fn n_load_states(&self) -> usize {
        2 * self.dyn_buses.len()
    }

    pub fn n_states(&self) -> usize {
        self.n_load_states() + self.net.ultc.len()
    }

    fn state_index(&self, bus: BusId) -> Option<usize> {
        self.dyn_buses.iter().position(|&b| b == bus).map(|i| 2 * i)
    }

    pub fn taps_of(&self, x: &DVector<f64>) -> Vec<f64> {
        let off = self.n_load_states();
        (0..self.net.ultc.len()).map(|d| x[off + d]).collect()
    }

    /// Per-load-state time constants, in state order. dx[i] * tau[i] recovers
    /// the raw setpoint mismatch that drives the state.
    pub fn time_constants(&self) -> Vec<f64> {
        let mut taus = Vec::with_capacity(self.n_load_states());
        for &bus in &self.dyn_buses {
            match self.net.load(bus).unwrap() {
                LoadModel::DynamicAdmittance { tau1, tau2, .. } => {
                    taus.push(*tau1);
                    taus.push(*tau2);
                }
                LoadModel::ImpedanceSetpoint { tau_g, tau_b, .. } => {
                    taus.push(*tau_g);
                    taus.push(*tau_b);
                }
                other => unreachable!("non-dynamic load in state vector: {:?}", other),
            }
        }
        taus
    }

    /// Constraint set seen by the algebraic layer at the given states: dynamic
    /// and tied buses become fixed admittances, static models keep their kind.
    fn instantaneous_constraints(&self, x: &DVector<f64>) -> ConstraintSet {
        let mut cs = ConstraintSet::from_network(&self.net);
        for (i, bus) in self.net.constrained_buses().into_iter().enumerate() {
            match self.net.load(bus) {
                Some(LoadModel::DynamicAdmittance { .. })
                | Some(LoadModel::ImpedanceSetpoint { .. }) => {
                    let s = self.state_index(bus).unwrap();
                    cs.kinds[i] = BusConstraint::FixedAdmittance { g: x[s], b: x[s + 1] };
                }
                Some(LoadModel::TiedAdmittance { g, b_factor, b_source }) => {
                    let s = self
                        .state_index(*b_source)
                        .expect("tie source is a dynamic bus (validated)");
                    cs.kinds[i] = BusConstraint::FixedAdmittance { g: *g, b: b_factor * x[s + 1] };
                }
                _ => {}
            }
        }
        cs
    }

    /// Solve the network at states x and evaluate the load derivatives.
    /// Modes freeze the tap-rate directions. None when the inner solve fails.
    pub fn eval(&self, x: &DVector<f64>, modes: &[i8], warm: &AdmittanceState) -> Option<Eval> {
        self.eval_inner(x, modes, warm, false)
    }

    /// Like `eval`, but the static loads are re-settled by following their
    /// fast response from `warm` instead of continuing a Newton path. Used
    /// where `warm` is not a valid continuation guess: right after network
    /// discontinuities, and as a fallback when the continuation solve fails
    /// because the states have left the current solution sheet.
    pub fn eval_settled(
        &self,
        x: &DVector<f64>,
        modes: &[i8],
        warm: &AdmittanceState,
    ) -> Option<Eval> {
        self.eval_inner(x, modes, warm, true)
    }

    fn eval_inner(
        &self,
        x: &DVector<f64>,
        modes: &[i8],
        warm: &AdmittanceState,
        settle: bool,
    ) -> Option<Eval> {
        let taps = self.taps_of(x);
        let sys = AlgebraicSystem::new(&self.net, &taps, &self.shunts);
        let cs = self.instantaneous_constraints(x);
        let (y, vs) = if settle {
            sys.settle_admittances(&cs, warm)
        } else {
            sys.solve_newton(&cs, warm)
        };
        if !vs.converged {
            return None;
        }
        let mut dx = DVector::zeros(self.n_states());
        for (i, &bus) in self.dyn_buses.iter().enumerate() {
            let s = 2 * i;
            let vm2 = vs.voltages[bus - 1].norm_sqr();
            match self.net.load(bus).unwrap() {
                LoadModel::DynamicAdmittance { tau1, tau2, p_set, q_set } => {
                    dx[s] = (p_set - x[s] * vm2) / tau1;
                    dx[s + 1] = (q_set - x[s + 1] * vm2) / tau2;
                }
                LoadModel::ImpedanceSetpoint { tau_g, tau_b, g_set, b_set } => {
                    dx[s] = (g_set - x[s]) / tau_g;
                    dx[s + 1] = (b_set - x[s + 1]) / tau_b;
                }
                other => unreachable!("non-dynamic load in state vector: {:?}", other),
            }
        }
        let off = self.n_load_states();
        for (d, dev) in self.net.ultc.iter().enumerate() {
            dx[off + d] = f64::from(modes[d]) * dev.rate;
        }
        Some(Eval { dx, voltages: vs.voltages, y })
    }

    /// Tap-rate direction demanded by the device at this operating point.
    fn device_mode(dev: &UltcDevice, v_ctl: f64, k: f64) -> i8 {
        if v_ctl < dev.v_min - SWITCH_EPS && k > dev.k_min + SWITCH_EPS {
            -1
        } else if v_ctl > dev.v_max + SWITCH_EPS && k < dev.k_max - SWITCH_EPS {
            1
        } else {
            0
        }
    }

    fn modes_at(&self, x: &DVector<f64>, voltages: &[Complex64]) -> Vec<i8> {
        let off = self.n_load_states();
        self.net
            .ultc
            .iter()
            .enumerate()
            .map(|(d, dev)| {
                Self::device_mode(dev, voltages[dev.controlled_bus - 1].norm(), x[off + d])
            })
            .collect()
    }

    /// Equilibrium state vector from solved admittances and tap ratios.
    pub fn pack(&self, y: &AdmittanceState, taps: &[f64]) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_states());
        for (i, &bus) in self.dyn_buses.iter().enumerate() {
            let (g, b) = y.gb[self.net.constrained_index(bus)];
            x[2 * i] = g;
            x[2 * i + 1] = b;
        }
        let off = self.n_load_states();
        for (d, &k) in taps.iter().enumerate() {
            x[off + d] = k;
        }
        x
    }

    /// Starting state per the scenario: the normal solution reached by Newton
    /// from the open network, or the known solution closest to a requested
    /// voltage magnitude.
    pub fn initial_state(&self, start: &StartAt) -> Result<SimState, String> {
        let targets = ConstraintSet::from_network(&self.net);
        let sys = AlgebraicSystem::from_network(&self.net);
        let m = self.net.n_constrained();
        let (y, vs) = match start {
            StartAt::Normal => {
                let (y, vs) = sys.solve_newton(&targets, &AdmittanceState::zeros(m));
                if !vs.converged {
                    return Err("no normal operating point: Newton failed from the open network".into());
                }
                (y, vs)
            }
            StartAt::NearVoltage { bus, vmag } => {
                let sols = crate::homotopy::find_all_solutions(&self.net, &targets);
                let best = sols
                    .into_iter()
                    .min_by(|a, b| {
                        (a.1.vmag(*bus) - vmag)
                            .abs()
                            .partial_cmp(&(b.1.vmag(*bus) - vmag).abs())
                            .unwrap()
                    })
                    .ok_or("no power-flow solution exists for this network")?;
                best
            }
        };
        let taps = self.net.initial_taps();
        let x = self.pack(&y, &taps);
        let modes = self.modes_at(&x, &vs.voltages);
        Ok(SimState { t: 0.0, x, modes, warm: y })
    }
}

/// Load-state derivatives with taps frozen (modes zero), for equilibrium and
/// stability work. None when the algebraic layer fails.
pub fn state_derivatives(
    model: &SimModel,
    x: &DVector<f64>,
    warm: &AdmittanceState,
) -> Option<DVector<f64>> {
    let modes = vec![0i8; model.net.ultc.len()];
    model.eval(x, &modes, warm).map(|e| e.dx)
}

#[derive(Clone, Debug)]
enum Action {
    Setpoint { bus: BusId, p: Option<f64>, q: Option<f64> },
    PulseSetpointOn { id: usize, bus: BusId, p: f64, q: f64 },
    PulseSetpointOff { id: usize, bus: BusId },
    ShuntOn { id: usize, bus: BusId, g: f64, b: f64 },
    ShuntOff { id: usize },
    Shed { bus: BusId, dp: f64, dq: f64 },
    ControllerOn { id: usize, bus: BusId, model: LoadModel },
    ControllerOff { id: usize, bus: BusId },
}

fn setpoints_replaced(model: &LoadModel, p: Option<f64>, q: Option<f64>) -> Result<LoadModel, String> {
    match *model {
        LoadModel::DynamicAdmittance { tau1, tau2, p_set, q_set } => Ok(LoadModel::DynamicAdmittance {
            tau1,
            tau2,
            p_set: p.unwrap_or(p_set),
            q_set: q.unwrap_or(q_set),
        }),
        LoadModel::Polynomial { p0, q0, a_p, b_p, c_p, a_q, b_q, c_q } => Ok(LoadModel::Polynomial {
            p0: p.unwrap_or(p0),
            q0: q.unwrap_or(q0),
            a_p,
            b_p,
            c_p,
            a_q,
            b_q,
            c_q,
        }),
        LoadModel::ConstantPower { p: p_old, q: q_old } => Ok(LoadModel::ConstantPower {
            p: p.unwrap_or(p_old),
            q: q.unwrap_or(q_old),
        }),
        ref other => Err(format!("bus carries {:?}, which has no power setpoints", other)),
    }
}

/// Expand the timeline into a time-sorted list of boundary actions. Reverts of
/// zero-duration pulses stay directly after their application.
fn boundaries(timeline: &[Event], t_end: f64) -> Result<Vec<(f64, Action)>, String> {
    let mut out: Vec<(f64, Action)> = Vec::new();
    for (id, ev) in timeline.iter().enumerate() {
        match ev {
            Event::SetpointStep { bus, p_set, q_set, at } => {
                out.push((*at, Action::Setpoint { bus: *bus, p: *p_set, q: *q_set }));
            }
            Event::Pulse { bus, kind, at, duration } => {
                if *duration < 0.0 {
                    return Err("pulse duration must be nonnegative".into());
                }
                match kind {
                    PulseKind::PowerSetpoint { p, q } => {
                        out.push((*at, Action::PulseSetpointOn { id, bus: *bus, p: *p, q: *q }));
                        out.push((*at + *duration, Action::PulseSetpointOff { id, bus: *bus }));
                    }
                    PulseKind::Shunt { dg, db } => {
                        out.push((*at, Action::ShuntOn { id, bus: *bus, g: *dg, b: *db }));
                        out.push((*at + *duration, Action::ShuntOff { id }));
                    }
                }
            }
            Event::ShortCircuitFault { bus, g_fault, b_fault, at, duration } => {
                if *duration <= 0.0 {
                    return Err("fault duration must be positive".into());
                }
                out.push((*at, Action::ShuntOn { id, bus: *bus, g: *g_fault, b: *b_fault }));
                out.push((*at + *duration, Action::ShuntOff { id }));
            }
            Event::LoadShed { bus, dp, dq, at } => {
                out.push((*at, Action::Shed { bus: *bus, dp: *dp, dq: *dq }));
            }
            Event::SetControllerMode { bus, tau_g, tau_b, g_set, b_set, at, duration } => {
                if *duration <= 0.0 {
                    return Err("controller-mode duration must be positive".into());
                }
                let model = LoadModel::ImpedanceSetpoint {
                    tau_g: *tau_g,
                    tau_b: *tau_b,
                    g_set: *g_set,
                    b_set: *b_set,
                };
                out.push((*at, Action::ControllerOn { id, bus: *bus, model }));
                out.push((*at + *duration, Action::ControllerOff { id, bus: *bus }));
            }
        }
    }
    out.retain(|(t, _)| *t <= t_end + 1e-12);
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(out)
}

struct Driver<'m> {
    model: &'m mut SimModel,
    snapshots: BTreeMap<usize, LoadModel>,
    active_shunts: BTreeMap<usize, (BusId, f64, f64)>,
    events_applied: Vec<(f64, String)>,
}

impl Driver<'_> {
    fn rebuild_shunts(&mut self) {
        self.model.shunts = self.active_shunts.values().copied().collect();
    }

    fn apply(&mut self, t: f64, action: &Action) -> Result<(), String> {
        let describe;
        match action {
            Action::Setpoint { bus, p, q } => {
                let current = self
                    .model
                    .net
                    .load(*bus)
                    .ok_or(format!("setpoint step on bus {} which has no load", bus))?
                    .clone();
                *self.model.net.loads[*bus - 1].as_mut().unwrap() =
                    setpoints_replaced(&current, *p, *q)?;
                describe = format!("setpoint step at bus {}", bus);
            }
            Action::PulseSetpointOn { id, bus, p, q } => {
                let current = self
                    .model
                    .net
                    .load(*bus)
                    .ok_or(format!("setpoint pulse on bus {} which has no load", bus))?
                    .clone();
                self.snapshots.insert(*id, current.clone());
                *self.model.net.loads[*bus - 1].as_mut().unwrap() =
                    setpoints_replaced(&current, Some(*p), Some(*q))?;
                describe = format!("setpoint pulse on at bus {} (p = {}, q = {})", bus, p, q);
            }
            Action::PulseSetpointOff { id, bus } => {
                let snap = self.snapshots.remove(id).expect("pulse applied before revert");
                *self.model.net.loads[*bus - 1].as_mut().unwrap() = snap;
                describe = format!("setpoint pulse off at bus {}", bus);
            }
            Action::ShuntOn { id, bus, g, b } => {
                if *bus == self.model.net.slack_bus {
                    return Err("shunt events at the slack bus have no effect".into());
                }
                self.active_shunts.insert(*id, (*bus, *g, *b));
                self.rebuild_shunts();
                describe = format!("shunt on at bus {} (g = {}, b = {})", bus, g, b);
            }
            Action::ShuntOff { id } => {
                let (bus, ..) = self.active_shunts.remove(id).expect("shunt applied before revert");
                self.rebuild_shunts();
                describe = format!("shunt off at bus {}", bus);
            }
            Action::Shed { bus, dp, dq } => {
                let current = self
                    .model
                    .net
                    .load(*bus)
                    .ok_or(format!("load shed at bus {} which has no load", bus))?
                    .clone();
                let (p_old, q_old) = match current {
                    LoadModel::DynamicAdmittance { p_set, q_set, .. } => (p_set, q_set),
                    LoadModel::Polynomial { p0, q0, .. } => (p0, q0),
                    LoadModel::ConstantPower { p, q } => (p, q),
                    ref other => {
                        return Err(format!("bus {} carries {:?}, which cannot shed power", bus, other))
                    }
                };
                *self.model.net.loads[*bus - 1].as_mut().unwrap() =
                    setpoints_replaced(&current, Some(p_old - dp), Some(q_old - dq))?;
                describe = format!("load shed at bus {} (dp = {}, dq = {})", bus, dp, dq);
            }
            Action::ControllerOn { id, bus, model } => {
                let current = self
                    .model
                    .net
                    .load(*bus)
                    .ok_or(format!("controller mode at bus {} which has no load", bus))?
                    .clone();
                if !current.is_dynamic() {
                    return Err(format!(
                        "controller mode requires a dynamic load at bus {}, found {:?}",
                        bus, current
                    ));
                }
                self.snapshots.insert(*id, current);
                *self.model.net.loads[*bus - 1].as_mut().unwrap() = model.clone();
                describe = format!("impedance controller on at bus {}", bus);
            }
            Action::ControllerOff { id, bus } => {
                let snap = self.snapshots.remove(id).expect("controller applied before revert");
                *self.model.net.loads[*bus - 1].as_mut().unwrap() = snap;
                describe = format!("impedance controller off at bus {}", bus);
            }
        }
        self.events_applied.push((t, describe));
        Ok(())
    }
}

/// Simulate a scenario from its own starting point.
pub fn simulate(net: &Network, scenario: &Scenario, opts: &SimOptions) -> Result<Trajectory, String> {
    let mut model = SimModel::new(net);
    let start = model.initial_state(&scenario.start)?;
    Ok(simulate_from(
        &mut model,
        start,
        &scenario.timeline,
        scenario.t_end,
        scenario.output_interval,
        opts,
    ))
}

/// Core driver: integrates from an explicit state through a timeline. The
/// model is mutated by the events; the caller keeps ownership to inspect the
/// post-run configuration.
pub fn simulate_from(
    model: &mut SimModel,
    start: SimState,
    timeline: &[Event],
    t_end: f64,
    dt_out: f64,
    opts: &SimOptions,
) -> Trajectory {
    assert!(dt_out > 0.0, "output interval must be positive");
    let n_buses = model.net.n_buses;
    let bounds = match boundaries(timeline, t_end) {
        Ok(b) => b,
        Err(reason) => {
            return Trajectory {
                n_buses,
                samples: vec![],
                termination: Termination::Failed { t: start.t, reason },
                events_applied: vec![],
            }
        }
    };

    let mut driver = Driver {
        model,
        snapshots: BTreeMap::new(),
        active_shunts: BTreeMap::new(),
        events_applied: Vec::new(),
    };

    let mut t = start.t;
    let mut x = start.x;
    let mut modes = start.modes;
    let mut warm = start.warm;
    let mut samples: Vec<Sample> = Vec::new();
    let mut next_sample = 0usize;
    let mut low_since: Option<f64> = None;
    let mut bound_idx = 0usize;
    let mut integ = Integrator::new(opts.atol, opts.rtol);
    let mut steps_left: u64 = 2_000_000;

    macro_rules! fail {
        ($t:expr, $reason:expr) => {
            return Trajectory {
                n_buses,
                samples,
                termination: Termination::Failed { t: $t, reason: $reason },
                events_applied: driver.events_applied,
            }
        };
    }

    // Record a sample at an exact time from a state vector.
    macro_rules! record {
        ($ts:expr, $xs:expr) => {{
            let xs: &DVector<f64> = $xs;
            let e = driver
                .model
                .eval(xs, &modes, &warm)
                .or_else(|| driver.model.eval_settled(xs, &modes, &warm));
            match e {
                Some(e) => {
                    let taps = driver.model.taps_of(xs);
                    let slack_power =
                        slack_injection(&driver.model.net, &taps, &driver.model.shunts, &e.voltages);
                    samples.push(Sample {
                        t: $ts,
                        voltages: e.voltages,
                        y: e.y,
                        taps,
                        slack_power,
                        shunts: driver.model.shunts.clone(),
                    });
                    true
                }
                None => false,
            }
        }};
    }

    loop {
        // Emit samples due at the current time (initial point, boundary landings).
        while next_sample as f64 * dt_out <= t + 1e-9 {
            let ts = next_sample as f64 * dt_out;
            if !record!(ts, &x) {
                fail!(t, "network solve failed at a sample point".into());
            }
            next_sample += 1;
            if ts >= t_end - 1e-9 {
                return Trajectory {
                    n_buses,
                    samples,
                    termination: Termination::Completed,
                    events_applied: driver.events_applied,
                };
            }
        }

        // Apply any boundaries due now, then continue integrating.
        while bound_idx < bounds.len() && bounds[bound_idx].0 <= t + 1e-12 {
            let (tb, action) = bounds[bound_idx].clone();
            if let Err(reason) = driver.apply(tb, &action) {
                fail!(t, reason);
            }
            bound_idx += 1;
            // Re-settle the algebraic layer and controller modes at the jump.
            // The fast-response settle, not a warm Newton continuation: the
            // event may have moved the network, and the loads land on
            // whichever solution sheet their fast dynamics actually reach.
            match driver.model.eval_settled(&x, &modes, &warm) {
                Some(e) => {
                    warm = e.y.clone();
                    modes = driver.model.modes_at(&x, &e.voltages);
                }
                None => fail!(t, "network solve failed right after an event".into()),
            }
            integ.reset_after_discontinuity();
        }

        let t_next_bound = bounds.get(bound_idx).map(|(tb, _)| *tb).unwrap_or(f64::INFINITY);
        let mut t_limit = t_next_bound.min(t_end);
        if modes.iter().any(|&m| m != 0) {
            // Keep steps short while a tap is in motion so crossings stay
            // bracketed one per step.
            t_limit = t_limit.min(t + 0.005);
        }
        debug_assert!(t_limit > t);

        let warm_cell = RefCell::new(warm.clone());
        let step = {
            let model_ref: &SimModel = driver.model;
            let modes_ref = &modes;
            let mut rhs = |tt: f64, xx: &DVector<f64>| {
                let _ = tt;
                let guess = warm_cell.borrow().clone();
                match model_ref.eval(xx, modes_ref, &guess) {
                    Some(e) => {
                        *warm_cell.borrow_mut() = e.y;
                        Some(e.dx)
                    }
                    // The trial state has left the current solution sheet
                    // (fold crossing). Follow the fast load response to the
                    // sheet it actually reaches, but leave the warm start
                    // alone: trial states may be rejected, and the accepted
                    // endpoint decides whether the sheet change sticks.
                    None => model_ref.eval_settled(xx, modes_ref, &guess).map(|e| e.dx),
                }
            };
            integ.step(&mut rhs, t, &x, t_limit)
        };
        let step = match step {
            Ok(s) => s,
            Err(IntegrateError::StepSizeUnderflow { t: tf }) => {
                fail!(tf, "step size underflow (state left the solvable region)".into())
            }
            Err(IntegrateError::RhsFailedAtState { t: tf }) => {
                fail!(tf, "network equations unsolvable at the current state".into())
            }
        };
        steps_left -= 1;
        if steps_left == 0 {
            fail!(t, "step budget exhausted".into());
        }

        let mut t1 = step.t1();
        let mut x1 = step.x1.clone();

        // Evaluate the accepted endpoint for mode changes and collapse.
        let mut sheet_jumped = false;
        let e1 = match driver.model.eval(&x1, &modes, &warm) {
            Some(e) => e,
            None => match driver.model.eval_settled(&x1, &modes, &warm) {
                Some(e) => {
                    sheet_jumped = true;
                    e
                }
                None => fail!(t1, "network solve failed at an accepted step".into()),
            },
        };
        let mut end_voltages = e1.voltages;
        warm = e1.y;
        if sheet_jumped {
            // The algebraic layer moved to another sheet inside this step;
            // the step history and Jacobian are stale there.
            integ.reset_after_discontinuity();
        }

        if !driver.model.net.ultc.is_empty() {
            let target = driver.model.modes_at(&x1, &end_voltages);
            if target != modes {
                // Earliest crossing by bisection on the dense interpolant.
                let (mut lo, mut hi) = (t, t1);
                for _ in 0..60 {
                    let tm = 0.5 * (lo + hi);
                    let xm = step.interpolate(tm);
                    match driver.model.eval(&xm, &modes, &warm) {
                        Some(em) => {
                            if driver.model.modes_at(&xm, &em.voltages) != modes {
                                hi = tm;
                            } else {
                                lo = tm;
                            }
                        }
                        None => hi = tm,
                    }
                    if hi - lo < 1e-12 * (1.0 + t.abs()) {
                        break;
                    }
                }
                t1 = hi;
                x1 = step.interpolate(t1);
                // Clamp taps onto their range; interpolation may overshoot by
                // the bisection tolerance.
                let off = driver.model.n_load_states();
                for (d, dev) in driver.model.net.ultc.iter().enumerate() {
                    x1[off + d] = x1[off + d].clamp(dev.k_min, dev.k_max);
                }
                let et = driver
                    .model
                    .eval(&x1, &modes, &warm)
                    .or_else(|| driver.model.eval_settled(&x1, &modes, &warm));
                match et {
                    Some(e) => {
                        end_voltages = e.voltages;
                        warm = e.y;
                        modes = driver.model.modes_at(&x1, &end_voltages);
                    }
                    None => fail!(t1, "network solve failed at a tap switching point".into()),
                }
                integ.reset_after_discontinuity();
            }
        }

        // Samples inside the accepted span, via dense output.
        while (next_sample as f64) * dt_out <= t1 + 1e-9 {
            let ts = next_sample as f64 * dt_out;
            if ts < t - 1e-9 {
                next_sample += 1;
                continue;
            }
            let xs = if ts >= t1 - 1e-12 { x1.clone() } else { step.interpolate(ts) };
            if !record!(ts, &xs) {
                fail!(ts, "network solve failed at a sample point".into());
            }
            next_sample += 1;
            if ts >= t_end - 1e-9 {
                return Trajectory {
                    n_buses,
                    samples,
                    termination: Termination::Completed,
                    events_applied: driver.events_applied,
                };
            }
        }

        // Collapse and blow-up detection at the accepted endpoint.
        if x1.iter().any(|v| !v.is_finite()) {
            fail!(t1, "state vector is no longer finite".into());
        }
        let min_v = end_voltages.iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min);
        if min_v < COLLAPSE_VMAG {
            let since = *low_since.get_or_insert(t1);
            if t1 - since >= COLLAPSE_HOLD {
                return Trajectory {
                    n_buses,
                    samples,
                    termination: Termination::Collapsed { t: t1 },
                    events_applied: driver.events_applied,
                };
            }
        } else {
            low_since = None;
        }
        if x1.amax() > STATE_BLOWUP {
            return Trajectory {
                n_buses,
                samples,
                termination: Termination::Collapsed { t: t1 },
                events_applied: driver.events_applied,
            };
        }

        t = t1;
        x = x1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::builtin_case;
    use crate::net::power_audit;

    fn run(case: &str, scenario: &str) -> Trajectory {
        let c = builtin_case(case).unwrap();
        let s = c.scenario(scenario).unwrap();
        simulate(&c.network, s, &SimOptions::default()).unwrap()
    }

    #[test]
    fn steady_state_does_not_drift() {
        for case in ["three_bus_base", "three_bus_alt", "switch_case"] {
            let tr = run(case, "steady");
            assert_eq!(tr.termination, Termination::Completed, "{case}");
            let first = tr.samples.first().unwrap();
            let last = tr.last();
            for (a, b) in first.y.gb.iter().zip(&last.y.gb) {
                assert!((a.0 - b.0).abs() <= 1e-6, "{case}: g drifted {} -> {}", a.0, b.0);
                assert!((a.1 - b.1).abs() <= 1e-6, "{case}: b drifted {} -> {}", a.1, b.1);
            }
        }
    }

    #[test]
    fn power_balances_at_every_sample() {
        let tr = run("three_bus_base", "loss_of_dg");
        assert_eq!(tr.termination, Termination::Completed);
        let net = builtin_case("three_bus_base").unwrap().network;
        for s in &tr.samples {
            let audit = power_audit(&net, &s.taps, &s.shunts, &s.voltages, &s.y);
            assert!(
                audit.residual() <= 1e-6,
                "imbalance {} at t = {}",
                audit.residual(),
                s.t
            );
        }
    }

    #[test]
    fn zero_duration_pulse_is_a_no_op() {
        let c = builtin_case("three_bus_base").unwrap();
        let mut s = c.scenario("steady").unwrap().clone();
        let base = simulate(&c.network, &s, &SimOptions::default()).unwrap();
        s.timeline.push(Event::Pulse {
            bus: 2,
            kind: PulseKind::PowerSetpoint { p: 123.0, q: -45.0 },
            at: 5.0,
            duration: 0.0,
        });
        let pulsed = simulate(&c.network, &s, &SimOptions::default()).unwrap();
        assert_eq!(base.samples.len(), pulsed.samples.len());
        for (a, b) in base.samples.iter().zip(&pulsed.samples) {
            let d = (a.voltages[1] - b.voltages[1]).norm();
            assert!(d <= 1e-7, "t = {}: |dV2| = {}", a.t, d);
        }
    }

    #[test]
    fn loss_of_dg_transient_dies_out_quickly() {
        let tr = run("three_bus_base", "loss_of_dg");
        assert_eq!(tr.termination, Termination::Completed);
        let before = tr.at(14.9).voltages[1].norm();
        let during = tr.at(15.05).voltages[1].norm();
        let shortly_after = tr.at(15.5).voltages[1].norm();
        let after = tr.last().voltages[1].norm();
        assert!((before - 1.012).abs() < 0.02, "pre-disturbance |V2| = {before}");
        assert!((during - before).abs() > 0.005, "pulse had no visible effect");
        // The bus-2 time constants are 10 ms, so the excursion is gone within
        // a few hundred ms of the setpoint coming back.
        assert!((shortly_after - before).abs() < 1e-3, "still off at 15.5 s: {shortly_after}");
        assert!((after - before).abs() < 1e-6, "did not return: {after}");
    }

    #[test]
    fn fault_moves_alt_case_to_its_second_equilibrium() {
        let tr = run("three_bus_alt", "fault");
        assert_eq!(tr.termination, Termination::Completed);
        let before = tr.at(9.9).voltages[1].norm();
        let after = tr.last().voltages[1].norm();
        assert!(after < before - 0.1, "no transition: {before} -> {after}");
        // It must sit at an actual solution of the static equations.
        let net = builtin_case("three_bus_alt").unwrap().network;
        let targets = crate::algebraic::ConstraintSet::from_network(&net);
        let sols = crate::homotopy::find_all_solutions(&net, &targets);
        let d = sols
            .iter()
            .map(|(_, vs)| (vs.vmag(2) - after).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(d < 1e-3, "settled |V2| = {after} is not near any static solution");
    }

    #[test]
    fn state_derivatives_vanish_at_equilibrium() {
        let net = builtin_case("three_bus_base").unwrap().network;
        let model = SimModel::new(&net);
        let st = model.initial_state(&StartAt::Normal).unwrap();
        let dx = state_derivatives(&model, &st.x, &st.warm).unwrap();
        // Derivatives are power mismatches divided by time constants; with the
        // solver residual tolerance of 1e-8 and the 1 ms reactive constant at
        // bus 3 the bound is 1e-5.
        assert!(dx.amax() < 1e-4, "derivative at equilibrium: {}", dx.amax());
    }
}
