//! Small-signal classification of operating points and reduced phase
//! portraits of the load dynamics.
//!
//! The Jacobian is taken over the differential load states only, with the
//! network resolved algebraically at every perturbed state and tap ratios
//! frozen (a tap inside its deadband contributes no linearized dynamics).

use crate::algebraic::{AdmittanceState, ConstraintSet, FreeVar};
use crate::dynsim::{simulate_from, state_derivatives, SimModel, SimOptions, SimState, Termination};
use crate::homotopy::{find_all_solutions, voltage_distance, SolutionBranch};
use crate::net::{BusId, LoadModel, Network};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

/// Eigenvalue real parts closer to zero than this are not called either way.
pub const EIG_MARGIN: f64 = 1e-6;
/// Max load-state derivative for a state to count as an equilibrium.
pub const EQUILIBRIUM_TOL: f64 = 1e-6;
/// Central-difference step for the state Jacobian.
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum Classification {
    /// Every eigenvalue real part is below -EIG_MARGIN (or there are no
    /// differential states at all).
    Stable,
    Unstable { positive_real_parts: usize },
    /// Largest real part sits inside the margin; linearization is inconclusive.
    Marginal,
}

#[derive(Clone, Debug)]
pub struct Equilibrium {
    pub admittances: AdmittanceState,
    pub voltages: Vec<Complex64>,
    /// Load-state eigenvalues, sorted by descending real part.
    pub eigenvalues: Vec<Complex64>,
    pub classification: Classification,
}

impl Equilibrium {
    pub fn vmag(&self, bus: BusId) -> f64 {
        self.voltages[bus - 1].norm()
    }

    pub fn min_vmag(&self) -> f64 {
        self.voltages.iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min)
    }

    pub fn is_stable(&self) -> bool {
        self.classification == Classification::Stable
    }
}

/// Central-difference Jacobian of the load-state derivatives. `h_scale`
/// multiplies the default step (used by the step-halving consistency checks).
pub fn load_state_jacobian(
    model: &SimModel,
    x: &DVector<f64>,
    warm: &AdmittanceState,
    h_scale: f64,
) -> Option<DMatrix<f64>> {
    let n = model.n_load_states();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let h = FD_STEP * h_scale * x[j].abs().max(1.0);
        let mut xp = x.clone();
        xp[j] += h;
        let fp = state_derivatives(model, &xp, warm)?;
        let mut xm = x.clone();
        xm[j] -= h;
        let fm = state_derivatives(model, &xm, warm)?;
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Some(jac)
}

fn classify_from_jacobian(jac: &DMatrix<f64>) -> (Vec<Complex64>, Classification) {
    if jac.nrows() == 0 {
        return (vec![], Classification::Stable);
    }
    let mut eigs: Vec<Complex64> = jac.clone().complex_eigenvalues().iter().copied().collect();
    eigs.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap().then(b.im.partial_cmp(&a.im).unwrap()));
    let max_re = eigs[0].re;
    let classification = if max_re < -EIG_MARGIN {
        Classification::Stable
    } else if max_re <= EIG_MARGIN {
        Classification::Marginal
    } else {
        let n_pos = eigs.iter().filter(|e| e.re > EIG_MARGIN).count();
        Classification::Unstable { positive_real_parts: n_pos }
    };
    (eigs, classification)
}

/// Classifies a candidate operating point. Errors when the point is not
/// actually an equilibrium of the load dynamics (derivative above tolerance)
/// or the network cannot be solved there.
pub fn classify_equilibrium(net: &Network, y: &AdmittanceState) -> Result<Equilibrium, String> {
    let model = SimModel::new(net);
    let x = model.pack(y, &net.initial_taps());
    let modes = vec![0i8; net.ultc.len()];
    let eval = model
        .eval(&x, &modes, y)
        .ok_or("network equations are unsolvable at the candidate point")?;
    // Judge the raw setpoint mismatch, not the derivative: dividing by a
    // millisecond time constant would turn solver-tolerance residue into an
    // apparent drift.
    let taus = model.time_constants();
    let n = model.n_load_states();
    let drift = (0..n).map(|i| (eval.dx[i] * taus[i]).abs()).fold(0.0, f64::max);
    if drift > EQUILIBRIUM_TOL {
        return Err(format!(
            "not an equilibrium: max setpoint mismatch {drift:.3e} exceeds {EQUILIBRIUM_TOL:.0e}"
        ));
    }
    let jac = load_state_jacobian(&model, &x, &eval.y, 1.0)
        .ok_or("network solve failed while forming the Jacobian")?;
    let (eigenvalues, classification) = classify_from_jacobian(&jac);
    Ok(Equilibrium { admittances: eval.y, voltages: eval.voltages, eigenvalues, classification })
}

/// All equilibria at the network's own targets, classified, ordered as
/// returned by the solution finder.
pub fn classified_solutions(net: &Network) -> Vec<Equilibrium> {
    let targets = ConstraintSet::from_network(net);
    find_all_solutions(net, &targets)
        .into_iter()
        .filter_map(|(y, _)| classify_equilibrium(net, &y).ok())
        .collect()
}

/// The normal operating point: among stable equilibria, the one whose worst
/// bus voltage is highest.
pub fn normal_equilibrium(net: &Network) -> Option<Equilibrium> {
    classified_solutions(net)
        .into_iter()
        .filter(|e| e.is_stable())
        .max_by(|a, b| a.min_vmag().partial_cmp(&b.min_vmag()).unwrap())
}

/// Stability coloring along a continuation branch: each point is reinterpreted
/// as an equilibrium of the network whose free-bus setpoints equal the powers
/// realized there, then classified. None where the classification fails
/// (typically next to the short-circuit ends).
pub fn color_branch(net: &Network, branch: &SolutionBranch) -> Vec<Option<Classification>> {
    let free_bus = branch.free_bus;
    branch
        .points
        .par_iter()
        .map(|pt| {
            let idx = net.constrained_index(free_bus);
            let (g, b) = pt.admittances.gb[idx];
            let vm2 = pt.voltages[free_bus - 1].norm_sqr();
            let mut mod_net = net.clone();
            match mod_net.loads[free_bus - 1].as_mut() {
                Some(LoadModel::DynamicAdmittance { p_set, q_set, .. }) => {
                    *p_set = g * vm2;
                    *q_set = b * vm2;
                }
                _ => return None,
            }
            classify_equilibrium(&mod_net, &pt.admittances)
                .ok()
                .map(|e| e.classification)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PortraitAxes {
    pub x_bus: BusId,
    pub x_var: FreeVar,
    pub x_range: (f64, f64),
    pub x_points: usize,
    pub y_bus: BusId,
    pub y_var: FreeVar,
    pub y_range: (f64, f64),
    pub y_points: usize,
}

#[derive(Clone, Debug)]
pub struct PhaseField {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// field[i][j] is (dx_axis, dy_axis) at (xs[j], ys[i]); None where the
    /// network has no solution.
    pub field: Vec<Vec<Option<(f64, f64)>>>,
    /// Every equilibrium of the slaved system, classified. Some may lie
    /// outside the drawn window.
    pub equilibria: Vec<Equilibrium>,
}

fn axis_state_index(model: &SimModel, bus: BusId, var: FreeVar) -> usize {
    let pos = model
        .dynamic_buses()
        .iter()
        .position(|&b| b == bus)
        .expect("portrait axis must be a dynamic bus");
    2 * pos + match var {
        FreeVar::G => 0,
        FreeVar::B => 1,
    }
}

/// Derivative field of two selected load states over a grid, the remaining
/// load states held at `rest`. Equilibria come from the full solution set of
/// the slaved system, whether or not they fall inside the grid.
pub fn phase_portrait(net: &Network, axes: &PortraitAxes, rest: &AdmittanceState) -> PhaseField {
    assert!(axes.x_points >= 2 && axes.y_points >= 2, "portrait grid needs at least 2x2 nodes");
    let model = SimModel::new(net);
    let ix = axis_state_index(&model, axes.x_bus, axes.x_var);
    let iy = axis_state_index(&model, axes.y_bus, axes.y_var);
    assert!(ix != iy, "portrait axes must be distinct states");
    let base_x = model.pack(rest, &net.initial_taps());

    let lin = |range: (f64, f64), n: usize| -> Vec<f64> {
        (0..n).map(|i| range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64).collect()
    };
    let xs = lin(axes.x_range, axes.x_points);
    let ys = lin(axes.y_range, axes.y_points);

    let field: Vec<Vec<Option<(f64, f64)>>> = ys
        .par_iter()
        .map(|&yv| {
            xs.iter()
                .map(|&xv| {
                    let mut x = base_x.clone();
                    x[ix] = xv;
                    x[iy] = yv;
                    state_derivatives(&model, &x, rest).map(|dx| (dx[ix], dx[iy]))
                })
                .collect()
        })
        .collect();

    let targets = ConstraintSet::from_network(net);
    let equilibria = find_all_solutions(net, &targets)
        .into_iter()
        .filter_map(|(y, _)| classify_equilibrium(net, &y).ok())
        .collect();

    PhaseField { xs, ys, field, equilibria }
}

#[derive(Clone, Debug)]
pub enum ProbeOutcome {
    /// Settled back onto the starting equilibrium.
    Returned,
    /// Settled somewhere else; the final operating point is attached.
    EscapedTo { voltages: Vec<Complex64>, admittances: AdmittanceState },
    Collapsed { t: f64 },
    Failed { t: f64, reason: String },
}

/// Integrates from a perturbed copy of an equilibrium and reports where the
/// state ends up after the horizon. Perturbations are (bus, dg, db) offsets on
/// dynamic load states.
pub fn attraction_probe(
    net: &Network,
    eq: &Equilibrium,
    perturbation: &[(BusId, f64, f64)],
    t_horizon: f64,
) -> ProbeOutcome {
    let mut model = SimModel::new(net);
    let mut x0 = model.pack(&eq.admittances, &net.initial_taps());
    for &(bus, dg, db) in perturbation {
        let pos = model
            .dynamic_buses()
            .iter()
            .position(|&b| b == bus)
            .expect("perturbed bus must be dynamic");
        x0[2 * pos] += dg;
        x0[2 * pos + 1] += db;
    }
    let start =
        SimState { t: 0.0, x: x0, modes: vec![0; net.ultc.len()], warm: eq.admittances.clone() };
    let tr = simulate_from(&mut model, start, &[], t_horizon, t_horizon / 64.0, &SimOptions::default());
    match tr.termination {
        Termination::Collapsed { t } => ProbeOutcome::Collapsed { t },
        Termination::Failed { t, reason } => ProbeOutcome::Failed { t, reason },
        Termination::Completed => {
            let last = tr.last();
            if voltage_distance(&last.voltages, &eq.voltages) < 1e-3 {
                ProbeOutcome::Returned
            } else {
                ProbeOutcome::EscapedTo { voltages: last.voltages.clone(), admittances: last.y.clone() }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::builtin_case;

    #[test]
    fn three_bus_equilibria_are_both_stable() {
        let net = builtin_case("three_bus_base").unwrap().network;
        let eqs = classified_solutions(&net);
        assert!(eqs.len() >= 2, "found {}", eqs.len());
        let high = eqs.iter().find(|e| (e.vmag(2) - 1.012).abs() < 0.02).expect("high solution");
        let low = eqs.iter().find(|e| (e.vmag(2) - 0.560).abs() < 0.02).expect("low solution");
        assert!(high.is_stable(), "high: {:?}", high.classification);
        assert!(low.is_stable(), "low: {:?}", low.classification);
        for e in &eqs {
            assert!(!e.eigenvalues.is_empty());
        }
    }

    #[test]
    fn non_equilibrium_is_rejected() {
        let net = builtin_case("three_bus_base").unwrap().network;
        let eqs = classified_solutions(&net);
        let mut y = eqs[0].admittances.clone();
        y.gb[0].0 += 0.05;
        assert!(classify_equilibrium(&net, &y).is_err());
    }

    #[test]
    fn eigenvalues_survive_step_halving() {
        let net = builtin_case("three_bus_base").unwrap().network;
        let eq = &classified_solutions(&net)[0];
        let model = SimModel::new(&net);
        let x = model.pack(&eq.admittances, &net.initial_taps());
        let j1 = load_state_jacobian(&model, &x, &eq.admittances, 1.0).unwrap();
        let j2 = load_state_jacobian(&model, &x, &eq.admittances, 0.5).unwrap();
        let (e1, _) = classify_from_jacobian(&j1);
        let (e2, _) = classify_from_jacobian(&j2);
        for (a, b) in e1.iter().zip(&e2) {
            let rel = (a - b).norm() / a.norm().max(1e-9);
            assert!(rel < 1e-3, "{a} vs {b}: rel {rel}");
        }
    }

    #[test]
    fn portrait_case_has_four_equilibria_two_stable() {
        let net = builtin_case("three_bus_portrait").unwrap().network;
        let axes = PortraitAxes {
            x_bus: 2,
            x_var: FreeVar::G,
            x_range: (-1.5, 1.5),
            x_points: 11,
            y_bus: 2,
            y_var: FreeVar::B,
            y_range: (-1.5, 1.5),
            y_points: 11,
            };
        let rest = AdmittanceState::zeros(net.n_constrained());
        let pf = phase_portrait(&net, &axes, &rest);
        assert_eq!(pf.equilibria.len(), 4, "equilibria: {:?}",
            pf.equilibria.iter().map(|e| e.vmag(2)).collect::<Vec<_>>());
        let stable = pf.equilibria.iter().filter(|e| e.is_stable()).count();
        assert_eq!(stable, 2);
    }

    #[test]
    fn stable_equilibrium_attracts_nearby_states() {
        let net = builtin_case("three_bus_base").unwrap().network;
        let eqs = classified_solutions(&net);
        let high = eqs.iter().find(|e| (e.vmag(2) - 1.012).abs() < 0.02).unwrap();
        match attraction_probe(&net, high, &[(2, 0.02, -0.02)], 40.0) {
            ProbeOutcome::Returned => {}
            other => panic!("expected return to the equilibrium, got {:?}", other),
        }
    }
}
