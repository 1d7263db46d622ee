//! Network algebraic equations.
//!
//! With every load expressed as an effective admittance y_k = g_k + i b_k, the
//! non-slack voltages satisfy the linear current balance
//!
//! ```text
//! sum_l (Y_kl + (g_k - i b_k) delta_kl) V_l = -Y_{k,slack} V_slack
//! ```
//!
//! Power and polynomial constraints are solved by Newton iteration over the
//! real pairs (g_k, b_k); voltages are eliminated through the linear solve
//! above at every iterate, so the inner problem stays linear.

use crate::net::{build_admittance_matrix, BusId, LoadModel, Network};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Effective admittances of the constrained (non-slack) buses, ordered by
/// `Network::constrained_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmittanceState {
    pub gb: Vec<(f64, f64)>,
}

impl AdmittanceState {
    pub fn zeros(n: usize) -> Self {
        AdmittanceState { gb: vec![(0.0, 0.0); n] }
    }

    /// Circuit-convention admittance stamped into the matrix diagonal.
    pub fn circuit(&self, idx: usize) -> Complex64 {
        let (g, b) = self.gb[idx];
        Complex64::new(g, -b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    SingularJacobian,
    SingularLinear,
}

#[derive(Clone, Debug)]
pub struct VoltageSolution {
    /// All bus voltages, index bus-1; the slack entry equals the slack voltage.
    pub voltages: Vec<Complex64>,
    /// Max-norm of the defining equations at the returned point.
    pub residual_norm: f64,
    pub converged: bool,
    pub status: SolveStatus,
}

impl VoltageSolution {
    pub fn vmag(&self, bus: BusId) -> f64 {
        self.voltages[bus - 1].norm()
    }

    pub fn min_vmag(&self) -> f64 {
        self.voltages.iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min)
    }
}

/// Per-bus algebraic constraint. Power rows are written as raw mismatches
/// (g|V|^2 - P target), which stays well-defined at |V| = 0.
#[derive(Clone, Debug, PartialEq)]
pub enum BusConstraint {
    FixedAdmittance { g: f64, b: f64 },
    FixedPower { p: f64, q: f64 },
    PolynomialPower { p0: f64, q0: f64, a_p: f64, b_p: f64, c_p: f64, a_q: f64, b_q: f64, c_q: f64 },
    /// Swept conductance pinned at `g`; the reactive target stays enforced.
    FreeG { g: f64, q: f64 },
    /// Swept susceptance pinned at `b`; the active target stays enforced.
    FreeB { b: f64, p: f64 },
    /// g fixed, b tied to another constrained bus: b = b_factor * b(src).
    Tied { g: f64, b_factor: f64, b_source: BusId },
}

/// Constraints for every non-slack bus, ordered by `Network::constrained_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSet {
    pub kinds: Vec<BusConstraint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreeVar {
    G,
    B,
}

impl ConstraintSet {
    /// Equilibrium constraints implied by the network's load models: dynamic
    /// loads enforce their power setpoints, impedance-setpoint loads their
    /// commanded admittance, polynomial loads their characteristic. A pure-Z
    /// polynomial reduces to a fixed admittance.
    pub fn from_network(net: &Network) -> Self {
        let kinds = net
            .constrained_buses()
            .map(|bus| match net.load(bus).expect("every non-slack bus carries a load model") {
                LoadModel::DynamicAdmittance { p_set, q_set, .. } => {
                    BusConstraint::FixedPower { p: *p_set, q: *q_set }
                }
                LoadModel::ImpedanceSetpoint { g_set, b_set, .. } => {
                    BusConstraint::FixedAdmittance { g: *g_set, b: *b_set }
                }
                LoadModel::Polynomial { p0, q0, a_p, b_p, c_p, a_q, b_q, c_q } => {
                    if *b_p == 0.0 && *c_p == 0.0 && *b_q == 0.0 && *c_q == 0.0 {
                        BusConstraint::FixedAdmittance { g: *p0, b: *q0 }
                    } else {
                        BusConstraint::PolynomialPower {
                            p0: *p0,
                            q0: *q0,
                            a_p: *a_p,
                            b_p: *b_p,
                            c_p: *c_p,
                            a_q: *a_q,
                            b_q: *b_q,
                            c_q: *c_q,
                        }
                    }
                }
                LoadModel::ConstantPower { p, q } => BusConstraint::FixedPower { p: *p, q: *q },
                LoadModel::TiedAdmittance { g, b_factor, b_source } => BusConstraint::Tied {
                    g: *g,
                    b_factor: *b_factor,
                    b_source: *b_source,
                },
            })
            .collect();
        ConstraintSet { kinds }
    }

    /// Replaces the constraint at `bus` with a free designation pinned at
    /// `pin`. The bus must carry a power constraint so the complementary
    /// target is known.
    pub fn with_free(&self, net: &Network, bus: BusId, var: FreeVar, pin: f64) -> Result<Self, String> {
        let idx = net.constrained_index(bus);
        let BusConstraint::FixedPower { p, q } = self.kinds[idx] else {
            return Err(format!("bus {} does not carry a fixed-power constraint; cannot free it", bus));
        };
        let mut out = self.clone();
        out.kinds[idx] = match var {
            FreeVar::G => BusConstraint::FreeG { g: pin, q },
            FreeVar::B => BusConstraint::FreeB { b: pin, p },
        };
        Ok(out)
    }

    pub fn set_pin(&mut self, idx: usize, pin: f64) {
        match &mut self.kinds[idx] {
            BusConstraint::FreeG { g, .. } => *g = pin,
            BusConstraint::FreeB { b, .. } => *b = pin,
            other => panic!("constraint at index {} is not free: {:?}", idx, other),
        }
    }

    pub fn free_index(&self) -> Option<usize> {
        self.kinds
            .iter()
            .position(|k| matches!(k, BusConstraint::FreeG { .. } | BusConstraint::FreeB { .. }))
    }

    fn all_admittance_like(&self) -> bool {
        self.kinds
            .iter()
            .all(|k| matches!(k, BusConstraint::FixedAdmittance { .. } | BusConstraint::Tied { .. }))
    }
}

/// Reduced linear system for one network configuration (tap ratios and any
/// temporary shunts baked in). Reused across Newton iterations and RHS
/// evaluations.
pub struct AlgebraicSystem {
    /// Non-slack rows/columns of the bus admittance matrix.
    reduced: DMatrix<Complex64>,
    /// -Y_{k,slack} V_slack for the non-slack buses.
    rhs: DVector<Complex64>,
    v_slack: Complex64,
    slack0: usize,
    n: usize,
}

pub const RESIDUAL_TOL: f64 = 1e-8;
pub const LINEAR_TOL: f64 = 1e-10;
pub const MAX_ITER: usize = 50;
pub const MAX_HALVINGS: usize = 8;

const SETTLE_MAX_ITER: usize = 400;
const SETTLE_TOL: f64 = 1e-10;
const SETTLE_ALPHA_MIN: f64 = 1.0 / 64.0;
// Below this |V|^2 a power target has no admittance realization; the fast
// load response is collapsing, not settling.
const SETTLE_VFLOOR: f64 = 1e-6;
const SETTLE_Y_BLOWUP: f64 = 1e7;

impl AlgebraicSystem {
    pub fn new(net: &Network, taps: &[f64], shunts: &[(BusId, f64, f64)]) -> Self {
        let mut ybus = build_admittance_matrix(net, taps);
        for &(bus, g, b) in shunts {
            ybus[(bus - 1, bus - 1)] += Complex64::new(g, -b);
        }
        let n = net.n_buses;
        let slack0 = net.slack_bus - 1;
        let m = n - 1;
        let mut reduced = DMatrix::<Complex64>::zeros(m, m);
        let mut rhs = DVector::<Complex64>::zeros(m);
        let keep: Vec<usize> = (0..n).filter(|&i| i != slack0).collect();
        for (i, &bi) in keep.iter().enumerate() {
            for (j, &bj) in keep.iter().enumerate() {
                reduced[(i, j)] = ybus[(bi, bj)];
            }
            rhs[i] = -ybus[(bi, slack0)] * net.slack_voltage;
        }
        AlgebraicSystem { reduced, rhs, v_slack: net.slack_voltage, slack0, n }
    }

    pub fn from_network(net: &Network) -> Self {
        Self::new(net, &net.initial_taps(), &[])
    }

    fn assemble(&self, y: &AdmittanceState) -> DMatrix<Complex64> {
        let mut a = self.reduced.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += y.circuit(i);
        }
        a
    }

    fn full_voltages(&self, v_red: &DVector<Complex64>) -> Vec<Complex64> {
        let mut v = Vec::with_capacity(self.n);
        let mut it = v_red.iter();
        for i in 0..self.n {
            if i == self.slack0 {
                v.push(self.v_slack);
            } else {
                v.push(*it.next().unwrap());
            }
        }
        v
    }

    /// Exact linear solve with every bus at a fixed admittance.
    pub fn solve_linear(&self, y: &AdmittanceState) -> VoltageSolution {
        let a = self.assemble(y);
        let lu = a.clone().lu();
        match lu.solve(&self.rhs) {
            Some(v_red) => {
                let r = &a * &v_red - &self.rhs;
                let residual_norm = r.iter().map(|c| c.norm()).fold(0.0, f64::max);
                let converged = residual_norm <= LINEAR_TOL;
                VoltageSolution {
                    voltages: self.full_voltages(&v_red),
                    residual_norm,
                    converged,
                    status: if converged { SolveStatus::Converged } else { SolveStatus::SingularLinear },
                }
            }
            None => VoltageSolution {
                voltages: vec![self.v_slack; self.n],
                residual_norm: f64::INFINITY,
                converged: false,
                status: SolveStatus::SingularLinear,
            },
        }
    }

    /// Raw (unscaled) constraint residuals at a state, two per bus.
    fn residual(&self, kinds: &[BusConstraint], y: &AdmittanceState, v: &[Complex64], map: &[usize]) -> DVector<f64> {
        let m = kinds.len();
        let mut r = DVector::zeros(2 * m);
        for (i, kind) in kinds.iter().enumerate() {
            let (g, b) = y.gb[i];
            let vm2 = v[map[i]].norm_sqr();
            let vm = vm2.sqrt();
            let (r1, r2) = match kind {
                BusConstraint::FixedAdmittance { g: g0, b: b0 } => (g - g0, b - b0),
                BusConstraint::FixedPower { p, q } => (g * vm2 - p, b * vm2 - q),
                BusConstraint::PolynomialPower { p0, q0, a_p, b_p, c_p, a_q, b_q, c_q } => {
                    let pt = p0 * (a_p * vm2 + b_p * vm + c_p);
                    let qt = q0 * (a_q * vm2 + b_q * vm + c_q);
                    (g * vm2 - pt, b * vm2 - qt)
                }
                BusConstraint::FreeG { g: g0, q } => (g - g0, b * vm2 - q),
                BusConstraint::FreeB { b: b0, p } => (g * vm2 - p, b - b0),
                BusConstraint::Tied { g: g0, b_factor, b_source } => {
                    let src = self.index_of(map, *b_source);
                    (g - g0, b - b_factor * y.gb[src].1)
                }
            };
            r[2 * i] = r1;
            r[2 * i + 1] = r2;
        }
        r
    }

    fn index_of(&self, _map: &[usize], bus: BusId) -> usize {
        // Constrained position of a bus: buses after the slack shift down one.
        if bus - 1 < self.slack0 { bus - 1 } else { bus - 2 }
    }

    fn row_scales(kinds: &[BusConstraint]) -> Vec<f64> {
        let mut s = Vec::with_capacity(2 * kinds.len());
        for kind in kinds {
            let (s1, s2) = match kind {
                BusConstraint::FixedAdmittance { .. } | BusConstraint::Tied { .. } => (1.0, 1.0),
                BusConstraint::FixedPower { p, q } => (p.abs().max(1.0), q.abs().max(1.0)),
                BusConstraint::PolynomialPower { p0, q0, .. } => (p0.abs().max(1.0), q0.abs().max(1.0)),
                BusConstraint::FreeG { q, .. } => (1.0, q.abs().max(1.0)),
                BusConstraint::FreeB { p, .. } => (p.abs().max(1.0), 1.0),
            };
            s.push(s1);
            s.push(s2);
        }
        s
    }

    /// Scaled constraint Jacobian with respect to the stacked unknowns
    /// (g_1, b_1, g_2, b_2, ...). `a` is the assembled reduced matrix at the
    /// state, `v` the full voltage vector.
    fn jacobian(
        &self,
        kinds: &[BusConstraint],
        y: &AdmittanceState,
        v: &[Complex64],
        map: &[usize],
        a: &DMatrix<Complex64>,
    ) -> Option<DMatrix<f64>> {
        let m = kinds.len();
        let inv = a.clone().lu().try_inverse()?;
        // dV/dg_j = -inv[:,j] V_j ; dV/db_j = +i inv[:,j] V_j  (stamp is g - ib).
        // d|V_k|^2/dx = 2 Re(conj(V_k) dV_k/dx).
        let mut dvm2 = vec![vec![(0.0, 0.0); m]; m]; // [k][j] = (d/dg_j, d/db_j) of |V_k|^2
        for j in 0..m {
            let vj = v[map[j]];
            for k in 0..m {
                let base = inv[(k, j)] * vj;
                let ck = v[map[k]].conj();
                let dg = 2.0 * (ck * -base).re;
                let db = 2.0 * (ck * (Complex64::i() * base)).re;
                dvm2[k][j] = (dg, db);
            }
        }
        let scales = Self::row_scales(kinds);
        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        for (k, kind) in kinds.iter().enumerate() {
            let (g, b) = y.gb[k];
            let vm2 = v[map[k]].norm_sqr();
            let vm = vm2.sqrt();
            match kind {
                BusConstraint::FixedAdmittance { .. } => {
                    jac[(2 * k, 2 * k)] = 1.0;
                    jac[(2 * k + 1, 2 * k + 1)] = 1.0;
                }
                BusConstraint::Tied { b_factor, b_source, .. } => {
                    jac[(2 * k, 2 * k)] = 1.0;
                    jac[(2 * k + 1, 2 * k + 1)] = 1.0;
                    let src = self.index_of(map, *b_source);
                    jac[(2 * k + 1, 2 * src + 1)] = -b_factor;
                }
                BusConstraint::FixedPower { .. } => {
                    for j in 0..m {
                        let (dg, db) = dvm2[k][j];
                        jac[(2 * k, 2 * j)] = g * dg;
                        jac[(2 * k, 2 * j + 1)] = g * db;
                        jac[(2 * k + 1, 2 * j)] = b * dg;
                        jac[(2 * k + 1, 2 * j + 1)] = b * db;
                    }
                    jac[(2 * k, 2 * k)] += vm2;
                    jac[(2 * k + 1, 2 * k + 1)] += vm2;
                }
                BusConstraint::PolynomialPower { p0, q0, a_p, b_p, a_q, b_q, .. } => {
                    for j in 0..m {
                        let (dg, db) = dvm2[k][j];
                        let (dvm_g, dvm_b) = if vm > 1e-12 {
                            (dg / (2.0 * vm), db / (2.0 * vm))
                        } else {
                            (0.0, 0.0)
                        };
                        jac[(2 * k, 2 * j)] = (g - p0 * a_p) * dg - p0 * b_p * dvm_g;
                        jac[(2 * k, 2 * j + 1)] = (g - p0 * a_p) * db - p0 * b_p * dvm_b;
                        jac[(2 * k + 1, 2 * j)] = (b - q0 * a_q) * dg - q0 * b_q * dvm_g;
                        jac[(2 * k + 1, 2 * j + 1)] = (b - q0 * a_q) * db - q0 * b_q * dvm_b;
                    }
                    jac[(2 * k, 2 * k)] += vm2;
                    jac[(2 * k + 1, 2 * k + 1)] += vm2;
                }
                BusConstraint::FreeG { .. } => {
                    jac[(2 * k, 2 * k)] = 1.0;
                    for j in 0..m {
                        let (dg, db) = dvm2[k][j];
                        jac[(2 * k + 1, 2 * j)] = b * dg;
                        jac[(2 * k + 1, 2 * j + 1)] = b * db;
                    }
                    jac[(2 * k + 1, 2 * k + 1)] += vm2;
                }
                BusConstraint::FreeB { .. } => {
                    jac[(2 * k + 1, 2 * k + 1)] = 1.0;
                    for j in 0..m {
                        let (dg, db) = dvm2[k][j];
                        jac[(2 * k, 2 * j)] = g * dg;
                        jac[(2 * k, 2 * j + 1)] = g * db;
                    }
                    jac[(2 * k, 2 * k)] += vm2;
                }
            }
        }
        for r in 0..2 * m {
            let s = scales[r];
            for c in 0..2 * m {
                jac[(r, c)] /= s;
            }
        }
        Some(jac)
    }

    fn constrained_map(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| i != self.slack0).collect()
    }

    /// Damped Newton over the admittance pairs; voltages are re-solved each
    /// iterate. Fixed-admittance sets short-circuit to a single linear solve.
    pub fn solve_newton(
        &self,
        cs: &ConstraintSet,
        guess: &AdmittanceState,
    ) -> (AdmittanceState, VoltageSolution) {
        let kinds = &cs.kinds;
        let map = self.constrained_map();
        assert_eq!(kinds.len(), map.len(), "one constraint per non-slack bus");

        if cs.all_admittance_like() {
            let mut y = AdmittanceState::zeros(kinds.len());
            // Tied buses read their source's fixed value; one pass suffices
            // because tie sources are dynamic (fixed-admittance) buses.
            for (i, kind) in kinds.iter().enumerate() {
                if let BusConstraint::FixedAdmittance { g, b } = kind {
                    y.gb[i] = (*g, *b);
                }
            }
            for (i, kind) in kinds.iter().enumerate() {
                if let BusConstraint::Tied { g, b_factor, b_source } = kind {
                    let src = self.index_of(&map, *b_source);
                    y.gb[i] = (*g, b_factor * y.gb[src].1);
                }
            }
            let vs = self.solve_linear(&y);
            return (y, vs);
        }

        let mut y = guess.clone();
        let mut vs = self.solve_linear(&y);
        if !vs.converged {
            return (y, vs);
        }
        let mut res = self.residual(kinds, &y, &vs.voltages, &map);
        let mut res_norm = res.amax();
        for _ in 0..MAX_ITER {
            if res_norm <= RESIDUAL_TOL {
                return (
                    y,
                    VoltageSolution {
                        residual_norm: res_norm,
                        converged: true,
                        status: SolveStatus::Converged,
                        voltages: vs.voltages,
                    },
                );
            }
            let a = self.assemble(&y);
            let Some(jac) = self.jacobian(kinds, &y, &vs.voltages, &map, &a) else {
                return (
                    y,
                    VoltageSolution {
                        residual_norm: res_norm,
                        converged: false,
                        status: SolveStatus::SingularLinear,
                        voltages: vs.voltages,
                    },
                );
            };
            let scales = Self::row_scales(kinds);
            let mut rhs = DVector::<f64>::zeros(res.len());
            for i in 0..res.len() {
                rhs[i] = -res[i] / scales[i];
            }
            let Some(step) = jac.lu().solve(&rhs) else {
                return (
                    y,
                    VoltageSolution {
                        residual_norm: res_norm,
                        converged: false,
                        status: SolveStatus::SingularJacobian,
                        voltages: vs.voltages,
                    },
                );
            };
            // Damping: halve until the raw residual stops exceeding the
            // current one, keeping the best candidate seen.
            let mut alpha = 1.0;
            let mut best: Option<(f64, AdmittanceState, VoltageSolution, DVector<f64>)> = None;
            for _ in 0..=MAX_HALVINGS {
                let mut yt = y.clone();
                for i in 0..kinds.len() {
                    yt.gb[i].0 += alpha * step[2 * i];
                    yt.gb[i].1 += alpha * step[2 * i + 1];
                }
                let vt = self.solve_linear(&yt);
                if vt.converged {
                    let rt = self.residual(kinds, &yt, &vt.voltages, &map);
                    let nt = rt.amax();
                    if best.as_ref().is_none_or(|(bn, ..)| nt < *bn) {
                        best = Some((nt, yt, vt, rt));
                    }
                    if nt < res_norm {
                        break;
                    }
                }
                alpha *= 0.5;
            }
            match best {
                Some((nt, yt, vt, rt)) => {
                    y = yt;
                    vs = vt;
                    res = rt;
                    res_norm = nt;
                }
                None => {
                    // Every damped candidate broke the linear solve.
                    return (
                        y,
                        VoltageSolution {
                            residual_norm: res_norm,
                            converged: false,
                            status: SolveStatus::SingularLinear,
                            voltages: vs.voltages,
                        },
                    );
                }
            }
        }
        let converged = res_norm <= RESIDUAL_TOL;
        (
            y,
            VoltageSolution {
                residual_norm: res_norm,
                converged,
                status: if converged { SolveStatus::Converged } else { SolveStatus::MaxIter },
                voltages: vs.voltages,
            },
        )
    }

    /// Solve by following the fast load response instead of a Newton path:
    /// each bus repeatedly re-realizes its power target at the voltage the
    /// network currently gives it, with damping when the sweep overshoots.
    /// Fixed points are network solutions, and the attracting ones are
    /// exactly the operating points the fast dynamics can actually reach
    /// from `start`. After a network discontinuity this picks the right
    /// solution where a warm Newton start only picks a familiar one. Ends
    /// with a Newton polish so the result meets the usual residual bound.
    pub fn settle_admittances(
        &self,
        cs: &ConstraintSet,
        start: &AdmittanceState,
    ) -> (AdmittanceState, VoltageSolution) {
        let kinds = &cs.kinds;
        let map = self.constrained_map();
        assert_eq!(kinds.len(), map.len(), "one constraint per non-slack bus");
        if cs.all_admittance_like() {
            return self.solve_newton(cs, start);
        }

        let fail = |y: AdmittanceState, vs: VoltageSolution| {
            (
                y,
                VoltageSolution {
                    residual_norm: f64::INFINITY,
                    converged: false,
                    status: SolveStatus::MaxIter,
                    voltages: vs.voltages,
                },
            )
        };

        let mut y = start.clone();
        let mut alpha = 1.0f64;
        let mut prev_move = f64::INFINITY;
        for _ in 0..SETTLE_MAX_ITER {
            let vs = self.solve_linear(&y);
            if !vs.converged {
                return (y, vs);
            }
            let mut target = y.clone();
            let mut moved = 0.0f64;
            for (i, kind) in kinds.iter().enumerate() {
                let vm2 = vs.voltages[map[i]].norm_sqr();
                let low = vm2 < SETTLE_VFLOOR;
                let (tg, tb) = match kind {
                    BusConstraint::FixedAdmittance { g, b } => (*g, *b),
                    BusConstraint::FixedPower { p, q } => {
                        if low {
                            return fail(y, vs);
                        }
                        (p / vm2, q / vm2)
                    }
                    BusConstraint::PolynomialPower { p0, q0, a_p, b_p, c_p, a_q, b_q, c_q } => {
                        if low {
                            return fail(y, vs);
                        }
                        let vm = vm2.sqrt();
                        let pt = p0 * (a_p * vm2 + b_p * vm + c_p);
                        let qt = q0 * (a_q * vm2 + b_q * vm + c_q);
                        (pt / vm2, qt / vm2)
                    }
                    BusConstraint::FreeG { g, q } => {
                        if low {
                            return fail(y, vs);
                        }
                        (*g, q / vm2)
                    }
                    BusConstraint::FreeB { b, p } => {
                        if low {
                            return fail(y, vs);
                        }
                        (p / vm2, *b)
                    }
                    BusConstraint::Tied { g, b_factor, b_source } => {
                        let src = self.index_of(&map, *b_source);
                        (*g, b_factor * y.gb[src].1)
                    }
                };
                moved = moved
                    .max((tg - y.gb[i].0).abs() / (1.0 + tg.abs()))
                    .max((tb - y.gb[i].1).abs() / (1.0 + tb.abs()));
                target.gb[i] = (tg, tb);
            }
            if moved <= SETTLE_TOL {
                break;
            }
            // Shrink the relaxation step while the sweep is diverging,
            // stretch it back toward a plain sweep once it contracts.
            if moved > prev_move {
                alpha = (alpha * 0.5).max(SETTLE_ALPHA_MIN);
            } else {
                alpha = (alpha * 1.25).min(1.0);
            }
            prev_move = moved;
            for i in 0..y.gb.len() {
                y.gb[i].0 += alpha * (target.gb[i].0 - y.gb[i].0);
                y.gb[i].1 += alpha * (target.gb[i].1 - y.gb[i].1);
            }
            if y.gb.iter().any(|&(g, b)| {
                !g.is_finite() || !b.is_finite() || g.abs() > SETTLE_Y_BLOWUP || b.abs() > SETTLE_Y_BLOWUP
            }) {
                return fail(y, vs);
            }
        }
        self.solve_newton(cs, &y)
    }

    /// Smallest singular value of the scaled constraint Jacobian at `state`.
    /// Values near zero mark branch endpoints; pure-admittance sets score 1.
    pub fn min_singular_value(&self, cs: &ConstraintSet, state: &AdmittanceState) -> f64 {
        let map = self.constrained_map();
        let vs = self.solve_linear(state);
        if !vs.converged {
            return 0.0;
        }
        let a = self.assemble(state);
        let Some(jac) = self.jacobian(&cs.kinds, state, &vs.voltages, &map, &a) else {
            return 0.0;
        };
        jac.singular_values().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Scaled residual and Jacobian at `state`, voltages eliminated through
    /// the inner linear solve. None when that solve is singular.
    pub fn scaled_system(
        &self,
        cs: &ConstraintSet,
        state: &AdmittanceState,
    ) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let map = self.constrained_map();
        let vs = self.solve_linear(state);
        if !vs.converged {
            return None;
        }
        let a = self.assemble(state);
        let jac = self.jacobian(&cs.kinds, state, &vs.voltages, &map, &a)?;
        let mut res = self.residual(&cs.kinds, state, &vs.voltages, &map);
        let scales = Self::row_scales(&cs.kinds);
        for i in 0..res.len() {
            res[i] /= scales[i];
        }
        Some((res, jac))
    }

    /// Smallest singular value with its right singular vector, the null
    /// direction of the constraint Jacobian at a branch fold.
    pub fn min_singular_pair(
        &self,
        cs: &ConstraintSet,
        state: &AdmittanceState,
    ) -> Option<(f64, DVector<f64>)> {
        let (_, jac) = self.scaled_system(cs, state)?;
        let svd = jac.svd(false, true);
        // nalgebra does not order the singular values.
        let (mut min, mut arg) = (f64::INFINITY, 0usize);
        for (i, s) in svd.singular_values.iter().enumerate() {
            if *s < min {
                min = *s;
                arg = i;
            }
        }
        let vt = svd.v_t?;
        Some((min, vt.row(arg).transpose()))
    }
}

pub fn solve_voltages_linear(net: &Network, admittances: &AdmittanceState) -> VoltageSolution {
    AlgebraicSystem::from_network(net).solve_linear(admittances)
}

pub fn solve_constrained(
    net: &Network,
    constraints: &ConstraintSet,
    initial_guess: &AdmittanceState,
) -> (AdmittanceState, VoltageSolution) {
    AlgebraicSystem::from_network(net).solve_newton(constraints, initial_guess)
}

pub fn jacobian_min_singular_value(
    net: &Network,
    constraints: &ConstraintSet,
    state: &AdmittanceState,
) -> f64 {
    AlgebraicSystem::from_network(net).min_singular_value(constraints, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::builtin_case;
    use approx::assert_relative_eq;

    #[test]
    fn linear_no_load_is_flat() {
        let net = builtin_case("thirteen_bus").unwrap().network;
        let y = AdmittanceState::zeros(12);
        let vs = solve_voltages_linear(&net, &y);
        assert!(vs.converged);
        for v in &vs.voltages {
            assert_relative_eq!(v.re, 1.0, epsilon = 1e-12);
            assert_relative_eq!(v.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_short_circuit_limit() {
        let net = builtin_case("switch_case").unwrap().network;
        let mut y = AdmittanceState::zeros(2);
        y.gb[0] = (1e8, 0.0);
        let vs = solve_voltages_linear(&net, &y);
        assert!(vs.converged);
        assert!(vs.vmag(2) < 1e-6, "V2 = {}", vs.vmag(2));
    }

    /// Series-chain oracle: two cascaded lines with one admittance load at the
    /// end reduce to a voltage divider computed by hand with complex numbers.
    #[test]
    fn linear_matches_voltage_divider_oracle() {
        let net = builtin_case("three_bus_base").unwrap().network;
        let z12 = Complex64::new(0.03, 0.15);
        let z23 = Complex64::new(0.33, 1.65);
        let (g3, b3) = (0.2, -0.1);
        let y3 = Complex64::new(g3, -b3);
        // Only bus 3 loaded: V3 = V1 / (1 + (z12+z23) y3), V2 = V1 - z12 y3 V3.
        let v3 = Complex64::new(1.0, 0.0) / (Complex64::new(1.0, 0.0) + (z12 + z23) * y3);
        let v2 = Complex64::new(1.0, 0.0) - z12 * (y3 * v3);
        let mut y = AdmittanceState::zeros(2);
        y.gb[1] = (g3, b3);
        let vs = solve_voltages_linear(&net, &y);
        assert!(vs.converged);
        assert_relative_eq!(vs.voltages[2].re, v3.re, max_relative = 1e-12);
        assert_relative_eq!(vs.voltages[2].im, v3.im, max_relative = 1e-12);
        assert_relative_eq!(vs.voltages[1].re, v2.re, max_relative = 1e-12);
        assert_relative_eq!(vs.voltages[1].im, v2.im, max_relative = 1e-12);
    }

    #[test]
    fn newton_zero_targets_from_zero_guess() {
        let net = builtin_case("three_bus_base").unwrap().network;
        let cs = ConstraintSet {
            kinds: vec![
                BusConstraint::FixedPower { p: 0.0, q: 0.0 },
                BusConstraint::FixedPower { p: 0.0, q: 0.0 },
            ],
        };
        let (y, vs) = solve_constrained(&net, &cs, &AdmittanceState::zeros(2));
        assert!(vs.converged);
        for (g, b) in &y.gb {
            assert!(g.abs() < 1e-10 && b.abs() < 1e-10);
        }
        assert_relative_eq!(vs.vmag(2), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn newton_three_bus_high_and_low_equilibria() {
        let case = builtin_case("three_bus_base").unwrap();
        let net = &case.network;
        let cs = ConstraintSet::from_network(net);
        // High-voltage solution from a near-nominal admittance guess.
        let mut guess = AdmittanceState::zeros(2);
        guess.gb[0] = (-3.284, -0.167);
        guess.gb[1] = (-0.189, -0.222);
        let (y_hi, vs_hi) = solve_constrained(net, &cs, &guess);
        assert!(vs_hi.converged, "high solve: {:?}", vs_hi.status);
        assert_relative_eq!(vs_hi.vmag(2), 1.012, epsilon = 0.02);
        // Low-voltage solution from a low-branch guess (g = P/V^2 with both
        // bus voltages depressed; V3 ~ 0.8 converges to a different branch).
        let mut guess_lo = AdmittanceState::zeros(2);
        guess_lo.gb[0] = (-3.284 / (0.56 * 0.56), -0.167 / (0.56 * 0.56));
        guess_lo.gb[1] = (-0.189 / (0.52 * 0.52), -0.222 / (0.52 * 0.52));
        let (y_lo, vs_lo) = solve_constrained(net, &cs, &guess_lo);
        assert!(vs_lo.converged, "low solve: {:?}", vs_lo.status);
        assert_relative_eq!(vs_lo.vmag(2), 0.560, epsilon = 0.02);
        assert!((vs_hi.vmag(2) - vs_lo.vmag(2)).abs() > 0.3);
        // Realized powers reproduce the setpoints at both solutions.
        for (y, vs) in [(&y_hi, &vs_hi), (&y_lo, &vs_lo)] {
            let p2 = y.gb[0].0 * vs.voltages[1].norm_sqr();
            let q2 = y.gb[0].1 * vs.voltages[1].norm_sqr();
            assert_relative_eq!(p2, -3.284, epsilon = 1e-7);
            assert_relative_eq!(q2, -0.167, epsilon = 1e-7);
        }
    }

    #[test]
    fn pure_admittance_jacobian_scores_one() {
        let net = builtin_case("three_bus_base").unwrap().network;
        let cs = ConstraintSet {
            kinds: vec![
                BusConstraint::FixedAdmittance { g: -3.2, b: -0.16 },
                BusConstraint::FixedAdmittance { g: -0.19, b: -0.22 },
            ],
        };
        let mut y = AdmittanceState::zeros(2);
        y.gb[0] = (-3.2, -0.16);
        y.gb[1] = (-0.19, -0.22);
        let s = jacobian_min_singular_value(&net, &cs, &y);
        assert_relative_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let case = builtin_case("thirteen_bus").unwrap();
        let net = &case.network;
        let cs = ConstraintSet::from_network(net);
        let sys = AlgebraicSystem::from_network(net);
        // A regular-but-loaded state: solve once from a mild guess, then
        // compare the analytic Jacobian against central differences there.
        let mut guess = AdmittanceState::zeros(12);
        guess.gb[0] = (-0.6, 0.1);
        let (y, vs) = sys.solve_newton(&cs, &guess);
        assert!(vs.converged);
        let map: Vec<usize> = (0..13).filter(|&i| i != 0).collect();
        let a = sys.assemble(&y);
        let jac = sys.jacobian(&cs.kinds, &y, &vs.voltages, &map, &a).unwrap();
        let h = 1e-6;
        let m = cs.kinds.len();
        let scales = AlgebraicSystem::row_scales(&cs.kinds);
        for col in 0..2 * m {
            let mut yp = y.clone();
            let mut ym = y.clone();
            if col % 2 == 0 {
                yp.gb[col / 2].0 += h;
                ym.gb[col / 2].0 -= h;
            } else {
                yp.gb[col / 2].1 += h;
                ym.gb[col / 2].1 -= h;
            }
            let vp = sys.solve_linear(&yp);
            let vm = sys.solve_linear(&ym);
            let rp = sys.residual(&cs.kinds, &yp, &vp.voltages, &map);
            let rm = sys.residual(&cs.kinds, &ym, &vm.voltages, &map);
            for row in 0..2 * m {
                let fd = (rp[row] - rm[row]) / (2.0 * h) / scales[row];
                let an = jac[(row, col)];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "J[{},{}]: analytic {} vs FD {}",
                    row,
                    col,
                    an,
                    fd
                );
            }
        }
    }
}
