//! Solution-branch tracing by natural-parameter continuation in admittance
//! space, zero-power seed enumeration, and assembly of the complete
//! multi-solution set at a target loading.
//!
//! The free parameter is one load admittance coordinate (usually a
//! conductance). Nose tips that are singular in power coordinates are regular
//! points here; the pinned system degenerates instead where the branch folds
//! in the free coordinate. Those turning points are solved exactly and
//! reported as singular endpoints, and the curve continues past them on an
//! adjacent solution sheet, which the assembly walks as a separate branch by
//! reflecting the last point through the fold.

use crate::algebraic::{
    AdmittanceState, AlgebraicSystem, BusConstraint, ConstraintSet, FreeVar, VoltageSolution,
};
use crate::net::{BusId, Network};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Magnitude used to realize an ideal short circuit with a finite admittance.
/// Puts the bus voltage around 1e-4 p.u., far below any solution of interest.
pub const SHORT_ADMITTANCE: f64 = 1e4;

/// Voltage-vector max-distance under which two solutions are the same.
pub const DEDUP_TOL: f64 = 1e-4;

pub const SINGULARITY_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub free_bus: BusId,
    pub free_variable: FreeVar,
    pub range: (f64, f64),
    pub initial_step: f64,
    pub min_step: f64,
    pub singularity_threshold: f64,
}

impl SweepConfig {
    /// Default conductance sweep covering every cross-section in the built-in
    /// cases (|P| up to ~3.3 p.u. at |V| ~ 1).
    pub fn conductance(free_bus: BusId) -> Self {
        SweepConfig {
            free_bus,
            free_variable: FreeVar::G,
            range: (-20.0, 20.0),
            initial_step: 0.05,
            min_step: 1e-5,
            singularity_threshold: SINGULARITY_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BranchPoint {
    pub free_value: f64,
    pub admittances: AdmittanceState,
    pub voltages: Vec<Complex64>,
    /// Active power realized at the free bus: g |V|^2.
    pub realized_power: f64,
    pub min_singular_value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchTermination {
    RangeEnd,
    Singularity,
    NewtonFailure,
}

#[derive(Clone, Debug)]
pub struct SolutionBranch {
    pub free_bus: BusId,
    pub free_variable: FreeVar,
    /// Points in strictly increasing free_value order.
    pub points: Vec<BranchPoint>,
    /// Termination at the high end of the sweep.
    pub terminated_by: BranchTermination,
    /// Termination at the low end.
    pub terminated_low: BranchTermination,
    pub seed: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStatus {
    Open,
    Short,
}

#[derive(Clone, Debug)]
pub struct ZeroPowerSeed {
    /// Bit i set means constrained bus i is shorted.
    pub mask: u64,
    pub statuses: Vec<SeedStatus>,
    pub admittances: AdmittanceState,
    pub voltages: Vec<Complex64>,
    /// Set when an earlier seed produced the same voltage profile.
    pub duplicate_of: Option<usize>,
}

/// All 2^(n-1) open/short configurations of the constrained buses, realized
/// with finite admittances and solved linearly. Duplicated voltage profiles
/// are marked, not removed.
pub fn enumerate_zero_power_seeds(net: &Network) -> Vec<ZeroPowerSeed> {
    let m = net.n_constrained();
    assert!(m <= 24, "seed enumeration is exponential; {} buses is too many", m);
    let targets = ConstraintSet::from_network(net);
    let signs: Vec<(f64, f64)> = targets
        .kinds
        .iter()
        .map(|k| {
            let (p, q) = match k {
                BusConstraint::FixedPower { p, q } => (*p, *q),
                BusConstraint::PolynomialPower { p0, q0, .. } => (*p0, *q0),
                BusConstraint::FixedAdmittance { g, b } => (*g, *b),
                BusConstraint::Tied { g, b_factor, .. } => (*g, *b_factor),
                BusConstraint::FreeG { q, .. } => (1.0, *q),
                BusConstraint::FreeB { p, .. } => (*p, 1.0),
            };
            (if p < 0.0 { -1.0 } else { 1.0 }, if q < 0.0 { -1.0 } else { 1.0 })
        })
        .collect();
    let sys = AlgebraicSystem::from_network(net);
    let mut seeds: Vec<ZeroPowerSeed> = (0u64..(1 << m))
        .into_par_iter()
        .map(|mask| {
            let mut y = AdmittanceState::zeros(m);
            let mut statuses = Vec::with_capacity(m);
            for i in 0..m {
                if mask >> i & 1 == 1 {
                    y.gb[i] = (signs[i].0 * SHORT_ADMITTANCE, signs[i].1 * SHORT_ADMITTANCE);
                    statuses.push(SeedStatus::Short);
                } else {
                    statuses.push(SeedStatus::Open);
                }
            }
            let vs = sys.solve_linear(&y);
            ZeroPowerSeed { mask, statuses, admittances: y, voltages: vs.voltages, duplicate_of: None }
        })
        .collect();
    for i in 0..seeds.len() {
        if seeds[i].duplicate_of.is_some() {
            continue;
        }
        for j in (i + 1)..seeds.len() {
            if seeds[j].duplicate_of.is_none()
                && voltage_distance(&seeds[i].voltages, &seeds[j].voltages) < 1e-6
            {
                seeds[j].duplicate_of = Some(i);
            }
        }
    }
    seeds
}

pub fn voltage_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// True when a start state already lies on one of the traced branches: some
/// branch has a point at nearly the same free value and voltage profile. Only
/// used to skip redundant traces, so false negatives just cost time.
fn on_traced_branch(branches: &[SolutionBranch], fv: f64, volts: &[Complex64]) -> bool {
    branches.iter().any(|br| {
        br.points
            .iter()
            .min_by(|a, b| {
                (a.free_value - fv).abs().partial_cmp(&(b.free_value - fv).abs()).unwrap()
            })
            .is_some_and(|pt| {
                (pt.free_value - fv).abs() <= 1.2 * effective_step(0.05, fv)
                    && voltage_distance(&pt.voltages, volts) < 5e-3
            })
    })
}

fn free_value_of(state: &AdmittanceState, idx: usize, var: FreeVar) -> f64 {
    match var {
        FreeVar::G => state.gb[idx].0,
        FreeVar::B => state.gb[idx].1,
    }
}

/// Step size grows with distance from the origin so the short-circuit far zone
/// (|value| ~ 1e4) is covered in a bounded number of points.
fn effective_step(step: f64, at: f64) -> f64 {
    step * (at.abs() / 10.0).max(1.0)
}

/// Newton iteration on the bordered fold system
///
/// ```text
/// F(y, p) = 0,   J(y, p) w = 0,   c . w = 1,
/// ```
///
/// which pins a branch's exact turning point in the free parameter p together
/// with the Jacobian null direction w. Second derivatives enter only through
/// finite-difference products (dJ/dy_k) w; the pin row is the only place p
/// appears, linearly, so dF/dp is a unit vector and J itself is p-free.
fn refine_fold(
    sys: &AlgebraicSystem,
    base: &ConstraintSet,
    free_idx: usize,
    var: FreeVar,
    y0: &AdmittanceState,
    p0: f64,
) -> Option<(AdmittanceState, f64)> {
    let mut cs = base.clone();
    cs.set_pin(free_idx, p0);
    let (_, w0) = sys.min_singular_pair(&cs, y0)?;
    let m2 = 2 * y0.gb.len();
    let pin_row = match var {
        FreeVar::G => 2 * free_idx,
        FreeVar::B => 2 * free_idx + 1,
    };
    let mut y = y0.clone();
    let mut p = p0;
    let mut w = w0.clone();
    let c = w0;
    for _ in 0..30 {
        cs.set_pin(free_idx, p);
        let (res, jac) = sys.scaled_system(&cs, &y)?;
        let jw = &jac * &w;
        let cw = c.dot(&w) - 1.0;
        if res.amax().max(jw.amax()).max(cw.abs()) < 1e-10 {
            return Some((y, p));
        }
        let mut hess_w = DMatrix::<f64>::zeros(m2, m2);
        for k in 0..m2 {
            let mut yk = y.clone();
            let at = if k % 2 == 0 { &mut yk.gb[k / 2].0 } else { &mut yk.gb[k / 2].1 };
            let h = 1e-6 * (1.0 + at.abs());
            *at += h;
            let (_, jk) = sys.scaled_system(&cs, &yk)?;
            let jkw = &jk * &w;
            for r in 0..m2 {
                hess_w[(r, k)] = (jkw[r] - jw[r]) / h;
            }
        }
        let n = 2 * m2 + 1;
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for r in 0..m2 {
            for k in 0..m2 {
                a[(r, k)] = jac[(r, k)];
                a[(m2 + r, k)] = hess_w[(r, k)];
                a[(m2 + r, m2 + 1 + k)] = jac[(r, k)];
            }
            rhs[r] = -res[r];
            rhs[m2 + r] = -jw[r];
        }
        a[(pin_row, m2)] = -1.0;
        for k in 0..m2 {
            a[(2 * m2, m2 + 1 + k)] = c[k];
        }
        rhs[2 * m2] = -cw;
        let dz = a.lu().solve(&rhs)?;
        for i in 0..y.gb.len() {
            y.gb[i].0 += dz[2 * i];
            y.gb[i].1 += dz[2 * i + 1];
        }
        p += dz[m2];
        for i in 0..m2 {
            w[i] += dz[m2 + 1 + i];
        }
    }
    None
}

struct DirectionTrace {
    points: Vec<BranchPoint>,
    termination: BranchTermination,
}

fn make_point(
    sys: &AlgebraicSystem,
    cs: &ConstraintSet,
    free_idx: usize,
    vpos: usize,
    var: FreeVar,
    y: AdmittanceState,
    vs: VoltageSolution,
) -> BranchPoint {
    let msv = sys.min_singular_value(cs, &y);
    let vm2 = vs.voltages[vpos].norm_sqr();
    BranchPoint {
        free_value: free_value_of(&y, free_idx, var),
        realized_power: y.gb[free_idx].0 * vm2,
        min_singular_value: msv,
        admittances: y,
        voltages: vs.voltages,
    }
}

fn trace_direction(
    sys: &AlgebraicSystem,
    base: &ConstraintSet,
    sweep: &SweepConfig,
    free_idx: usize,
    vpos: usize,
    start_point: &BranchPoint,
    up: bool,
) -> DirectionTrace {
    let (lo, hi) = sweep.range;
    let dir = if up { 1.0 } else { -1.0 };
    let mut cs = base.clone();
    let mut points: Vec<BranchPoint> = Vec::new();
    let mut prev: (f64, AdmittanceState) = (start_point.free_value, start_point.admittances.clone());
    let mut prev2: Option<(f64, AdmittanceState)> = None;
    let mut armed = start_point.min_singular_value >= 10.0 * sweep.singularity_threshold;
    let mut step = sweep.initial_step;
    let mut value = start_point.free_value;
    loop {
        if (up && value >= hi) || (!up && value <= lo) {
            return DirectionTrace { points, termination: BranchTermination::RangeEnd };
        }
        let eff = effective_step(step, value);
        let mut next = value + dir * eff;
        if up { next = next.min(hi) } else { next = next.max(lo) }
        cs.set_pin(free_idx, next);
        // Secant predictor from the last two accepted states.
        let guess = match &prev2 {
            Some((v2, y2)) if (prev.0 - v2).abs() > 0.0 => {
                let t = (next - prev.0) / (prev.0 - v2);
                let mut g = prev.1.clone();
                for i in 0..g.gb.len() {
                    g.gb[i].0 += t * (prev.1.gb[i].0 - y2.gb[i].0);
                    g.gb[i].1 += t * (prev.1.gb[i].1 - y2.gb[i].1);
                }
                g
            }
            _ => prev.1.clone(),
        };
        let (y, vs) = sys.solve_newton(&cs, &guess);
        if vs.converged {
            let pt = make_point(sys, &cs, free_idx, vpos, sweep.free_variable, y, vs);
            let msv = pt.min_singular_value;
            prev2 = Some(prev);
            prev = (next, pt.admittances.clone());
            value = next;
            points.push(pt);
            if armed && msv < sweep.singularity_threshold {
                return DirectionTrace { points, termination: BranchTermination::Singularity };
            }
            if msv >= 10.0 * sweep.singularity_threshold {
                armed = true;
            }
            // Grow the step back after earlier halvings.
            step = (step * 2.0).min(sweep.initial_step);
        } else {
            step *= 0.5;
            if step < sweep.min_step {
                // Step budget exhausted; the usual cause is a fold of the
                // branch in the free parameter. Pin the exact turning point
                // and, when it sits just beyond the last accepted point, end
                // the branch there as a singular endpoint.
                let (pl, yl) = (prev.0, prev.1.clone());
                if let Some((yf, pf)) =
                    refine_fold(sys, &cs, free_idx, sweep.free_variable, &yl, pl)
                {
                    let beyond = if up { pf > pl } else { pf < pl };
                    let near = (pf - pl).abs() <= 4.0 * effective_step(sweep.initial_step, pl);
                    if beyond && near && pf > lo && pf < hi {
                        cs.set_pin(free_idx, pf);
                        let vsf = sys.solve_linear(&yf);
                        if vsf.converged {
                            let pt =
                                make_point(sys, &cs, free_idx, vpos, sweep.free_variable, yf, vsf);
                            if pt.min_singular_value < sweep.singularity_threshold {
                                points.push(pt);
                                return DirectionTrace {
                                    points,
                                    termination: BranchTermination::Singularity,
                                };
                            }
                        }
                    }
                }
                return DirectionTrace { points, termination: BranchTermination::NewtonFailure };
            }
        }
    }
}

/// Traces the branch through `start` across the sweep range in both
/// directions. Points come back in increasing free-value order; terminations
/// are reported for both ends.
pub fn trace_branch(
    net: &Network,
    base_constraints: &ConstraintSet,
    sweep: &SweepConfig,
    start: &AdmittanceState,
) -> SolutionBranch {
    let sys = AlgebraicSystem::from_network(net);
    trace_branch_in(&sys, net, base_constraints, sweep, start, "warm start".to_string())
}

fn trace_branch_in(
    sys: &AlgebraicSystem,
    net: &Network,
    base_constraints: &ConstraintSet,
    sweep: &SweepConfig,
    start: &AdmittanceState,
    seed: String,
) -> SolutionBranch {
    let free_idx = net.constrained_index(sweep.free_bus);
    let vpos = sweep.free_bus - 1;
    let v0 = free_value_of(start, free_idx, sweep.free_variable)
        .clamp(sweep.range.0, sweep.range.1);
    let mut cs = match base_constraints.free_index() {
        Some(i) if i == free_idx => base_constraints.clone(),
        Some(_) => panic!("base constraints already carry a different free bus"),
        None => base_constraints
            .with_free(net, sweep.free_bus, sweep.free_variable, v0)
            .expect("free bus must carry a fixed-power constraint"),
    };
    cs.set_pin(free_idx, v0);
    let (y0, vs0) = sys.solve_newton(&cs, start);
    if !vs0.converged {
        return SolutionBranch {
            free_bus: sweep.free_bus,
            free_variable: sweep.free_variable,
            points: vec![],
            terminated_by: BranchTermination::NewtonFailure,
            terminated_low: BranchTermination::NewtonFailure,
            seed,
        };
    }
    let start_point = make_point(sys, &cs, free_idx, vpos, sweep.free_variable, y0, vs0);
    let up = trace_direction(sys, &cs, sweep, free_idx, vpos, &start_point, true);
    let down = trace_direction(sys, &cs, sweep, free_idx, vpos, &start_point, false);
    let mut points = down.points;
    points.reverse();
    points.push(start_point);
    points.extend(up.points);
    SolutionBranch {
        free_bus: sweep.free_bus,
        free_variable: sweep.free_variable,
        points,
        terminated_by: up.termination,
        terminated_low: down.termination,
        seed,
    }
}

/// Closed-form |V2| solutions of the two-bus feeder with consumption (P, Q)
/// behind impedance r + jx. Solves the biquadratic in U = |V2|^2:
/// U^2 + U (2(Pr + Qx) - V1^2) + (P^2 + Q^2)(r^2 + x^2) = 0.
pub fn two_bus_closed_form(r: f64, x: f64, p: f64, q: f64, v1: f64) -> Vec<f64> {
    assert!(v1 > 0.0);
    let b = 2.0 * (p * r + q * x) - v1 * v1;
    let c = (p * p + q * q) * (r * r + x * x);
    let disc = b * b - 4.0 * c;
    if disc < 0.0 {
        return vec![];
    }
    let s = disc.sqrt();
    let mut out: Vec<f64> = [(-b + s) / 2.0, (-b - s) / 2.0]
        .into_iter()
        .filter(|&u| u >= 0.0)
        .map(f64::sqrt)
        .collect();
    out.sort_by(|a, b| b.partial_cmp(a).unwrap());
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    out
}

pub struct SolutionSet {
    pub solutions: Vec<(AdmittanceState, VoltageSolution)>,
    pub branches: Vec<SolutionBranch>,
}

/// Number of uniformly drawn admittance restarts used as a safety net for
/// branches the seeds miss.
pub const RESTARTS: usize = 64;
/// Fixed stream so repeated runs return the same set.
const RESTART_RNG_SEED: u64 = 1;

/// Finds the distinct power-flow solutions at fully specified targets: traces
/// the admittance sweep through every distinct zero-power seed start and every
/// converged random restart, follows fold continuations onto adjacent sheets,
/// collects the branch points where realized power crosses the target,
/// polishes each at the exact targets, and deduplicates by voltage distance.
pub fn find_all_solutions(
    net: &Network,
    target_constraints: &ConstraintSet,
) -> Vec<(AdmittanceState, VoltageSolution)> {
    find_all_solutions_detailed(net, target_constraints).solutions
}

pub fn find_all_solutions_detailed(net: &Network, targets: &ConstraintSet) -> SolutionSet {
    find_all_solutions_configured(net, targets, RESTARTS)
}

/// Same pipeline with an explicit random-restart count.
pub fn find_all_solutions_configured(
    net: &Network,
    targets: &ConstraintSet,
    n_restarts: usize,
) -> SolutionSet {
    let sys = AlgebraicSystem::from_network(net);
    let m = net.n_constrained();

    // Free bus: largest |P| among fixed-power targets.
    let free_idx = targets
        .kinds
        .iter()
        .enumerate()
        .filter_map(|(i, k)| match k {
            BusConstraint::FixedPower { p, .. } => Some((i, p.abs())),
            _ => None,
        })
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);

    let Some(free_idx) = free_idx else {
        // No power targets anywhere: the system is linear in the admittances.
        let (y, vs) = sys.solve_newton(targets, &AdmittanceState::zeros(m));
        let solutions = if vs.converged { vec![(y, vs)] } else { vec![] };
        return SolutionSet { solutions, branches: vec![] };
    };
    let free_bus = net.bus_at_index(free_idx);
    let p_target = match targets.kinds[free_idx] {
        BusConstraint::FixedPower { p, .. } => p,
        _ => unreachable!(),
    };

    let seeds = enumerate_zero_power_seeds(net);

    // Branch starts: each seed polished with the free value pinned at its own
    // seed realization and every other bus at target. Most seeds collapse to
    // the same start.
    let pins: Vec<(f64, AdmittanceState)> = seeds
        .par_iter()
        .map(|s| {
            let pin = free_value_of(&s.admittances, free_idx, FreeVar::G);
            let mut cs = targets
                .with_free(net, free_bus, FreeVar::G, pin)
                .expect("free bus carries a fixed-power target");
            cs.set_pin(free_idx, pin);
            let (y, vs) = sys.solve_newton(&cs, &s.admittances);
            (pin, y, vs)
        })
        .filter(|(_, _, vs)| vs.converged)
        .map(|(pin, y, _)| (pin, y))
        .collect();
    let mut starts: Vec<(f64, AdmittanceState)> = Vec::new();
    for (pin, y) in pins {
        let dup = starts.iter().any(|(p2, y2)| {
            (pin - p2).abs() < 1e-6
                && y.gb
                    .iter()
                    .zip(&y2.gb)
                    .all(|(a, b)| (a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6)
        });
        if !dup {
            starts.push((pin, y));
        }
    }

    // Random restarts polished at the full targets. Every converged state is
    // a solution in its own right and a further branch start.
    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_RNG_SEED);
    let restart_states: Vec<AdmittanceState> = (0..n_restarts)
        .map(|_| {
            let mut y = AdmittanceState::zeros(m);
            for i in 0..m {
                y.gb[i] = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            }
            y
        })
        .collect();
    let restart_hits: Vec<(AdmittanceState, VoltageSolution)> = restart_states
        .par_iter()
        .map(|g| sys.solve_newton(targets, g))
        .filter(|(_, vs)| vs.converged)
        .collect();

    // Trace far enough to include the short-circuit asymptotes on both sides.
    let sweep = SweepConfig {
        free_bus,
        free_variable: FreeVar::G,
        range: (-2.0 * SHORT_ADMITTANCE, 2.0 * SHORT_ADMITTANCE),
        initial_step: 0.05,
        min_step: 1e-5,
        singularity_threshold: SINGULARITY_THRESHOLD,
    };

    // Walk the queue of starts: seed starts first, then distinct restart
    // hits. A branch ending at a fold spawns a reflected start on the
    // adjacent sheet, so one seed covers every fold-connected sheet of its
    // curve. Which side of a fold a state sits on is the sign of its offset
    // from the fold state projected on the null direction; a registry of
    // folds with per-side flags stops the reflection from bouncing back and
    // forth across the same fold.
    struct FoldSeen {
        fv: f64,
        volts: Vec<Complex64>,
        sides: [bool; 2],
    }
    let side_of = |w: &DVector<f64>, y: &AdmittanceState, yf: &AdmittanceState| -> f64 {
        let mut s = 0.0;
        for i in 0..y.gb.len() {
            s += w[2 * i] * (y.gb[i].0 - yf.gb[i].0);
            s += w[2 * i + 1] * (y.gb[i].1 - yf.gb[i].1);
        }
        s
    };
    let mut queue: Vec<(AdmittanceState, String, bool)> = starts
        .into_iter()
        .map(|(pin, y)| (y, format!("seed start at g={pin:.1}"), false))
        .collect();
    {
        let mut distinct: Vec<&VoltageSolution> = Vec::new();
        for (y, vs) in &restart_hits {
            if !distinct
                .iter()
                .any(|v2| voltage_distance(&vs.voltages, &v2.voltages) < DEDUP_TOL)
            {
                distinct.push(vs);
                queue.push((y.clone(), "random restart".to_string(), false));
            }
        }
    }
    const MAX_BRANCHES: usize = 48;
    let mut branches: Vec<SolutionBranch> = Vec::new();
    let mut folds: Vec<FoldSeen> = Vec::new();
    let mut qi = 0;
    while qi < queue.len() && branches.len() < MAX_BRANCHES {
        let (y_start, label, is_continuation) = queue[qi].clone();
        qi += 1;
        // Fresh starts already lying on a traced branch are redundant; fold
        // continuations are exempt because adjacent sheets can run closer
        // together than any visited tolerance near their shared fold.
        if !is_continuation {
            let fv = free_value_of(&y_start, free_idx, FreeVar::G);
            let vstart = sys.solve_linear(&y_start);
            if vstart.converged && on_traced_branch(&branches, fv, &vstart.voltages) {
                continue;
            }
        }
        let br = trace_branch_in(&sys, net, targets, &sweep, &y_start, label);
        for low_end in [false, true] {
            let term = if low_end { br.terminated_low } else { br.terminated_by };
            if term != BranchTermination::Singularity || br.points.len() < 2 {
                continue;
            }
            let (fold, prefold) = if low_end {
                (&br.points[0], &br.points[1])
            } else {
                (&br.points[br.points.len() - 1], &br.points[br.points.len() - 2])
            };
            let mut cs2 = targets
                .with_free(net, free_bus, sweep.free_variable, fold.free_value)
                .expect("free bus carries a fixed-power target");
            cs2.set_pin(free_idx, fold.free_value);
            let Some((_, mut w)) = sys.min_singular_pair(&cs2, &fold.admittances) else {
                continue;
            };
            // SVD leaves the null vector's overall sign arbitrary; canonicalize
            // so side labels agree when the same fold is met again.
            let lead = w.iter().map(|x| x.abs()).fold(0.0, f64::max);
            if let Some(k) = w.iter().position(|x| x.abs() == lead) {
                if w[k] < 0.0 {
                    w.neg_mut();
                }
            }
            let s_pre = side_of(&w, &prefold.admittances, &fold.admittances);
            if s_pre == 0.0 {
                continue;
            }
            let fi = folds
                .iter()
                .position(|f| {
                    (f.fv - fold.free_value).abs() <= 1e-6 * (1.0 + fold.free_value.abs())
                        && voltage_distance(&f.volts, &fold.voltages) < 1e-6
                })
                .unwrap_or_else(|| {
                    folds.push(FoldSeen {
                        fv: fold.free_value,
                        volts: fold.voltages.clone(),
                        sides: [false, false],
                    });
                    folds.len() - 1
                });
            let pre_side = usize::from(s_pre >= 0.0);
            folds[fi].sides[pre_side] = true;
            if folds[fi].sides[1 - pre_side] {
                continue;
            }
            // The curve is locally quadratic around the fold with the free
            // value stationary, so the neighbor sheet's state at the prefold
            // value is the prefold state mirrored through the fold state.
            let mut yr = fold.admittances.clone();
            for i in 0..m {
                yr.gb[i].0 = 2.0 * fold.admittances.gb[i].0 - prefold.admittances.gb[i].0;
                yr.gb[i].1 = 2.0 * fold.admittances.gb[i].1 - prefold.admittances.gb[i].1;
            }
            match sweep.free_variable {
                FreeVar::G => yr.gb[free_idx].0 = prefold.free_value,
                FreeVar::B => yr.gb[free_idx].1 = prefold.free_value,
            }
            cs2.set_pin(free_idx, prefold.free_value);
            let (yn, vn) = sys.solve_newton(&cs2, &yr);
            let s_new = side_of(&w, &yn, &fold.admittances);
            if vn.converged && s_new * s_pre < 0.0 {
                folds[fi].sides[1 - pre_side] = true;
                queue.push((
                    yn,
                    format!("fold continuation at g={:.3}", fold.free_value),
                    true,
                ));
            }
        }
        branches.push(br);
    }

    // Collect crossings of the realized power through the target and polish
    // each from the bracketing states. Restart hits already solve the targets
    // exactly; they join as candidates directly.
    let mut candidates = restart_hits;
    let crossings: Vec<AdmittanceState> = branches
        .par_iter()
        .flat_map_iter(|br| {
            let mut guesses = Vec::new();
            for w in br.points.windows(2) {
                let (a, b) = (&w[0], &w[1]);
                let (pa, pb) = (a.realized_power - p_target, b.realized_power - p_target);
                if pa == 0.0 || pa * pb < 0.0 {
                    let t = if (pb - pa).abs() > 0.0 { pa / (pa - pb) } else { 0.0 };
                    let mut g = a.admittances.clone();
                    for i in 0..g.gb.len() {
                        g.gb[i].0 += t * (b.admittances.gb[i].0 - a.admittances.gb[i].0);
                        g.gb[i].1 += t * (b.admittances.gb[i].1 - a.admittances.gb[i].1);
                    }
                    guesses.push(g);
                }
            }
            if let Some(last) = br.points.last() {
                if last.realized_power - p_target == 0.0 {
                    guesses.push(last.admittances.clone());
                }
            }
            guesses
        })
        .collect();
    candidates.par_extend(
        crossings
            .par_iter()
            .map(|g| sys.solve_newton(targets, g))
            .filter(|(_, vs)| vs.converged),
    );

    // Deduplicate by voltage distance; order by free-bus voltage, descending,
    // so the normal (highest-voltage) solution comes first.
    let mut solutions: Vec<(AdmittanceState, VoltageSolution)> = Vec::new();
    for (y, vs) in candidates {
        if y.gb.iter().any(|(g, b)| !g.is_finite() || !b.is_finite()) {
            continue;
        }
        if !solutions
            .iter()
            .any(|(_, v2)| voltage_distance(&vs.voltages, &v2.voltages) < DEDUP_TOL)
        {
            solutions.push((y, vs));
        }
    }
    solutions.sort_by(|a, b| {
        b.1.vmag(free_bus)
            .partial_cmp(&a.1.vmag(free_bus))
            .unwrap()
    });
    SolutionSet { solutions, branches }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::builtin_case;
    use approx::assert_relative_eq;

    #[test]
    fn closed_form_no_load_gives_open_and_short() {
        let v = two_bus_closed_form(0.01, 0.2, 0.0, 0.0, 1.0);
        assert_eq!(v.len(), 2);
        assert_relative_eq!(v[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(v[1], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn closed_form_lossless_biquadratic() {
        // r = 0: U^2 - U + x^2 P^2 = 0, symmetric in the sign of P.
        let (x, p) = (0.2, 1.5);
        let vp = two_bus_closed_form(0.0, x, p, 0.0, 1.0);
        let vn = two_bus_closed_form(0.0, x, -p, 0.0, 1.0);
        assert_eq!(vp.len(), 2);
        for (a, b) in vp.iter().zip(&vn) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        let u = vp[0] * vp[0];
        assert_relative_eq!(u * u - u + x * x * p * p, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_beyond_loadability_is_empty() {
        // For Q = 0 the discriminant is 1 - 4Pr - 4P^2x^2, zero at
        // P = (-r + sqrt(r^2+x^2)) / (2x^2) ~ 2.378 for r=0.01, x=0.2.
        assert!(two_bus_closed_form(0.01, 0.2, 2.4, 0.0, 1.0).is_empty());
        assert_eq!(two_bus_closed_form(0.01, 0.2, 2.3, 0.0, 1.0).len(), 2);
    }

    #[test]
    fn seed_count_is_exponential_in_buses() {
        let net = builtin_case("switch_case").unwrap().network;
        let seeds = enumerate_zero_power_seeds(&net);
        assert_eq!(seeds.len(), 4);
        let net13 = builtin_case("thirteen_bus").unwrap().network;
        assert_eq!(enumerate_zero_power_seeds(&net13).len(), 4096);
    }

    #[test]
    fn all_open_seed_is_flat() {
        let net = builtin_case("switch_case").unwrap().network;
        let seeds = enumerate_zero_power_seeds(&net);
        let open = &seeds[0];
        assert_eq!(open.mask, 0);
        for v in &open.voltages {
            assert_relative_eq!(v.re, 1.0, epsilon = 1e-12);
            assert_relative_eq!(v.im, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn three_bus_base_has_the_two_known_solutions() {
        let case = builtin_case("three_bus_base").unwrap();
        let targets = ConstraintSet::from_network(&case.network);
        let sols = find_all_solutions(&case.network, &targets);
        assert!(sols.len() >= 2, "found {} solutions", sols.len());
        let v2: Vec<f64> = sols.iter().map(|(_, vs)| vs.vmag(2)).collect();
        assert!(v2.iter().any(|v| (v - 1.012).abs() < 0.02), "{:?}", v2);
        assert!(v2.iter().any(|v| (v - 0.560).abs() < 0.02), "{:?}", v2);
    }

    #[test]
    fn two_bus_agreement_with_closed_form_spot_checks() {
        use crate::net::{Branch, LoadModel, Network};
        for (r, x, p, q) in [
            (0.05, 0.3, 1.0, 0.2),
            (0.2, 0.1, -1.5, -0.4),
            (0.01, 0.45, 0.3, -0.9),
        ] {
            let net = Network {
                n_buses: 2,
                slack_bus: 1,
                slack_voltage: Complex64::new(1.0, 0.0),
                branches: vec![Branch::line(1, 2, r, x)],
                loads: vec![
                    None,
                    Some(LoadModel::DynamicAdmittance { tau1: 0.01, tau2: 0.01, p_set: p, q_set: q }),
                ],
                ultc: vec![],
            };
            let targets = ConstraintSet::from_network(&net);
            let found: Vec<f64> = find_all_solutions(&net, &targets)
                .iter()
                .map(|(_, vs)| vs.vmag(2))
                .collect();
            let exact = two_bus_closed_form(r, x, p, q, 1.0);
            assert_eq!(found.len(), exact.len(), "r={} x={} p={} q={}: {:?} vs {:?}", r, x, p, q, found, exact);
            for (f, e) in found.iter().zip(&exact) {
                assert_relative_eq!(f, e, epsilon = 1e-6);
            }
        }
    }
}
