//! Network topology, per-unit electrical data, load model attachments, and the
//! bus admittance matrix.

use nalgebra::DMatrix;
use num_complex::Complex64;

/// Buses are numbered from 1, matching single-line-diagram labels.
pub type BusId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    /// Series impedance r + jx in p.u.
    pub z: Complex64,
    /// Index into `Network::ultc` when this branch carries a tap changer.
    /// The ideal ratio K sits on the `from` side of the series impedance.
    pub tap: Option<usize>,
}

impl Branch {
    pub fn line(from: BusId, to: BusId, r: f64, x: f64) -> Self {
        Branch { from, to, z: Complex64::new(r, x), tap: None }
    }
}

/// Per-bus load behavior. Setpoints and coefficients are in p.u. on the system
/// base; positive powers consume, negative generate.
#[derive(Clone, Debug, PartialEq)]
pub enum LoadModel {
    /// First-order admittance dynamics driven by power mismatch:
    /// tau1 dg/dt = -(g|V|^2 - p_set), tau2 db/dt = -(b|V|^2 - q_set).
    DynamicAdmittance { tau1: f64, tau2: f64, p_set: f64, q_set: f64 },
    /// First-order relaxation of the admittance itself toward a commanded value:
    /// tau_g dg/dt = -(g - g_set), tau_b db/dt = -(b - b_set).
    ImpedanceSetpoint { tau_g: f64, tau_b: f64, g_set: f64, b_set: f64 },
    /// Static polynomial (ZIP) characteristic
    /// P(V) = p0 (aP |V|^2 + bP |V| + cP), Q(V) likewise; coefficients sum to 1.
    /// With a = 1, b = c = 0 this is a constant-impedance load.
    Polynomial { p0: f64, q0: f64, a_p: f64, b_p: f64, c_p: f64, a_q: f64, b_q: f64, c_q: f64 },
    /// Static constant-power constraint.
    ConstantPower { p: f64, q: f64 },
    /// Fixed conductance with susceptance tied to another bus's susceptance:
    /// b = b_factor * b(b_source). Used for reduced-order phase portraits.
    TiedAdmittance { g: f64, b_factor: f64, b_source: BusId },
}

impl LoadModel {
    pub fn zero() -> Self {
        LoadModel::Polynomial { p0: 0.0, q0: 0.0, a_p: 1.0, b_p: 0.0, c_p: 0.0, a_q: 1.0, b_q: 0.0, c_q: 0.0 }
    }

    pub fn constant_impedance(g: f64, b: f64) -> Self {
        LoadModel::Polynomial { p0: g, q0: b, a_p: 1.0, b_p: 0.0, c_p: 0.0, a_q: 1.0, b_q: 0.0, c_q: 0.0 }
    }

    /// Buses whose (g, b) are states of the ODE system.
    pub fn is_dynamic(&self) -> bool {
        matches!(self, LoadModel::DynamicAdmittance { .. } | LoadModel::ImpedanceSetpoint { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UltcDevice {
    /// Tap ratio at simulation start.
    pub k_init: f64,
    pub k_min: f64,
    pub k_max: f64,
    /// Deadband bounds on the controlled bus voltage magnitude.
    pub v_min: f64,
    pub v_max: f64,
    pub controlled_bus: BusId,
    /// Magnitude of dK/dt while the controller is active (ratio per second).
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub n_buses: usize,
    pub slack_bus: BusId,
    pub slack_voltage: Complex64,
    pub branches: Vec<Branch>,
    /// One load per non-slack bus (index bus-1); the slack slot is None.
    pub loads: Vec<Option<LoadModel>>,
    pub ultc: Vec<UltcDevice>,
}

impl Network {
    /// Load model at a bus; None for the slack bus and out-of-range ids.
    pub fn load(&self, bus: BusId) -> Option<&LoadModel> {
        bus.checked_sub(1).and_then(|i| self.loads.get(i)).and_then(|l| l.as_ref())
    }

    /// Non-slack buses in ascending order; their position is the index used by
    /// `AdmittanceState` and `ConstraintSet`.
    pub fn constrained_buses(&self) -> impl Iterator<Item = BusId> + '_ {
        (1..=self.n_buses).filter(move |&b| b != self.slack_bus)
    }

    pub fn n_constrained(&self) -> usize {
        self.n_buses - 1
    }

    /// Position of `bus` among the non-slack buses.
    pub fn constrained_index(&self, bus: BusId) -> usize {
        assert!(bus != self.slack_bus, "slack bus is not constrained");
        if bus < self.slack_bus { bus - 1 } else { bus - 2 }
    }

    pub fn bus_at_index(&self, idx: usize) -> BusId {
        let bus = idx + 1;
        if bus < self.slack_bus { bus } else { bus + 1 }
    }

    pub fn initial_taps(&self) -> Vec<f64> {
        self.ultc.iter().map(|d| d.k_init).collect()
    }
}

/// Bus admittance matrix for the given tap ratios (one per `UltcDevice`, in
/// order). Load admittances are not included; they are stamped by the solvers.
///
/// A tap branch is the ideal-ratio transformer (ratio K on the `from` side) in
/// series with the branch impedance: Yff = y/K^2, Yft = Ytf = -y/K, Ytt = y.
pub fn build_admittance_matrix(net: &Network, tap_ratios: &[f64]) -> DMatrix<Complex64> {
    assert_eq!(tap_ratios.len(), net.ultc.len(), "one tap ratio per ULTC device");
    let n = net.n_buses;
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for br in &net.branches {
        let (f, t) = (br.from - 1, br.to - 1);
        let yb = Complex64::new(1.0, 0.0) / br.z;
        match br.tap {
            None => {
                y[(f, f)] += yb;
                y[(t, t)] += yb;
                y[(f, t)] -= yb;
                y[(t, f)] -= yb;
            }
            Some(d) => {
                let k = tap_ratios[d];
                y[(f, f)] += yb / (k * k);
                y[(t, t)] += yb;
                y[(f, t)] -= yb / k;
                y[(t, f)] -= yb / k;
            }
        }
    }
    y
}

/// Complex power delivered by the slack source, computed from the assembled
/// admittance matrix row (with any temporary shunts stamped in).
pub fn slack_injection(
    net: &Network,
    taps: &[f64],
    shunts: &[(BusId, f64, f64)],
    voltages: &[Complex64],
) -> Complex64 {
    let mut ybus = build_admittance_matrix(net, taps);
    for &(bus, g, b) in shunts {
        ybus[(bus - 1, bus - 1)] += Complex64::new(g, -b);
    }
    let s = net.slack_bus - 1;
    let mut current = Complex64::new(0.0, 0.0);
    for j in 0..net.n_buses {
        current += ybus[(s, j)] * voltages[j];
    }
    voltages[s] * current.conj()
}

/// Power accounting over one solved operating point. Losses come straight
/// from the branch impedances and generation from the admittance-matrix slack
/// row, so a vanishing residual cross-checks both assembly routes.
pub struct PowerAudit {
    pub generated: Complex64,
    pub consumed_loads: Complex64,
    pub consumed_shunts: Complex64,
    pub branch_losses: Complex64,
}

impl PowerAudit {
    pub fn residual(&self) -> f64 {
        (self.generated - self.consumed_loads - self.consumed_shunts - self.branch_losses).norm()
    }
}

/// `realized` holds the instantaneous (g, b) of every constrained bus; a bus
/// consumes |V|^2 (g + jb). Shunts must sit at non-slack buses.
pub fn power_audit(
    net: &Network,
    taps: &[f64],
    shunts: &[(BusId, f64, f64)],
    voltages: &[Complex64],
    realized: &crate::algebraic::AdmittanceState,
) -> PowerAudit {
    let generated = slack_injection(net, taps, shunts, voltages);
    let mut consumed_loads = Complex64::new(0.0, 0.0);
    for (i, bus) in net.constrained_buses().enumerate() {
        let (g, b) = realized.gb[i];
        consumed_loads += voltages[bus - 1].norm_sqr() * Complex64::new(g, b);
    }
    let mut consumed_shunts = Complex64::new(0.0, 0.0);
    for &(bus, g, b) in shunts {
        consumed_shunts += voltages[bus - 1].norm_sqr() * Complex64::new(g, b);
    }
    let mut branch_losses = Complex64::new(0.0, 0.0);
    for br in &net.branches {
        // Tap branches: the ideal ratio transforms the from-side voltage; the
        // series element alone dissipates.
        let vf = match br.tap {
            None => voltages[br.from - 1],
            Some(d) => voltages[br.from - 1] / taps[d],
        };
        let i_series = (vf - voltages[br.to - 1]) / br.z;
        branch_losses += i_series.norm_sqr() * br.z;
    }
    PowerAudit { generated, consumed_loads, consumed_shunts, branch_losses }
}

/// Checks every structural invariant and returns human-readable violations.
/// Empty result means the network is usable by every solver in the crate.
pub fn validate_network(net: &Network) -> Vec<String> {
    let mut v = Vec::new();
    let n = net.n_buses;
    if n < 2 {
        v.push("network needs at least two buses".to_string());
        return v;
    }
    if net.slack_bus < 1 || net.slack_bus > n {
        v.push(format!("slack bus {} out of range 1..={}", net.slack_bus, n));
        return v;
    }
    if !net.slack_voltage.re.is_finite() || !net.slack_voltage.im.is_finite() {
        v.push("slack voltage is not finite".to_string());
    }
    if net.slack_voltage.norm() == 0.0 {
        v.push("slack voltage magnitude must be positive".to_string());
    }
    if net.loads.len() != n {
        v.push(format!("expected {} load slots, found {}", n, net.loads.len()));
        return v;
    }
    for bus in 1..=n {
        let slot = &net.loads[bus - 1];
        if bus == net.slack_bus {
            if slot.is_some() {
                v.push(format!("slack bus {} must not carry a load model", bus));
            }
            continue;
        }
        let Some(load) = slot else {
            v.push(format!("bus {} has no load model", bus));
            continue;
        };
        match load {
            LoadModel::DynamicAdmittance { tau1, tau2, p_set, q_set } => {
                if *tau1 <= 0.0 || *tau2 <= 0.0 {
                    v.push(format!("bus {}: time constants must be positive", bus));
                }
                if !p_set.is_finite() || !q_set.is_finite() {
                    v.push(format!("bus {}: setpoints must be finite", bus));
                }
            }
            LoadModel::ImpedanceSetpoint { tau_g, tau_b, g_set, b_set } => {
                if *tau_g <= 0.0 || *tau_b <= 0.0 {
                    v.push(format!("bus {}: time constants must be positive", bus));
                }
                if !g_set.is_finite() || !b_set.is_finite() {
                    v.push(format!("bus {}: setpoints must be finite", bus));
                }
            }
            LoadModel::Polynomial { p0, q0, a_p, b_p, c_p, a_q, b_q, c_q } => {
                if !(p0.is_finite() && q0.is_finite()) {
                    v.push(format!("bus {}: base powers must be finite", bus));
                }
                if (a_p + b_p + c_p - 1.0).abs() > 1e-12 {
                    v.push(format!("bus {}: ZIP coefficient sum aP+bP+cP = {} != 1", bus, a_p + b_p + c_p));
                }
                if (a_q + b_q + c_q - 1.0).abs() > 1e-12 {
                    v.push(format!("bus {}: ZIP coefficient sum aQ+bQ+cQ = {} != 1", bus, a_q + b_q + c_q));
                }
            }
            LoadModel::ConstantPower { p, q } => {
                if !p.is_finite() || !q.is_finite() {
                    v.push(format!("bus {}: powers must be finite", bus));
                }
            }
            LoadModel::TiedAdmittance { g, b_factor, b_source } => {
                if !g.is_finite() || !b_factor.is_finite() {
                    v.push(format!("bus {}: tied admittance values must be finite", bus));
                }
                if *b_source == bus || *b_source < 1 || *b_source > n || *b_source == net.slack_bus {
                    v.push(format!("bus {}: tie source {} is not another constrained bus", bus, b_source));
                } else if !net.loads[b_source - 1].as_ref().is_some_and(|l| l.is_dynamic()) {
                    v.push(format!("bus {}: tie source {} must carry a dynamic load", bus, b_source));
                }
            }
        }
    }
    for (i, br) in net.branches.iter().enumerate() {
        if br.from == br.to {
            v.push(format!("branch {}: from and to coincide ({})", i, br.from));
        }
        if br.from < 1 || br.from > n || br.to < 1 || br.to > n {
            v.push(format!("branch {}: endpoint out of range", i));
        }
        if !(br.z.re.is_finite() && br.z.im.is_finite()) || br.z.norm() == 0.0 {
            v.push(format!("branch {}: impedance must be finite and nonzero", i));
        }
        if let Some(d) = br.tap {
            if d >= net.ultc.len() {
                v.push(format!("branch {}: tap device {} does not exist", i, d));
            }
        }
    }
    for (d, u) in net.ultc.iter().enumerate() {
        if !(u.k_min <= u.k_init && u.k_init <= u.k_max) {
            v.push(format!("ULTC {}: k_init {} outside [{}, {}]", d, u.k_init, u.k_min, u.k_max));
        }
        if u.v_min >= u.v_max {
            v.push(format!("ULTC {}: deadband bounds out of order", d));
        }
        if u.rate <= 0.0 {
            v.push(format!("ULTC {}: rate must be positive", d));
        }
        if u.controlled_bus < 1 || u.controlled_bus > n {
            v.push(format!("ULTC {}: controlled bus out of range", d));
        }
        if !net.branches.iter().any(|b| b.tap == Some(d)) {
            v.push(format!("ULTC {}: no branch references device", d));
        }
    }
    // Connectivity over the undirected branch graph.
    let mut seen = vec![false; n + 1];
    let mut stack = vec![net.slack_bus];
    seen[net.slack_bus] = true;
    while let Some(b) = stack.pop() {
        for br in &net.branches {
            let other = if br.from == b { br.to } else if br.to == b { br.from } else { continue };
            if (1..=n).contains(&other) && !seen[other] {
                seen[other] = true;
                stack.push(other);
            }
        }
    }
    for bus in 1..=n {
        if !seen[bus] {
            v.push(format!("bus {} unreachable from the slack bus", bus));
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_bus(r: f64, x: f64) -> Network {
        Network {
            n_buses: 2,
            slack_bus: 1,
            slack_voltage: Complex64::new(1.0, 0.0),
            branches: vec![Branch::line(1, 2, r, x)],
            loads: vec![None, Some(LoadModel::zero())],
            ultc: vec![],
        }
    }

    #[test]
    fn ybus_two_bus_matches_hand_reciprocal() {
        // 1/(0.03 + j0.15) = (0.03 - j0.15)/0.0234, frozen by hand.
        let net = two_bus(0.03, 0.15);
        let y = build_admittance_matrix(&net, &[]);
        assert_relative_eq!(y[(0, 1)].re, -1.282051282051282, max_relative = 1e-14);
        assert_relative_eq!(y[(0, 1)].im, 6.410256410256410, max_relative = 1e-14);
        assert_eq!(y[(0, 1)], y[(1, 0)]);
        assert_eq!(y[(0, 0)], -y[(0, 1)]);
        assert_eq!(y[(1, 1)], -y[(0, 1)]);
    }

    #[test]
    fn ybus_rows_sum_to_zero_without_taps() {
        let net = crate::cases::builtin_case("thirteen_bus").unwrap().network;
        let y = build_admittance_matrix(&net, &[]);
        for i in 0..net.n_buses {
            let s: Complex64 = (0..net.n_buses).map(|j| y[(i, j)]).sum();
            assert!(s.norm() < 1e-12, "row {} sums to {}", i, s);
        }
    }

    #[test]
    fn ybus_thirteen_bus_entry_1_4() {
        // -1/(0.041 + j0.131): |z|^2 = 0.018842.
        let net = crate::cases::builtin_case("thirteen_bus").unwrap().network;
        let y = build_admittance_matrix(&net, &[]);
        assert_relative_eq!(y[(0, 3)].re, -0.041 / 0.018842, max_relative = 1e-14);
        assert_relative_eq!(y[(0, 3)].im, 0.131 / 0.018842, max_relative = 1e-14);
    }

    #[test]
    fn tap_stamp_is_ideal_transformer_in_series() {
        let mut net = two_bus(0.0, 0.02);
        net.ultc.push(UltcDevice {
            k_init: 1.1,
            k_min: 0.8,
            k_max: 1.2,
            v_min: 0.985,
            v_max: 1.015,
            controlled_bus: 2,
            rate: 1.0,
        });
        net.branches[0].tap = Some(0);
        let k = 1.1;
        let y = build_admittance_matrix(&net, &[k]);
        let yb = Complex64::new(1.0, 0.0) / Complex64::new(0.0, 0.02);
        assert_relative_eq!((y[(0, 0)] - yb / (k * k)).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!((y[(0, 1)] + yb / k).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!((y[(1, 1)] - yb).norm(), 0.0, epsilon = 1e-12);
        // Open secondary: V2 = V1/K exactly.
        let v2 = -y[(1, 0)] / y[(1, 1)];
        assert_relative_eq!(v2.re, 1.0 / k, max_relative = 1e-12);
        assert_relative_eq!(v2.im, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn validate_flags_bad_zip_sum_and_disconnection() {
        let mut net = two_bus(0.01, 0.2);
        net.loads[1] = Some(LoadModel::Polynomial {
            p0: 0.1, q0: 0.1, a_p: 0.5, b_p: 0.2, c_p: 0.2, a_q: 1.0, b_q: 0.0, c_q: 0.0,
        });
        let v = validate_network(&net);
        assert!(v.iter().any(|m| m.contains("ZIP coefficient sum")), "{:?}", v);

        let disconnected = Network {
            n_buses: 3,
            slack_bus: 1,
            slack_voltage: Complex64::new(1.0, 0.0),
            branches: vec![Branch::line(1, 2, 0.01, 0.1)],
            loads: vec![None, Some(LoadModel::zero()), Some(LoadModel::zero())],
            ultc: vec![],
        };
        let v = validate_network(&disconnected);
        assert!(v.iter().any(|m| m.contains("unreachable")), "{:?}", v);
    }

    #[test]
    fn builtin_cases_validate_clean() {
        for name in crate::cases::case_names() {
            let c = crate::cases::builtin_case(name).unwrap();
            let v = validate_network(&c.network);
            assert!(v.is_empty(), "{}: {:?}", name, v);
        }
    }
}
