//! CSV rendering for solver and simulation results.
//!
//! All numbers are written with nine significant digits in exponent form so
//! that repeated runs of the same command produce byte-identical files.

use crate::dynsim::Trajectory;
use crate::homotopy::SolutionBranch;
use crate::net::Network;
use crate::stability::{Classification, Equilibrium, PhaseField};

/// Nine significant digits, '.' decimal separator, no locale surprises.
pub fn fmt(x: f64) -> String {
    // Normalize -0.0 so the sign of a rounded-to-zero value cannot depend
    // on floating-point noise upstream.
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.8e}")
}

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: Vec<S>) -> Self {
        Table { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// One row per output sample. Per bus: voltage magnitude, realized
/// conductance and susceptance, and consumed P, Q. The slack bus carries no
/// load, so its g, b are zero and its P, Q are the negated source output,
/// keeping every power column in the consumption convention. Tap ratios
/// follow, one column per regulating transformer.
pub fn trajectory_table(net: &Network, tr: &Trajectory) -> Table {
    let mut header = vec!["t".to_string()];
    for bus in 1..=net.n_buses {
        for part in ["v", "g", "b", "p", "q"] {
            header.push(format!("{part}{bus}"));
        }
    }
    for k in 1..=net.ultc.len() {
        header.push(format!("tap{k}"));
    }
    let mut table = Table::new(header);
    for s in &tr.samples {
        let mut row = vec![fmt(s.t)];
        for bus in 1..=net.n_buses {
            let vm = s.voltages[bus - 1].norm();
            let (g, b, p, q) = if bus == net.slack_bus {
                (0.0, 0.0, -s.slack_power.re, -s.slack_power.im)
            } else {
                let (g, b) = s.y.gb[net.constrained_index(bus)];
                (g, b, g * vm * vm, b * vm * vm)
            };
            row.extend([fmt(vm), fmt(g), fmt(b), fmt(p), fmt(q)]);
        }
        for &k in &s.taps {
            row.push(fmt(k));
        }
        table.push(row);
    }
    table
}

/// Long form: one row per (solution, bus).
pub fn solutions_table(net: &Network, sols: &[Equilibrium]) -> Table {
    let mut table = Table::new(vec![
        "solution", "bus", "vmag", "v_re", "v_im", "g", "b", "p", "q", "stable",
    ]);
    for (si, eq) in sols.iter().enumerate() {
        let stable = match eq.classification {
            Classification::Stable => "1",
            Classification::Unstable { .. } => "0",
            Classification::Marginal => "-1",
        };
        for bus in 1..=net.n_buses {
            let v = eq.voltages[bus - 1];
            let (g, b) = if bus == net.slack_bus {
                (0.0, 0.0)
            } else {
                eq.admittances.gb[net.constrained_index(bus)]
            };
            let vm = v.norm();
            table.push(vec![
                si.to_string(),
                bus.to_string(),
                fmt(vm),
                fmt(v.re),
                fmt(v.im),
                fmt(g),
                fmt(b),
                fmt(g * vm * vm),
                fmt(b * vm * vm),
                stable.to_string(),
            ]);
        }
    }
    table
}

/// One row per continuation point, ordered by increasing free value.
pub fn branch_table(net: &Network, branch: &SolutionBranch) -> Table {
    let mut header =
        vec!["free_value".to_string(), "realized_power".to_string(), "min_singular_value".to_string()];
    for bus in 1..=net.n_buses {
        header.push(format!("v{bus}"));
    }
    for bus in net.constrained_buses() {
        header.push(format!("g{bus}"));
        header.push(format!("b{bus}"));
    }
    let mut table = Table::new(header);
    for pt in &branch.points {
        let mut row = vec![fmt(pt.free_value), fmt(pt.realized_power), fmt(pt.min_singular_value)];
        for bus in 1..=net.n_buses {
            row.push(fmt(pt.voltages[bus - 1].norm()));
        }
        for (g, b) in &pt.admittances.gb {
            row.push(fmt(*g));
            row.push(fmt(*b));
        }
        table.push(row);
    }
    table
}

/// Grid nodes in row-major order (y outer, x inner). Nodes where the network
/// equations had no solution leave the derivative cells empty.
pub fn field_table(pf: &PhaseField) -> Table {
    let mut table = Table::new(vec!["x", "y", "dxdt", "dydt"]);
    for (yi, &y) in pf.ys.iter().enumerate() {
        for (xi, &x) in pf.xs.iter().enumerate() {
            let (du, dv) = match pf.field[yi][xi] {
                Some((du, dv)) => (fmt(du), fmt(dv)),
                None => (String::new(), String::new()),
            };
            table.push(vec![fmt(x), fmt(y), du, dv]);
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::builtin_case;
    use crate::dynsim::{simulate, SimOptions};

    #[test]
    fn nine_significant_digits_and_stable_zero() {
        assert_eq!(fmt(1.0), "1.00000000e0");
        assert_eq!(fmt(-0.0), "0.00000000e0");
        assert_eq!(fmt(0.012345678901), "1.23456789e-2");
        assert_eq!(fmt(-312.5), "-3.12500000e2");
    }

    #[test]
    fn repeated_runs_render_byte_identical_csv() {
        let case = builtin_case("three_bus_base").unwrap();
        let mut sc = case.scenario("steady").unwrap().clone();
        sc.t_end = 1.0;
        sc.output_interval = 0.25;
        let a = simulate(&case.network, &sc, &SimOptions::default()).unwrap();
        let b = simulate(&case.network, &sc, &SimOptions::default()).unwrap();
        let ta = trajectory_table(&case.network, &a).csv();
        let tb = trajectory_table(&case.network, &b).csv();
        assert_eq!(ta, tb);
        assert!(ta.starts_with("t,v1,g1,b1,p1,q1,v2,"));
        assert_eq!(ta.lines().count(), 1 + 5);
    }
}
