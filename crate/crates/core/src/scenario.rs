//! TOML file formats for networks and scenarios.
//!
//! The on-disk structs mirror the in-memory types but keep everything in
//! plain scalars (impedances as r/x pairs, the slack voltage as re/im), so
//! files stay hand-editable and the format is independent of internal
//! representation changes.

use crate::cases::Scenario;
use crate::net::{Branch, LoadModel, Network, UltcDevice};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    n_buses: usize,
    slack_bus: usize,
    /// Slack source voltage as [re, im].
    slack_voltage: [f64; 2],
    #[serde(rename = "branch")]
    branches: Vec<BranchFile>,
    #[serde(rename = "load")]
    loads: Vec<LoadFile>,
    #[serde(rename = "ultc", default, skip_serializing_if = "Vec::is_empty")]
    ultc: Vec<UltcFile>,
}

#[derive(Serialize, Deserialize)]
struct BranchFile {
    from: usize,
    to: usize,
    r: f64,
    x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tap: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct LoadFile {
    bus: usize,
    #[serde(flatten)]
    model: LoadModelFile,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LoadModelFile {
    DynamicAdmittance { tau1: f64, tau2: f64, p_set: f64, q_set: f64 },
    ImpedanceSetpoint { tau_g: f64, tau_b: f64, g_set: f64, b_set: f64 },
    Polynomial { p0: f64, q0: f64, a_p: f64, b_p: f64, c_p: f64, a_q: f64, b_q: f64, c_q: f64 },
    ConstantPower { p: f64, q: f64 },
    TiedAdmittance { g: f64, b_factor: f64, b_source: usize },
}

#[derive(Serialize, Deserialize)]
struct UltcFile {
    k_init: f64,
    k_min: f64,
    k_max: f64,
    v_min: f64,
    v_max: f64,
    controlled_bus: usize,
    rate: f64,
}

impl From<&LoadModel> for LoadModelFile {
    fn from(m: &LoadModel) -> Self {
        match *m {
            LoadModel::DynamicAdmittance { tau1, tau2, p_set, q_set } => {
                LoadModelFile::DynamicAdmittance { tau1, tau2, p_set, q_set }
            }
            LoadModel::ImpedanceSetpoint { tau_g, tau_b, g_set, b_set } => {
                LoadModelFile::ImpedanceSetpoint { tau_g, tau_b, g_set, b_set }
            }
            LoadModel::Polynomial { p0, q0, a_p, b_p, c_p, a_q, b_q, c_q } => {
                LoadModelFile::Polynomial { p0, q0, a_p, b_p, c_p, a_q, b_q, c_q }
            }
            LoadModel::ConstantPower { p, q } => LoadModelFile::ConstantPower { p, q },
            LoadModel::TiedAdmittance { g, b_factor, b_source } => {
                LoadModelFile::TiedAdmittance { g, b_factor, b_source }
            }
        }
    }
}

impl From<LoadModelFile> for LoadModel {
    fn from(m: LoadModelFile) -> Self {
        match m {
            LoadModelFile::DynamicAdmittance { tau1, tau2, p_set, q_set } => {
                LoadModel::DynamicAdmittance { tau1, tau2, p_set, q_set }
            }
            LoadModelFile::ImpedanceSetpoint { tau_g, tau_b, g_set, b_set } => {
                LoadModel::ImpedanceSetpoint { tau_g, tau_b, g_set, b_set }
            }
            LoadModelFile::Polynomial { p0, q0, a_p, b_p, c_p, a_q, b_q, c_q } => {
                LoadModel::Polynomial { p0, q0, a_p, b_p, c_p, a_q, b_q, c_q }
            }
            LoadModelFile::ConstantPower { p, q } => LoadModel::ConstantPower { p, q },
            LoadModelFile::TiedAdmittance { g, b_factor, b_source } => {
                LoadModel::TiedAdmittance { g, b_factor, b_source }
            }
        }
    }
}

pub fn network_to_toml(net: &Network) -> String {
    let file = NetworkFile {
        n_buses: net.n_buses,
        slack_bus: net.slack_bus,
        slack_voltage: [net.slack_voltage.re, net.slack_voltage.im],
        branches: net
            .branches
            .iter()
            .map(|b| BranchFile { from: b.from, to: b.to, r: b.z.re, x: b.z.im, tap: b.tap })
            .collect(),
        loads: net
            .loads
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                l.as_ref().map(|m| LoadFile { bus: i + 1, model: LoadModelFile::from(m) })
            })
            .collect(),
        ultc: net
            .ultc
            .iter()
            .map(|d| UltcFile {
                k_init: d.k_init,
                k_min: d.k_min,
                k_max: d.k_max,
                v_min: d.v_min,
                v_max: d.v_max,
                controlled_bus: d.controlled_bus,
                rate: d.rate,
            })
            .collect(),
    };
    toml::to_string_pretty(&file).expect("network serialization cannot fail")
}

pub fn network_from_toml(text: &str) -> Result<Network, String> {
    let file: NetworkFile = toml::from_str(text).map_err(|e| format!("network file: {e}"))?;
    let mut loads: Vec<Option<LoadModel>> = vec![None; file.n_buses];
    for lf in file.loads {
        if lf.bus == 0 || lf.bus > file.n_buses {
            return Err(format!("load references bus {} outside 1..={}", lf.bus, file.n_buses));
        }
        if lf.bus == file.slack_bus {
            return Err("the slack bus cannot carry a load model".into());
        }
        if loads[lf.bus - 1].is_some() {
            return Err(format!("bus {} has two load entries", lf.bus));
        }
        loads[lf.bus - 1] = Some(LoadModel::from(lf.model));
    }
    let net = Network {
        n_buses: file.n_buses,
        slack_bus: file.slack_bus,
        slack_voltage: Complex64::new(file.slack_voltage[0], file.slack_voltage[1]),
        branches: file
            .branches
            .into_iter()
            .map(|b| Branch { from: b.from, to: b.to, z: Complex64::new(b.r, b.x), tap: b.tap })
            .collect(),
        loads,
        ultc: file
            .ultc
            .into_iter()
            .map(|d| UltcDevice {
                k_init: d.k_init,
                k_min: d.k_min,
                k_max: d.k_max,
                v_min: d.v_min,
                v_max: d.v_max,
                controlled_bus: d.controlled_bus,
                rate: d.rate,
            })
            .collect(),
    };
    let problems = crate::net::validate_network(&net);
    if !problems.is_empty() {
        return Err(format!("invalid network: {}", problems.join("; ")));
    }
    Ok(net)
}

pub fn scenario_to_toml(sc: &Scenario) -> String {
    toml::to_string_pretty(sc).expect("scenario serialization cannot fail")
}

pub fn scenario_from_toml(text: &str) -> Result<Scenario, String> {
    let sc: Scenario = toml::from_str(text).map_err(|e| format!("scenario file: {e}"))?;
    if sc.t_end <= 0.0 || !sc.t_end.is_finite() {
        return Err("t_end must be positive".into());
    }
    if sc.output_interval <= 0.0 || !sc.output_interval.is_finite() {
        return Err("output_interval must be positive".into());
    }
    Ok(sc)
}

pub fn load_network_file(path: &Path) -> Result<Network, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    network_from_toml(&text)
}

pub fn load_scenario_file(path: &Path) -> Result<Scenario, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    scenario_from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::builtin_case;

    #[test]
    fn every_builtin_network_round_trips_identically() {
        for name in crate::cases::case_names() {
            let net = builtin_case(name).unwrap().network;
            let text = network_to_toml(&net);
            let back = network_from_toml(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(net, back, "{name} did not round-trip");
        }
    }

    #[test]
    fn every_builtin_scenario_round_trips() {
        for name in crate::cases::case_names() {
            for sc in &builtin_case(name).unwrap().scenarios {
                let text = scenario_to_toml(sc);
                let back = scenario_from_toml(&text)
                    .unwrap_or_else(|e| panic!("{name}/{}: {e}\n{text}", sc.name));
                assert_eq!(sc.name, back.name);
                assert_eq!(sc.timeline, back.timeline, "{name}/{}", sc.name);
                assert_eq!(sc.t_end, back.t_end);
                assert_eq!(sc.start, back.start);
            }
        }
    }

    #[test]
    fn malformed_files_are_rejected_with_context() {
        assert!(network_from_toml("n_buses = 2").unwrap_err().contains("network file"));
        let net = builtin_case("three_bus_base").unwrap().network;
        let doubled = network_to_toml(&net).replace("bus = 3", "bus = 2");
        assert!(network_from_toml(&doubled).unwrap_err().contains("two load entries"));
    }
}
