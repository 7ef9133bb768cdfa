//! Bundled scenarios, generated in code and shipped as TOML under
//! `crates/core/scenarios/`.

use crate::adaptive::AdaptiveMode;
use crate::inverter::CurveSpec;
use crate::observer::ObserverParams;
use crate::sim::{
    AdaptiveSpec, DeviceRole, DeviceSpec, EventSpec, FeederSpec, LineSpec, LoadSpec, ScenarioConfig, SimulationParams,
    SCHEMA_VERSION,
};
use crate::verification::{HarnessMode, Plant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SUBSTATION: &str = "sourcebus";

fn curve(points: &[(f64, f64)]) -> CurveSpec {
    CurveSpec { v_nom: 1.0, points: points.iter().map(|&(v, y)| [v, y]).collect() }
}

/// Volt-VAR falling linearly from +1 to -1 across `1.0 ± half_width`.
fn droop_volt_var(half_width: f64) -> CurveSpec {
    curve(&[(1.0 - half_width, 1.0), (1.0 + half_width, -1.0)])
}

fn flat(value: f64) -> CurveSpec {
    curve(&[(1.0, value)])
}

/// One node behind a purely reactive line (`x = 0.1`, `r = 0`) with a
/// Volt-VAR-only device whose droop gives `‖C_s Z‖₂ = sigma`.
pub fn single_node(sigma: f64) -> ScenarioConfig {
    let x = 0.1;
    let q_max = 0.5;
    // C_q = slope * q_max and sigma = C_q * x.
    let slope = sigma / (x * q_max);
    ScenarioConfig {
        version: SCHEMA_VERSION,
        name: format!("single-node-sigma-{sigma}"),
        simulation: SimulationParams { dt: 1.0, horizon: 300.0, seed: 0, load_noise: 0.0 },
        feeder: FeederSpec {
            substation: SUBSTATION.into(),
            v0: 1.0,
            nodes: vec!["n1".into()],
            lines: vec![LineSpec { from: SUBSTATION.into(), to: "n1".into(), r: 0.0, x }],
        },
        observer: ObserverParams::default(),
        loads: vec![LoadSpec { node: "n1".into(), p: 0.5, q: 0.0 }],
        load_steps: vec![],
        devices: vec![DeviceSpec {
            id: "pv1".into(),
            node: "n1".into(),
            role: DeviceRole::Stable,
            s_bar: 1.0,
            lambda: 0.5,
            q_lim: Some(q_max),
            t_p: 1.0,
            t_q: 1.0,
            p0: None,
            q0: None,
            volt_var: droop_volt_var(1.0 / slope),
            volt_watt: flat(1.0),
        }],
        adaptive: vec![],
        events: vec![],
    }
}

/// Lines of an IEEE-37-like tree: `(from, to, length in kft)`.
const FEEDER37_LINES: &[(&str, &str, f64)] = &[
    (SUBSTATION, "701", 1.85),
    ("701", "702", 0.96),
    ("702", "705", 0.40),
    ("705", "742", 0.32),
    ("705", "712", 0.24),
    ("702", "713", 0.36),
    ("713", "704", 0.52),
    ("704", "714", 0.08),
    ("714", "718", 0.52),
    ("704", "720", 0.80),
    ("720", "707", 0.92),
    ("707", "724", 0.76),
    ("707", "722", 0.12),
    ("720", "706", 0.60),
    ("706", "725", 0.28),
    ("702", "703", 1.32),
    ("703", "727", 0.24),
    ("727", "744", 0.28),
    ("744", "728", 0.20),
    ("744", "729", 0.28),
    ("703", "730", 0.60),
    ("730", "709", 0.20),
    ("709", "775", 0.10),
    ("709", "731", 0.60),
    ("709", "708", 0.32),
    ("708", "732", 0.32),
    ("708", "733", 0.32),
    ("733", "734", 0.56),
    ("734", "737", 0.64),
    ("737", "738", 0.40),
    ("738", "711", 0.40),
    ("711", "741", 0.40),
    ("711", "740", 0.20),
    ("734", "710", 0.52),
    ("710", "735", 0.20),
    ("710", "736", 1.28),
];

/// Nodes whose inverters are all compromised in the disjoint placement.
const DISJOINT_COMPROMISED: &[&str] =
    &["734", "737", "738", "711", "741", "740", "710", "735", "736", "733", "708"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Every node hosts a 30% compromised and a 70% adaptive inverter.
    CoLocated,
    /// Compromised and adaptive inverters at different nodes.
    Disjoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mitigation {
    Bias,
    Injection,
}

/// Tunable parameters of the 37-node replica.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feeder37Params {
    pub v0: f64,
    /// Line impedance per kft, pu.
    pub r_per_kft: f64,
    pub x_per_kft: f64,
    pub p_load: f64,
    pub q_load: f64,
    /// Inverter rating relative to the node load.
    pub oversize: f64,
    pub compromised_share: f64,
    pub t_filter: f64,
    /// Half-width of the attack droop around the pre-attack voltage, pu.
    pub attack_half_width: f64,
    /// Reactive fraction reached at the ends of the attack droop.
    pub attack_q_fraction: f64,
    /// Active fraction reached at the top of the attack droop.
    pub attack_p_floor: f64,
    pub attack_time: f64,
    pub horizon: f64,
    pub tau: f64,
    pub gamma_v: f64,
    pub gamma_q: f64,
    pub epsilon: f64,
    /// Relative load noise per step.
    pub load_noise: f64,
    pub seed: u64,
}

impl Default for Feeder37Params {
    fn default() -> Self {
        Feeder37Params {
            v0: 1.03,
            r_per_kft: 0.01,
            x_per_kft: 0.01,
            p_load: 0.02,
            q_load: 0.005,
            oversize: 1.5,
            compromised_share: 0.3,
            t_filter: 1.0,
            attack_half_width: 0.003,
            attack_q_fraction: 0.5,
            attack_p_floor: 0.8,
            attack_time: 100.0,
            horizon: 400.0,
            tau: 0.1,
            gamma_v: 0.3,
            gamma_q: 0.1,
            epsilon: 1e-5,
            load_noise: 0.01,
            seed: 0,
        }
    }
}

/// Standard Volt-VAR of the uncompromised fleet.
fn standard_volt_var() -> CurveSpec {
    curve(&[(0.92, 1.0), (0.98, 0.0), (1.02, 0.0), (1.08, -1.0)])
}

fn standard_volt_watt() -> CurveSpec {
    curve(&[(1.06, 1.0), (1.10, 0.0)])
}

pub fn feeder37(placement: Placement, mitigation: Mitigation) -> ScenarioConfig {
    feeder37_with(placement, mitigation, &Feeder37Params::default())
}

pub fn feeder37_with(placement: Placement, mitigation: Mitigation, prm: &Feeder37Params) -> ScenarioConfig {
    let nodes: Vec<String> = FEEDER37_LINES.iter().map(|l| l.1.to_string()).collect();
    let lines = FEEDER37_LINES
        .iter()
        .map(|&(from, to, len)| LineSpec { from: from.into(), to: to.into(), r: prm.r_per_kft * len, x: prm.x_per_kft * len })
        .collect();
    let loads = nodes.iter().map(|n| LoadSpec { node: n.clone(), p: prm.p_load, q: prm.q_load }).collect();
    let s_node = prm.oversize * prm.p_load;
    let lambda = 1.0 / prm.oversize;
    let device = |id: String, node: &str, role, s_bar: f64| DeviceSpec {
        id,
        node: node.into(),
        role,
        s_bar,
        lambda,
        q_lim: None,
        t_p: prm.t_filter,
        t_q: prm.t_filter,
        p0: None,
        q0: None,
        volt_var: standard_volt_var(),
        volt_watt: standard_volt_watt(),
    };
    let mut devices = Vec::new();
    for n in &nodes {
        match placement {
            Placement::CoLocated => {
                devices.push(device(format!("pvc_{n}"), n, DeviceRole::Compromised, prm.compromised_share * s_node));
                devices.push(device(format!("pva_{n}"), n, DeviceRole::Adaptive, (1.0 - prm.compromised_share) * s_node));
            }
            Placement::Disjoint => {
                if DISJOINT_COMPROMISED.contains(&n.as_str()) {
                    devices.push(device(format!("pvc_{n}"), n, DeviceRole::Compromised, s_node));
                } else {
                    devices.push(device(format!("pva_{n}"), n, DeviceRole::Adaptive, s_node));
                }
            }
        }
    }
    let adaptive = devices
        .iter()
        .filter(|d| d.role == DeviceRole::Adaptive)
        .map(|d| AdaptiveSpec {
            device: d.id.clone(),
            mode: match mitigation {
                Mitigation::Bias => AdaptiveMode::Bias,
                Mitigation::Injection => AdaptiveMode::InjectionQ,
            },
            tau: prm.tau,
            gamma_p: 0.0,
            gamma_q: if mitigation == Mitigation::Injection { prm.gamma_q } else { 0.0 },
            gamma_v: if mitigation == Mitigation::Bias { prm.gamma_v } else { 0.0 },
            epsilon: prm.epsilon,
            v_crit: 1.0,
            hysteresis: 0.0,
            bias_cap: 0.1,
            injection_cap: None,
        })
        .collect();
    let (placement_name, mitigation_name) = (
        match placement {
            Placement::CoLocated => "colocated",
            Placement::Disjoint => "disjoint",
        },
        match mitigation {
            Mitigation::Bias => "bias",
            Mitigation::Injection => "injection",
        },
    );
    let mut config = ScenarioConfig {
        version: SCHEMA_VERSION,
        name: format!("feeder37-{placement_name}-{mitigation_name}"),
        simulation: SimulationParams { dt: 1.0, horizon: prm.horizon, seed: prm.seed, load_noise: prm.load_noise },
        feeder: FeederSpec { substation: SUBSTATION.into(), v0: prm.v0, nodes, lines },
        observer: ObserverParams::default(),
        loads,
        load_steps: vec![],
        devices,
        adaptive,
        events: vec![],
    };
    config.events = attack_events(&config, prm);
    config
}

/// One event per compromised device: steep droops centred on the device's
/// pre-attack node voltage.
fn attack_events(config: &ScenarioConfig, prm: &Feeder37Params) -> Vec<EventSpec> {
    let plant = Plant::from_config(config).expect("bundled scenario is valid");
    let zero = plant.uniform(HarnessMode::Bias, 0.0);
    let s = plant.equilibrium(HarnessMode::Bias, &zero).expect("pre-attack equilibrium");
    let v = plant.voltages(&s);
    let index = |name: &str| config.feeder.nodes.iter().position(|n| n == name).expect("node exists");
    let h = prm.attack_half_width;
    config
        .devices
        .iter()
        .filter(|d| d.role == DeviceRole::Compromised)
        .map(|d| {
            // Round to keep the TOML readable; the droop still brackets the
            // operating point.
            let vc = (v[index(&d.node)] * 1e5).round() / 1e5;
            EventSpec {
                time: prm.attack_time,
                devices: vec![d.id.clone()],
                volt_var: Some(curve(&[(vc - h, prm.attack_q_fraction), (vc + h, -prm.attack_q_fraction)])),
                volt_watt: Some(curve(&[(vc - h, 1.0), (vc + h, prm.attack_p_floor)])),
            }
        })
        .collect()
}

/// Five-node tree with one Volt-VAR device per node. The attack replaces
/// the curves with a deadband `[1.022, 1.030]` and steep droops on either
/// side.
pub fn five_node_attack() -> ScenarioConfig {
    let nodes: Vec<String> = (1..=5).map(|i| format!("t{i}")).collect();
    let edges = [(SUBSTATION, "t1"), ("t1", "t2"), ("t2", "t3"), ("t2", "t4"), ("t4", "t5")];
    let lines = edges.iter().map(|&(a, b)| LineSpec { from: a.into(), to: b.into(), r: 0.01, x: 0.02 }).collect();
    let devices: Vec<DeviceSpec> = nodes
        .iter()
        .map(|n| DeviceSpec {
            id: format!("pv_{n}"),
            node: n.clone(),
            role: DeviceRole::Stable,
            s_bar: 0.2,
            lambda: 0.5,
            q_lim: Some(0.1),
            t_p: 1.0,
            t_q: 1.0,
            p0: None,
            q0: None,
            volt_var: standard_volt_var(),
            volt_watt: flat(1.0),
        })
        .collect();
    let attack = curve(&[(1.015, 1.0), (1.022, 0.0), (1.030, 0.0), (1.034, -1.0)]);
    ScenarioConfig {
        version: SCHEMA_VERSION,
        name: "five_node_attack".into(),
        simulation: SimulationParams { dt: 0.1, horizon: 200.0, seed: 0, load_noise: 0.0 },
        feeder: FeederSpec { substation: SUBSTATION.into(), v0: 1.03, nodes: nodes.clone(), lines },
        observer: ObserverParams::default(),
        loads: nodes.iter().map(|n| LoadSpec { node: n.clone(), p: 0.05, q: 0.0 }).collect(),
        load_steps: vec![],
        events: vec![EventSpec {
            time: 0.0,
            devices: devices.iter().map(|d| d.id.clone()).collect(),
            volt_var: Some(attack),
            volt_watt: None,
        }],
        devices,
        adaptive: vec![],
    }
}

/// Random recursive tree of `n` nodes with one bias-controlled device per
/// node and standard curves. Used for scaling benchmarks.
pub fn synthetic(n: usize, seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes: Vec<String> = (1..=n).map(|i| format!("s{i}")).collect();
    let lines = (0..n)
        .map(|i| {
            let from = if i == 0 { SUBSTATION.to_string() } else { nodes[rng.gen_range(0..i)].clone() };
            let r = rng.gen_range(0.0005..0.002);
            let x = rng.gen_range(0.0005..0.002);
            LineSpec { from, to: nodes[i].clone(), r, x }
        })
        .collect();
    let devices: Vec<DeviceSpec> = nodes
        .iter()
        .map(|n| DeviceSpec {
            id: format!("pv_{n}"),
            node: n.clone(),
            role: DeviceRole::Adaptive,
            s_bar: 0.03,
            lambda: 2.0 / 3.0,
            q_lim: None,
            t_p: 1.0,
            t_q: 1.0,
            p0: None,
            q0: None,
            volt_var: standard_volt_var(),
            volt_watt: standard_volt_watt(),
        })
        .collect();
    let adaptive = devices
        .iter()
        .map(|d| AdaptiveSpec {
            device: d.id.clone(),
            mode: AdaptiveMode::Bias,
            tau: 0.1,
            gamma_p: 0.0,
            gamma_q: 0.0,
            gamma_v: 0.3,
            epsilon: 1e-4,
            v_crit: 1.0,
            hysteresis: 0.0,
            bias_cap: 0.1,
            injection_cap: None,
        })
        .collect();
    ScenarioConfig {
        version: SCHEMA_VERSION,
        name: format!("synthetic-{n}-{seed}"),
        simulation: SimulationParams { dt: 1.0, horizon: 100.0, seed, load_noise: 0.01 },
        feeder: FeederSpec { substation: SUBSTATION.into(), v0: 1.03, nodes: nodes.clone(), lines },
        observer: ObserverParams::default(),
        loads: nodes.iter().map(|n| LoadSpec { node: n.clone(), p: 0.02, q: 0.005 }).collect(),
        load_steps: vec![],
        devices,
        adaptive,
        events: vec![],
    }
}

/// Every bundled scenario with its file stem.
pub fn bundled() -> Vec<(&'static str, ScenarioConfig)> {
    vec![
        ("single_node_stable", single_node(0.5)),
        ("single_node_unstable", single_node(3.0)),
        ("feeder37_scenario1_bias", feeder37(Placement::CoLocated, Mitigation::Bias)),
        ("feeder37_scenario1_injection", feeder37(Placement::CoLocated, Mitigation::Injection)),
        ("feeder37_scenario2_bias", feeder37(Placement::Disjoint, Mitigation::Bias)),
        ("feeder37_scenario2_injection", feeder37(Placement::Disjoint, Mitigation::Injection)),
        ("five_node_attack", five_node_attack()),
    ]
}
