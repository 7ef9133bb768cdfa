//! Quasi-steady-state time stepping.
//!
//! Each step runs in a fixed order so every node-local rule sees the same
//! published voltage:
//!
//! 1. apply due events and load steps,
//! 2. solve voltages from the current injections,
//! 3. update observers,
//! 4. update adaptive controllers (`ξ`, signs, then `u` or `w`),
//! 5. evaluate VW, `q̄`, VV per device (biased voltage where applicable),
//! 6. record the row, then step the inverter filters.

use std::collections::HashMap;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::adaptive::{AdaptiveController, AdaptiveError, AdaptiveMode, AdaptiveParams};
use crate::feeder::{self, FeederError, FeederTopology, ImpedanceMatrices, Line};
use crate::inverter::{self, CurveError, CurveSpec, InverterRating, InverterState, PiecewiseCurve, RatingError};
use crate::observer::{ObserverError, ObserverParams, ObserverState};
use crate::par::{self, ExecPolicy};
use crate::stability::{self, CertificateInputs, StabilityReport};

pub const SCHEMA_VERSION: u32 = 1;

/// Voltages outside this band (pu) end the run.
pub const DIVERGENCE_BAND: (f64, f64) = (0.0, 2.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    Version { found: u32 },
    #[error("feeder: {0}")]
    Feeder(#[from] FeederError),
    #[error("{context}: unknown node '{node}'")]
    UnknownNode { context: String, node: String },
    #[error("{context}: unknown device '{device}'")]
    UnknownDevice { context: String, device: String },
    #[error("duplicate {what} '{name}'")]
    Duplicate { what: &'static str, name: String },
    #[error("device '{device}': {which} curve: {source}")]
    Curve { device: String, which: &'static str, source: CurveError },
    #[error("device '{device}': {source}")]
    Rating { device: String, source: RatingError },
    #[error("device '{device}': {name} must be finite and > 0, got {value}")]
    TimeConstant { device: String, name: &'static str, value: f64 },
    #[error("device '{device}': dt = {dt} s must be < 2 * {name} = {limit} s")]
    FilterStep { device: String, name: &'static str, dt: f64, limit: f64 },
    #[error("device '{device}': initial {name} = {value} is infeasible")]
    InitialState { device: String, name: &'static str, value: f64 },
    #[error("adaptive controller on '{device}': {source}")]
    Adaptive { device: String, source: AdaptiveError },
    #[error("device '{device}' has role adaptive but {count} adaptive entries")]
    AdaptiveBinding { device: String, count: usize },
    #[error("observer: {0}")]
    Observer(#[from] ObserverError),
    #[error("dt = {dt} must be finite, > 0 and divide horizon = {horizon}")]
    TimeGrid { dt: f64, horizon: f64 },
    #[error("{what} {index} at t = {time} is out of order or negative")]
    Ordering { what: &'static str, index: usize, time: f64 },
    #[error("load at '{node}' is not finite")]
    Load { node: String },
    #[error("load_noise must be finite and >= 0, got {0}")]
    LoadNoise(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationParams {
    /// Step, s.
    pub dt: f64,
    /// Horizon, s.
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    /// Relative standard deviation of per-step multiplicative load noise.
    #[serde(default)]
    pub load_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub from: String,
    pub to: String,
    /// pu.
    pub r: f64,
    /// pu.
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederSpec {
    #[serde(default = "default_substation")]
    pub substation: String,
    /// Substation voltage, pu.
    pub v0: f64,
    pub nodes: Vec<String>,
    pub lines: Vec<LineSpec>,
}

fn default_substation() -> String {
    "sourcebus".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    pub node: String,
    /// Consumed active power, pu.
    pub p: f64,
    /// Consumed reactive power, pu.
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadStepSpec {
    pub time: f64,
    pub node: String,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceRole {
    Stable,
    Compromised,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: String,
    pub node: String,
    pub role: DeviceRole,
    /// Apparent power rating, pu.
    pub s_bar: f64,
    /// Available fraction of `s_bar` as active power.
    #[serde(default = "one")]
    pub lambda: f64,
    /// Reactive limit, pu; defaults to `s_bar`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_lim: Option<f64>,
    /// Filter time constants, s.
    pub t_p: f64,
    pub t_q: f64,
    /// Initial filtered outputs, pu; default `p̄` and 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q0: Option<f64>,
    pub volt_var: CurveSpec,
    pub volt_watt: CurveSpec,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveSpec {
    pub device: String,
    pub mode: AdaptiveMode,
    /// Reference filter rate, 1/s.
    pub tau: f64,
    #[serde(default)]
    pub gamma_p: f64,
    #[serde(default)]
    pub gamma_q: f64,
    #[serde(default)]
    pub gamma_v: f64,
    /// Deadband, pu.
    pub epsilon: f64,
    #[serde(default = "one")]
    pub v_crit: f64,
    #[serde(default)]
    pub hysteresis: f64,
    /// `|w|` cap, pu.
    #[serde(default = "default_bias_cap")]
    pub bias_cap: f64,
    /// `|u|` cap, pu; defaults to the device `s_bar`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injection_cap: Option<f64>,
}

fn default_bias_cap() -> f64 {
    0.1
}

/// Curve replacement on a set of devices. Curves are checked when the event
/// fires; an invalid replacement is rejected and the old curves stay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub time: f64,
    pub devices: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volt_var: Option<CurveSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volt_watt: Option<CurveSpec>,
}

/// A scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub name: String,
    pub simulation: SimulationParams,
    pub feeder: FeederSpec,
    #[serde(default)]
    pub observer: ObserverParams,
    #[serde(default)]
    pub loads: Vec<LoadSpec>,
    #[serde(default)]
    pub load_steps: Vec<LoadStepSpec>,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub adaptive: Vec<AdaptiveSpec>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
}

impl ScenarioConfig {
    /// Number of steps; `None` when `dt` does not divide the horizon.
    pub fn steps(&self) -> Option<usize> {
        let SimulationParams { dt, horizon, .. } = self.simulation;
        if !(dt.is_finite() && dt > 0.0 && horizon.is_finite() && horizon >= 0.0) {
            return None;
        }
        let k = (horizon / dt).round();
        ((k * dt - horizon).abs() <= 1e-9 * horizon.max(1.0)).then_some(k as usize)
    }

    fn node_index(&self) -> HashMap<&str, usize> {
        self.feeder.nodes.iter().enumerate().map(|(k, n)| (n.as_str(), k)).collect()
    }

    pub fn topology(&self) -> Result<FeederTopology, ConfigError> {
        let mut ids: HashMap<&str, usize> = HashMap::new();
        ids.insert(self.feeder.substation.as_str(), 0);
        for (k, n) in self.feeder.nodes.iter().enumerate() {
            if ids.insert(n.as_str(), k + 1).is_some() {
                return Err(ConfigError::Duplicate { what: "node", name: n.clone() });
            }
        }
        let mut lines = Vec::with_capacity(self.feeder.lines.len());
        for (i, l) in self.feeder.lines.iter().enumerate() {
            let end = |name: &String| {
                ids.get(name.as_str()).copied().ok_or_else(|| ConfigError::UnknownNode {
                    context: format!("line {i}"),
                    node: name.clone(),
                })
            };
            lines.push(Line { from: end(&l.from)?, to: end(&l.to)?, r: l.r, x: l.x });
        }
        Ok(FeederTopology { nodes: self.feeder.nodes.clone(), lines, v0: self.feeder.v0 })
    }

    /// Checks every cross-reference and numeric precondition, collecting all
    /// problems found.
    pub fn validate(&self) -> Result<(), Vec<ConfigError>> {
        let mut errs = Vec::new();
        if self.version != SCHEMA_VERSION {
            errs.push(ConfigError::Version { found: self.version });
        }
        let dt = self.simulation.dt;
        if self.steps().is_none() {
            errs.push(ConfigError::TimeGrid { dt, horizon: self.simulation.horizon });
        }
        if !(self.simulation.load_noise.is_finite() && self.simulation.load_noise >= 0.0) {
            errs.push(ConfigError::LoadNoise(self.simulation.load_noise));
        }
        match self.topology() {
            Ok(t) => {
                if let Err(e) = feeder::build_impedance_matrices(&t) {
                    errs.push(e.into());
                }
            }
            Err(e) => errs.push(e),
        }
        if let Err(e) = self.observer.validate(dt) {
            errs.push(e.into());
        }
        let nodes = self.node_index();
        let node_ok = |context: String, node: &String, errs: &mut Vec<ConfigError>| {
            if !nodes.contains_key(node.as_str()) {
                errs.push(ConfigError::UnknownNode { context, node: node.clone() });
            }
        };
        for l in &self.loads {
            node_ok("load".into(), &l.node, &mut errs);
            if !(l.p.is_finite() && l.q.is_finite()) {
                errs.push(ConfigError::Load { node: l.node.clone() });
            }
        }
        let mut last = 0.0;
        for (index, s) in self.load_steps.iter().enumerate() {
            node_ok(format!("load step {index}"), &s.node, &mut errs);
            if !(s.time >= last) {
                errs.push(ConfigError::Ordering { what: "load step", index, time: s.time });
            }
            last = s.time.max(last);
            if !(s.p.is_finite() && s.q.is_finite()) {
                errs.push(ConfigError::Load { node: s.node.clone() });
            }
        }
        let mut device_ids: HashMap<&str, &DeviceSpec> = HashMap::new();
        for d in &self.devices {
            if device_ids.insert(d.id.as_str(), d).is_some() {
                errs.push(ConfigError::Duplicate { what: "device", name: d.id.clone() });
            }
            node_ok(format!("device '{}'", d.id), &d.node, &mut errs);
            if let Err(e) = build_device_parts(d, dt) {
                errs.push(e);
            }
        }
        let mut bound: HashMap<&str, usize> = HashMap::new();
        for a in &self.adaptive {
            match device_ids.get(a.device.as_str()) {
                None => errs.push(ConfigError::UnknownDevice { context: "adaptive".into(), device: a.device.clone() }),
                Some(d) => {
                    *bound.entry(d.id.as_str()).or_default() += 1;
                    let p = adaptive_params(a, d);
                    if let Err(source) = p.validate().and_then(|_| p.check_step(dt)) {
                        errs.push(ConfigError::Adaptive { device: a.device.clone(), source });
                    }
                }
            }
        }
        for d in &self.devices {
            let count = bound.get(d.id.as_str()).copied().unwrap_or(0);
            if (d.role == DeviceRole::Adaptive) != (count == 1) {
                errs.push(ConfigError::AdaptiveBinding { device: d.id.clone(), count });
            }
        }
        let mut last = 0.0;
        for (index, e) in self.events.iter().enumerate() {
            if !(e.time >= last) {
                errs.push(ConfigError::Ordering { what: "event", index, time: e.time });
            }
            last = e.time.max(last);
            for id in &e.devices {
                if !device_ids.contains_key(id.as_str()) {
                    errs.push(ConfigError::UnknownDevice { context: format!("event {index}"), device: id.clone() });
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Time of the first event, if any.
    pub fn attack_time(&self) -> Option<f64> {
        self.events.first().map(|e| e.time)
    }
}

fn adaptive_params(a: &AdaptiveSpec, d: &DeviceSpec) -> AdaptiveParams {
    AdaptiveParams {
        tau: a.tau,
        gamma_p: a.gamma_p,
        gamma_q: a.gamma_q,
        gamma_v: a.gamma_v,
        epsilon: a.epsilon,
        v_crit: a.v_crit,
        hysteresis: a.hysteresis,
        bias_cap: a.bias_cap,
        injection_cap: a.injection_cap.unwrap_or(d.s_bar),
    }
}

fn volt_var_curve(spec: &CurveSpec) -> Result<PiecewiseCurve, CurveError> {
    let c = PiecewiseCurve::try_from(spec)?;
    c.check_range(-1.0, 1.0)?;
    Ok(c)
}

fn volt_watt_curve(spec: &CurveSpec) -> Result<PiecewiseCurve, CurveError> {
    let c = PiecewiseCurve::try_from(spec)?;
    c.check_range(0.0, 1.0)?;
    Ok(c)
}

fn build_device_parts(
    d: &DeviceSpec,
    dt: f64,
) -> Result<(InverterRating, PiecewiseCurve, PiecewiseCurve, InverterState), ConfigError> {
    let device = || d.id.clone();
    let rating = InverterRating::new(d.s_bar, d.lambda, d.q_lim.unwrap_or(d.s_bar))
        .map_err(|source| ConfigError::Rating { device: device(), source })?;
    let vv = volt_var_curve(&d.volt_var).map_err(|source| ConfigError::Curve { device: device(), which: "volt_var", source })?;
    let vw =
        volt_watt_curve(&d.volt_watt).map_err(|source| ConfigError::Curve { device: device(), which: "volt_watt", source })?;
    for (name, value) in [("t_p", d.t_p), ("t_q", d.t_q)] {
        if !(value.is_finite() && value > 0.0) {
            return Err(ConfigError::TimeConstant { device: device(), name, value });
        }
        if !(dt < 2.0 * value) {
            return Err(ConfigError::FilterStep { device: device(), name, dt, limit: 2.0 * value });
        }
    }
    let p = d.p0.unwrap_or(rating.p_bar());
    if !(p.is_finite() && p >= 0.0 && p <= rating.s_bar) {
        return Err(ConfigError::InitialState { device: device(), name: "p0", value: p });
    }
    let q = d.q0.unwrap_or(0.0);
    let q_avail = inverter::available_reactive(&rating, p).unwrap_or(0.0);
    if !(q.is_finite() && q.abs() <= q_avail) {
        return Err(ConfigError::InitialState { device: device(), name: "q0", value: q });
    }
    Ok((rating, vv, vw, InverterState { p, q, t_p: d.t_p, t_q: d.t_q }))
}

/// Runtime state of one inverter.
#[derive(Debug, Clone, PartialEq)]
pub struct Device {
    pub id: String,
    /// Matrix index of the hosting node.
    pub node: usize,
    pub role: DeviceRole,
    pub rating: InverterRating,
    pub volt_var: PiecewiseCurve,
    pub volt_watt: PiecewiseCurve,
    pub state: InverterState,
    /// Index into the controller list when adaptive.
    pub controller: Option<usize>,
    target: (f64, f64),
}

/// An adaptive controller bound to a device.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundController {
    pub device: usize,
    pub node: usize,
    pub ctl: AdaptiveController,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    pub policy: ExecPolicy,
    /// Freeze `u` and `w` at zero for A/B comparisons.
    pub disable_adaptive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceRecord {
    pub step: usize,
    pub time: f64,
    pub node: String,
    pub value: f64,
}

/// One recorded step; per-node vectors in feeder node order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Mean reference over the node's controllers, NaN when it has none.
    pub xi: Vec<f64>,
    pub up: Vec<f64>,
    pub uq: Vec<f64>,
    /// Mean bias over the node's bias controllers, 0 when it has none.
    pub w: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub scenario: String,
    pub scenario_hash: String,
    pub nodes: Vec<String>,
    pub dt: f64,
    pub horizon: f64,
    pub attack_time: Option<f64>,
    pub adaptive_enabled: bool,
    pub rows: Vec<TraceRow>,
    pub divergence: Option<DivergenceRecord>,
    /// Stability reports logged whenever an event changes the curves.
    pub reports: Vec<(f64, StabilityReport)>,
    pub notes: Vec<String>,
}

impl SimulationTrace {
    pub fn empty(scenario: &str, nodes: Vec<String>) -> Self {
        SimulationTrace {
            scenario: scenario.to_string(),
            scenario_hash: String::new(),
            nodes,
            dt: 0.0,
            horizon: 0.0,
            attack_time: None,
            adaptive_enabled: false,
            rows: Vec::new(),
            divergence: None,
            reports: Vec::new(),
            notes: Vec::new(),
        }
    }
}

pub struct Simulation {
    config: ScenarioConfig,
    opts: RunOptions,
    mats: ImpedanceMatrices,
    devices: Vec<Device>,
    controllers: Vec<BoundController>,
    observers: Vec<ObserverState>,
    base_load: (Vec<f64>, Vec<f64>),
    load: (Vec<f64>, Vec<f64>),
    rng: ChaCha8Rng,
    v: Vec<f64>,
    step: usize,
    steps: usize,
    next_event: usize,
    next_load_step: usize,
    mixed_warned: bool,
    node_ids: HashMap<String, usize>,
    device_ids: HashMap<String, usize>,
}

impl Simulation {
    pub fn new(config: &ScenarioConfig, opts: RunOptions) -> Result<Self, Vec<ConfigError>> {
        config.validate()?;
        let one = |e: ConfigError| vec![e];
        let topo = config.topology().map_err(one)?;
        let mats = feeder::build_impedance_matrices(&topo).map_err(|e| one(e.into()))?;
        let n = topo.n();
        let dt = config.simulation.dt;
        let node_ids: HashMap<String, usize> =
            config.feeder.nodes.iter().enumerate().map(|(k, s)| (s.clone(), k)).collect();

        let mut devices = Vec::with_capacity(config.devices.len());
        let mut device_ids = HashMap::new();
        for (k, d) in config.devices.iter().enumerate() {
            let (rating, vv, vw, state) = build_device_parts(d, dt).map_err(one)?;
            device_ids.insert(d.id.clone(), k);
            devices.push(Device {
                id: d.id.clone(),
                node: node_ids[&d.node],
                role: d.role,
                rating,
                volt_var: vv,
                volt_watt: vw,
                state,
                controller: None,
                target: (state.p, state.q),
            });
        }
        let mut base_p = vec![0.0; n];
        let mut base_q = vec![0.0; n];
        for l in &config.loads {
            base_p[node_ids[&l.node]] += l.p;
            base_q[node_ids[&l.node]] += l.q;
        }

        let mut sim = Simulation {
            config: config.clone(),
            opts,
            mats,
            devices,
            controllers: Vec::new(),
            observers: Vec::new(),
            load: (base_p.clone(), base_q.clone()),
            base_load: (base_p, base_q),
            rng: ChaCha8Rng::seed_from_u64(config.simulation.seed),
            v: vec![config.feeder.v0; n],
            step: 0,
            steps: config.steps().unwrap_or(0),
            next_event: 0,
            next_load_step: 0,
            mixed_warned: false,
            node_ids,
            device_ids,
        };
        sim.apply_load_steps(0.0);
        sim.solve();
        for a in &config.adaptive {
            let k = sim.device_ids[&a.device];
            let params = adaptive_params(a, &config.devices[k]);
            let node = sim.devices[k].node;
            let mut ctl = AdaptiveController::new(a.mode, params, sim.v[node]);
            ctl.enabled = !opts.disable_adaptive;
            sim.devices[k].controller = Some(sim.controllers.len());
            sim.controllers.push(BoundController { device: k, node, ctl });
        }
        sim.observers = sim.v.iter().map(|&v| ObserverState::new(&config.observer, dt, v)).collect();
        Ok(sim)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn impedance(&self) -> &ImpedanceMatrices {
        &self.mats
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn controllers(&self) -> &[BoundController] {
        &self.controllers
    }

    /// Voltages from the most recent solve.
    pub fn voltages(&self) -> &[f64] {
        &self.v
    }

    /// Present consumed load `(p, q)` per node.
    pub fn load(&self) -> (&[f64], &[f64]) {
        (&self.load.0, &self.load.1)
    }

    pub fn n(&self) -> usize {
        self.mats.n()
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.config.simulation.dt
    }

    /// Direct injections `(u_p, u_q)` summed per node.
    pub fn node_injections(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let (mut up, mut uq) = (vec![0.0; n], vec![0.0; n]);
        for c in &self.controllers {
            let (p, q) = c.ctl.injection();
            up[c.node] += p;
            uq[c.node] += q;
        }
        (up, uq)
    }

    /// Voltage offset seen by device `k`.
    pub fn device_bias(&self, k: usize) -> f64 {
        self.devices[k].controller.map_or(0.0, |c| self.controllers[c].ctl.bias())
    }

    fn apply_load_steps(&mut self, t: f64) {
        let eps = 1e-9 * self.config.simulation.dt;
        while let Some(s) = self.config.load_steps.get(self.next_load_step) {
            if s.time > t + eps {
                break;
            }
            let k = self.node_ids[&s.node];
            self.base_load.0[k] = s.p;
            self.base_load.1[k] = s.q;
            self.next_load_step += 1;
        }
        let sigma = self.config.simulation.load_noise;
        if sigma > 0.0 {
            for k in 0..self.n() {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                self.load.0[k] = self.base_load.0[k] * (1.0 + sigma * e);
                self.load.1[k] = self.base_load.1[k] * (1.0 + sigma * e);
            }
        } else {
            self.load.0.clone_from(&self.base_load.0);
            self.load.1.clone_from(&self.base_load.1);
        }
    }

    /// Net injection per node from device states, controller injections and
    /// loads. Summation order is fixed so results do not depend on policy.
    fn net_injection(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut p, mut q) = self.node_injections();
        for d in &self.devices {
            p[d.node] += d.state.p;
            q[d.node] += d.state.q;
        }
        for k in 0..self.n() {
            p[k] -= self.load.0[k];
            q[k] -= self.load.1[k];
        }
        (p, q)
    }

    fn solve(&mut self) {
        let (p, q) = self.net_injection();
        let mut v = std::mem::take(&mut self.v);
        feeder::voltages_from_net(&self.mats, &p, &q, self.config.feeder.v0, &mut v, self.opts.policy);
        self.v = v;
    }

    /// Swaps in the event's curves on every target, or on none if any
    /// replacement is invalid.
    pub fn apply_event(&mut self, event: &EventSpec) -> Result<(), String> {
        let vv = event.volt_var.as_ref().map(volt_var_curve).transpose().map_err(|e| format!("volt_var: {e}"))?;
        let vw = event.volt_watt.as_ref().map(volt_watt_curve).transpose().map_err(|e| format!("volt_watt: {e}"))?;
        let mut targets = Vec::with_capacity(event.devices.len());
        for id in &event.devices {
            targets.push(*self.device_ids.get(id).ok_or_else(|| format!("unknown device '{id}'"))?);
        }
        for k in targets {
            if let Some(c) = &vv {
                self.devices[k].volt_var = c.clone();
            }
            if let Some(c) = &vw {
                self.devices[k].volt_watt = c.clone();
            }
        }
        Ok(())
    }

    /// Stability-criterion inputs for the present curves with `M = T`.
    pub fn certificate_inputs(&self) -> CertificateInputs {
        population_certificate(&self.mats, self.devices.iter().map(|d| (d.node, &d.rating, &d.volt_var, &d.volt_watt, &d.state)))
    }

    /// `‖f(Zs + v̄ + forcing) - s‖∞` over devices at the present state.
    pub fn equilibrium_residual(&self) -> f64 {
        let (p, q) = self.net_injection();
        let mut v = vec![0.0; self.n()];
        feeder::voltages_from_net(&self.mats, &p, &q, self.config.feeder.v0, &mut v, ExecPolicy::Sequential);
        let mut worst = 0.0f64;
        for (k, d) in self.devices.iter().enumerate() {
            let vin = v[d.node] + self.device_bias(k);
            let (tp, tq) = inverter::setpoints(&d.volt_var, &d.volt_watt, &d.rating, vin);
            worst = worst.max((tp - d.state.p).abs()).max((tq - d.state.q).abs());
        }
        worst
    }

    fn record(&self, t: f64) -> TraceRow {
        let n = self.n();
        let (mut p, mut q) = (vec![0.0; n], vec![0.0; n]);
        for d in &self.devices {
            p[d.node] += d.state.p;
            q[d.node] += d.state.q;
        }
        let (up, uq) = self.node_injections();
        let (mut xi, mut w) = (vec![0.0; n], vec![0.0; n]);
        let (mut nc, mut nb) = (vec![0usize; n], vec![0usize; n]);
        for c in &self.controllers {
            xi[c.node] += c.ctl.state.xi;
            nc[c.node] += 1;
            if c.ctl.mode.is_bias() {
                w[c.node] += c.ctl.state.w;
                nb[c.node] += 1;
            }
        }
        for k in 0..n {
            xi[k] = if nc[k] == 0 { f64::NAN } else { xi[k] / nc[k] as f64 };
            if nb[k] > 0 {
                w[k] /= nb[k] as f64;
            }
        }
        TraceRow {
            t,
            v: self.v.clone(),
            p,
            q,
            xi,
            up,
            uq,
            w,
            y: self.observers.iter().map(|o| o.y).collect(),
        }
    }

    /// Runs the remaining steps and returns the trace.
    pub fn run(&mut self) -> SimulationTrace {
        let cfg = &self.config;
        let mut trace = SimulationTrace {
            scenario: cfg.name.clone(),
            scenario_hash: crate::io::scenario_hash(cfg),
            nodes: cfg.feeder.nodes.clone(),
            dt: cfg.simulation.dt,
            horizon: cfg.simulation.horizon,
            attack_time: cfg.attack_time(),
            adaptive_enabled: !self.opts.disable_adaptive && !cfg.adaptive.is_empty(),
            rows: Vec::with_capacity(self.steps + 1),
            divergence: None,
            reports: Vec::new(),
            notes: Vec::new(),
        };
        while self.step <= self.steps {
            if let Err(d) = self.advance(&mut trace) {
                log::warn!("divergence at t = {} on node {} (v = {})", d.time, d.node, d.value);
                trace.notes.push(format!("diverged at t = {}: v_{} = {}", d.time, d.node, d.value));
                trace.divergence = Some(d);
                break;
            }
        }
        trace
    }

    fn advance(&mut self, trace: &mut SimulationTrace) -> Result<(), DivergenceRecord> {
        let dt = self.config.simulation.dt;
        let policy = self.opts.policy;
        let t = self.step as f64 * dt;

        // 1. events and loads
        let eps = 1e-9 * dt;
        let mut fired = false;
        while let Some(e) = self.config.events.get(self.next_event).cloned() {
            if e.time > t + eps {
                break;
            }
            self.next_event += 1;
            match self.apply_event(&e) {
                Ok(()) => fired |= !e.devices.is_empty(),
                Err(msg) => {
                    log::warn!("event at t = {} rejected: {msg}", e.time);
                    trace.notes.push(format!("event at t = {} rejected: {msg}", e.time));
                }
            }
        }
        if fired {
            match stability::check_proposition1(&self.certificate_inputs()) {
                Ok(r) => {
                    log::info!("t = {t}: {r}");
                    trace.notes.push(format!("t = {t}: {r}"));
                    trace.reports.push((t, r));
                }
                Err(e) => trace.notes.push(format!("t = {t}: stability check failed: {e}")),
            }
        }
        if self.step > 0 {
            self.apply_load_steps(t);
        }

        // 2. voltages
        self.solve();
        for (k, &v) in self.v.iter().enumerate() {
            if !(v.is_finite() && v >= DIVERGENCE_BAND.0 && v <= DIVERGENCE_BAND.1) {
                return Err(DivergenceRecord { step: self.step, time: t, node: self.config.feeder.nodes[k].clone(), value: v });
            }
        }

        // 3. observers
        let v = &self.v;
        par::for_each_indexed(policy, &mut self.observers, |k, o| {
            o.step(v[k]);
        });

        // 4. adaptive controllers
        par::for_each_indexed(policy, &mut self.controllers, |_, c| c.ctl.step(v[c.node], dt));
        if !self.mixed_warned && !self.controllers.is_empty() {
            let c0 = self.controllers[0].ctl.state.c;
            if self.controllers.iter().any(|c| c.ctl.state.c != c0) {
                self.mixed_warned = true;
                log::warn!("t = {t}: adaptive sign selectors disagree across nodes");
                trace.notes.push(format!("t = {t}: adaptive sign selectors disagree across nodes"));
            }
        }

        // 5. setpoints
        let biases: Vec<f64> = (0..self.devices.len()).map(|k| self.device_bias(k)).collect();
        par::for_each_indexed(policy, &mut self.devices, |k, d| {
            d.target = inverter::setpoints(&d.volt_var, &d.volt_watt, &d.rating, v[d.node] + biases[k]);
        });

        // 6. record, then filter
        trace.rows.push(self.record(t));
        par::for_each_indexed(policy, &mut self.devices, |_, d| {
            let mut s = inverter::step_filter(d.state, d.target.0, d.target.1, dt);
            s.p = s.p.clamp(0.0, d.rating.s_bar);
            let qa = inverter::available_reactive(&d.rating, s.p).unwrap_or(0.0);
            s.q = s.q.clamp(-qa, qa);
            d.state = s;
        });
        self.step += 1;
        Ok(())
    }
}

/// Per-node Stability-criterion inputs for a device population. A node's Lipschitz
/// constants are the sums over its devices and its time constants the
/// minimum; nodes without devices get `C = 0`, `T = 1`.
pub fn population_certificate<'a>(
    mats: &ImpedanceMatrices,
    devices: impl Iterator<Item = (usize, &'a InverterRating, &'a PiecewiseCurve, &'a PiecewiseCurve, &'a InverterState)>,
) -> CertificateInputs {
    let n = mats.n();
    let mut c_p = DVector::zeros(n);
    let mut c_q = DVector::zeros(n);
    let mut t = DVector::from_element(2 * n, f64::INFINITY);
    for (node, rating, vv, vw, state) in devices {
        c_p[node] += inverter::lipschitz_constant(vw, rating.p_bar());
        c_q[node] += inverter::lipschitz_constant(vv, rating.q_max());
        t[node] = t[node].min(state.t_p);
        t[n + node] = t[n + node].min(state.t_q);
    }
    for x in t.iter_mut() {
        if !x.is_finite() {
            *x = 1.0;
        }
    }
    CertificateInputs::new(mats.z.clone(), c_p, c_q, t)
}

pub fn run_scenario(config: &ScenarioConfig, opts: RunOptions) -> Result<SimulationTrace, Vec<ConfigError>> {
    Ok(Simulation::new(config, opts)?.run())
}

/// Runs independent scenarios, in parallel under [`ExecPolicy::Parallel`].
pub fn run_batch(configs: &[ScenarioConfig], opts: RunOptions) -> Vec<Result<SimulationTrace, Vec<ConfigError>>> {
    par::map(opts.policy, configs, |c| run_scenario(c, opts))
}

/// Settling time of one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Settling {
    At(f64),
    NotSettled,
}

impl Serialize for Settling {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Settling::At(t) => s.serialize_f64(*t),
            Settling::NotSettled => s.serialize_str("not settled"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummaryOptions {
    /// Threshold as a fraction of the post-attack peak.
    pub fraction: f64,
    /// Required quiet period, s.
    pub window: f64,
    /// Absolute threshold floor.
    pub floor: f64,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        SummaryOptions { fraction: 0.01, window: 30.0, floor: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSummary {
    pub node: String,
    pub peak_y: f64,
    pub peak_time: f64,
    pub settling_time: Settling,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub scenario_hash: String,
    pub rows: usize,
    pub dt: f64,
    pub horizon: f64,
    pub adaptive_enabled: bool,
    pub attack_time: Option<f64>,
    pub options: SummaryOptions,
    pub divergence: Option<DivergenceRecord>,
    pub nodes: Vec<NodeSummary>,
    pub stability_reports: Vec<(f64, StabilityReport)>,
    pub notes: Vec<String>,
}

/// Per-node peaks and settling times relative to the attack (or `t = 0`).
///
/// A node settles at the first sample after its last threshold crossing,
/// provided at least `window` seconds of trace follow; a node that never
/// crosses settles at the reference time.
pub fn compute_summary(trace: &SimulationTrace, opts: SummaryOptions) -> Summary {
    let t_ref = trace.attack_time.unwrap_or(0.0);
    let eps = 1e-9 * trace.dt.max(1e-12);
    let start = trace.rows.partition_point(|r| r.t < t_ref - eps);
    let t_end = trace.rows.last().map_or(t_ref, |r| r.t);
    let nodes = trace
        .nodes
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut peak = (0.0, t_ref);
            for r in &trace.rows[start..] {
                if r.y[k] > peak.0 {
                    peak = (r.y[k], r.t);
                }
            }
            let thr = (opts.fraction * peak.0).max(opts.floor);
            let last = trace.rows[start..].iter().rposition(|r| r.y[k] >= thr).map(|i| i + start);
            let settling_time = match last {
                None => Settling::At(t_ref),
                Some(i) => match trace.rows.get(i + 1) {
                    Some(r) if t_end - r.t >= opts.window - eps => Settling::At(r.t),
                    _ => Settling::NotSettled,
                },
            };
            NodeSummary { node: name.clone(), peak_y: peak.0, peak_time: peak.1, settling_time }
        })
        .collect();
    Summary {
        scenario: trace.scenario.clone(),
        scenario_hash: trace.scenario_hash.clone(),
        rows: trace.rows.len(),
        dt: trace.dt,
        horizon: trace.horizon,
        adaptive_enabled: trace.adaptive_enabled,
        attack_time: trace.attack_time,
        options: opts,
        divergence: trace.divergence.clone(),
        nodes,
        stability_reports: trace.reports.clone(),
        notes: trace.notes.clone(),
    }
}

/// Linear-interpolation percentile of a sorted slice, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Feeder-wide `(t, p25, median, p75)` of `y` per row.
pub fn energy_percentiles(trace: &SimulationTrace) -> Vec<[f64; 4]> {
    trace
        .rows
        .iter()
        .map(|r| {
            let mut y = r.y.clone();
            y.sort_by(f64::total_cmp);
            [r.t, percentile_sorted(&y, 0.25), percentile_sorted(&y, 0.5), percentile_sorted(&y, 0.75)]
        })
        .collect()
}
