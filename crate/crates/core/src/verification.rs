//! Plant/reference harness for the adaptive error system.
//!
//! The plant integrates
//!
//! ```text
//! T ds/dt   = f(Z s + v̄ + forcing(m* + φ)) - s
//! T ds_r/dt = f(Z s_r + v̄ + forcing(m*)) - s_r
//! dφ/dt     = -Γ Îᵀ-routed |e_v|,   e_v = Z (s - s_r)
//! ```
//!
//! where `φ = c μ` (injection) or `d φ` (bias) is the adaptive part of the
//! forcing and `m*` a uniform stabilizing offset. In injection mode the
//! active channel of node `i` sees `v_i + m* + φ_i` and the reactive channel
//! `v_i + m* + φ_{n+i}`; in bias mode both channels see `v_i + m* + φ_i`.
//!
//! The Lyapunov value is `V = ½((Z e_s)ᵀ P (Z e_s) + μᵀ H μ)`. The
//! frozen-adaptation check uses `V_M = ½ e_sᵀ M e_s` with `M = T`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::feeder::{self, ImpedanceMatrices};
use crate::inverter::{self, InverterRating, PiecewiseCurve};
use crate::sim::{self, ConfigError, ScenarioConfig, Simulation};
use crate::stability::{self, CertificateInputs, CertificateSearch, StabilityError, StabilityReport};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("scenario: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Config(Vec<ConfigError>),
    #[error("stability: {0}")]
    Stability(#[from] StabilityError),
    #[error("fixed-point iteration did not converge (residual {residual:e} after {iterations} iterations)")]
    Equilibrium { residual: f64, iterations: usize },
    #[error(
        "no uniform offset within ±{cap} stabilizes the equilibrium; best candidate {best} leaves sigma = {sigma:.4}, steepest node '{node}'"
    )]
    NoOffset { cap: f64, best: f64, sigma: f64, node: String },
    #[error("scenario has no devices")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HarnessMode {
    Injection,
    Bias,
}

impl HarnessMode {
    /// Length of the adaptive vector for an `n`-node plant.
    pub fn width(self, n: usize) -> usize {
        match self {
            HarnessMode::Injection => 2 * n,
            HarnessMode::Bias => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantDevice {
    pub node: usize,
    pub rating: InverterRating,
    pub volt_var: PiecewiseCurve,
    pub volt_watt: PiecewiseCurve,
}

/// Continuous-time plant `T ds/dt = f(Z s + v̄ + forcing) - s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    pub mats: ImpedanceMatrices,
    pub v_bar: DVector<f64>,
    pub devices: Vec<PlantDevice>,
    /// 2n time constants, active block first.
    pub t: DVector<f64>,
    pub node_names: Vec<String>,
}

impl Plant {
    /// Plant of a scenario with every event applied (the post-attack curves).
    pub fn from_config(config: &ScenarioConfig) -> Result<Self, VerifyError> {
        let mut sim = Simulation::new(config, sim::RunOptions::default()).map_err(VerifyError::Config)?;
        for e in &config.events {
            // Invalid replacements are skipped exactly as in the simulator.
            let _ = sim.apply_event(e);
        }
        if sim.devices().is_empty() {
            return Err(VerifyError::Empty);
        }
        let n = sim.n();
        let mats = sim.impedance().clone();
        let (lp, lq) = sim.load();
        let mut v_bar = vec![0.0; n];
        let neg_p: Vec<f64> = lp.iter().map(|x| -x).collect();
        let neg_q: Vec<f64> = lq.iter().map(|x| -x).collect();
        feeder::voltages_from_net(&mats, &neg_p, &neg_q, config.feeder.v0, &mut v_bar, Default::default());
        let inputs = sim.certificate_inputs();
        let devices = sim
            .devices()
            .iter()
            .map(|d| PlantDevice {
                node: d.node,
                rating: d.rating,
                volt_var: d.volt_var.clone(),
                volt_watt: d.volt_watt.clone(),
            })
            .collect();
        Ok(Plant { mats, v_bar: DVector::from_vec(v_bar), devices, t: inputs.t, node_names: config.feeder.nodes.clone() })
    }

    pub fn n(&self) -> usize {
        self.mats.n()
    }

    pub fn voltages(&self, s: &DVector<f64>) -> DVector<f64> {
        &self.mats.z * s + &self.v_bar
    }

    /// Per-channel curve arguments for a forcing vector.
    fn arguments(&self, v: &DVector<f64>, mode: HarnessMode, forcing: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.n();
        match mode {
            HarnessMode::Injection => (v + forcing.rows(0, n), v + forcing.rows(n, n)),
            HarnessMode::Bias => (v + forcing, v + forcing),
        }
    }

    /// `f` evaluated at the forced arguments, stacked `[p; q]`.
    pub fn f(&self, s: &DVector<f64>, mode: HarnessMode, forcing: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let v = self.voltages(s);
        let (ap, aq) = self.arguments(&v, mode, forcing);
        let mut out = DVector::zeros(2 * n);
        for d in &self.devices {
            let p = inverter::eval_volt_watt(&d.volt_watt, ap[d.node], d.rating.p_bar());
            let q_bar = inverter::available_reactive(&d.rating, p).unwrap_or(0.0);
            out[d.node] += p;
            out[n + d.node] += inverter::eval_volt_var(&d.volt_var, aq[d.node], q_bar);
        }
        out
    }

    /// Damped fixed-point iteration `s ← (1-β) s + β f(s)`.
    pub fn equilibrium(&self, mode: HarnessMode, forcing: &DVector<f64>) -> Result<DVector<f64>, VerifyError> {
        const BETA: f64 = 0.05;
        const MAX_ITER: usize = 200_000;
        let mut s = self.f(&DVector::zeros(2 * self.n()), mode, forcing);
        let mut residual = f64::INFINITY;
        for _ in 0..MAX_ITER {
            let fs = self.f(&s, mode, forcing);
            residual = (&fs - &s).amax();
            if residual <= 1e-13 {
                return Ok(s);
            }
            s = &s * (1.0 - BETA) + fs * BETA;
        }
        Err(VerifyError::Equilibrium { residual, iterations: MAX_ITER })
    }

    /// Global Lipschitz constants (whole curves).
    pub fn global_inputs(&self) -> CertificateInputs {
        let n = self.n();
        let (mut c_p, mut c_q) = (DVector::zeros(n), DVector::zeros(n));
        for d in &self.devices {
            c_p[d.node] += inverter::lipschitz_constant(&d.volt_watt, d.rating.p_bar());
            c_q[d.node] += inverter::lipschitz_constant(&d.volt_var, d.rating.q_max());
        }
        CertificateInputs::new(self.mats.z.clone(), c_p, c_q, self.t.clone())
    }

    /// Lipschitz constants of the curve segments in use at state `s`.
    pub fn local_inputs(&self, s: &DVector<f64>, mode: HarnessMode, forcing: &DVector<f64>) -> CertificateInputs {
        let n = self.n();
        let v = self.voltages(s);
        let (ap, aq) = self.arguments(&v, mode, forcing);
        let (mut c_p, mut c_q) = (DVector::zeros(n), DVector::zeros(n));
        for d in &self.devices {
            c_p[d.node] += d.volt_watt.local_slope(ap[d.node]) * d.rating.p_bar();
            c_q[d.node] += d.volt_var.local_slope(aq[d.node]) * d.rating.q_max();
        }
        CertificateInputs::new(self.mats.z.clone(), c_p, c_q, self.t.clone())
    }

    pub fn uniform(&self, mode: HarnessMode, value: f64) -> DVector<f64> {
        DVector::from_element(mode.width(self.n()), value)
    }

    /// Eigenvector of the most negative eigenvalue of `sym(I + K)` at `s`,
    /// `K` the local slope gain matrix; a perturbation along it maximizes
    /// the initial growth of `V_M`.
    pub fn worst_direction(&self, s: &DVector<f64>, mode: HarnessMode, forcing: &DVector<f64>) -> (f64, DVector<f64>) {
        let local = self.local_inputs(s, mode, forcing);
        let n = self.n();
        let mut route = DMatrix::zeros(2 * n, n);
        for i in 0..n {
            route[(i, i)] = 1.0;
            route[(n + i, i)] = 1.0;
        }
        let k = local.c_block() * route * &self.mats.z;
        let sym = DMatrix::identity(2 * n, 2 * n) + (&k + k.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let (idx, &val) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        (val, eig.eigenvectors.column(idx).into_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OffsetSearch {
    /// Largest |offset| scanned, pu.
    pub cap: f64,
    pub grid: usize,
}

impl Default for OffsetSearch {
    fn default() -> Self {
        OffsetSearch { cap: 0.2, grid: 400 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilizingOffset {
    /// Signed uniform offset added to every channel argument.
    pub offset: f64,
    pub equilibrium: DVector<f64>,
    pub report: StabilityReport,
}

fn local_report(plant: &Plant, mode: HarnessMode, m: f64) -> Result<(DVector<f64>, StabilityReport), VerifyError> {
    let forcing = plant.uniform(mode, m);
    let s = plant.equilibrium(mode, &forcing)?;
    let r = stability::check_proposition1(&plant.local_inputs(&s, mode, &forcing))?;
    Ok((s, r))
}

/// Smallest-magnitude uniform offset whose forced equilibrium sits on curve
/// segments satisfying the direct criterion. Grid scan outward from zero in
/// both directions, then bisection on the first bracketing cell.
pub fn find_stabilizing_offset(
    plant: &Plant,
    mode: HarnessMode,
    search: OffsetSearch,
) -> Result<StabilizingOffset, VerifyError> {
    let (s0, r0) = local_report(plant, mode, 0.0)?;
    if r0.satisfied {
        return Ok(StabilizingOffset { offset: 0.0, equilibrium: s0, report: r0 });
    }
    let step = search.cap / search.grid as f64;
    let mut best = (0.0, r0.sigma);
    for k in 1..=search.grid {
        for sign in [-1.0, 1.0] {
            let m = sign * k as f64 * step;
            let (_, r) = local_report(plant, mode, m)?;
            if r.sigma < best.1 {
                best = (m, r.sigma);
            }
            if r.satisfied {
                let (mut lo, mut hi) = (sign * (k - 1) as f64 * step, m);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if local_report(plant, mode, mid)?.1.satisfied {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                    if (hi - lo).abs() <= 1e-12 {
                        break;
                    }
                }
                let (equilibrium, report) = local_report(plant, mode, hi)?;
                return Ok(StabilizingOffset { offset: hi, equilibrium, report });
            }
        }
    }
    let forcing = plant.uniform(mode, best.0);
    let s = plant.equilibrium(mode, &forcing)?;
    let local = plant.local_inputs(&s, mode, &forcing);
    let steep = (0..plant.n())
        .max_by(|&a, &b| (local.c_p[a] + local.c_q[a]).total_cmp(&(local.c_p[b] + local.c_q[b])))
        .unwrap_or(0);
    Err(VerifyError::NoOffset { cap: search.cap, best: best.0, sigma: best.1, node: plant.node_names[steep].clone() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedOptions {
    pub dt: f64,
    pub horizon: f64,
    /// Uniform adaptation gain; 0 freezes `μ`.
    pub gamma: f64,
    /// Initial adaptive forcing `φ(0)` (uniform); `None` uses `|m*|`.
    pub phi0: Option<f64>,
    /// Added to the plant's initial equilibrium.
    pub perturbation: Option<DVector<f64>>,
    /// `H = h (I + 1 1ᵀ)`; `None` bisects for the smallest certifying `h`.
    pub h_scale: Option<f64>,
}

impl Default for PairedOptions {
    fn default() -> Self {
        PairedOptions { dt: 0.1, horizon: 200.0, gamma: 1.0, phi0: None, perturbation: None, h_scale: None }
    }
}

/// One harness run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedRun {
    pub mode: HarnessMode,
    pub offset: f64,
    pub h_scale: f64,
    /// Λ (or Θ) element-wise non-positive for the Γ, H, P used here.
    pub certified: bool,
    /// Certificate missing: the trace is not evidence of stability.
    pub exploratory: bool,
    pub times: Vec<f64>,
    pub e_s_inf: Vec<f64>,
    pub lyapunov: Vec<f64>,
    pub lyapunov_m: Vec<f64>,
    /// `max |e_v - Z e_s|` over the run.
    pub ev_identity: f64,
    /// True when some component of `φ` changed sign.
    pub phi_crossed: bool,
    pub phi_final: Vec<f64>,
}

/// Certificate for `mode` with `Γ = gamma I` and `H = h (I + 1 1ᵀ)`.
pub fn certificate(plant: &Plant, mode: HarnessMode, gamma: f64, h_scale: Option<f64>) -> Result<(f64, bool), VerifyError> {
    let inputs = plant.global_inputs();
    let n = plant.n();
    let k = mode.width(n);
    let g = DMatrix::identity(k, k) * gamma;
    let nodes: Vec<usize> = (0..n).collect();
    let build = |h: &DMatrix<f64>| match mode {
        HarnessMode::Injection => stability::build_lambda(&inputs, &stability::injection_placement(n, &nodes, &nodes), &g, h),
        HarnessMode::Bias => stability::build_theta(&inputs, &stability::bias_placement(n, &nodes), &g, h),
    };
    let h = match h_scale {
        Some(h) => h,
        None => {
            let CertificateSearch { h_scale, .. } = stability::search_h_scale(k, build)?;
            match h_scale {
                Some(h) => h,
                None => return Ok((stability::H_SCALE_CAP, false)),
            }
        }
    };
    let ok = stability::check_nonpositive(&build(&(stability::h_base(k) * h))?, 0.0).nonpositive;
    Ok((h, ok))
}

/// Adaptation rate routed to each adaptive channel: injection channels
/// `i` and `n + i` both see `|e_v,i|`.
fn routed(mode: HarnessMode, ev_abs: &DVector<f64>) -> DVector<f64> {
    match mode {
        HarnessMode::Injection => {
            let n = ev_abs.len();
            DVector::from_fn(2 * n, |i, _| ev_abs[i % n])
        }
        HarnessMode::Bias => ev_abs.clone(),
    }
}

pub fn run_paired(plant: &Plant, mode: HarnessMode, offset: f64, opts: &PairedOptions) -> Result<PairedRun, VerifyError> {
    let (h_scale, certified) = certificate(plant, mode, opts.gamma, opts.h_scale)?;
    let k = mode.width(plant.n());
    let h = stability::h_base(k) * h_scale;
    let m_star = plant.uniform(mode, offset);
    let mut phi = plant.uniform(mode, opts.phi0.unwrap_or(offset.abs()));
    let phi_sign: Vec<f64> = phi.iter().map(|x| x.signum()).collect();

    let mut s_r = plant.equilibrium(mode, &m_star)?;
    let mut s = plant.equilibrium(mode, &(&m_star + &phi))?;
    if let Some(p) = &opts.perturbation {
        s += p;
    }
    let t_inv = plant.t.map(|t| 1.0 / t);
    let steps = (opts.horizon / opts.dt).round() as usize;
    let lyap = |e: &DVector<f64>, phi: &DVector<f64>| {
        let ze = &plant.mats.z * e;
        0.5 * (ze.dot(&ze) + phi.dot(&(&h * phi)))
    };
    let lyap_m = |e: &DVector<f64>| 0.5 * e.iter().zip(plant.t.iter()).map(|(x, t)| t * x * x).sum::<f64>();

    let mut run = PairedRun {
        mode,
        offset,
        h_scale,
        certified,
        exploratory: !certified,
        times: Vec::with_capacity(steps + 1),
        e_s_inf: Vec::with_capacity(steps + 1),
        lyapunov: Vec::with_capacity(steps + 1),
        lyapunov_m: Vec::with_capacity(steps + 1),
        ev_identity: 0.0,
        phi_crossed: false,
        phi_final: Vec::new(),
    };
    for step in 0..=steps {
        let e = &s - &s_r;
        let e_v = plant.voltages(&s) - plant.voltages(&s_r);
        run.ev_identity = run.ev_identity.max((&e_v - &plant.mats.z * &e).amax());
        run.times.push(step as f64 * opts.dt);
        run.e_s_inf.push(e.amax());
        // μᵀHμ = φᵀHφ since c² = 1.
        run.lyapunov.push(lyap(&e, &phi));
        run.lyapunov_m.push(lyap_m(&e));
        if step == steps {
            break;
        }
        let ds = (plant.f(&s, mode, &(&m_star + &phi)) - &s).component_mul(&t_inv);
        let ds_r = (plant.f(&s_r, mode, &m_star) - &s_r).component_mul(&t_inv);
        let dphi = routed(mode, &e_v.abs()) * -opts.gamma;
        s += ds * opts.dt;
        s_r += ds_r * opts.dt;
        phi += dphi * opts.dt;
        run.phi_crossed |= phi.iter().zip(&phi_sign).any(|(x, sg)| *sg != 0.0 && x.signum() != *sg && *x != 0.0);
    }
    run.phi_final = phi.iter().copied().collect();
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub checked: usize,
    /// `(step, ΔV)` for every increase outside the band.
    pub violations: Vec<(usize, f64)>,
    pub passed: bool,
}

pub const ERROR_BAND: f64 = 1e-8;

fn decay(values: &[f64], e_s_inf: &[f64], strict: bool) -> DecayReport {
    let mut checked = 0;
    let mut violations = Vec::new();
    for k in 0..values.len().saturating_sub(1) {
        if e_s_inf[k] <= ERROR_BAND {
            continue;
        }
        checked += 1;
        let dv = values[k + 1] - values[k];
        let bad = if strict { dv >= 0.0 } else { dv > 1e-12 * values[k].abs() };
        if bad {
            violations.push((k, dv));
        }
    }
    DecayReport { checked, passed: violations.is_empty(), violations }
}

/// `ΔV_M < 0` at every step with `‖e_s‖∞ > 1e-8`.
pub fn check_vdot_negative(run: &PairedRun) -> DecayReport {
    decay(&run.lyapunov_m, &run.e_s_inf, true)
}

/// `V` non-increasing (to rounding, 1e-12 relative) outside the band.
pub fn check_v_nonincreasing(run: &PairedRun) -> DecayReport {
    decay(&run.lyapunov, &run.e_s_inf, false)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub mode: HarnessMode,
    pub unforced: StabilityReport,
    pub offset: f64,
    pub forced: StabilityReport,
    pub h_scale: f64,
    pub certified: bool,
    pub v_nonincreasing: DecayReport,
    pub final_error: f64,
    pub converged: bool,
    pub ev_identity: f64,
    pub passed: bool,
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode: {:?}", self.mode)?;
        writeln!(f, "unforced equilibrium: {}", self.unforced)?;
        writeln!(f, "stabilizing offset: {:+.6} pu", self.offset)?;
        writeln!(f, "forced equilibrium: {}", self.forced)?;
        writeln!(f, "certificate: h = {:.6e}, {}", self.h_scale, if self.certified { "non-positive" } else { "NOT certified (exploratory)" })?;
        writeln!(
            f,
            "V non-increasing: {} ({} steps checked, {} violations)",
            self.v_nonincreasing.passed,
            self.v_nonincreasing.checked,
            self.v_nonincreasing.violations.len()
        )?;
        writeln!(f, "final ||e_s||inf = {:.3e} (< 1e-4: {})", self.final_error, self.converged)?;
        writeln!(f, "max |e_v - Z e_s| = {:.3e}", self.ev_identity)?;
        write!(f, "result: {}", if self.passed { "PASS" } else { "FAIL" })
    }
}

/// Full stability verification on a scenario's post-attack plant.
pub fn verify(config: &ScenarioConfig, mode: HarnessMode, opts: &PairedOptions) -> Result<VerifyReport, VerifyError> {
    let plant = Plant::from_config(config)?;
    let zero = plant.uniform(mode, 0.0);
    let s0 = plant.equilibrium(mode, &zero)?;
    let unforced = stability::check_proposition1(&plant.local_inputs(&s0, mode, &zero))?;
    let star = find_stabilizing_offset(&plant, mode, OffsetSearch::default())?;
    let run = run_paired(&plant, mode, star.offset, opts)?;
    let v_nonincreasing = check_v_nonincreasing(&run);
    let final_error = run.e_s_inf.last().copied().unwrap_or(0.0);
    let converged = final_error < 1e-4;
    Ok(VerifyReport {
        mode,
        unforced,
        offset: star.offset,
        forced: star.report,
        h_scale: run.h_scale,
        certified: run.certified,
        passed: run.certified && v_nonincreasing.passed && converged && run.ev_identity <= 1e-12,
        v_nonincreasing,
        final_error,
        converged,
        ev_identity: run.ev_identity,
    })
}

/// Verdict of a Λ or Θ certificate search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateVerdict {
    /// Number of adaptive channels (columns of `B` or `D`).
    pub channels: usize,
    /// Smallest certifying `h`, or `None` when the cap was reached.
    pub h_scale: Option<f64>,
    /// Largest entry at the cap scale.
    pub worst_at_cap: f64,
}

impl fmt::Display for CertificateVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.channels, self.h_scale) {
            (0, _) => write!(f, "no controllers"),
            (k, Some(h)) => write!(f, "non-positive with h = {h:.6e} ({k} channels)"),
            (k, None) => write!(f, "NOT certifiable up to h = {:.0e} (worst entry {:.3e}, {k} channels)", stability::H_SCALE_CAP, self.worst_at_cap),
        }
    }
}

/// Direct criterion and adaptive certificates for one curve set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveSetReport {
    pub proposition1: StabilityReport,
    pub lambda: CertificateVerdict,
    pub theta: CertificateVerdict,
}

impl fmt::Display for CurveSetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "  criterion: {}", self.proposition1)?;
        writeln!(f, "  Lambda (injection): {}", self.lambda)?;
        write!(f, "  Theta (bias): {}", self.theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub scenario: String,
    pub pre_attack: CurveSetReport,
    /// `None` when the scenario has no curve events.
    pub post_attack: Option<CurveSetReport>,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario: {}", self.scenario)?;
        writeln!(f, "pre-attack curves:\n{}", self.pre_attack)?;
        match &self.post_attack {
            Some(r) => write!(f, "post-attack curves:\n{r}"),
            None => write!(f, "post-attack curves: no events"),
        }
    }
}

fn verdict<F>(k: usize, build: F) -> Result<CertificateVerdict, VerifyError>
where
    F: FnMut(&DMatrix<f64>) -> Result<DMatrix<f64>, StabilityError>,
{
    if k == 0 {
        return Ok(CertificateVerdict { channels: 0, h_scale: None, worst_at_cap: f64::NAN });
    }
    let search = stability::search_h_scale(k, build)?;
    Ok(CertificateVerdict { channels: k, h_scale: search.h_scale, worst_at_cap: search.at_cap.worst })
}

/// Certificates for the controllers configured in `sim`. With no adaptive
/// entries every node gets one channel of each kind with unit gain.
fn curve_set_report(sim: &Simulation) -> Result<CurveSetReport, VerifyError> {
    let inputs = sim.certificate_inputs();
    let n = sim.n();
    let (mut p_nodes, mut q_nodes, mut b_nodes) = (Vec::new(), Vec::new(), Vec::new());
    let (mut g_p, mut g_q, mut g_v) = (Vec::new(), Vec::new(), Vec::new());
    if sim.controllers().is_empty() {
        p_nodes = (0..n).collect();
        q_nodes = (0..n).collect();
        b_nodes = (0..n).collect();
        g_p = vec![1.0; n];
        g_q = vec![1.0; n];
        g_v = vec![1.0; n];
    }
    for c in sim.controllers() {
        let prm = &c.ctl.params;
        if c.ctl.mode.is_bias() {
            b_nodes.push(c.node);
            g_v.push(prm.gamma_v);
        }
        if c.ctl.mode.drives_p() {
            p_nodes.push(c.node);
            g_p.push(prm.gamma_p);
        }
        if c.ctl.mode.drives_q() {
            q_nodes.push(c.node);
            g_q.push(prm.gamma_q);
        }
    }
    let b = stability::injection_placement(n, &p_nodes, &q_nodes);
    let gamma_inj = DMatrix::from_diagonal(&DVector::from_iterator(g_p.len() + g_q.len(), g_p.into_iter().chain(g_q)));
    let lambda = verdict(b.ncols(), |h| stability::build_lambda(&inputs, &b, &gamma_inj, h))?;
    let d = stability::bias_placement(n, &b_nodes);
    let gamma_v = DMatrix::from_diagonal(&DVector::from_vec(g_v));
    let theta = verdict(d.ncols(), |h| stability::build_theta(&inputs, &d, &gamma_v, h))?;
    Ok(CurveSetReport { proposition1: stability::check_proposition1(&inputs)?, lambda, theta })
}

/// Reports for the initial curves and, if the scenario has events, for the
/// curves after every event has been applied.
pub fn check_scenario(config: &ScenarioConfig) -> Result<CheckReport, VerifyError> {
    let mut sim = Simulation::new(config, sim::RunOptions::default()).map_err(VerifyError::Config)?;
    let pre_attack = curve_set_report(&sim)?;
    let post_attack = if config.events.is_empty() {
        None
    } else {
        for e in &config.events {
            let _ = sim.apply_event(e);
        }
        Some(curve_set_report(&sim)?)
    };
    Ok(CheckReport { scenario: config.name.clone(), pre_attack, post_attack })
}
