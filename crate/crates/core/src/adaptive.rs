//! Decentralized adaptive controllers.
//!
//! Each controller sees only its own node voltage `v`. A low-pass filtered
//! copy `ξ` stands in for the reference model, and the adaptation rate is
//! `γ |v - ξ|` whenever that error exceeds the deadband `ε`:
//!
//! ```text
//! dξ/dt   = τ (v - ξ)
//! du_p/dt = -c γ_p |v - ξ| 1{|v - ξ| > ε}
//! du_q/dt = -c γ_q |v - ξ| 1{|v - ξ| > ε}
//! dw/dt   = -d γ_v |v - ξ| 1{|v - ξ| > ε}
//! ```
//!
//! Direct injections `u` add to the nodal injection; the bias `w` is added to
//! the voltage fed to the device's own Volt-VAR/Volt-Watt curves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdaptiveError {
    #[error("tau must be finite and > 0, got {0}")]
    Tau(f64),
    #[error("gain {name} must be finite and >= 0, got {value}")]
    Gain { name: &'static str, value: f64 },
    #[error("epsilon must be finite and >= 0, got {0}")]
    Epsilon(f64),
    #[error("{name} cap must be finite and >= 0, got {value}")]
    Cap { name: &'static str, value: f64 },
    #[error("reference filter needs dt * tau <= 1 (dt = {dt}, tau = {tau})")]
    FilterStep { dt: f64, tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptiveMode {
    Bias,
    InjectionP,
    InjectionQ,
    InjectionPq,
}

impl AdaptiveMode {
    pub fn is_bias(self) -> bool {
        self == AdaptiveMode::Bias
    }

    pub fn drives_p(self) -> bool {
        matches!(self, AdaptiveMode::InjectionP | AdaptiveMode::InjectionPq)
    }

    pub fn drives_q(self) -> bool {
        matches!(self, AdaptiveMode::InjectionQ | AdaptiveMode::InjectionPq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveParams {
    /// Reference filter rate, 1/s.
    pub tau: f64,
    pub gamma_p: f64,
    pub gamma_q: f64,
    pub gamma_v: f64,
    /// Adaptation deadband on `|v - ξ|`, pu.
    pub epsilon: f64,
    /// Sign-selection threshold, pu.
    pub v_crit: f64,
    /// Half-width of the sign-selection hysteresis band, pu.
    pub hysteresis: f64,
    /// `|w| <= bias_cap`.
    pub bias_cap: f64,
    /// `|u_p|, |u_q| <= injection_cap`.
    pub injection_cap: f64,
}

impl Default for AdaptiveParams {
    fn default() -> Self {
        AdaptiveParams {
            tau: 0.1,
            gamma_p: 0.0,
            gamma_q: 20.0,
            gamma_v: 0.1,
            epsilon: 1e-4,
            v_crit: 1.0,
            hysteresis: 0.0,
            bias_cap: 0.1,
            injection_cap: f64::INFINITY,
        }
    }
}

impl AdaptiveParams {
    pub fn validate(&self) -> Result<(), AdaptiveError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(AdaptiveError::Tau(self.tau));
        }
        for (name, value) in [("gamma_p", self.gamma_p), ("gamma_q", self.gamma_q), ("gamma_v", self.gamma_v)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(AdaptiveError::Gain { name, value });
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(AdaptiveError::Epsilon(self.epsilon));
        }
        for (name, value) in [("bias", self.bias_cap), ("hysteresis", self.hysteresis)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(AdaptiveError::Cap { name, value });
            }
        }
        if !(self.injection_cap >= 0.0) {
            return Err(AdaptiveError::Cap { name: "injection", value: self.injection_cap });
        }
        Ok(())
    }

    pub fn check_step(&self, dt: f64) -> Result<(), AdaptiveError> {
        if dt * self.tau > 1.0 {
            return Err(AdaptiveError::FilterStep { dt, tau: self.tau });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveControllerState {
    pub xi: f64,
    pub u_p: f64,
    pub u_q: f64,
    pub w: f64,
    /// Injection sign: `-1` consume, `+1` inject.
    pub c: f64,
    /// Bias sign.
    pub d: f64,
}

impl AdaptiveControllerState {
    /// Fresh controller whose reference starts at the first measured voltage.
    pub fn new(v_initial: f64, v_crit: f64) -> Self {
        let (c, d) = sign_heuristic(v_initial, v_crit);
        AdaptiveControllerState { xi: v_initial, u_p: 0.0, u_q: 0.0, w: 0.0, c, d }
    }
}

pub fn step_reference_filter(state: &AdaptiveControllerState, v: f64, tau: f64, dt: f64) -> f64 {
    state.xi + dt * tau * (v - state.xi)
}

/// `(c, d)`: lower the voltage contribution above `v_crit`, raise it at or
/// below.
pub fn sign_heuristic(v: f64, v_crit: f64) -> (f64, f64) {
    if v > v_crit {
        (-1.0, 1.0)
    } else {
        (1.0, -1.0)
    }
}

/// Sign selection with a hysteresis band of half-width `h` around `v_crit`;
/// inside the band the previous signs are kept. `h = 0` reduces to
/// [`sign_heuristic`].
pub fn sign_with_hysteresis(v: f64, v_crit: f64, h: f64, previous: (f64, f64)) -> (f64, f64) {
    if h == 0.0 {
        sign_heuristic(v, v_crit)
    } else if v > v_crit + h {
        (-1.0, 1.0)
    } else if v <= v_crit - h {
        (1.0, -1.0)
    } else {
        previous
    }
}

/// Adaptation magnitude `|v - ξ| 1{|v - ξ| > ε}`.
pub fn adaptation_drive(v: f64, xi: f64, epsilon: f64) -> f64 {
    let e = (v - xi).abs();
    if e > epsilon {
        e
    } else {
        0.0
    }
}

fn integrate_clamped(value: f64, rate: f64, dt: f64, cap: f64) -> f64 {
    (value + dt * rate).clamp(-cap, cap)
}

pub fn step_power_injection(
    state: &AdaptiveControllerState,
    v: f64,
    params: &AdaptiveParams,
    dt: f64,
) -> (f64, f64) {
    let drive = adaptation_drive(v, state.xi, params.epsilon);
    let u_p = integrate_clamped(state.u_p, -state.c * params.gamma_p * drive, dt, params.injection_cap);
    let u_q = integrate_clamped(state.u_q, -state.c * params.gamma_q * drive, dt, params.injection_cap);
    (u_p, u_q)
}

pub fn step_voltage_bias(state: &AdaptiveControllerState, v: f64, params: &AdaptiveParams, dt: f64) -> f64 {
    let drive = adaptation_drive(v, state.xi, params.epsilon);
    integrate_clamped(state.w, -state.d * params.gamma_v * drive, dt, params.bias_cap)
}

pub fn biased_voltage(v: f64, w: f64) -> f64 {
    v + w
}

/// A controller bound to one device.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveController {
    pub mode: AdaptiveMode,
    pub params: AdaptiveParams,
    pub state: AdaptiveControllerState,
    /// When false the reference filter still runs but `u` and `w` are frozen.
    pub enabled: bool,
}

impl AdaptiveController {
    pub fn new(mode: AdaptiveMode, params: AdaptiveParams, v_initial: f64) -> Self {
        AdaptiveController {
            mode,
            params,
            state: AdaptiveControllerState::new(v_initial, params.v_crit),
            enabled: true,
        }
    }

    /// One step in the fixed order: reference filter, sign selection, then
    /// the injection or bias integrator, all driven by the same published
    /// voltage `v`.
    pub fn step(&mut self, v: f64, dt: f64) {
        let p = &self.params;
        self.state.xi = step_reference_filter(&self.state, v, p.tau, dt);
        let (c, d) = sign_with_hysteresis(v, p.v_crit, p.hysteresis, (self.state.c, self.state.d));
        self.state.c = c;
        self.state.d = d;
        if !self.enabled {
            return;
        }
        if self.mode.is_bias() {
            self.state.w = step_voltage_bias(&self.state, v, p, dt);
        } else {
            let (u_p, u_q) = step_power_injection(&self.state, v, p, dt);
            if self.mode.drives_p() {
                self.state.u_p = u_p;
            }
            if self.mode.drives_q() {
                self.state.u_q = u_q;
            }
        }
    }

    /// Voltage offset applied to the device's own curves.
    pub fn bias(&self) -> f64 {
        if self.mode.is_bias() {
            self.state.w
        } else {
            0.0
        }
    }

    /// Direct `(p, q)` added to the nodal injection.
    pub fn injection(&self) -> (f64, f64) {
        if self.mode.is_bias() {
            (0.0, 0.0)
        } else {
            (self.state.u_p, self.state.u_q)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn state(xi: f64, c: f64, d: f64) -> AdaptiveControllerState {
        AdaptiveControllerState { xi, u_p: 0.0, u_q: 0.0, w: 0.0, c, d }
    }

    fn reference_params() -> AdaptiveParams {
        AdaptiveParams { tau: 0.1, gamma_p: 0.1, gamma_q: 20.0, gamma_v: 0.1, epsilon: 1e-4, ..Default::default() }
    }

    #[test]
    fn reference_filter_cases() {
        assert_eq!(step_reference_filter(&state(1.02, 1.0, -1.0), 1.02, 0.1, 1.0), 1.02);
        assert_relative_eq!(step_reference_filter(&state(1.0, 1.0, -1.0), 1.1, 0.1, 1.0), 1.01, epsilon = 1e-15);
        let mut s = state(1.0, 1.0, -1.0);
        for _ in 0..500 {
            s.xi = step_reference_filter(&s, 1.05, 0.1, 1.0);
        }
        assert_relative_eq!(s.xi, 1.05, epsilon = 1e-12);
    }

    #[test]
    fn sign_heuristic_cases() {
        assert_eq!(sign_heuristic(1.05, 1.0), (-1.0, 1.0));
        assert_eq!(sign_heuristic(0.95, 1.0), (1.0, -1.0));
        assert_eq!(sign_heuristic(1.0, 1.0), (1.0, -1.0));
    }

    #[test]
    fn hysteresis_keeps_previous_inside_band() {
        assert_eq!(sign_with_hysteresis(1.005, 1.0, 0.01, (-1.0, 1.0)), (-1.0, 1.0));
        assert_eq!(sign_with_hysteresis(1.005, 1.0, 0.01, (1.0, -1.0)), (1.0, -1.0));
        assert_eq!(sign_with_hysteresis(1.02, 1.0, 0.01, (1.0, -1.0)), (-1.0, 1.0));
        assert_eq!(sign_with_hysteresis(0.99, 1.0, 0.01, (-1.0, 1.0)), (1.0, -1.0));
    }

    #[test]
    fn injection_inside_deadband_is_frozen() {
        let p = reference_params();
        let s = state(1.0, -1.0, 1.0);
        assert_eq!(step_power_injection(&s, 1.0 + 5e-5, &p, 1.0), (0.0, 0.0));
    }

    #[test]
    fn injection_increment() {
        let p = reference_params();
        let s = state(1.0, -1.0, 1.0);
        let (_, u_q) = step_power_injection(&s, 1.01, &p, 1.0);
        assert_relative_eq!(u_q, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn injection_antiwindup() {
        let p = AdaptiveParams { injection_cap: 0.3, ..reference_params() };
        let mut s = state(1.0, -1.0, 1.0);
        s.u_q = 0.3;
        let (_, u_q) = step_power_injection(&s, 1.05, &p, 1.0);
        assert_eq!(u_q, 0.3);
    }

    #[test]
    fn bias_cases() {
        let p = reference_params();
        let s = state(1.0, -1.0, 1.0);
        assert_relative_eq!(step_voltage_bias(&s, 1.02, &p, 1.0), -0.002, epsilon = 1e-15);
        assert_eq!(step_voltage_bias(&s, 1.0 + 1e-5, &p, 1.0), 0.0);
        let mut s = s;
        let mut ws = Vec::new();
        for _ in 0..5 {
            s.w = step_voltage_bias(&s, 1.02, &p, 1.0);
            ws.push(s.w);
        }
        for (k, w) in ws.iter().enumerate() {
            assert_relative_eq!(*w, -0.002 * (k + 1) as f64, epsilon = 1e-15);
        }
    }

    #[test]
    fn bias_cap() {
        let p = AdaptiveParams { bias_cap: 0.05, ..reference_params() };
        let mut s = state(1.0, -1.0, 1.0);
        s.w = -0.05;
        assert_eq!(step_voltage_bias(&s, 1.5, &p, 1.0), -0.05);
        assert_eq!(biased_voltage(1.0, s.w), 0.95);
    }

    #[test]
    fn biased_voltage_cases() {
        assert_eq!(biased_voltage(1.03, 0.0), 1.03);
        assert_relative_eq!(biased_voltage(1.03, -0.02), 1.01, epsilon = 1e-15);
    }

    #[test]
    fn deadband_boundary_is_exact() {
        let xi: f64 = 1.0;
        let v = 1.0003;
        let e = (v - xi).abs();
        // |v - ξ| == ε: no adaptation.
        assert_eq!(adaptation_drive(v, xi, e), 0.0);
        // One ulp below: adaptation fires.
        let below = f64::from_bits(e.to_bits() - 1);
        assert_eq!(adaptation_drive(v, xi, below), e);
        // One ulp above: frozen.
        let above = f64::from_bits(e.to_bits() + 1);
        assert_eq!(adaptation_drive(v, xi, above), 0.0);
    }

    #[test]
    fn validation() {
        assert!(AdaptiveParams { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdaptiveParams { gamma_q: -1.0, ..Default::default() }.validate().is_err());
        assert!(AdaptiveParams::default().check_step(20.0).is_err());
        assert!(AdaptiveParams::default().check_step(1.0).is_ok());
    }

    proptest! {
        #[test]
        fn zero_gains_freeze_state(vs in prop::collection::vec(0.9f64..1.1, 1..50), bias in any::<bool>()) {
            let params = AdaptiveParams { gamma_p: 0.0, gamma_q: 0.0, gamma_v: 0.0, ..Default::default() };
            let mode = if bias { AdaptiveMode::Bias } else { AdaptiveMode::InjectionPq };
            let mut ctl = AdaptiveController::new(mode, params, 1.0);
            for v in vs {
                ctl.step(v, 1.0);
                prop_assert_eq!(ctl.state.u_p, 0.0);
                prop_assert_eq!(ctl.state.u_q, 0.0);
                prop_assert_eq!(ctl.state.w, 0.0);
            }
        }

        #[test]
        fn integrators_monotone_with_fixed_signs(vs in prop::collection::vec(1.001f64..1.1, 1..50)) {
            // All samples above v_crit keep (c, d) = (-1, +1).
            let params = AdaptiveParams { gamma_p: 0.3, gamma_q: 0.7, gamma_v: 0.2, injection_cap: 1e9, bias_cap: 1e9, ..Default::default() };
            let mut inj = AdaptiveController::new(AdaptiveMode::InjectionPq, params, 1.01);
            let mut bias = AdaptiveController::new(AdaptiveMode::Bias, params, 1.01);
            for v in vs {
                let before = (inj.state.u_p, inj.state.u_q, bias.state.w);
                inj.step(v, 1.0);
                bias.step(v, 1.0);
                prop_assert!(inj.state.u_p >= before.0);
                prop_assert!(inj.state.u_q >= before.1);
                prop_assert!(bias.state.w <= before.2);
            }
        }

        #[test]
        fn injection_and_bias_laws_coincide(xi in 0.95f64..1.05, dv in -0.05f64..0.05, gain in 0.0f64..5.0) {
            let params = AdaptiveParams { gamma_q: gain, gamma_v: gain, injection_cap: 1e9, bias_cap: 1e9, ..Default::default() };
            // c and d of opposite sign give opposite-signed increments of equal size.
            let s = AdaptiveControllerState { xi, u_p: 0.0, u_q: 0.0, w: 0.0, c: -1.0, d: 1.0 };
            let (_, du_q) = step_power_injection(&s, xi + dv, &params, 1.0);
            let dw = step_voltage_bias(&s, xi + dv, &params, 1.0);
            prop_assert_eq!(du_q, -dw);
            let s = AdaptiveControllerState { c: 1.0, d: 1.0, ..s };
            let (_, du_q) = step_power_injection(&s, xi + dv, &params, 1.0);
            prop_assert_eq!(du_q, step_voltage_bias(&s, xi + dv, &params, 1.0));
        }
    }
}
