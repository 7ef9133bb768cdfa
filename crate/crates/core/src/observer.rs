//! Oscillation-energy observer: high-pass, square, low-pass.
//!
//! Both filters are single-pole bilinear discretizations with `K = 2/dt` and
//! `ω = 2π f`:
//!
//! ```text
//! HP: h[k] = K/(K+ω) (x[k] - x[k-1]) + (K-ω)/(K+ω) h[k-1]
//! LP: y[k] = ω/(K+ω) (g[k] + g[k-1]) + (K-ω)/(K+ω) y[k-1],  g = gain h²
//! ```
//!
//! `ω dt <= 2` keeps the pole non-negative, so `y >= 0`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObserverError {
    #[error("cutoff {name} must be finite and > 0, got {value} Hz")]
    Cutoff { name: &'static str, value: f64 },
    #[error("gain must be finite and > 0, got {0}")]
    Gain(f64),
    #[error("cutoff {name} = {value} Hz too high for dt = {dt} s (need 2*pi*f*dt <= 2)")]
    TooFast { name: &'static str, value: f64, dt: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverParams {
    /// High-pass cutoff, Hz.
    #[serde(default = "default_f_high")]
    pub f_high: f64,
    /// Low-pass cutoff, Hz.
    #[serde(default = "default_f_low")]
    pub f_low: f64,
    #[serde(default = "default_gain")]
    pub gain: f64,
}

fn default_f_high() -> f64 {
    0.05
}

fn default_f_low() -> f64 {
    0.02
}

fn default_gain() -> f64 {
    1.0
}

impl Default for ObserverParams {
    fn default() -> Self {
        ObserverParams { f_high: default_f_high(), f_low: default_f_low(), gain: default_gain() }
    }
}

impl ObserverParams {
    pub fn validate(&self, dt: f64) -> Result<(), ObserverError> {
        for (name, value) in [("f_high", self.f_high), ("f_low", self.f_low)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(ObserverError::Cutoff { name, value });
            }
            if 2.0 * PI * value * dt > 2.0 {
                return Err(ObserverError::TooFast { name, value, dt });
            }
        }
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(ObserverError::Gain(self.gain));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pole {
    a: f64,
    b: f64,
}

impl Pole {
    fn new(f: f64, dt: f64) -> Self {
        let k = 2.0 / dt;
        let w = 2.0 * PI * f;
        Pole { a: 1.0 / (k + w), b: (k - w) / (k + w) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    hp: Pole,
    lp: Pole,
    k: f64,
    w_lp: f64,
    gain: f64,
    x_prev: f64,
    h: f64,
    g_prev: f64,
    pub y: f64,
}

impl ObserverState {
    /// Observer at rest on a constant input `x0`.
    pub fn new(params: &ObserverParams, dt: f64, x0: f64) -> Self {
        ObserverState {
            hp: Pole::new(params.f_high, dt),
            lp: Pole::new(params.f_low, dt),
            k: 2.0 / dt,
            w_lp: 2.0 * PI * params.f_low,
            gain: params.gain,
            x_prev: x0,
            h: 0.0,
            g_prev: 0.0,
            y: 0.0,
        }
    }

    pub fn step(&mut self, x: f64) -> f64 {
        self.h = self.k * self.hp.a * (x - self.x_prev) + self.hp.b * self.h;
        self.x_prev = x;
        let g = self.gain * self.h * self.h;
        self.y = (self.w_lp * self.lp.a * (g + self.g_prev) + self.lp.b * self.y).max(0.0);
        self.g_prev = g;
        self.y
    }
}
