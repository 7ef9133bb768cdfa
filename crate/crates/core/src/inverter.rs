//! Volt-VAR / Volt-Watt curves, capacity limits and the first-order
//! setpoint filter of a smart inverter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveError {
    #[error("curve needs at least one breakpoint")]
    Empty,
    #[error("breakpoint {index} is not finite")]
    NonFinite { index: usize },
    #[error("breakpoint voltages must be strictly increasing (index {index})")]
    NotIncreasing { index: usize },
    #[error("breakpoint outputs must be non-increasing (index {index})")]
    NotDecreasing { index: usize },
    #[error("output fraction {value} at index {index} outside [{lo}, {hi}]")]
    OutOfRange { index: usize, value: f64, lo: f64, hi: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RatingError {
    #[error("s_bar must be finite and > 0, got {0}")]
    SBar(f64),
    #[error("lambda must lie in (0, 1], got {0}")]
    Lambda(f64),
    #[error("q_lim must be finite and >= 0, got {0}")]
    QLim(f64),
    #[error("active setpoint {p_set} exceeds capacity {s_bar}")]
    Headroom { p_set: f64, s_bar: f64 },
}

/// Raw breakpoint list as it appears in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    #[serde(default = "default_v_nom")]
    pub v_nom: f64,
    /// `[voltage, output fraction]` pairs.
    pub points: Vec<[f64; 2]>,
}

fn default_v_nom() -> f64 {
    1.0
}

/// Continuous, non-increasing piecewise-linear map from voltage to an output
/// fraction, extended flat beyond the first and last breakpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseCurve {
    volts: Vec<f64>,
    values: Vec<f64>,
    v_nom: f64,
}

impl PiecewiseCurve {
    pub fn new(points: &[(f64, f64)], v_nom: f64) -> Result<Self, CurveError> {
        if points.is_empty() {
            return Err(CurveError::Empty);
        }
        for (index, &(v, y)) in points.iter().enumerate() {
            if !v.is_finite() || !y.is_finite() {
                return Err(CurveError::NonFinite { index });
            }
            if index > 0 {
                let (pv, py) = points[index - 1];
                if v <= pv {
                    return Err(CurveError::NotIncreasing { index });
                }
                if y > py {
                    return Err(CurveError::NotDecreasing { index });
                }
            }
        }
        Ok(PiecewiseCurve {
            volts: points.iter().map(|p| p.0).collect(),
            values: points.iter().map(|p| p.1).collect(),
            v_nom,
        })
    }

    /// Output identically `value`.
    pub fn flat(value: f64) -> Self {
        PiecewiseCurve { volts: vec![1.0], values: vec![value], v_nom: 1.0 }
    }

    /// Symmetric Volt-VAR shape: full injection below
    /// `v_nom - deadband - droop`, zero within `v_nom ± deadband`, full
    /// absorption above `v_nom + deadband + droop`.
    pub fn volt_var(v_nom: f64, deadband: f64, droop: f64) -> Result<Self, CurveError> {
        let pts = [
            (v_nom - deadband - droop, 1.0),
            (v_nom - deadband, 0.0),
            (v_nom + deadband, 0.0),
            (v_nom + deadband + droop, -1.0),
        ];
        if deadband == 0.0 {
            Self::new(&[pts[0], pts[1], pts[3]], v_nom)
        } else {
            Self::new(&pts, v_nom)
        }
    }

    /// Volt-Watt shape: full output up to `v_nom + start`, linear curtailment
    /// to zero at `v_nom + start + width`.
    pub fn volt_watt(v_nom: f64, start: f64, width: f64) -> Result<Self, CurveError> {
        Self::new(&[(v_nom + start, 1.0), (v_nom + start + width, 0.0)], v_nom)
    }

    pub fn v_nom(&self) -> f64 {
        self.v_nom
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.volts.iter().copied().zip(self.values.iter().copied())
    }

    /// Rejects fractions outside `[lo, hi]`.
    pub fn check_range(&self, lo: f64, hi: f64) -> Result<(), CurveError> {
        for (index, &value) in self.values.iter().enumerate() {
            if value < lo || value > hi {
                return Err(CurveError::OutOfRange { index, value, lo, hi });
            }
        }
        Ok(())
    }

    pub fn eval(&self, v: f64) -> f64 {
        let last = self.volts.len() - 1;
        if v <= self.volts[0] {
            return self.values[0];
        }
        if v >= self.volts[last] {
            return self.values[last];
        }
        let k = self.volts.partition_point(|&b| b <= v);
        let (v0, v1) = (self.volts[k - 1], self.volts[k]);
        let (y0, y1) = (self.values[k - 1], self.values[k]);
        y0 + (y1 - y0) * (v - v0) / (v1 - v0)
    }

    fn slope(&self, k: usize) -> f64 {
        (self.values[k + 1] - self.values[k]) / (self.volts[k + 1] - self.volts[k])
    }

    /// Largest absolute segment slope.
    pub fn max_slope(&self) -> f64 {
        (0..self.volts.len().saturating_sub(1)).map(|k| self.slope(k).abs()).fold(0.0, f64::max)
    }

    /// Absolute slope at `v`; at a breakpoint the larger of the two adjacent
    /// segments. Zero in the flat extensions.
    pub fn local_slope(&self, v: f64) -> f64 {
        let segs = self.volts.len().saturating_sub(1);
        let mut best = 0.0f64;
        for k in 0..segs {
            if v >= self.volts[k] && v <= self.volts[k + 1] {
                best = best.max(self.slope(k).abs());
            }
        }
        best
    }
}

impl TryFrom<&CurveSpec> for PiecewiseCurve {
    type Error = CurveError;

    fn try_from(spec: &CurveSpec) -> Result<Self, CurveError> {
        let pts: Vec<(f64, f64)> = spec.points.iter().map(|p| (p[0], p[1])).collect();
        PiecewiseCurve::new(&pts, spec.v_nom)
    }
}

impl From<&PiecewiseCurve> for CurveSpec {
    fn from(c: &PiecewiseCurve) -> Self {
        CurveSpec { v_nom: c.v_nom, points: c.points().map(|(v, y)| [v, y]).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverterRating {
    pub s_bar: f64,
    pub lambda: f64,
    pub q_lim: f64,
}

impl InverterRating {
    pub fn new(s_bar: f64, lambda: f64, q_lim: f64) -> Result<Self, RatingError> {
        if !(s_bar.is_finite() && s_bar > 0.0) {
            return Err(RatingError::SBar(s_bar));
        }
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(RatingError::Lambda(lambda));
        }
        if !(q_lim.is_finite() && q_lim >= 0.0) {
            return Err(RatingError::QLim(q_lim));
        }
        Ok(InverterRating { s_bar, lambda, q_lim })
    }

    /// Available active power at the present irradiance.
    pub fn p_bar(&self) -> f64 {
        self.lambda * self.s_bar
    }

    /// Reactive capability with no active output.
    pub fn q_max(&self) -> f64 {
        self.q_lim.min(self.s_bar)
    }
}

pub fn eval_volt_watt(curve: &PiecewiseCurve, v: f64, p_bar: f64) -> f64 {
    debug_assert!(p_bar >= 0.0);
    p_bar * curve.eval(v).clamp(0.0, 1.0)
}

pub fn available_reactive(rating: &InverterRating, p_set: f64) -> Result<f64, RatingError> {
    if p_set > rating.s_bar {
        return Err(RatingError::Headroom { p_set, s_bar: rating.s_bar });
    }
    let p = p_set.max(0.0);
    Ok(rating.q_lim.min((rating.s_bar * rating.s_bar - p * p).max(0.0).sqrt()))
}

pub fn eval_volt_var(curve: &PiecewiseCurve, v: f64, q_bar: f64) -> f64 {
    debug_assert!(q_bar >= 0.0);
    q_bar * curve.eval(v).clamp(-1.0, 1.0)
}

/// Worst-case slope of `curve` scaled to absolute output.
pub fn lipschitz_constant(curve: &PiecewiseCurve, max_output: f64) -> f64 {
    curve.max_slope() * max_output
}

/// Setpoints from the VW -> q̄ -> VV signal chain at input voltage `v`.
pub fn setpoints(vv: &PiecewiseCurve, vw: &PiecewiseCurve, rating: &InverterRating, v: f64) -> (f64, f64) {
    let p = eval_volt_watt(vw, v, rating.p_bar());
    // p <= p_bar <= s_bar, so the headroom check cannot fail.
    let q_bar = available_reactive(rating, p).unwrap_or(0.0);
    (p, eval_volt_var(vv, v, q_bar))
}

/// Filtered injections of one device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverterState {
    pub p: f64,
    pub q: f64,
    pub t_p: f64,
    pub t_q: f64,
}

impl InverterState {
    /// Largest step for which the explicit update stays stable.
    pub fn max_dt(&self) -> f64 {
        2.0 * self.t_p.min(self.t_q)
    }
}

/// One explicit-Euler step of `T ds/dt = target - s`.
pub fn step_filter(state: InverterState, target_p: f64, target_q: f64, dt: f64) -> InverterState {
    debug_assert!(dt > 0.0 && dt < state.max_dt());
    InverterState {
        p: state.p + dt / state.t_p * (target_p - state.p),
        q: state.q + dt / state.t_q * (target_q - state.q),
        ..state
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn vv_standard() -> PiecewiseCurve {
        PiecewiseCurve::new(&[(0.95, 1.0), (0.99, 0.0), (1.01, 0.0), (1.05, -1.0)], 1.0).unwrap()
    }

    #[test]
    fn curve_construction_rejects_bad_shapes() {
        assert_eq!(PiecewiseCurve::new(&[], 1.0), Err(CurveError::Empty));
        assert_eq!(
            PiecewiseCurve::new(&[(1.0, 0.0), (1.0, -1.0)], 1.0),
            Err(CurveError::NotIncreasing { index: 1 })
        );
        assert_eq!(
            PiecewiseCurve::new(&[(1.0, 0.0), (1.1, 0.5)], 1.0),
            Err(CurveError::NotDecreasing { index: 1 })
        );
        assert!(PiecewiseCurve::new(&[(f64::NAN, 0.0)], 1.0).is_err());
    }

    #[test]
    fn volt_watt_flat_below_first_breakpoint() {
        let c = PiecewiseCurve::new(&[(1.05, 1.0), (1.10, 0.0)], 1.0).unwrap();
        assert_eq!(eval_volt_watt(&c, 0.9, 0.8), 0.8);
    }

    #[test]
    fn volt_watt_segment_midpoint() {
        let c = PiecewiseCurve::new(&[(1.05, 1.0), (1.10, 0.0)], 1.0).unwrap();
        assert_relative_eq!(eval_volt_watt(&c, 1.075, 0.8), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn volt_watt_zero_available_power() {
        let c = PiecewiseCurve::new(&[(1.05, 1.0), (1.10, 0.0)], 1.0).unwrap();
        for v in [0.9, 1.06, 1.2] {
            assert_eq!(eval_volt_watt(&c, v, 0.0), 0.0);
        }
    }

    #[test]
    fn available_reactive_cases() {
        let r = InverterRating::new(1.0, 1.0, 0.7).unwrap();
        assert_eq!(available_reactive(&r, 1.0).unwrap(), 0.0);
        let r = InverterRating::new(1.1, 1.0, 10.0).unwrap();
        assert_relative_eq!(available_reactive(&r, 0.0).unwrap(), 1.1);
        let r = InverterRating::new(1.0, 1.0, 0.5).unwrap();
        assert_eq!(available_reactive(&r, 0.6).unwrap(), 0.5);
        let r = InverterRating::new(1.0, 1.0, 0.9).unwrap();
        assert_relative_eq!(available_reactive(&r, 0.6).unwrap(), 0.8, epsilon = 1e-15);
        assert!(matches!(available_reactive(&r, 1.2), Err(RatingError::Headroom { .. })));
    }

    #[test]
    fn rating_validation() {
        assert!(InverterRating::new(0.0, 1.0, 1.0).is_err());
        assert!(InverterRating::new(1.0, 0.0, 1.0).is_err());
        assert!(InverterRating::new(1.0, 1.2, 1.0).is_err());
        assert!(InverterRating::new(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn volt_var_cases() {
        let c = vv_standard();
        assert_eq!(eval_volt_var(&c, 1.0, 0.44), 0.0);
        assert_eq!(eval_volt_var(&c, 0.90, 0.44), 0.44);
        assert_relative_eq!(eval_volt_var(&c, 1.03, 0.44), -0.22, epsilon = 1e-12);
    }

    #[test]
    fn lipschitz_examples() {
        assert_eq!(lipschitz_constant(&PiecewiseCurve::flat(0.0), 0.44), 0.0);
        let c = PiecewiseCurve::new(&[(1.01, 1.0), (1.05, -1.0)], 1.0).unwrap();
        assert_relative_eq!(lipschitz_constant(&c, 0.44), 22.0, epsilon = 1e-12);
    }

    #[test]
    fn local_slope_at_breakpoints_and_extensions() {
        let c = vv_standard();
        assert_eq!(c.local_slope(1.0), 0.0);
        assert_eq!(c.local_slope(0.5), 0.0);
        assert_relative_eq!(c.local_slope(1.03), 25.0, epsilon = 1e-9);
        assert_relative_eq!(c.local_slope(1.01), 25.0, epsilon = 1e-9);
    }

    #[test]
    fn builders_produce_expected_breakpoints() {
        let vv = PiecewiseCurve::volt_var(1.0, 0.01, 0.04).unwrap();
        assert_eq!(vv, vv_standard());
        let vw = PiecewiseCurve::volt_watt(1.0, 0.05, 0.05).unwrap();
        assert_relative_eq!(vw.eval(1.075), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn filter_equilibrium() {
        let s = InverterState { p: 0.3, q: -0.1, t_p: 2.0, t_q: 3.0 };
        assert_eq!(step_filter(s, 0.3, -0.1, 1.0), s);
    }

    #[test]
    fn filter_unit_step_full_gain() {
        let s = InverterState { p: 0.0, q: 0.0, t_p: 1.0, t_q: 1.0 };
        assert_eq!(step_filter(s, 1.0, 0.0, 1.0).p, 1.0);
    }

    #[test]
    fn filter_geometric_recursion() {
        let mut s = InverterState { p: 0.0, q: 0.0, t_p: 5.0, t_q: 5.0 };
        for _ in 0..10 {
            s = step_filter(s, 1.0, 0.0, 1.0);
        }
        assert_relative_eq!(s.p, 1.0 - 0.8f64.powi(10), epsilon = 1e-12);
        assert_relative_eq!(s.p, 0.8926, epsilon = 1e-4);
    }

    fn arb_curve() -> impl Strategy<Value = PiecewiseCurve> {
        (prop::collection::vec((0.001f64..0.05, 0.0f64..0.6), 1..6), 0.85f64..1.0, 0.5f64..1.0).prop_map(
            |(steps, v_start, y_start)| {
                let mut pts = Vec::with_capacity(steps.len());
                let (mut v, mut y) = (v_start, y_start);
                pts.push((v, y));
                for (dv, dy) in steps {
                    v += dv;
                    y = (y - dy).max(-1.0);
                    pts.push((v, y));
                }
                PiecewiseCurve::new(&pts, 1.0).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn curves_are_monotone_nonincreasing(c in arb_curve(), a in 0.8f64..1.2, b in 0.8f64..1.2, q_bar in 0.0f64..2.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(eval_volt_var(&c, hi, q_bar) <= eval_volt_var(&c, lo, q_bar));
            let vw = PiecewiseCurve::new(&c.points().map(|(v, y)| (v, y.clamp(0.0, 1.0))).collect::<Vec<_>>(), 1.0).unwrap();
            prop_assert!(eval_volt_watt(&vw, hi, q_bar) <= eval_volt_watt(&vw, lo, q_bar));
        }

        #[test]
        fn lipschitz_bound_is_sound(c in arb_curve(), a in 0.8f64..1.2, b in 0.8f64..1.2, q_bar in 0.0f64..2.0) {
            let lip = lipschitz_constant(&c, q_bar);
            let lhs = (eval_volt_var(&c, a, q_bar) - eval_volt_var(&c, b, q_bar)).abs();
            prop_assert!(lhs <= lip * (a - b).abs() * (1.0 + 1e-9) + 1e-15);
        }

        #[test]
        fn filter_contracts(p in -1.0f64..1.0, target in -1.0f64..1.0, t_p in 0.5f64..10.0, frac in 0.01f64..1.0) {
            let s = InverterState { p, q: 0.0, t_p, t_q: t_p };
            let dt = frac * t_p;
            let next = step_filter(s, target, 0.0, dt);
            prop_assert!((next.p - target).abs() <= (p - target).abs() + 1e-15);
        }

        #[test]
        fn reactive_setpoint_respects_headroom(v in 0.85f64..1.15, s_bar in 0.1f64..2.0, lambda in 0.05f64..1.0, q_lim in 0.0f64..3.0) {
            let rating = InverterRating::new(s_bar, lambda, q_lim).unwrap();
            let vv = vv_standard();
            let vw = PiecewiseCurve::volt_watt(1.0, 0.05, 0.05).unwrap();
            let (p, q) = setpoints(&vv, &vw, &rating, v);
            prop_assert!(q.abs() <= available_reactive(&rating, p).unwrap() + 1e-15);
            prop_assert!(p * p + q * q <= s_bar * s_bar * (1.0 + 1e-12));
        }
    }
}
