//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;

use voltsim::inverter::{self, PiecewiseCurve};
use voltsim::sim::{ScenarioConfig, Simulation};

/// Random recursive tree on node ids `1..=n` (0 is the substation):
/// `(from, to, r, x)` with `from < to`.
pub fn random_tree<R: Rng>(rng: &mut R, n: usize) -> Vec<(usize, usize, f64, f64)> {
    (1..=n).map(|to| (rng.gen_range(0..to), to, rng.gen_range(1e-4..0.05), rng.gen_range(1e-4..0.05))).collect()
}

/// Lines on the root path of each node, ordered root first.
fn root_paths(n: usize, lines: &[(usize, usize, f64, f64)]) -> Vec<Vec<usize>> {
    let mut parent_line = vec![usize::MAX; n + 1];
    for (k, &(_, to, _, _)) in lines.iter().enumerate() {
        parent_line[to] = k;
    }
    (0..=n)
        .map(|mut node| {
            let mut path = Vec::new();
            while node != 0 {
                let k = parent_line[node];
                path.push(k);
                node = lines[k].0;
            }
            path.reverse();
            path
        })
        .collect()
}

/// `R_ij`, `X_ij` as sums over lines shared by the root paths of `i` and
/// `j`, accumulated root first.
pub fn brute_force_impedance(n: usize, lines: &[(usize, usize, f64, f64)]) -> (DMatrix<f64>, DMatrix<f64>) {
    let paths = root_paths(n, lines);
    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for i in 1..=n {
        for j in 1..=n {
            let (mut sr, mut sx) = (0.0, 0.0);
            for k in &paths[i] {
                if paths[j].contains(k) {
                    sr += lines[*k].2;
                    sx += lines[*k].3;
                }
            }
            r[(i - 1, j - 1)] = sr;
            x[(i - 1, j - 1)] = sx;
        }
    }
    (r, x)
}

/// Largest finite-difference slope over a uniform grid of `samples` points
/// spanning the breakpoints with a margin, scaled by `max_output`.
pub fn sampled_lipschitz(curve: &PiecewiseCurve, max_output: f64, samples: usize) -> f64 {
    let pts: Vec<(f64, f64)> = curve.points().collect();
    let lo = pts.first().unwrap().0 - 0.05;
    let hi = pts.last().unwrap().0 + 0.05;
    let h = (hi - lo) / (samples - 1) as f64;
    let mut best = 0.0f64;
    let mut prev = curve.eval(lo);
    for k in 1..samples {
        let y = curve.eval(lo + k as f64 * h);
        best = best.max((y - prev).abs() / h);
        prev = y;
    }
    best * max_output
}

/// Every curve appearing in a scenario, initial and event replacements.
pub fn scenario_curves(config: &ScenarioConfig) -> Vec<PiecewiseCurve> {
    let mut out = Vec::new();
    for d in &config.devices {
        out.push(PiecewiseCurve::try_from(&d.volt_var).unwrap());
        out.push(PiecewiseCurve::try_from(&d.volt_watt).unwrap());
    }
    for e in &config.events {
        for c in [&e.volt_var, &e.volt_watt].into_iter().flatten() {
            out.push(PiecewiseCurve::try_from(c).unwrap());
        }
    }
    out
}

/// Fixed point of the device dynamics with the controller outputs of `sim`
/// frozen, by damped iteration `s <- s + beta (f(v(s)) - s)` started from
/// `start`. Voltages use the brute-force impedance oracle. Returns the
/// device states `[(p, q)]` and the final residual.
pub fn frozen_equilibrium(sim: &Simulation, start: &[(f64, f64)], beta: f64, iters: usize) -> (Vec<(f64, f64)>, f64) {
    let cfg = sim.config();
    let n = cfg.feeder.nodes.len();
    let index = |name: &str| -> usize {
        if name == cfg.feeder.substation {
            0
        } else {
            cfg.feeder.nodes.iter().position(|x| x == name).unwrap() + 1
        }
    };
    let mut lines: Vec<(usize, usize, f64, f64)> = Vec::new();
    // Orient lines away from the substation.
    let mut reached = vec![false; n + 1];
    reached[0] = true;
    while lines.len() < cfg.feeder.lines.len() {
        for l in &cfg.feeder.lines {
            let (a, b) = (index(&l.from), index(&l.to));
            if reached[a] && !reached[b] {
                reached[b] = true;
                lines.push((a, b, l.r, l.x));
            } else if reached[b] && !reached[a] {
                reached[a] = true;
                lines.push((b, a, l.r, l.x));
            }
        }
    }
    let (r, x) = brute_force_impedance(n, &lines);
    let (load_p, load_q) = sim.load();
    let (up, uq) = sim.node_injections();
    let devices = sim.devices();
    let mut s: Vec<(f64, f64)> = start.to_vec();
    let mut residual = f64::INFINITY;
    for _ in 0..iters {
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            p[i] = up[i] - load_p[i];
            q[i] = uq[i] - load_q[i];
        }
        for (d, st) in devices.iter().zip(&s) {
            p[d.node] += st.0;
            q[d.node] += st.1;
        }
        let v: Vec<f64> = (0..n).map(|i| cfg.feeder.v0 + (0..n).map(|j| r[(i, j)] * p[j] + x[(i, j)] * q[j]).sum::<f64>()).collect();
        residual = 0.0;
        for (k, d) in devices.iter().enumerate() {
            let target = inverter::setpoints(&d.volt_var, &d.volt_watt, &d.rating, v[d.node] + sim.device_bias(k));
            residual = residual.max((target.0 - s[k].0).abs()).max((target.1 - s[k].1).abs());
            s[k].0 += beta * (target.0 - s[k].0);
            s[k].1 += beta * (target.1 - s[k].1);
        }
        if residual < 1e-13 {
            break;
        }
    }
    (s, residual)
}

/// Median over rows with `lo <= t < hi` of the feeder-wide median energy.
pub fn median_energy(stats: &[[f64; 4]], lo: f64, hi: f64) -> f64 {
    let mut m: Vec<f64> = stats.iter().filter(|r| r[0] >= lo && r[0] < hi).map(|r| r[2]).collect();
    m.sort_by(f64::total_cmp);
    voltsim::sim::percentile_sorted(&m, 0.5)
}
