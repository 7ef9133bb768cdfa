//! Radial feeder topology and the lossless linearized power-flow map.
//!
//! Voltages are affine in the net injections:
//! `v = v0 * 1 + R (p_g - p_c) + X (q_g - q_c)`, where `R[i][j]` (`X[i][j]`)
//! sums the line resistances (reactances) shared by the paths from the
//! substation to nodes `i` and `j`.
//!
//! Node ids are contiguous: the substation is `0` and the load nodes are
//! `1..=n`. Matrix row/column `k` corresponds to node id `k + 1`.

use std::collections::{BTreeSet, HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::par::{self, ExecPolicy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeederError {
    #[error("topology is not radial: {0}")]
    NotRadial(ValidationReport),
    #[error("line {index} has invalid impedance (r = {r}, x = {x}); both must be finite and >= 0")]
    BadImpedance { index: usize, r: f64, x: f64 },
    #[error("substation voltage must be finite and > 0, got {0}")]
    BadV0(f64),
    #[error("dimension mismatch: expected length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// A line segment between two node ids. Direction is irrelevant for
/// validation; the parent/child relation is derived from the root traversal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeederTopology {
    /// Display names of nodes `1..=n` (index `k` holds node id `k + 1`).
    pub nodes: Vec<String>,
    pub lines: Vec<Line>,
    pub v0: f64,
}

impl FeederTopology {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    /// Builds a topology with generated names `"1".."n"`.
    pub fn with_numbered_nodes(n: usize, lines: Vec<Line>, v0: f64) -> Self {
        FeederTopology {
            nodes: (1..=n).map(|i| i.to_string()).collect(),
            lines,
            v0,
        }
    }
}

/// Structural problems found in a topology. Empty means the graph is a tree
/// rooted at node 0 spanning every node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    /// Indices of lines that repeat an earlier (unordered) node pair.
    pub duplicate_lines: Vec<usize>,
    /// Indices of lines whose endpoints coincide.
    pub self_loops: Vec<usize>,
    /// Indices of lines referencing a node id outside `0..=n`.
    pub unknown_endpoints: Vec<usize>,
    /// Node sequences closing a cycle (first node repeated implicitly).
    pub cycles: Vec<Vec<usize>>,
    /// Node ids not reachable from the substation.
    pub disconnected: Vec<usize>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.duplicate_lines.is_empty()
            && self.self_loops.is_empty()
            && self.unknown_endpoints.is_empty()
            && self.cycles.is_empty()
            && self.disconnected.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if !self.duplicate_lines.is_empty() {
            parts.push(format!("duplicate lines {:?}", self.duplicate_lines));
        }
        if !self.self_loops.is_empty() {
            parts.push(format!("self loops on lines {:?}", self.self_loops));
        }
        if !self.unknown_endpoints.is_empty() {
            parts.push(format!("unknown endpoints on lines {:?}", self.unknown_endpoints));
        }
        for c in &self.cycles {
            parts.push(format!("cycle through nodes {c:?}"));
        }
        if !self.disconnected.is_empty() {
            parts.push(format!("disconnected nodes {:?}", self.disconnected));
        }
        if parts.is_empty() {
            write!(f, "valid")
        } else {
            write!(f, "{}", parts.join("; "))
        }
    }
}

/// Checks radiality: no duplicates, no self loops, no cycles, every node
/// reachable from the substation.
pub fn validate_radial(topology: &FeederTopology) -> ValidationReport {
    let n = topology.n();
    let mut report = ValidationReport::default();
    let mut seen_pairs = HashMap::new();
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + 1];

    for (idx, line) in topology.lines.iter().enumerate() {
        if line.from > n || line.to > n {
            report.unknown_endpoints.push(idx);
            continue;
        }
        if line.from == line.to {
            report.self_loops.push(idx);
            continue;
        }
        let key = (line.from.min(line.to), line.from.max(line.to));
        if seen_pairs.insert(key, idx).is_some() {
            report.duplicate_lines.push(idx);
            continue;
        }
        adjacency[line.from].push((line.to, idx));
        adjacency[line.to].push((line.from, idx));
    }

    // Depth-first traversal from the root; a non-tree edge closes a cycle.
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n + 1];
    let mut visited = vec![false; n + 1];
    let mut cycle_edges = BTreeSet::new();
    let mut stack = vec![0usize];
    visited[0] = true;
    let mut order = Vec::with_capacity(n + 1);
    while let Some(node) = stack.pop() {
        order.push(node);
        for &(next, idx) in &adjacency[node] {
            if parent[node].map(|(_, pidx)| pidx) == Some(idx) {
                continue;
            }
            if visited[next] {
                if cycle_edges.insert(idx) {
                    report.cycles.push(cycle_path(&parent, node, next));
                }
                continue;
            }
            visited[next] = true;
            parent[next] = Some((node, idx));
            stack.push(next);
        }
    }
    // Edges seen from both endpoints are reported once each; drop the mirror.
    dedup_cycles(&mut report.cycles);

    report.disconnected = (1..=n).filter(|&i| !visited[i]).collect();
    report
}

fn ancestors(parent: &[Option<(usize, usize)>], mut node: usize) -> Vec<usize> {
    let mut path = vec![node];
    while let Some((p, _)) = parent[node] {
        path.push(p);
        node = p;
    }
    path
}

fn cycle_path(parent: &[Option<(usize, usize)>], a: usize, b: usize) -> Vec<usize> {
    let pa = ancestors(parent, a);
    let pb = ancestors(parent, b);
    let lca = pa.iter().copied().find(|x| pb.contains(x)).unwrap_or(0);
    let mut cycle: Vec<usize> = pa.iter().copied().take_while(|&x| x != lca).collect();
    cycle.push(lca);
    let tail: Vec<usize> = pb.iter().copied().take_while(|&x| x != lca).collect();
    cycle.extend(tail.into_iter().rev());
    cycle
}

fn dedup_cycles(cycles: &mut Vec<Vec<usize>>) {
    let mut seen = BTreeSet::new();
    cycles.retain(|c| {
        let mut key = c.clone();
        key.sort_unstable();
        seen.insert(key)
    });
}

/// Root traversal of a validated tree.
#[derive(Debug, Clone)]
pub struct TreeIndex {
    /// `parent[k]` is the parent node id of node id `k`; `parent[0] = 0`.
    pub parent: Vec<usize>,
    /// `(r, x)` of the line connecting node id `k` to its parent.
    pub branch: Vec<(f64, f64)>,
    /// Node ids in breadth-first order from the root (root excluded).
    pub order: Vec<usize>,
}

impl TreeIndex {
    pub fn build(topology: &FeederTopology) -> Result<Self, FeederError> {
        if !(topology.v0.is_finite() && topology.v0 > 0.0) {
            return Err(FeederError::BadV0(topology.v0));
        }
        for (index, l) in topology.lines.iter().enumerate() {
            if !(l.r.is_finite() && l.x.is_finite() && l.r >= 0.0 && l.x >= 0.0) {
                return Err(FeederError::BadImpedance { index, r: l.r, x: l.x });
            }
        }
        let report = validate_radial(topology);
        if !report.is_empty() {
            return Err(FeederError::NotRadial(report));
        }
        let n = topology.n();
        let mut adjacency: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); n + 1];
        for l in &topology.lines {
            adjacency[l.from].push((l.to, l.r, l.x));
            adjacency[l.to].push((l.from, l.r, l.x));
        }
        let mut parent = vec![0usize; n + 1];
        let mut branch = vec![(0.0, 0.0); n + 1];
        let mut seen = vec![false; n + 1];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(node) = queue.pop_front() {
            for &(next, r, x) in &adjacency[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = node;
                    branch[next] = (r, x);
                    order.push(next);
                    queue.push_back(next);
                }
            }
        }
        Ok(TreeIndex { parent, branch, order })
    }

    fn is_ancestor_or_self(&self, ancestor: usize, mut node: usize) -> bool {
        loop {
            if node == ancestor {
                return true;
            }
            if node == 0 {
                return false;
            }
            node = self.parent[node];
        }
    }
}

/// Path-impedance matrices of a radial feeder.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpedanceMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    /// `[R, X]`, n x 2n.
    pub z: DMatrix<f64>,
}

impl ImpedanceMatrices {
    pub fn n(&self) -> usize {
        self.r.nrows()
    }
}

pub fn build_impedance_matrices(topology: &FeederTopology) -> Result<ImpedanceMatrices, FeederError> {
    let tree = TreeIndex::build(topology)?;
    let n = topology.n();
    // Cumulative impedance from the root to each node id.
    let mut cum = vec![(0.0, 0.0); n + 1];
    for &node in &tree.order {
        let (pr, px) = cum[tree.parent[node]];
        let (r, x) = tree.branch[node];
        cum[node] = (pr + r, px + x);
    }
    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    // Rows are filled parent-first: R[c][j] = cum(c) when j lies in the
    // subtree of c, otherwise R[c][j] = R[parent(c)][j].
    for &c in &tree.order {
        let p = tree.parent[c];
        for j in 1..=n {
            let (vr, vx) = if tree.is_ancestor_or_self(c, j) {
                cum[c]
            } else if p == 0 {
                (0.0, 0.0)
            } else {
                (r[(p - 1, j - 1)], x[(p - 1, j - 1)])
            };
            r[(c - 1, j - 1)] = vr;
            x[(c - 1, j - 1)] = vx;
        }
    }
    let mut z = DMatrix::zeros(n, 2 * n);
    z.view_mut((0, 0), (n, n)).copy_from(&r);
    z.view_mut((0, n), (n, n)).copy_from(&x);
    Ok(ImpedanceMatrices { r, x, z })
}

/// Active and reactive nodal powers, stacked as `[p; q]` wherever a single
/// vector is needed.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionVector {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl InjectionVector {
    pub fn zeros(n: usize) -> Self {
        InjectionVector { p: vec![0.0; n], q: vec![0.0; n] }
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(self.p.len() + self.q.len(), self.p.iter().chain(&self.q).copied())
    }

    pub fn from_stacked(s: &DVector<f64>) -> Self {
        let n = s.len() / 2;
        InjectionVector {
            p: s.rows(0, n).iter().copied().collect(),
            q: s.rows(n, n).iter().copied().collect(),
        }
    }
}

/// `v = v0 * 1 + Z (s_g - s_c)`.
pub fn solve_voltages(
    mats: &ImpedanceMatrices,
    s_g: &InjectionVector,
    s_c: &InjectionVector,
    v0: f64,
) -> Result<Vec<f64>, FeederError> {
    let n = mats.n();
    for len in [s_g.p.len(), s_g.q.len(), s_c.p.len(), s_c.q.len()] {
        if len != n {
            return Err(FeederError::Dimension { expected: n, got: len });
        }
    }
    let dp: Vec<f64> = s_g.p.iter().zip(&s_c.p).map(|(g, c)| g - c).collect();
    let dq: Vec<f64> = s_g.q.iter().zip(&s_c.q).map(|(g, c)| g - c).collect();
    let mut v = vec![0.0; n];
    voltages_from_net(mats, &dp, &dq, v0, &mut v, ExecPolicy::Sequential);
    Ok(v)
}

/// Writes `v0 + R p_net + X q_net` into `out`. Each row is an independent
/// sequential dot product, so the result does not depend on `policy`.
/// `R` and `X` are symmetric, so row `i` is read as the contiguous column `i`.
pub(crate) fn voltages_from_net(
    mats: &ImpedanceMatrices,
    p_net: &[f64],
    q_net: &[f64],
    v0: f64,
    out: &mut [f64],
    policy: ExecPolicy,
) {
    par::for_each_indexed(policy, out, |i, vi| {
        let (r, x) = (mats.r.column(i), mats.x.column(i));
        let mut acc = v0;
        for (j, (rj, xj)) in r.iter().zip(x.iter()).enumerate() {
            acc += rj * p_net[j] + xj * q_net[j];
        }
        *vi = acc;
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn line(from: usize, to: usize, r: f64, x: f64) -> Line {
        Line { from, to, r, x }
    }

    #[test]
    fn single_line() {
        let t = FeederTopology::with_numbered_nodes(1, vec![line(0, 1, 0.01, 0.02)], 1.0);
        let m = build_impedance_matrices(&t).unwrap();
        assert_eq!(m.r[(0, 0)], 0.01);
        assert_eq!(m.x[(0, 0)], 0.02);
        assert_eq!(m.z.shape(), (1, 2));
    }

    #[test]
    fn chain_shares_upstream_line() {
        let t = FeederTopology::with_numbered_nodes(
            2,
            vec![line(0, 1, 0.01, 0.02), line(1, 2, 0.03, 0.04)],
            1.0,
        );
        let m = build_impedance_matrices(&t).unwrap();
        assert_relative_eq!(m.r, DMatrix::from_row_slice(2, 2, &[0.01, 0.01, 0.01, 0.04]), epsilon = 1e-15);
        assert_relative_eq!(m.x, DMatrix::from_row_slice(2, 2, &[0.02, 0.02, 0.02, 0.06]), epsilon = 1e-15);
    }

    #[test]
    fn star_has_disjoint_paths() {
        let t = FeederTopology::with_numbered_nodes(
            2,
            vec![line(0, 1, 0.01, 0.01), line(0, 2, 0.01, 0.01)],
            1.0,
        );
        let m = build_impedance_matrices(&t).unwrap();
        assert_eq!(m.r[(0, 1)], 0.0);
        assert_eq!(m.r[(1, 0)], 0.0);
    }

    #[test]
    fn reversed_line_direction_is_accepted() {
        let t = FeederTopology::with_numbered_nodes(2, vec![line(1, 0, 0.01, 0.02), line(2, 1, 0.03, 0.04)], 1.0);
        let m = build_impedance_matrices(&t).unwrap();
        assert_relative_eq!(m.r[(1, 1)], 0.04, epsilon = 1e-15);
    }

    #[test]
    fn zero_injection_gives_v0() {
        let t = FeederTopology::with_numbered_nodes(2, vec![line(0, 1, 0.01, 0.02), line(1, 2, 0.03, 0.04)], 1.02);
        let m = build_impedance_matrices(&t).unwrap();
        let v = solve_voltages(&m, &InjectionVector::zeros(2), &InjectionVector::zeros(2), 1.02).unwrap();
        assert_eq!(v, vec![1.02, 1.02]);
    }

    #[test]
    fn single_node_voltage_expansion() {
        let t = FeederTopology::with_numbered_nodes(1, vec![line(0, 1, 0.01, 0.02)], 1.0);
        let m = build_impedance_matrices(&t).unwrap();
        let g = InjectionVector { p: vec![1.0], q: vec![0.5] };
        let v = solve_voltages(&m, &g, &InjectionVector::zeros(1), 1.0).unwrap();
        assert_relative_eq!(v[0], 1.02, epsilon = 1e-15);
    }

    #[test]
    fn consumption_only_lowers_every_voltage() {
        let t = FeederTopology::with_numbered_nodes(
            3,
            vec![line(0, 1, 0.01, 0.02), line(1, 2, 0.03, 0.04), line(1, 3, 0.02, 0.01)],
            1.0,
        );
        let m = build_impedance_matrices(&t).unwrap();
        let c = InjectionVector { p: vec![0.1, 0.2, 0.3], q: vec![0.05, 0.0, 0.1] };
        let v = solve_voltages(&m, &InjectionVector::zeros(3), &c, 1.0).unwrap();
        assert!(v.iter().all(|&vi| vi <= 1.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let t = FeederTopology::with_numbered_nodes(1, vec![line(0, 1, 0.01, 0.02)], 1.0);
        let m = build_impedance_matrices(&t).unwrap();
        let err = solve_voltages(&m, &InjectionVector::zeros(2), &InjectionVector::zeros(1), 1.0).unwrap_err();
        assert_eq!(err, FeederError::Dimension { expected: 1, got: 2 });
    }

    #[test]
    fn tree_validates_clean() {
        let t = FeederTopology::with_numbered_nodes(3, vec![line(0, 1, 0.1, 0.1), line(1, 2, 0.1, 0.1), line(1, 3, 0.1, 0.1)], 1.0);
        assert!(validate_radial(&t).is_empty());
    }

    #[test]
    fn duplicate_line_flagged() {
        let t = FeederTopology::with_numbered_nodes(
            2,
            vec![line(0, 1, 0.1, 0.1), line(1, 2, 0.1, 0.1), line(2, 1, 0.2, 0.2)],
            1.0,
        );
        let rep = validate_radial(&t);
        assert_eq!(rep.duplicate_lines, vec![2]);
        assert!(rep.cycles.is_empty());
    }

    #[test]
    fn disjoint_trees_flag_disconnected_nodes() {
        let t = FeederTopology::with_numbered_nodes(4, vec![line(0, 1, 0.1, 0.1), line(1, 2, 0.1, 0.1), line(3, 4, 0.1, 0.1)], 1.0);
        let rep = validate_radial(&t);
        assert_eq!(rep.disconnected, vec![3, 4]);
        assert!(matches!(build_impedance_matrices(&t), Err(FeederError::NotRadial(_))));
    }

    #[test]
    fn cycle_is_named() {
        let t = FeederTopology::with_numbered_nodes(
            3,
            vec![line(0, 1, 0.1, 0.1), line(1, 2, 0.1, 0.1), line(2, 3, 0.1, 0.1), line(3, 1, 0.1, 0.1)],
            1.0,
        );
        let rep = validate_radial(&t);
        assert_eq!(rep.cycles.len(), 1);
        let mut c = rep.cycles[0].clone();
        c.sort_unstable();
        assert_eq!(c, vec![1, 2, 3]);
        let msg = build_impedance_matrices(&t).unwrap_err().to_string();
        assert!(msg.contains("cycle"), "{msg}");
    }

    #[test]
    fn negative_impedance_rejected() {
        let t = FeederTopology::with_numbered_nodes(1, vec![line(0, 1, -0.1, 0.1)], 1.0);
        assert!(matches!(build_impedance_matrices(&t), Err(FeederError::BadImpedance { index: 0, .. })));
    }
}
