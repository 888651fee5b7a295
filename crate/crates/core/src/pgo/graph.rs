use std::collections::VecDeque;
use std::fmt::Write as _;

use ilearn_autodiff::{Tape, Tensor, Var};

use super::se2::{relative_residual, Pose2, PoseVars};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub measurement: Pose2,
    /// Diagonal information weights `(w_xx, w_yy, w_tt)`.
    pub info: [f64; 3],
}

/// Node 0 is held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseGraph2D {
    pub nodes: Vec<Pose2>,
    pub edges: Vec<Edge>,
}

impl PoseGraph2D {
    pub fn new(nodes: Vec<Pose2>, edges: Vec<Edge>) -> Result<Self> {
        let g = PoseGraph2D { nodes, edges };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n < 2 {
            return Err(Error::Invalid("a pose graph needs at least two nodes".into()));
        }
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            if e.i >= n || e.j >= n || e.i == e.j {
                return Err(Error::Invalid(format!("edge {} -> {} is invalid for {n} nodes", e.i, e.j)));
            }
            if e.info.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                return Err(Error::Invalid(format!("edge {} -> {} has a negative or non-finite weight", e.i, e.j)));
            }
            adj[e.i].push(e.j);
            adj[e.j].push(e.i);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(k) = queue.pop_front() {
            for &m in &adj[k] {
                if !seen[m] {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invalid("pose graph is not connected".into()));
        }
        Ok(())
    }

    /// Free parameters: nodes `1..N` flattened.
    pub fn free_params(&self) -> Tensor {
        Tensor::vector(self.nodes[1..].iter().flat_map(|p| p.to_array()).collect())
    }

    pub fn with_free_params(&self, phi: &Tensor) -> Result<PoseGraph2D> {
        if phi.numel() != 3 * (self.nodes.len() - 1) {
            return Err(Error::Invalid(format!("expected {} free parameters, got {}", 3 * (self.nodes.len() - 1), phi.numel())));
        }
        let mut g = self.clone();
        for (k, c) in phi.data().chunks(3).enumerate() {
            g.nodes[k + 1] = Pose2::new(c[0], c[1], c[2]);
        }
        Ok(g)
    }

    pub fn edge_residual(&self, edge: &Edge) -> [f64; 3] {
        let e = edge.measurement.inverse().compose(&self.nodes[edge.i].between(&self.nodes[edge.j]));
        e.log()
    }

    /// `sum_e r' W r`.
    pub fn cost(&self) -> f64 {
        self.edges.iter().map(|e| self.edge_residual(e).iter().zip(e.info).map(|(r, w)| w * r * r).sum::<f64>()).sum()
    }

    /// Text form: `NODE id x y theta` and `EDGE i j dx dy dtheta w_xx w_yy w_tt`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, p) in self.nodes.iter().enumerate() {
            writeln!(out, "NODE {k} {:?} {:?} {:?}", p.x, p.y, p.theta).unwrap();
        }
        for e in &self.edges {
            let m = e.measurement;
            writeln!(out, "EDGE {} {} {:?} {:?} {:?} {:?} {:?} {:?}", e.i, e.j, m.x, m.y, m.theta, e.info[0], e.info[1], e.info[2]).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut nodes: Vec<Option<Pose2>> = Vec::new();
        let mut edges = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Parse(format!("line {}: {line}", ln + 1));
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let idx = |s: &str| s.parse::<usize>().map_err(|_| bad());
            match parts[0] {
                "NODE" if parts.len() == 5 => {
                    let id = idx(parts[1])?;
                    if nodes.len() <= id {
                        nodes.resize(id + 1, None);
                    }
                    if nodes[id].is_some() {
                        return Err(Error::Parse(format!("line {}: duplicate node {id}", ln + 1)));
                    }
                    nodes[id] = Some(Pose2::new(num(parts[2])?, num(parts[3])?, num(parts[4])?));
                }
                "EDGE" if parts.len() == 9 => edges.push(Edge {
                    i: idx(parts[1])?,
                    j: idx(parts[2])?,
                    measurement: Pose2::new(num(parts[3])?, num(parts[4])?, num(parts[5])?),
                    info: [num(parts[6])?, num(parts[7])?, num(parts[8])?],
                }),
                _ => return Err(bad()),
            }
        }
        let nodes = nodes
            .into_iter()
            .enumerate()
            .map(|(k, n)| n.ok_or_else(|| Error::Parse(format!("node {k} missing"))))
            .collect::<Result<Vec<_>>>()?;
        PoseGraph2D::new(nodes, edges)
    }
}

/// Node poses on the tape: node 0 constant, the rest read from `phi`.
pub fn pose_vars(tape: &mut Tape, graph: &PoseGraph2D, phi: Var) -> Result<Vec<PoseVars>> {
    let mut out = vec![PoseVars::constant(tape, &graph.nodes[0])];
    for k in 1..graph.nodes.len() {
        let b = 3 * (k - 1);
        out.push(PoseVars { x: tape.index(phi, b)?, y: tape.index(phi, b + 1)?, theta: tape.index(phi, b + 2)? });
    }
    Ok(out)
}

/// Information-weighted residuals of every edge, stacked to `[3E]`.
/// `measurements[e]` overrides edge `e`'s stored measurement when given.
pub fn residual_vector(tape: &mut Tape, graph: &PoseGraph2D, phi: Var, measurements: &[Option<PoseVars>]) -> Result<Var> {
    let poses = pose_vars(tape, graph, phi)?;
    let mut parts = Vec::with_capacity(3 * graph.edges.len());
    for (k, e) in graph.edges.iter().enumerate() {
        let z = match measurements.get(k).copied().flatten() {
            Some(z) => z,
            None => PoseVars::constant(tape, &e.measurement),
        };
        let r = relative_residual(tape, poses[e.i], poses[e.j], z)?;
        for (c, rc) in r.into_iter().enumerate() {
            let w = tape.scale(rc, e.info[c].sqrt());
            parts.push(tape.reshape(w, &[1])?);
        }
    }
    Ok(tape.concat(&parts, 0)?)
}
