//! Kirchhoff networks: pressure solve, fluxes, energy and the conductivity ODE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cg, CgOptions};
use crate::tensor::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    #[serde(rename = "L")]
    pub length: f64,
    #[serde(rename = "C")]
    pub conductivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteGraph {
    #[serde(rename = "nodes")]
    pub num_nodes: usize,
    pub edges: Vec<Edge>,
    pub sources: Vec<f64>,
}

impl DiscreteGraph {
    pub fn new(num_nodes: usize, edges: Vec<Edge>, sources: Vec<f64>) -> Result<Self> {
        let g = Self { num_nodes, edges, sources };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.len() != self.num_nodes {
            return Err(Error::Precondition(format!(
                "{} sources for {} nodes",
                self.sources.len(),
                self.num_nodes
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (k, e) in self.edges.iter().enumerate() {
            if e.i >= self.num_nodes || e.j >= self.num_nodes {
                return Err(Error::Precondition(format!("edge {k} references a missing node")));
            }
            if e.i == e.j {
                return Err(Error::Precondition(format!("edge {k} is a self-loop")));
            }
            if !seen.insert((e.i.min(e.j), e.i.max(e.j))) {
                return Err(Error::Precondition(format!("edge {k} duplicates an earlier edge")));
            }
            if !(e.length > 0.0) || !e.length.is_finite() {
                return Err(Error::Precondition(format!("edge {k} has non-positive length")));
            }
            if !(e.conductivity >= 0.0) || !e.conductivity.is_finite() {
                return Err(Error::Precondition(format!("edge {k} has negative conductivity")));
            }
        }
        let total: f64 = self.sources.iter().sum();
        if total.abs() > 1e-12 * self.source_scale() {
            return Err(Error::Precondition(format!("sources sum to {total:e}, expected 0")));
        }
        Ok(())
    }

    fn source_scale(&self) -> f64 {
        self.sources.iter().fold(1.0f64, |m, s| m.max(s.abs()))
    }

    pub fn conductivities(&self) -> Vec<f64> {
        self.edges.iter().map(|e| e.conductivity).collect()
    }

    pub fn with_conductivities(&self, c: &[f64]) -> Self {
        let mut g = self.clone();
        for (e, &v) in g.edges.iter_mut().zip(c) {
            e.conductivity = v;
        }
        g
    }

    /// Connected components of the positive-conductivity subgraph.
    fn components(&self) -> Vec<usize> {
        let mut parent: Vec<usize> = (0..self.num_nodes).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for e in &self.edges {
            if e.conductivity > 0.0 {
                let (a, b) = (find(&mut parent, e.i), find(&mut parent, e.j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut label = vec![usize::MAX; self.num_nodes];
        let mut next = 0;
        (0..self.num_nodes)
            .map(|i| {
                let root = find(&mut parent, i);
                if label[root] == usize::MAX {
                    label[root] = next;
                    next += 1;
                }
                label[root]
            })
            .collect()
    }

    /// `-Σ_j C_ij (P_j - P_i) / L_ij^2`, the Kirchhoff operator applied to `p`.
    fn apply_laplacian(&self, p: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for e in &self.edges {
            let w = e.conductivity / (e.length * e.length);
            let d = p[e.j] - p[e.i];
            out[e.i] -= w * d;
            out[e.j] += w * d;
        }
    }
}

/// Pressures solving `-(1/L_ij) Σ_j C_ij (P_j - P_i)/L_ij = S_i`, zero mean.
///
/// Components of the positive-conductivity subgraph that carry no net source
/// are allowed; each is normalized to zero mean on its own.
pub fn kirchhoff_solve(g: &DiscreteGraph) -> Result<Vec<f64>> {
    g.validate()?;
    let n = g.num_nodes;
    if g.sources.iter().all(|&s| s == 0.0) {
        return Ok(vec![0.0; n]);
    }
    let comp = g.components();
    let ncomp = comp.iter().max().map_or(0, |m| m + 1);
    let mut net = vec![0.0; ncomp];
    for (i, &c) in comp.iter().enumerate() {
        net[c] += g.sources[i];
    }
    let tol = 1e-12 * g.source_scale() * (n as f64).sqrt().max(1.0);
    if let Some(c) = net.iter().position(|s| s.abs() > tol) {
        return Err(Error::Solvability(format!(
            "positive-conductivity subgraph is disconnected; component {c} carries net source {:e}",
            net[c]
        )));
    }
    let mut counts = vec![0usize; ncomp];
    comp.iter().for_each(|&c| counts[c] += 1);
    let project = |x: &mut [f64]| {
        let mut sums = vec![0.0; ncomp];
        for (i, &c) in comp.iter().enumerate() {
            sums[c] += x[i];
        }
        for (i, &c) in comp.iter().enumerate() {
            x[i] -= sums[c] / counts[c] as f64;
        }
    };
    let mut diag = vec![0.0; n];
    for e in &g.edges {
        let w = e.conductivity / (e.length * e.length);
        diag[e.i] += w;
        diag[e.j] += w;
    }
    let precond: Vec<f64> = diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    let mut p = vec![0.0; n];
    match cg(|x, y| g.apply_laplacian(x, y), &g.sources, &precond, project, &mut p, CgOptions { tol: 1e-14, max_iter: 20 * n + 100 }) {
        Ok(_) => {}
        Err(Error::NoConvergence { residual, .. }) if residual < 1e-11 => {}
        Err(e) => return Err(e),
    }
    Ok(p)
}

/// Per-node Kirchhoff residual `-(1/L)Σ C (P_j - P_i)/L - S_i`.
pub fn kirchhoff_residual(g: &DiscreteGraph, p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.num_nodes];
    g.apply_laplacian(p, &mut out);
    out.iter_mut().zip(&g.sources).for_each(|(o, s)| *o -= s);
    out
}

/// `Q_ij = C_ij (P_j - P_i) / L_ij` per edge.
pub fn edge_flux(g: &DiscreteGraph, p: &[f64]) -> Vec<f64> {
    g.edges.iter().map(|e| e.conductivity * (p[e.j] - p[e.i]) / e.length).collect()
}

fn energy_from(g: &DiscreteGraph, p: &[f64], params: &ModelParams) -> f64 {
    g.edges
        .iter()
        .map(|e| {
            let c = e.conductivity;
            let kinetic = if c > 0.0 {
                let dp = (p[e.j] - p[e.i]) / e.length;
                c * dp * dp
            } else {
                0.0
            };
            (kinetic + params.metabolic(c)) * e.length
        })
        .sum()
}

/// `E = Σ (Q²/C + (ν/γ) C^γ) L` with Kirchhoff pressures.
pub fn discrete_energy(g: &DiscreteGraph, params: &ModelParams) -> Result<f64> {
    let p = kirchhoff_solve(g)?;
    Ok(energy_from(g, &p, params))
}

/// `|Q²/C² - ν C^(γ-1)|` per edge, zero on edges with `C = 0`.
pub fn discrete_stationary_residual(g: &DiscreteGraph, params: &ModelParams) -> Result<Vec<f64>> {
    let p = kirchhoff_solve(g)?;
    Ok(g.edges
        .iter()
        .map(|e| {
            let c = e.conductivity;
            if c <= 0.0 {
                return 0.0;
            }
            let dp = (p[e.j] - p[e.i]) / e.length;
            (dp * dp - params.nu * c.powf(params.gamma - 1.0)).abs()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphTrajectory {
    pub times: Vec<f64>,
    pub energies: Vec<f64>,
    pub conductivities: Vec<Vec<f64>>,
}

impl GraphTrajectory {
    pub fn final_conductivities(&self) -> &[f64] {
        self.conductivities.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

fn ode_rate(e: &Edge, dp: f64, params: &ModelParams) -> f64 {
    let drive = dp * dp;
    let c = e.conductivity;
    let decay = if c > 0.0 {
        params.nu * c.powf(params.gamma - 1.0)
    } else if params.gamma > 1.0 {
        0.0
    } else if params.gamma == 1.0 {
        params.nu
    } else if params.nu > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let rate = (drive - decay) * e.length;
    if c <= 0.0 {
        rate.max(0.0)
    } else {
        rate
    }
}

/// Explicit Euler for `dC/dt = ((ΔP/L)² - ν C^(γ-1)) L` with energy backtracking.
///
/// Each step starts from the nominal `dt` and halves it until the energy does not
/// increase; trial states whose Kirchhoff system becomes unsolvable are rejected
/// the same way.
pub fn gf_evolve(g: &DiscreteGraph, params: &ModelParams, dt: f64, steps: usize) -> Result<GraphTrajectory> {
    params.validate()?;
    if !(dt > 0.0) {
        return Err(Error::Precondition("dt must be positive".into()));
    }
    let mut cur = g.clone();
    let mut p = kirchhoff_solve(&cur)?;
    let mut energy = energy_from(&cur, &p, params);
    let mut traj = GraphTrajectory { times: vec![0.0], energies: vec![energy], conductivities: vec![cur.conductivities()] };
    let mut t = 0.0;
    for step in 1..=steps {
        let rates: Vec<f64> = cur
            .edges
            .iter()
            .map(|e| ode_rate(e, (p[e.j] - p[e.i]) / e.length, params))
            .collect();
        let mut h = dt;
        loop {
            let c_new: Vec<f64> = cur
                .edges
                .iter()
                .zip(&rates)
                .map(|(e, r)| (e.conductivity + h * r).max(0.0))
                .collect();
            if c_new.iter().any(|c| !c.is_finite()) {
                return Err(Error::Integration { step, reason: "non-finite conductivity".into() });
            }
            let trial = cur.with_conductivities(&c_new);
            let accepted = match kirchhoff_solve(&trial) {
                Ok(p_new) => {
                    let e_new = energy_from(&trial, &p_new, params);
                    if !e_new.is_finite() {
                        return Err(Error::Integration { step, reason: "non-finite energy".into() });
                    }
                    if e_new <= energy + 1e-12 * energy.abs().max(1.0) {
                        Some((trial, p_new, e_new))
                    } else {
                        None
                    }
                }
                Err(Error::Solvability(_)) => None,
                Err(e) => return Err(e),
            };
            if let Some((trial, p_new, e_new)) = accepted {
                cur = trial;
                p = p_new;
                energy = e_new;
                t += h;
                break;
            }
            h *= 0.5;
            if h < 1e-12 * dt.min(1.0) {
                return Err(Error::DtUnderflow { step, dt: h });
            }
        }
        traj.times.push(t);
        traj.energies.push(energy);
        traj.conductivities.push(cur.conductivities());
    }
    Ok(traj)
}
