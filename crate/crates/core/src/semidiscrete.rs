//! Nonlinear pressure on metric-graph edges with nodal transmission conditions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{discrete_stationary_residual, kirchhoff_residual, kirchhoff_solve, DiscreteGraph, Edge};
use crate::tensor::ModelParams;

/// A scalar or one value per edge cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerCell {
    Uniform(f64),
    Cells(Vec<f64>),
}

impl PerCell {
    pub fn get(&self, k: usize) -> f64 {
        match self {
            PerCell::Uniform(v) => *v,
            PerCell::Cells(v) => v[k],
        }
    }

    fn len_ok(&self, m: usize) -> bool {
        match self {
            PerCell::Uniform(_) => true,
            PerCell::Cells(v) => v.len() == m,
        }
    }
}

impl Default for PerCell {
    fn default() -> Self {
        PerCell::Uniform(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricNode {
    #[serde(default)]
    pub x: Vec<f64>,
    #[serde(rename = "S")]
    pub source: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricEdge {
    pub i: usize,
    pub j: usize,
    #[serde(rename = "L")]
    pub length: f64,
    pub cells: usize,
    pub beta: PerCell,
    #[serde(rename = "S_profile", default)]
    pub source: PerCell,
}

impl MetricEdge {
    pub fn h(&self) -> f64 {
        self.length / self.cells as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricGraph {
    pub nodes: Vec<MetricNode>,
    pub edges: Vec<MetricEdge>,
}

impl MetricGraph {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let n = self.nodes.len();
        let mut seen = std::collections::HashSet::new();
        for (k, e) in self.edges.iter().enumerate() {
            if e.i >= n || e.j >= n {
                errs.push(format!("edge {k} references a missing node"));
                continue;
            }
            if e.i == e.j {
                errs.push(format!("edge {k} is a self-loop"));
            }
            if !seen.insert((e.i.min(e.j), e.i.max(e.j))) {
                errs.push(format!("edge {k} duplicates an earlier edge"));
            }
            if !(e.length > 0.0) || !e.length.is_finite() {
                errs.push(format!("edge {k} has non-positive length"));
            }
            if e.cells == 0 {
                errs.push(format!("edge {k} needs at least one cell"));
            }
            if !e.beta.len_ok(e.cells) || !e.source.len_ok(e.cells) {
                errs.push(format!("edge {k} per-cell data does not match its cell count"));
                continue;
            }
            if (0..e.cells).any(|c| !(e.beta.get(c) > 0.0) || !e.beta.get(c).is_finite()) {
                errs.push(format!("edge {k} has a non-positive weight"));
            }
            if (0..e.cells).any(|c| !e.source.get(c).is_finite()) {
                errs.push(format!("edge {k} has a non-finite source"));
            }
        }
        if errs.is_empty() {
            let (total, scale) = self.source_balance();
            if total.abs() > 1e-12 * scale.max(1.0) {
                errs.push(format!("sources do not balance: total {total:e}"));
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Precondition(errs.join("; ")))
        }
    }

    /// Net source and the sum of absolute contributions.
    pub fn source_balance(&self) -> (f64, f64) {
        let mut total = 0.0;
        let mut scale = 0.0;
        for nd in &self.nodes {
            total += nd.source;
            scale += nd.source.abs();
        }
        for e in &self.edges {
            for c in 0..e.cells {
                let v = e.source.get(c) * e.h();
                total += v;
                scale += v.abs();
            }
        }
        (total, scale)
    }

    pub fn is_connected(&self) -> bool {
        let n = self.nodes.len();
        if n == 0 {
            return true;
        }
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e.i), find(&mut parent, e.j));
            parent[a] = b;
        }
        let root = find(&mut parent, 0);
        (0..n).all(|i| find(&mut parent, i) == root)
    }

    /// Offsets of each edge's interior unknowns after the nodal block.
    fn layout(&self) -> (Vec<usize>, usize) {
        let mut off = Vec::with_capacity(self.edges.len());
        let mut next = self.nodes.len();
        for e in &self.edges {
            off.push(next);
            next += e.cells - 1;
        }
        (off, next)
    }
}

/// Nodal values and per-edge point values `p(s_k)`, `s_k = k L / m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSolution {
    pub nodes: Vec<f64>,
    pub edges: Vec<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
}

impl MetricSolution {
    /// `s,p` rows of one edge.
    pub fn edge_csv(&self, g: &MetricGraph, k: usize) -> String {
        let h = g.edges[k].h();
        let mut out = String::from("s,p\n");
        for (i, p) in self.edges[k].iter().enumerate() {
            out.push_str(&format!("{:.16e},{:.16e}\n", i as f64 * h, p));
        }
        out
    }
}

struct Discretization<'a> {
    g: &'a MetricGraph,
    off: Vec<usize>,
    n: usize,
    coef: f64,
    expo: f64,
    load: Vec<f64>,
}

impl<'a> Discretization<'a> {
    fn new(g: &'a MetricGraph, params: &ModelParams) -> Self {
        let (off, n) = g.layout();
        let gm = params.gamma;
        let mut load = vec![0.0; n];
        for (i, nd) in g.nodes.iter().enumerate() {
            load[i] = nd.source;
        }
        let mut d = Self { g, off, n, coef: params.nu.powf(-1.0 / (gm - 1.0)), expo: 2.0 * gm / (gm - 1.0), load: Vec::new() };
        for (k, e) in g.edges.iter().enumerate() {
            for c in 0..e.cells {
                let share = 0.5 * e.source.get(c) * e.h();
                let (a, b) = d.cell_dofs(k, c);
                load[a] += share;
                load[b] += share;
            }
        }
        d.load = load;
        d
    }

    fn dof(&self, k: usize, i: usize) -> usize {
        let e = &self.g.edges[k];
        if i == 0 {
            e.i
        } else if i == e.cells {
            e.j
        } else {
            self.off[k] + i - 1
        }
    }

    fn cell_dofs(&self, k: usize, c: usize) -> (usize, usize) {
        (self.dof(k, c), self.dof(k, c + 1))
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        self.g.edges.iter().enumerate().flat_map(move |(k, e)| {
            (0..e.cells).map(move |c| {
                let (a, b) = self.cell_dofs(k, c);
                (a, b, e.h(), e.beta.get(c))
            })
        })
    }

    /// `Σ h β ((γ-1)/2γ) ν^(-1/(γ-1)) |q|^(2γ/(γ-1)) - load · p`.
    fn value(&self, x: &[f64]) -> f64 {
        let q = self.expo;
        let mut v = 0.0;
        for (a, b, h, beta) in self.cells() {
            let s = (x[b] - x[a]) / h;
            v += h * beta * self.coef / q * s.abs().powf(q);
        }
        v - x.iter().zip(&self.load).map(|(p, f)| p * f).sum::<f64>()
    }

    fn gradient_hessian(&self, x: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let q = self.expo;
        let mut grad = DVector::from_iterator(self.n, self.load.iter().map(|f| -f));
        let mut hess = DMatrix::zeros(self.n, self.n);
        for (a, b, h, beta) in self.cells() {
            let s = (x[b] - x[a]) / h;
            let flux = beta * self.coef * s.abs().powf(q - 2.0) * s;
            let dflux = beta * self.coef * (q - 1.0) * s.abs().powf(q - 2.0) / h;
            grad[a] -= flux;
            grad[b] += flux;
            hess[(a, a)] += dflux;
            hess[(b, b)] += dflux;
            hess[(a, b)] -= dflux;
            hess[(b, a)] -= dflux;
        }
        (grad, hess)
    }

    fn to_solution(&self, x: &[f64], iterations: usize, history: Vec<f64>) -> MetricSolution {
        let nodes = x[..self.g.nodes.len()].to_vec();
        let edges = (0..self.g.edges.len())
            .map(|k| (0..=self.g.edges[k].cells).map(|i| x[self.dof(k, i)]).collect())
            .collect();
        MetricSolution { nodes, edges, iterations, residual: history.last().copied().unwrap_or(0.0), residual_history: history }
    }
}

/// Solves for nodal and edge pressures with damped Newton on the relaxed functional.
pub fn solve_pressure(g: &MetricGraph, params: &ModelParams) -> Result<MetricSolution> {
    params.validate()?;
    if !(params.gamma > 1.0) || !(params.nu > 0.0) {
        return Err(Error::Precondition("the metric-graph solver needs gamma > 1 and nu > 0".into()));
    }
    g.validate()?;
    if !g.is_connected() {
        return Err(Error::Solvability("metric graph is disconnected".into()));
    }
    let d = Discretization::new(g, params);
    let n = d.n;
    let scale = d.load.iter().fold(1.0f64, |m, f| m.max(f.abs()));
    if d.load.iter().all(|&f| f == 0.0) {
        return Ok(d.to_solution(&vec![0.0; n], 0, vec![0.0]));
    }
    let ones = DMatrix::from_element(n, n, 1.0 / n as f64);

    // linear solve with weights β/h, then the optimal scaling along that ray
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for (a, b, h, beta) in d.cells() {
        let w = beta / h;
        lap[(a, a)] += w;
        lap[(b, b)] += w;
        lap[(a, b)] -= w;
        lap[(b, a)] -= w;
    }
    let rhs = DVector::from_vec(d.load.clone());
    let lin = (lap + &ones)
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Solvability("singular linear system".into()))?;
    let mut x: Vec<f64> = lin.iter().copied().collect();
    {
        let q = d.expo;
        let a: f64 = d.cells().map(|(i, j, h, beta)| h * beta * d.coef / q * ((x[j] - x[i]) / h).abs().powf(q)).sum();
        let b: f64 = x.iter().zip(&d.load).map(|(p, f)| p * f).sum();
        if a > 0.0 && b > 0.0 {
            let s = (b / (q * a)).powf(1.0 / (q - 1.0));
            x.iter_mut().for_each(|v| *v *= s);
        }
    }
    let mut value = d.value(&x);
    let mut history = Vec::new();
    for it in 0..200 {
        let (grad, hess) = d.gradient_hessian(&x);
        let res = grad.amax();
        history.push(res);
        if res <= 1e-11 * scale {
            let mean = x.iter().sum::<f64>() / n as f64;
            x.iter_mut().for_each(|v| *v -= mean);
            return Ok(d.to_solution(&x, it, history));
        }
        let peak = hess.diagonal().amax().max(1.0);
        let mut h = hess + &ones;
        for i in 0..n {
            h[(i, i)] += 1e-12 * peak;
        }
        let dir = h
            .cholesky()
            .map(|c| c.solve(&(-&grad)))
            .or_else(|| Some(-&grad))
            .expect("direction");
        let slope = grad.dot(&dir);
        let slack = 1e-14 * value.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
            let v = d.value(&trial);
            if v <= value + 1e-4 * t * slope + slack {
                x = trial;
                value = v;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(Error::NoConvergence { iterations: history.len(), residual: history.last().copied().unwrap_or(f64::NAN) })
}

/// Nodal transmission residuals of a solution.
pub fn transmission_residual(g: &MetricGraph, params: &ModelParams, sol: &MetricSolution) -> Vec<f64> {
    let d = Discretization::new(g, params);
    let mut x = vec![0.0; d.n];
    for k in 0..g.edges.len() {
        for (i, p) in sol.edges[k].iter().enumerate() {
            x[d.dof(k, i)] = *p;
        }
    }
    x[..g.nodes.len()].copy_from_slice(&sol.nodes);
    let (grad, _) = d.gradient_hessian(&x);
    grad.iter().copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub max_affine_deviation: f64,
    pub kirchhoff_residual: f64,
    pub stationary_residual: f64,
    pub graph: DiscreteGraph,
    pub solution: MetricSolution,
}

impl ConsistencyReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_affine_deviation <= tol && self.kirchhoff_residual <= tol && self.stationary_residual <= tol
    }
}

/// Compares a node-sourced metric graph with `β = 1/L` against the discrete network model.
pub fn consistency_check(g: &MetricGraph, params: &ModelParams) -> Result<ConsistencyReport> {
    for (k, e) in g.edges.iter().enumerate() {
        if (0..e.cells).any(|c| e.source.get(c) != 0.0) {
            return Err(Error::Precondition(format!("edge {k} carries a source")));
        }
        if (0..e.cells).any(|c| (e.beta.get(c) * e.length - 1.0).abs() > 1e-12) {
            return Err(Error::Precondition(format!("edge {k} weight is not 1/L")));
        }
    }
    let sol = solve_pressure(g, params)?;
    let mut dev: f64 = 0.0;
    for (k, e) in g.edges.iter().enumerate() {
        let pe = &sol.edges[k];
        let (a, b) = (pe[0], pe[e.cells]);
        for (i, p) in pe.iter().enumerate() {
            let t = i as f64 / e.cells as f64;
            dev = dev.max((p - (a + t * (b - a))).abs());
        }
    }
    let expo = 1.0 / (params.gamma - 1.0);
    let edges = g
        .edges
        .iter()
        .map(|e| {
            let q = (sol.nodes[e.j] - sol.nodes[e.i]) / e.length;
            Edge { i: e.i, j: e.j, length: e.length, conductivity: params.nu.powf(-expo) * (q * q).powf(expo) }
        })
        .collect();
    let graph = DiscreteGraph::new(g.nodes.len(), edges, g.nodes.iter().map(|n| n.source).collect())?;
    let kres = kirchhoff_residual(&graph, &sol.nodes).iter().fold(0.0f64, |m, r| m.max(r.abs()));
    // a fresh Kirchhoff solve must reproduce the stationary relation
    kirchhoff_solve(&graph)?;
    let sres = discrete_stationary_residual(&graph, params)?.into_iter().fold(0.0, f64::max);
    Ok(ConsistencyReport { max_affine_deviation: dev, kirchhoff_residual: kres, stationary_residual: sres, graph, solution: sol })
}
