//! Variational solvers for stationary pressure problems.
//!
//! Every problem is a convex functional of the bilinear nodal pressure of the form
//! `(r/2) ∫ |grad p|^2 + Σ_c |c| Φ_c(grad p_c) - ∫ p S`, where `Φ_c` is evaluated at the
//! cell-center gradient. [`minimize`] runs a damped Newton iteration with CG inner solves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher_rao::{fr_range, BranchPotential, StationaryMeasureSpec};
use crate::linalg::{dot, norm, remove_weighted_mean};
use crate::mesh::{StructuredMesh, Vec2};
use crate::poisson::{tensor_to_mat2, CellOperator, Element, Mat2, PressureField, SolverOptions, SourceField};
use crate::tensor::ModelParams;

/// Per-cell position density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn uniform(mesh: &StructuredMesh, rho: f64) -> Self {
        Self { values: vec![rho; mesh.num_cells()] }
    }

    pub fn from_fn(mesh: &StructuredMesh, f: impl Fn(Vec2) -> f64) -> Self {
        Self { values: (0..mesh.num_cells()).map(|c| f(mesh.cell_center(c))).collect() }
    }

    pub fn validate(&self, mesh: &StructuredMesh) -> Result<()> {
        if self.values.len() != mesh.num_cells() {
            return Err(Error::Precondition("density does not match the mesh".into()));
        }
        if self.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Precondition("density must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Per-cell multiplier of the gradient constraint, stored as `a^2 = ν λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierField {
    pub a2: Vec<f64>,
    /// Multiplier of the permeability form, `ρ a^2`.
    pub weighted: Vec<f64>,
}

impl MultiplierField {
    pub fn lambda(&self, nu: f64) -> Vec<f64> {
        self.a2.iter().map(|a| a / nu).collect()
    }
}

/// Direction angles with per-cell weights `weights[cell][k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularDensity {
    pub angles: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

impl AngularDensity {
    pub fn uniform(mesh: &StructuredMesh, angles: Vec<f64>, weight: f64) -> Self {
        let k = angles.len();
        Self { angles, weights: vec![vec![weight; k]; mesh.num_cells()] }
    }

    pub fn direction(&self, k: usize) -> Vec2 {
        [self.angles[k].cos(), self.angles[k].sin()]
    }

    pub fn validate(&self, mesh: &StructuredMesh) -> Result<()> {
        if self.angles.is_empty() || self.weights.len() != mesh.num_cells() {
            return Err(Error::Precondition("angular density does not match the mesh".into()));
        }
        for w in &self.weights {
            if w.len() != self.angles.len() || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Precondition("angular weights must be finite, non-negative, one per angle".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub id: usize,
    pub omega: f64,
    pub spread: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StationaryReport {
    pub iterations: usize,
    pub final_value: f64,
    pub el_residual: f64,
    pub constraint_max: Option<f64>,
    pub components: Vec<ComponentReport>,
}

/// Cell integrand `Φ_c(g)` with its gradient and Hessian in `g`.
pub trait CellIntegrand: Sync {
    fn eval(&self, cell: usize, g: &Vec2) -> (f64, Vec2, Mat2);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Target `‖grad J‖ / ‖load‖`.
    pub tol: f64,
    pub max_iter: usize,
    /// Residual accepted when the line search stalls at roundoff.
    pub stall_tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-11, max_iter: 200, stall_tol: 1e-8 }
    }
}

/// Discretized functional for one integrand.
pub struct Functional<'a, I: CellIntegrand> {
    pub mesh: &'a StructuredMesh,
    pub r: f64,
    pub integrand: &'a I,
    elem: Element,
    lap: CellOperator,
    load: Vec<f64>,
    nodes: Vec<smallvec::SmallVec<[usize; 4]>>,
}

impl<'a, I: CellIntegrand> Functional<'a, I> {
    pub fn new(mesh: &'a StructuredMesh, r: f64, integrand: &'a I, s: &SourceField) -> Result<Self> {
        mesh.validate()?;
        if s.values.len() != mesh.num_cells() {
            return Err(Error::Precondition("source does not match the mesh".into()));
        }
        s.check_zero_mean(mesh)?;
        if !(r >= 0.0) {
            return Err(Error::Precondition("background permeability must be non-negative".into()));
        }
        let elem = Element::new(mesh);
        let lap = CellOperator::new(mesh, &elem, r, |_| [[0.0; 2]; 2]);
        let nodes = (0..mesh.num_cells()).map(|c| mesh.cell_nodes(c)).collect();
        Ok(Self { mesh, r, integrand, elem, lap, load: s.load(mesh), nodes })
    }

    pub fn load(&self) -> &[f64] {
        &self.load
    }

    fn cell_gradients(&self, x: &[f64]) -> Vec<Vec2> {
        self.nodes
            .iter()
            .map(|nd| {
                let local: smallvec::SmallVec<[f64; 4]> = nd.iter().map(|&n| x[n]).collect();
                self.elem.gradient(&local)
            })
            .collect()
    }

    fn evals(&self, x: &[f64]) -> Vec<(f64, Vec2, Mat2)> {
        let grads = self.cell_gradients(x);
        grads.par_iter().enumerate().map(|(c, g)| self.integrand.eval(c, g)).collect()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let mut kx = vec![0.0; x.len()];
        self.lap.apply(x, &mut kx);
        let cells: f64 = self.evals(x).iter().map(|e| e.0).sum::<f64>() * self.elem.vol;
        0.5 * dot(x, &kx) + cells - dot(&self.load, x)
    }

    fn gradient_from(&self, x: &[f64], evals: &[(f64, Vec2, Mat2)]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.lap.apply(x, &mut out);
        for (nd, (_, dg, _)) in self.nodes.iter().zip(evals) {
            for (a, &n) in nd.iter().enumerate() {
                let mut s = 0.0;
                for ax in 0..self.elem.dim {
                    s += self.elem.grad[ax][a] * dg[ax];
                }
                out[n] += self.elem.vol * s;
            }
        }
        out.iter_mut().zip(&self.load).for_each(|(o, f)| *o -= f);
        out
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.gradient_from(x, &self.evals(x))
    }

    /// `‖grad J‖ / ‖load‖`, or `‖grad J‖` when the load vanishes.
    pub fn relative_residual(&self, x: &[f64]) -> f64 {
        let g = norm(&self.gradient(x));
        let f = norm(&self.load);
        if f > 0.0 {
            g / f
        } else {
            g
        }
    }
}

/// Damped Newton minimization of `J` over zero-mean nodal fields.
pub fn minimize<I: CellIntegrand>(
    f: &Functional<'_, I>,
    x0: Option<Vec<f64>>,
    opts: NewtonOptions,
) -> Result<(Vec<f64>, StationaryReport)> {
    let mesh = f.mesh;
    let weights = mesh.node_weights();
    let mut x = x0.unwrap_or_else(|| vec![0.0; mesh.num_nodes()]);
    remove_weighted_mean(&mut x, &weights);
    let fnorm = norm(&f.load);
    let scale = if fnorm > 0.0 { fnorm } else { 1.0 };
    let mut value = f.value(&x);
    let mut iterations = 0;
    loop {
        let evals = f.evals(&x);
        let grad = f.gradient_from(&x, &evals);
        let res = norm(&grad) / scale;
        if !res.is_finite() || !value.is_finite() {
            return Err(Error::NoConvergence { iterations, residual: res });
        }
        if res <= opts.tol {
            return Ok((x, StationaryReport { iterations, final_value: value, el_residual: res, ..Default::default() }));
        }
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence { iterations, residual: res });
        }
        iterations += 1;
        let reg = if f.r == 0.0 {
            let peak = evals.iter().map(|e| e.2[0][0].abs().max(e.2[1][1].abs())).fold(1.0, f64::max);
            1e-12 * peak
        } else {
            0.0
        };
        let hess = CellOperator::new(mesh, &f.elem, f.r, |c| {
            let mut h = evals[c].2;
            h[0][0] += reg;
            h[1][1] += reg;
            h
        });
        let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
        let (dir, _) = hess.solve(&rhs, None, SolverOptions { cg_tol: 1e-12, max_iter: 50_000 })?;
        let slope = dot(&grad, &dir);
        let slack = 1e-14 * value.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            let v = f.value(&trial);
            if v.is_finite() && v <= value + 1e-4 * t * slope + slack {
                x = trial;
                value = v;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if res <= opts.stall_tol {
                return Ok((x, StationaryReport { iterations, final_value: value, el_residual: res, ..Default::default() }));
            }
            return Err(Error::LineSearch { iterations, residual: res });
        }
    }
}

fn finish(mesh: &StructuredMesh, mut x: Vec<f64>) -> PressureField {
    remove_weighted_mean(&mut x, &mesh.node_weights());
    PressureField::from_values(mesh, x)
}

fn sq(g: &Vec2) -> f64 {
    g[0] * g[0] + g[1] * g[1]
}

/// `c ρ |g|^q` with `q = 2γ/(γ-1)`, `c = ((γ-1)/2γ) ν^(-1/(γ-1))`.
pub struct PlapIntegrand<'a> {
    pub rho: &'a [f64],
    pub coef: f64,
    pub q: f64,
}

impl<'a> PlapIntegrand<'a> {
    pub fn new(rho: &'a DensityField, params: &ModelParams) -> Self {
        let g = params.gamma;
        Self { rho: &rho.values, coef: (g - 1.0) / (2.0 * g) * params.nu.powf(-1.0 / (g - 1.0)), q: 2.0 * g / (g - 1.0) }
    }
}

impl CellIntegrand for PlapIntegrand<'_> {
    fn eval(&self, cell: usize, g: &Vec2) -> (f64, Vec2, Mat2) {
        let rho = self.rho[cell];
        let s = sq(g).sqrt();
        if rho == 0.0 || s == 0.0 {
            return (0.0, [0.0; 2], [[0.0; 2]; 2]);
        }
        let a = self.coef * rho;
        let pw = s.powf(self.q - 2.0);
        let val = a * pw * s * s;
        let k = a * self.q * pw;
        let m = a * self.q * (self.q - 2.0) * pw / (s * s);
        (val, [k * g[0], k * g[1]], [[k + m * g[0] * g[0], m * g[0] * g[1]], [m * g[0] * g[1], k + m * g[1] * g[1]]])
    }
}

fn check_gamma_gt1(params: &ModelParams) -> Result<()> {
    params.validate()?;
    if !(params.gamma > 1.0) || !(params.nu > 0.0) {
        return Err(Error::Precondition("this solver needs gamma > 1 and nu > 0".into()));
    }
    Ok(())
}

/// Minimizer of `∫ (r/2)|grad p|^2 + ((γ-1)/2γ) ν^(-1/(γ-1)) ρ |grad p|^(2γ/(γ-1)) - p S`.
pub fn plap_minimize(mesh: &StructuredMesh, rho: &DensityField, s: &SourceField, params: &ModelParams) -> Result<(PressureField, StationaryReport)> {
    check_gamma_gt1(params)?;
    rho.validate(mesh)?;
    if params.r == 0.0 && rho.values.iter().any(|&v| v <= 0.0) {
        return Err(Error::Precondition("r = 0 requires a uniformly positive density".into()));
    }
    let integrand = PlapIntegrand::new(rho, params);
    let f = Functional::new(mesh, params.r, &integrand, s)?;
    let (x, rep) = minimize(&f, None, NewtonOptions::default())?;
    Ok((finish(mesh, x), rep))
}

/// Relative Euler-Lagrange residual of `p` for the p-Laplace functional.
pub fn plap_el_residual(p: &PressureField, rho: &DensityField, s: &SourceField, params: &ModelParams) -> Result<f64> {
    let integrand = PlapIntegrand::new(rho, params);
    Ok(Functional::new(&p.mesh, params.r, &integrand, s)?.relative_residual(&p.values))
}

pub fn plap_functional(p: &PressureField, rho: &DensityField, s: &SourceField, params: &ModelParams) -> Result<f64> {
    let integrand = PlapIntegrand::new(rho, params);
    Ok(Functional::new(&p.mesh, params.r, &integrand, s)?.value(&p.values))
}

/// Augmented-Lagrangian penalty of `(|g|^2 - ν)/2 ≤ 0`.
struct ConstraintPenalty<'a> {
    nu: f64,
    sigma: f64,
    m: &'a [f64],
}

impl CellIntegrand for ConstraintPenalty<'_> {
    fn eval(&self, cell: usize, g: &Vec2) -> (f64, Vec2, Mat2) {
        let m = self.m[cell];
        let h = 0.5 * (sq(g) - self.nu);
        let t = m + self.sigma * h;
        if t <= 0.0 {
            return (-m * m / (2.0 * self.sigma), [0.0; 2], [[0.0; 2]; 2]);
        }
        let sg = self.sigma;
        (
            (t * t - m * m) / (2.0 * sg),
            [t * g[0], t * g[1]],
            [[t + sg * g[0] * g[0], sg * g[0] * g[1]], [sg * g[0] * g[1], t + sg * g[1] * g[1]]],
        )
    }
}

/// Minimizer of `∫ (r/2)|grad p|^2 - p S` subject to `|grad p|^2 ≤ ν` per cell.
pub fn constrained_minimize_gamma1(
    mesh: &StructuredMesh,
    rho: &DensityField,
    s: &SourceField,
    params: &ModelParams,
) -> Result<(PressureField, MultiplierField, StationaryReport)> {
    params.validate()?;
    rho.validate(mesh)?;
    if params.gamma != 1.0 || !(params.r > 0.0) || !(params.nu > 0.0) {
        return Err(Error::Precondition("the constrained solver needs gamma = 1, r > 0 and nu > 0".into()));
    }
    let nu = params.nu;
    let vol = mesh.cell_volume();
    let mut m = vec![0.0; mesh.num_cells()];
    let mut sigma = 10.0 * params.r / nu;
    let mut x: Option<Vec<f64>> = None;
    let mut prev_viol = f64::INFINITY;
    let mut total_iter = 0;
    for _ in 0..200 {
        let pen = ConstraintPenalty { nu, sigma, m: &m };
        let f = Functional::new(mesh, params.r, &pen, s)?;
        let (xi, rep) = minimize(&f, x.take(), NewtonOptions::default())?;
        total_iter += rep.iterations;
        let p = PressureField::from_values(mesh, xi.clone());
        let viol = p.gradients.iter().map(|g| sq(g) - nu).fold(0.0, f64::max);
        let next: Vec<f64> = m.iter().zip(&p.gradients).map(|(mc, g)| (mc + sigma * 0.5 * (sq(g) - nu)).max(0.0)).collect();
        let mass: f64 = next.iter().sum::<f64>() * vol;
        let compl: f64 = next.iter().zip(&p.gradients).map(|(mc, g)| mc * (nu - sq(g)).max(0.0)).sum::<f64>() * vol;
        let change = next.iter().zip(&m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        m = next;
        x = Some(xi);
        if viol <= 1e-11 * nu.max(1.0) && compl <= 1e-10 * mass.max(1.0) && change <= 1e-8 * m.iter().cloned().fold(1.0, f64::max) {
            let a2: Vec<f64> = m.iter().zip(&rho.values).map(|(mc, r)| if *r > 1e-12 { mc / r } else { 0.0 }).collect();
            let constraint_max = p.gradients.iter().map(sq).fold(0.0, f64::max);
            let value = {
                let zero = vec![0.0; mesh.num_cells()];
                let plain = ConstraintPenalty { nu, sigma: 1.0, m: &zero };
                let lin = Functional::new(mesh, params.r, &plain, s)?;
                let mut kx = vec![0.0; p.values.len()];
                lin.lap.apply(&p.values, &mut kx);
                0.5 * dot(&p.values, &kx) - dot(lin.load(), &p.values)
            };
            let report = StationaryReport {
                iterations: total_iter,
                final_value: value,
                el_residual: rep.el_residual,
                constraint_max: Some(constraint_max),
                components: Vec::new(),
            };
            return Ok((finish(mesh, p.values), MultiplierField { a2, weighted: m }, report));
        }
        if viol > 0.25 * prev_viol && sigma < 1e12 {
            sigma *= 10.0;
        }
        prev_viol = viol;
    }
    Err(Error::NoConvergence { iterations: total_iter, residual: prev_viol })
}

/// `Σ_k w_k c |θ_k · g|^q`.
struct ScalarIntegrand<'a> {
    density: &'a AngularDensity,
    dirs: Vec<Vec2>,
    coef: f64,
    q: f64,
}

impl CellIntegrand for ScalarIntegrand<'_> {
    fn eval(&self, cell: usize, g: &Vec2) -> (f64, Vec2, Mat2) {
        let (mut val, mut dg, mut h) = (0.0, [0.0; 2], [[0.0; 2]; 2]);
        for (k, th) in self.dirs.iter().enumerate() {
            let w = self.density.weights[cell][k];
            let t = th[0] * g[0] + th[1] * g[1];
            if w == 0.0 || t == 0.0 {
                continue;
            }
            let a = t.abs().powf(self.q - 2.0);
            val += w * self.coef * a * t * t;
            let d1 = w * self.coef * self.q * a * t;
            let d2 = w * self.coef * self.q * (self.q - 1.0) * a;
            for i in 0..2 {
                dg[i] += d1 * th[i];
                for j in 0..2 {
                    h[i][j] += d2 * th[i] * th[j];
                }
            }
        }
        (val, dg, h)
    }
}

/// Stationary pressure of the scalar-direction model.
pub fn scalar_stationary_minimize(
    mesh: &StructuredMesh,
    density: &AngularDensity,
    s: &SourceField,
    params: &ModelParams,
) -> Result<(PressureField, StationaryReport)> {
    check_gamma_gt1(params)?;
    density.validate(mesh)?;
    let g = params.gamma;
    let integrand = ScalarIntegrand {
        density,
        dirs: (0..density.angles.len()).map(|k| density.direction(k)).collect(),
        coef: (g - 1.0) / (2.0 * g) * params.nu.powf(-1.0 / (g - 1.0)),
        q: 2.0 * g / (g - 1.0),
    };
    if params.r == 0.0 && density.weights.iter().any(|w| w.iter().sum::<f64>() <= 0.0) {
        return Err(Error::Precondition("r = 0 requires a uniformly positive angular density".into()));
    }
    let f = Functional::new(mesh, params.r, &integrand, s)?;
    let (x, rep) = minimize(&f, None, NewtonOptions::default())?;
    Ok((finish(mesh, x), rep))
}

/// `(1 / 2|c|) Σ_j w_j U(g · A_j g)` over the spec atoms in each cell.
struct FrIntegrand {
    pot: BranchPotential,
    atoms: Vec<Vec<(f64, Mat2)>>,
    inv_vol: f64,
}

fn mat_vec(a: &Mat2, g: &Vec2) -> Vec2 {
    [a[0][0] * g[0] + a[0][1] * g[1], a[1][0] * g[0] + a[1][1] * g[1]]
}

impl CellIntegrand for FrIntegrand {
    fn eval(&self, cell: usize, g: &Vec2) -> (f64, Vec2, Mat2) {
        let (mut val, mut dg, mut h) = (0.0, [0.0; 2], [[0.0; 2]; 2]);
        for (w, a) in &self.atoms[cell] {
            let ag = mat_vec(a, g);
            let v = (g[0] * ag[0] + g[1] * ag[1]).max(0.0);
            let Ok(u) = self.pot.u(v) else {
                return (f64::NAN, [f64::NAN; 2], [[f64::NAN; 2]; 2]);
            };
            let du = self.pot.du(v, u);
            let s = w * self.inv_vol;
            val += 0.5 * s * self.pot.potential(v, u);
            for i in 0..2 {
                dg[i] += s * u * ag[i];
                for j in 0..2 {
                    h[i][j] += s * (u * a[i][j] + 2.0 * du * ag[i] * ag[j]);
                }
            }
        }
        (val, dg, h)
    }
}

fn fr_integrand(mesh: &StructuredMesh, spec: &StationaryMeasureSpec, params: &ModelParams) -> Result<FrIntegrand> {
    let pot = BranchPotential::new(*params, spec.k, spec.branch)?;
    let mut atoms = vec![Vec::new(); mesh.num_cells()];
    for i in 0..spec.atoms.len() {
        let c = mesh.locate_cell(&spec.position(i))?;
        atoms[c].push((spec.atoms[i].w, tensor_to_mat2(&spec.atoms[i].a)));
    }
    Ok(FrIntegrand { pot, atoms, inv_vol: 1.0 / mesh.cell_volume() })
}

/// Minimizer of `(r/2)∫|grad p|^2 + (1/2) Σ_j w_j U(grad p(x_j) · A_j grad p(x_j)) - ∫ p S`.
pub fn fr_functional_minimize(
    mesh: &StructuredMesh,
    spec: &StationaryMeasureSpec,
    s: &SourceField,
    params: &ModelParams,
) -> Result<(PressureField, StationaryReport)> {
    check_gamma_gt1(params)?;
    if !(spec.k >= 0.0) {
        return Err(Error::Precondition("the functional needs K >= 0".into()));
    }
    if !(params.r > 0.0) {
        return Err(Error::Precondition("the functional needs r > 0".into()));
    }
    spec.validate(mesh.dim)?;
    let integrand = fr_integrand(mesh, spec, params)?;
    let f = Functional::new(mesh, params.r, &integrand, s)?;
    let (x, rep) = minimize(&f, None, NewtonOptions::default())?;
    let p = finish(mesh, x);
    let range = fr_range(p.min_gradient_norm(), p.max_gradient_norm(), params)?;
    if !range.contains(spec.k) {
        return Err(Error::Precondition(format!("K = {} left the range of the first variation", spec.k)));
    }
    Ok((p, rep))
}

pub fn fr_functional_value(p: &PressureField, spec: &StationaryMeasureSpec, s: &SourceField, params: &ModelParams) -> Result<f64> {
    let integrand = fr_integrand(&p.mesh, spec, params)?;
    Ok(Functional::new(&p.mesh, params.r, &integrand, s)?.value(&p.values))
}

/// Connected components of `{ρ > 1e-12}` under face adjacency.
pub fn support_components(mesh: &StructuredMesh, rho: &DensityField) -> Vec<Vec<usize>> {
    let n = mesh.num_cells();
    let mut seen = vec![false; n];
    let mut comps = Vec::new();
    let (nx, ny) = (mesh.nx(), mesh.ny());
    for start in 0..n {
        if seen[start] || !(rho.values[start] > 1e-12) {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(c) = stack.pop() {
            comp.push(c);
            let (i, j) = mesh.cell_ij(c);
            let mut nbrs = Vec::with_capacity(4);
            if i > 0 {
                nbrs.push(mesh.cell_index(i - 1, j));
            }
            if i + 1 < nx {
                nbrs.push(mesh.cell_index(i + 1, j));
            }
            if j > 0 {
                nbrs.push(mesh.cell_index(i, j - 1));
            }
            if j + 1 < ny {
                nbrs.push(mesh.cell_index(i, j + 1));
            }
            for nb in nbrs {
                if !seen[nb] && rho.values[nb] > 1e-12 {
                    seen[nb] = true;
                    stack.push(nb);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WassReport {
    pub is_equilibrium: bool,
    pub components: Vec<ComponentReport>,
}

/// Checks that `|grad p|` is constant on every connected component of the support of `ρ`.
pub fn verify_wass_equilibrium(p: &PressureField, rho: &DensityField, tol: f64) -> Result<WassReport> {
    rho.validate(&p.mesh)?;
    let components: Vec<ComponentReport> = support_components(&p.mesh, rho)
        .into_iter()
        .enumerate()
        .map(|(id, cells)| {
            let mags: Vec<f64> = cells.iter().map(|&c| sq(&p.gradients[c]).sqrt()).collect();
            let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = mags.iter().cloned().fold(0.0, f64::max);
            ComponentReport { id, omega: mags.iter().sum::<f64>() / mags.len() as f64, spread: hi - lo, cells: cells.len() }
        })
        .collect();
    Ok(WassReport { is_equilibrium: components.iter().all(|c| c.spread <= tol), components })
}
