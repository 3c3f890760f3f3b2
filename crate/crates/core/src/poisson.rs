//! Conforming bilinear discretization of `-div((P + r I) grad p) = S` with zero-flux
//! boundary and zero-mean pressure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cg, dot, CgOptions, CgStats};
use crate::mesh::{StructuredMesh, Vec2};
use crate::tensor::SymTensor;

/// 2x2 symmetric block `[[xx, xy], [xy, yy]]`; only `xx` is used in one dimension.
pub type Mat2 = [[f64; 2]; 2];

/// Per-cell permeability tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermeabilityField {
    pub cells: Vec<SymTensor>,
}

impl PermeabilityField {
    pub fn zeros(mesh: &StructuredMesh) -> Self {
        Self { cells: vec![SymTensor::zeros(mesh.dim); mesh.num_cells()] }
    }

    pub fn uniform(mesh: &StructuredMesh, t: SymTensor) -> Self {
        Self { cells: vec![t; mesh.num_cells()] }
    }

    /// `Σ_c P_c |c|`.
    pub fn integral(&self, mesh: &StructuredMesh) -> SymTensor {
        let mut acc = SymTensor::zeros(mesh.dim);
        for t in &self.cells {
            acc.add_assign_scaled(mesh.cell_volume(), t);
        }
        acc
    }
}

/// Per-cell source density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceField {
    pub values: Vec<f64>,
}

impl SourceField {
    pub fn zeros(mesh: &StructuredMesh) -> Self {
        Self { values: vec![0.0; mesh.num_cells()] }
    }

    /// Validates the zero-mean condition.
    pub fn from_values(mesh: &StructuredMesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.num_cells() {
            return Err(Error::Precondition(format!(
                "source has {} values for {} cells",
                values.len(),
                mesh.num_cells()
            )));
        }
        let s = Self { values };
        s.check_zero_mean(mesh)?;
        Ok(s)
    }

    /// Cell averages of `f` (3-point Gauss per axis), shifted to zero mean.
    pub fn from_fn(mesh: &StructuredMesh, f: impl Fn(Vec2) -> f64) -> Self {
        const GP: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
        const GW: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];
        let (hx, hy) = (mesh.h(0), if mesh.dim == 2 { mesh.h(1) } else { 0.0 });
        let values = (0..mesh.num_cells())
            .map(|c| {
                let xc = mesh.cell_center(c);
                let mut acc = 0.0;
                for (a, wa) in GP.iter().zip(GW) {
                    if mesh.dim == 1 {
                        acc += wa * f([xc[0] + 0.5 * hx * a, 0.0]);
                    } else {
                        for (b, wb) in GP.iter().zip(GW) {
                            acc += wa * wb * f([xc[0] + 0.5 * hx * a, xc[1] + 0.5 * hy * b]);
                        }
                    }
                }
                acc
            })
            .collect();
        let mut s = Self { values };
        s.remove_mean();
        s
    }

    pub fn remove_mean(&mut self) {
        let n = self.values.len() as f64;
        let m = self.values.iter().sum::<f64>() / n;
        self.values.iter_mut().for_each(|v| *v -= m);
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * s).collect() }
    }

    pub fn check_zero_mean(&self, mesh: &StructuredMesh) -> Result<()> {
        let vol = mesh.cell_volume();
        let total: f64 = self.values.iter().sum::<f64>() * vol;
        let scale: f64 = self.values.iter().map(|v| v.abs()).sum::<f64>() * vol;
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("source contains non-finite values".into()));
        }
        if total.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Precondition(format!("source integral {total:e} is not zero")));
        }
        Ok(())
    }

    pub fn l2_norm(&self, mesh: &StructuredMesh) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * mesh.cell_volume()).sqrt()
    }

    /// Consistent nodal load `∫ S φ_a`.
    pub fn load(&self, mesh: &StructuredMesh) -> Vec<f64> {
        let mut f = vec![0.0; mesh.num_nodes()];
        let share = mesh.cell_volume() / mesh.nodes_per_cell() as f64;
        for (c, s) in self.values.iter().enumerate() {
            for n in mesh.cell_nodes(c) {
                f[n] += s * share;
            }
        }
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub cg_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { cg_tol: 1e-13, max_iter: 50_000 }
    }
}

/// Mesh, source and solver settings of one Poisson-constrained problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonProblem {
    pub mesh: StructuredMesh,
    pub source: SourceField,
    #[serde(default)]
    pub options: SolverOptions,
}

impl PoissonProblem {
    pub fn new(mesh: StructuredMesh, source: SourceField) -> Result<Self> {
        mesh.validate()?;
        source.check_zero_mean(&mesh)?;
        if source.values.len() != mesh.num_cells() {
            return Err(Error::Precondition("source does not match mesh".into()));
        }
        Ok(Self { mesh, source, options: SolverOptions::default() })
    }

    pub fn solve(&self, perm: &PermeabilityField, r: f64) -> Result<PressureField> {
        assemble_and_solve_with(&self.mesh, perm, r, &self.source, self.options)
    }
}

/// Reference-cell operators shared by every cell of a uniform mesh.
#[derive(Debug, Clone)]
pub(crate) struct Element {
    pub n: usize,
    pub dim: usize,
    /// Cell-center gradient operator, `grad[axis][node]`.
    pub grad: [[f64; 4]; 2],
    /// Exact bilinear stiffness of `∫ grad φ_a · grad φ_b`.
    pub lap: [[f64; 4]; 4],
    pub vol: f64,
}

impl Element {
    pub fn new(mesh: &StructuredMesh) -> Self {
        let hx = mesh.h(0);
        if mesh.dim == 1 {
            let mut lap = [[0.0; 4]; 4];
            lap[0][0] = 1.0 / hx;
            lap[1][1] = 1.0 / hx;
            lap[0][1] = -1.0 / hx;
            lap[1][0] = -1.0 / hx;
            return Self { n: 2, dim: 1, grad: [[-1.0 / hx, 1.0 / hx, 0.0, 0.0], [0.0; 4]], lap, vol: hx };
        }
        let hy = mesh.h(1);
        let k = [[1.0, -1.0], [-1.0, 1.0]];
        let m = [[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]];
        let mut lap = [[0.0; 4]; 4];
        for a in 0..4 {
            for b in 0..4 {
                let (ax, ay, bx, by) = (a & 1, a >> 1, b & 1, b >> 1);
                lap[a][b] = hy / hx * k[ax][bx] * m[ay][by] + hx / hy * m[ax][bx] * k[ay][by];
            }
        }
        let gx = 0.5 / hx;
        let gy = 0.5 / hy;
        Self { n: 4, dim: 2, grad: [[-gx, gx, -gx, gx], [-gy, -gy, gy, gy]], lap, vol: hx * hy }
    }

    pub fn gradient(&self, local: &[f64]) -> Vec2 {
        let mut g = [0.0; 2];
        for ax in 0..self.dim {
            g[ax] = (0..self.n).map(|a| self.grad[ax][a] * local[a]).sum();
        }
        g
    }

    /// `r * lap + vol * B^T D B`.
    pub fn local_matrix(&self, r: f64, d: &Mat2) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for a in 0..self.n {
            for b in 0..self.n {
                let mut s = 0.0;
                for i in 0..self.dim {
                    for j in 0..self.dim {
                        s += self.grad[i][a] * d[i][j] * self.grad[j][b];
                    }
                }
                out[a][b] = r * self.lap[a][b] + self.vol * s;
            }
        }
        out
    }
}

pub(crate) fn tensor_to_mat2(t: &SymTensor) -> Mat2 {
    if t.dim() == 1 {
        [[t.get(0, 0), 0.0], [0.0, 0.0]]
    } else {
        [[t.get(0, 0), t.get(0, 1)], [t.get(0, 1), t.get(1, 1)]]
    }
}

/// Matrix-free symmetric operator assembled from per-cell 4x4 blocks.
#[derive(Debug, Clone)]
pub(crate) struct CellOperator {
    pub mesh: StructuredMesh,
    nodes: Vec<[usize; 4]>,
    n: usize,
    locals: Vec<[[f64; 4]; 4]>,
    pub diag: Vec<f64>,
}

impl CellOperator {
    pub fn new(mesh: &StructuredMesh, elem: &Element, r: f64, coeff: impl Fn(usize) -> Mat2) -> Self {
        let nodes: Vec<[usize; 4]> = (0..mesh.num_cells())
            .map(|c| {
                let mut a = [0usize; 4];
                for (k, n) in mesh.cell_nodes(c).into_iter().enumerate() {
                    a[k] = n;
                }
                a
            })
            .collect();
        let locals: Vec<_> = (0..mesh.num_cells()).map(|c| elem.local_matrix(r, &coeff(c))).collect();
        let mut diag = vec![0.0; mesh.num_nodes()];
        for (c, loc) in locals.iter().enumerate() {
            for a in 0..elem.n {
                diag[nodes[c][a]] += loc[a][a];
            }
        }
        Self { mesh: mesh.clone(), nodes, n: elem.n, locals, diag }
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (loc, nd) in self.locals.iter().zip(&self.nodes) {
            let mut xl = [0.0; 4];
            for a in 0..self.n {
                xl[a] = x[nd[a]];
            }
            for a in 0..self.n {
                let mut s = 0.0;
                for b in 0..self.n {
                    s += loc[a][b] * xl[b];
                }
                y[nd[a]] += s;
            }
        }
    }

    pub fn precond(&self) -> Vec<f64> {
        self.diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect()
    }

    /// Solves `A x = b` on the complement of constants, result shifted to weighted zero mean.
    pub fn solve(&self, b: &[f64], x0: Option<&[f64]>, opts: SolverOptions) -> Result<(Vec<f64>, CgStats)> {
        let n = b.len();
        let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let project = |v: &mut [f64]| {
            let m = v.iter().sum::<f64>() / n as f64;
            v.iter_mut().for_each(|e| *e -= m);
        };
        let stats = cg(|u, v| self.apply(u, v), b, &self.precond(), project, &mut x, CgOptions {
            tol: opts.cg_tol,
            max_iter: opts.max_iter,
        })
        .or_else(|e| match e {
            // roundoff floor near the requested tolerance is accepted
            Error::NoConvergence { iterations, residual } if residual < 1e-10 => Ok(CgStats { iterations, residual }),
            other => Err(other),
        })?;
        let w = self.mesh.node_weights();
        crate::linalg::remove_weighted_mean(&mut x, &w);
        Ok((x, stats))
    }
}

/// Zero-mean nodal pressure with cached cell gradients and nodal Hessians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureField {
    pub mesh: StructuredMesh,
    pub values: Vec<f64>,
    /// Cell-center gradients.
    pub gradients: Vec<Vec2>,
    /// Nodal finite-difference Hessians `[xx, xy, yy]`.
    pub hessians: Vec<[f64; 3]>,
    /// Relative CG residual of the solve that produced the field.
    pub residual: f64,
}

impl PressureField {
    pub fn from_values(mesh: &StructuredMesh, values: Vec<f64>) -> Self {
        let elem = Element::new(mesh);
        let gradients = (0..mesh.num_cells())
            .map(|c| {
                let local: Vec<f64> = mesh.cell_nodes(c).iter().map(|&n| values[n]).collect();
                elem.gradient(&local)
            })
            .collect();
        let hessians = nodal_hessians(mesh, &values);
        Self { mesh: mesh.clone(), values, gradients, hessians, residual: 0.0 }
    }

    pub fn zeros(mesh: &StructuredMesh) -> Self {
        Self::from_values(mesh, vec![0.0; mesh.num_nodes()])
    }

    /// Nodal interpolant of `f`, shifted to zero mean.
    pub fn from_fn(mesh: &StructuredMesh, f: impl Fn(Vec2) -> f64) -> Self {
        let mut v: Vec<f64> = (0..mesh.num_nodes()).map(|n| f(mesh.node_coord(n))).collect();
        crate::linalg::remove_weighted_mean(&mut v, &mesh.node_weights());
        Self::from_values(mesh, v)
    }

    pub fn cell_gradient(&self, c: usize) -> Vec2 {
        self.gradients[c]
    }

    /// Gradient of the cell containing `x`.
    pub fn cell_gradient_at(&self, x: &Vec2) -> Result<Vec2> {
        Ok(self.gradients[self.mesh.locate_cell(x)?])
    }

    /// Bilinear interpolation of cell-center gradients.
    pub fn gradient_at(&self, x: &Vec2) -> Result<Vec2> {
        let mut g = [0.0; 2];
        for (c, w) in self.mesh.center_stencil(x)? {
            g[0] += w * self.gradients[c][0];
            g[1] += w * self.gradients[c][1];
        }
        Ok(g)
    }

    /// Bilinear interpolation of nodal finite-difference Hessians.
    pub fn hessian_at(&self, x: &Vec2) -> Result<Mat2> {
        let mut h = [0.0; 3];
        for (n, w) in self.mesh.node_stencil(x)? {
            for k in 0..3 {
                h[k] += w * self.hessians[n][k];
            }
        }
        Ok([[h[0], h[1]], [h[1], h[2]]])
    }

    pub fn value_at(&self, x: &Vec2) -> Result<f64> {
        Ok(self.mesh.node_stencil(x)?.iter().map(|&(n, w)| w * self.values[n]).sum())
    }

    /// `∫ |grad p|^2`, exact for the bilinear field.
    pub fn dirichlet_energy(&self) -> f64 {
        let elem = Element::new(&self.mesh);
        let mut s = 0.0;
        for c in 0..self.mesh.num_cells() {
            let nd = self.mesh.cell_nodes(c);
            for a in 0..elem.n {
                for b in 0..elem.n {
                    s += self.values[nd[a]] * elem.lap[a][b] * self.values[nd[b]];
                }
            }
        }
        s
    }

    /// `Σ_c |c| grad p · P_c grad p` with cell-center gradients.
    pub fn permeability_energy(&self, perm: &PermeabilityField) -> f64 {
        let vol = self.mesh.cell_volume();
        let d = self.mesh.dim;
        perm.cells.iter().zip(&self.gradients).map(|(t, g)| vol * t.quad_form(&g[..d])).sum()
    }

    /// `∫ S p` with the consistent load.
    pub fn source_work(&self, s: &SourceField) -> f64 {
        dot(&s.load(&self.mesh), &self.values)
    }

    pub fn max_gradient_norm(&self) -> f64 {
        self.gradients.iter().map(|g| (g[0] * g[0] + g[1] * g[1]).sqrt()).fold(0.0, f64::max)
    }

    pub fn min_gradient_norm(&self) -> f64 {
        self.gradients.iter().map(|g| (g[0] * g[0] + g[1] * g[1]).sqrt()).fold(f64::INFINITY, f64::min)
    }
}

fn fd1(v: &[f64], h: f64) -> Vec<f64> {
    let n = v.len();
    if n < 3 {
        let d = (v[n - 1] - v[0]) / (h * (n - 1) as f64);
        return vec![d; n];
    }
    (0..n)
        .map(|i| {
            if i == 0 {
                (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)
            } else if i == n - 1 {
                (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * h)
            } else {
                (v[i + 1] - v[i - 1]) / (2.0 * h)
            }
        })
        .collect()
}

fn diff_axis(mesh: &StructuredMesh, f: &[f64], axis: usize) -> Vec<f64> {
    let (nx, ny) = mesh.nodes_per_axis();
    let h = mesh.h(axis);
    let mut out = vec![0.0; f.len()];
    if axis == 0 {
        for j in 0..ny {
            let line: Vec<f64> = (0..nx).map(|i| f[i + nx * j]).collect();
            for (i, d) in fd1(&line, h).into_iter().enumerate() {
                out[i + nx * j] = d;
            }
        }
    } else {
        for i in 0..nx {
            let line: Vec<f64> = (0..ny).map(|j| f[i + nx * j]).collect();
            for (j, d) in fd1(&line, h).into_iter().enumerate() {
                out[i + nx * j] = d;
            }
        }
    }
    out
}

fn nodal_hessians(mesh: &StructuredMesh, p: &[f64]) -> Vec<[f64; 3]> {
    let px = diff_axis(mesh, p, 0);
    let pxx = diff_axis(mesh, &px, 0);
    if mesh.dim == 1 {
        return pxx.into_iter().map(|v| [v, 0.0, 0.0]).collect();
    }
    let py = diff_axis(mesh, p, 1);
    let pyy = diff_axis(mesh, &py, 1);
    let pxy = diff_axis(mesh, &px, 1);
    let pyx = diff_axis(mesh, &py, 0);
    (0..p.len()).map(|n| [pxx[n], 0.5 * (pxy[n] + pyx[n]), pyy[n]]).collect()
}

/// Solves the permeability-weighted Poisson problem with default options.
pub fn assemble_and_solve(mesh: &StructuredMesh, perm: &PermeabilityField, r: f64, s: &SourceField) -> Result<PressureField> {
    assemble_and_solve_with(mesh, perm, r, s, SolverOptions::default())
}

pub fn assemble_and_solve_with(
    mesh: &StructuredMesh,
    perm: &PermeabilityField,
    r: f64,
    s: &SourceField,
    opts: SolverOptions,
) -> Result<PressureField> {
    mesh.validate()?;
    if perm.cells.len() != mesh.num_cells() || s.values.len() != mesh.num_cells() {
        return Err(Error::Precondition("field sizes do not match the mesh".into()));
    }
    if !(r >= 0.0) {
        return Err(Error::Precondition("background permeability must be non-negative".into()));
    }
    s.check_zero_mean(mesh)?;
    if s.values.iter().all(|&v| v == 0.0) {
        return Ok(PressureField::zeros(mesh));
    }
    let mut mats = Vec::with_capacity(perm.cells.len());
    for t in &perm.cells {
        if !t.is_finite() {
            return Err(Error::Precondition("permeability contains non-finite values".into()));
        }
        let t = if t.dim() > 1 && t.min_eigenvalue()? < -1e-10 { t.project_psd()? } else { t.clone() };
        mats.push(tensor_to_mat2(&t));
    }
    if r == 0.0 && mats.iter().any(|m| m[0][0] <= 0.0) {
        return Err(Error::Precondition("r = 0 requires a uniformly elliptic permeability".into()));
    }
    let elem = Element::new(mesh);
    let op = CellOperator::new(mesh, &elem, r, |c| mats[c]);
    let (x, stats) = op.solve(&s.load(mesh), None, opts)?;
    let mut p = PressureField::from_values(mesh, x);
    p.residual = stats.residual;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn zero_source_gives_zero() {
        let m = StructuredMesh::unit_square(4);
        let p = assemble_and_solve(&m, &PermeabilityField::zeros(&m), 1.0, &SourceField::zeros(&m)).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_zero_mean_source_rejected() {
        let m = StructuredMesh::unit_square(4);
        let s = SourceField { values: vec![1.0; 16] };
        assert!(matches!(assemble_and_solve(&m, &PermeabilityField::zeros(&m), 1.0, &s), Err(Error::Precondition(_))));
    }

    #[test]
    fn affine_gradient_is_exact() {
        let m = StructuredMesh::unit_square(5);
        let p = PressureField::from_fn(&m, |x| 2.0 * x[0] - 0.5 * x[1]);
        for x in [[0.0, 0.0], [0.33, 0.71], [1.0, 0.5], [0.05, 0.99]] {
            let g = p.gradient_at(&x).unwrap();
            assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12);
            let h = p.hessian_at(&x).unwrap();
            assert!(h.iter().flatten().all(|v| v.abs() < 1e-10));
        }
        assert!(matches!(p.gradient_at(&[1.5, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn cosine_gradient_at_center() {
        let m = StructuredMesh::unit_square(64);
        let s = SourceField::from_fn(&m, |x| PI * PI * (PI * x[0]).cos());
        let p = assemble_and_solve(&m, &PermeabilityField::zeros(&m), 1.0, &s).unwrap();
        let g = p.gradient_at(&[0.5, 0.5]).unwrap();
        assert!((g[0] + PI).abs() < 0.02 * PI, "{g:?}");
        assert!(g[1].abs() < 1e-8);
    }

    #[test]
    fn one_dimensional_solve() {
        let m = StructuredMesh::unit_interval(128);
        let s = SourceField::from_fn(&m, |x| PI * PI * (PI * x[0]).cos());
        let p = assemble_and_solve(&m, &PermeabilityField::zeros(&m), 1.0, &s).unwrap();
        let err = (0..m.num_nodes()).map(|n| (p.values[n] - (PI * m.node_coord(n)[0]).cos()).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }
}
