//! Reaction-type flow on atom weights, its distance, and the stationary branch algebra.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{run_flow, Evaluation, FlowModel, FlowRun, Schedule};
use crate::mesh::Vec2;
use crate::particles::{deposit_permeability, energy_with_pressure, first_variation_with_gradient, Atom, ParticleEnsemble};
use crate::poisson::{PoissonProblem, PressureField};
use crate::tensor::{ModelParams, SymTensor};

/// First variation at every atom.
pub fn first_variations(mu: &ParticleEnsemble, p: &PressureField, params: &ModelParams) -> Result<Vec<f64>> {
    mu.atoms
        .par_iter()
        .map(|a| Ok(first_variation_with_gradient(params, &p.cell_gradient_at(&a.x)?, &a.c)))
        .collect()
}

fn weighted_mean(mu: &ParticleEnsemble, phi: &[f64]) -> f64 {
    mu.atoms.iter().zip(phi).map(|(a, f)| a.w * f).sum()
}

/// `w_i ← w_i (1 - dt (φ_i - φ̄))`, renormalized; positions and tensors unchanged.
pub fn fr_step(mu: &ParticleEnsemble, p: &PressureField, params: &ModelParams, dt: f64) -> Result<ParticleEnsemble> {
    let phi = first_variations(mu, p, params)?;
    let mean = weighted_mean(mu, &phi);
    let worst = mu
        .atoms
        .iter()
        .zip(&phi)
        .filter(|(a, _)| a.w > 0.0)
        .map(|(_, f)| f - mean)
        .fold(0.0f64, f64::max);
    if dt * worst >= 1.0 {
        return Err(Error::StepRejected { reason: "weight factor would cross zero".into(), suggested_dt: 0.5 / worst });
    }
    let mut next = mu.clone();
    for (a, f) in next.atoms.iter_mut().zip(&phi) {
        a.w = (a.w * (1.0 - dt * (f - mean))).max(0.0);
    }
    next.normalize();
    Ok(next)
}

/// Weight-only flow with fixed positions and tensors.
#[derive(Debug, Clone)]
pub struct FisherRaoFlow {
    pub params: ModelParams,
    pub problem: PoissonProblem,
}

impl FlowModel for FisherRaoFlow {
    type State = ParticleEnsemble;

    fn evaluate(&self, mu: &ParticleEnsemble) -> Result<Evaluation> {
        let p = self.problem.solve(&deposit_permeability(mu)?, self.params.r)?;
        let energy = energy_with_pressure(mu, &self.params, &p)?;
        let phi = first_variations(mu, &p, &self.params)?;
        let mean = weighted_mean(mu, &phi);
        let var: f64 = mu.atoms.iter().zip(&phi).map(|(a, f)| a.w * (f - mean) * (f - mean)).sum();
        let max_residual = mu
            .atoms
            .iter()
            .zip(&phi)
            .filter(|(a, _)| a.w > 0.0)
            .map(|(_, f)| (f - mean).abs())
            .fold(0.0, f64::max);
        Ok(Evaluation { energy, pressure: p, max_residual, dissipation: -var })
    }

    fn advance(&self, mu: &ParticleEnsemble, ev: &Evaluation, dt: f64) -> Result<ParticleEnsemble> {
        fr_step(mu, &ev.pressure, &self.params, dt)
    }
}

pub fn fr_run(initial: ParticleEnsemble, params: &ModelParams, problem: &PoissonProblem, schedule: &Schedule) -> Result<FlowRun<ParticleEnsemble>> {
    run_flow(&FisherRaoFlow { params: *params, problem: problem.clone() }, initial, schedule)
}

/// `2 arccos(Σ sqrt(a_i b_i))`.
pub fn fr_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Precondition("weight vectors differ in length".into()));
    }
    if a.iter().chain(b).any(|v| !(*v >= 0.0)) {
        return Err(Error::Precondition("weights must be non-negative".into()));
    }
    let bc: f64 = a.iter().zip(b).map(|(x, y)| (x * y).sqrt()).sum();
    Ok(2.0 * bc.clamp(0.0, 1.0).acos())
}

/// `(ν/γ) C^γ - w C - K` and its derivative in `C`.
fn branch_eq(c: f64, w: f64, k: f64, params: &ModelParams) -> (f64, f64) {
    let (g, nu) = (params.gamma, params.nu);
    if c <= 0.0 {
        let d = if g > 1.0 { -w } else if g == 1.0 { nu - w } else { f64::INFINITY };
        return (-k, d);
    }
    (nu / g * c.powf(g) - w * c - k, nu * c.powf(g - 1.0) - w)
}

/// Residual of the branch equation scaled by its largest term.
pub fn branch_residual(c: f64, w: f64, k: f64, params: &ModelParams) -> f64 {
    let (f, _) = branch_eq(c, w, k, params);
    let scale = 1f64.max(params.nu / params.gamma * c.powf(params.gamma)).max(w * c).max(k.abs());
    f.abs() / scale
}

/// Root of the branch equation in a sign-changing bracket.
fn bracketed_root(w: f64, k: f64, params: &ModelParams, mut lo: f64, mut hi: f64) -> f64 {
    let f_lo = branch_eq(lo, w, k, params).0;
    if f_lo == 0.0 {
        return lo;
    }
    if branch_eq(hi, w, k, params).0 == 0.0 {
        return hi;
    }
    let neg_lo = f_lo < 0.0;
    let mut x = 0.5 * (lo + hi);
    for _ in 0..400 {
        let (f, df) = branch_eq(x, w, k, params);
        if f == 0.0 {
            return x;
        }
        if (f < 0.0) == neg_lo {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - f / df;
        let next = if df.is_finite() && df != 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        let converged = (next - x).abs() <= 1e-16 * x.abs() || hi - lo <= 1e-16 * hi.abs();
        x = next;
        if converged {
            break;
        }
    }
    x
}

/// Smallest point beyond `start` where the branch equation has sign `positive`.
fn expand(w: f64, k: f64, params: &ModelParams, start: f64, positive: bool) -> f64 {
    let mut hi = start.max(1e-300);
    for _ in 0..4000 {
        let f = branch_eq(hi, w, k, params).0;
        if (f > 0.0) == positive && f != 0.0 {
            return hi;
        }
        hi *= 2.0;
    }
    hi
}

/// `w_min,K` for `γ > 1, K < 0`.
pub fn w_min(k: f64, params: &ModelParams) -> f64 {
    let g = params.gamma;
    (g * k.abs() * params.nu.powf(1.0 / (g - 1.0)) / (1.0 - g).abs()).powf((g - 1.0) / g)
}

/// `w_max,K` for `γ < 1, K > 0`.
pub fn w_max(k: f64, params: &ModelParams) -> f64 {
    let g = params.gamma;
    ((1.0 - g) / (g * k * params.nu.powf(1.0 / (g - 1.0)))).powf((1.0 - g) / g)
}

/// Input of [`branch_solve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchQuery {
    pub w: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub params: ModelParams,
}

/// Non-negative solutions of `(ν/γ) C^γ - w C - K = 0`, ascending.
pub fn branch_solve(q: &BranchQuery) -> Vec<f64> {
    let BranchQuery { w, k, params } = *q;
    let (g, nu) = (params.gamma, params.nu);
    if !(w >= 0.0) || !w.is_finite() || !k.is_finite() {
        return Vec::new();
    }
    if nu == 0.0 {
        return if w > 0.0 {
            let c = -k / w;
            if c >= 0.0 { vec![c] } else { Vec::new() }
        } else if k == 0.0 {
            vec![0.0]
        } else {
            Vec::new()
        };
    }
    if g == 1.0 {
        return if k > 0.0 {
            if w < nu { vec![k / (nu - w)] } else { Vec::new() }
        } else if k == 0.0 {
            vec![0.0]
        } else if w > nu {
            vec![k.abs() / (w - nu)]
        } else {
            Vec::new()
        };
    }
    // stationary point of the left-hand side and its nonzero root for K = 0
    let c_crit = if w > 0.0 { (w / nu).powf(1.0 / (g - 1.0)) } else { 0.0 };
    let c_zero = if w > 0.0 { (g * w / nu).powf(1.0 / (g - 1.0)) } else { 0.0 };
    if g > 1.0 {
        if k > 0.0 {
            let start = c_crit.max((g * k / nu).powf(1.0 / g));
            let hi = expand(w, k, &params, start, true);
            vec![bracketed_root(w, k, &params, c_crit, hi)]
        } else if k == 0.0 {
            if w > 0.0 { vec![0.0, c_zero] } else { vec![0.0] }
        } else {
            let wm = w_min(k, &params);
            if w < wm {
                Vec::new()
            } else if w == wm || branch_eq(c_crit, w, k, &params).0 >= 0.0 {
                if w == wm { vec![c_crit] } else { vec![c_crit, c_crit] }
            } else {
                vec![bracketed_root(w, k, &params, 0.0, c_crit), bracketed_root(w, k, &params, c_crit, c_zero)]
            }
        }
    } else if k > 0.0 {
        if w == 0.0 {
            return vec![(g * k / nu).powf(1.0 / g)];
        }
        let wm = w_max(k, &params);
        if w > wm {
            Vec::new()
        } else if w == wm || branch_eq(c_crit, w, k, &params).0 <= 0.0 {
            if w == wm { vec![c_crit] } else { vec![c_crit, c_crit] }
        } else {
            vec![bracketed_root(w, k, &params, 0.0, c_crit), bracketed_root(w, k, &params, c_crit, c_zero)]
        }
    } else if k == 0.0 {
        if w > 0.0 { vec![0.0, c_zero] } else { vec![0.0] }
    } else if w > 0.0 {
        let hi = expand(w, k, &params, c_zero.max(1.0), false);
        vec![bracketed_root(w, k, &params, 0.0, hi)]
    } else {
        Vec::new()
    }
}

/// Interval of admissible level constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeInterval {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl RangeInterval {
    pub fn contains(&self, k: f64) -> bool {
        let above = if self.lo_closed { k >= self.lo } else { k > self.lo };
        let below = if self.hi_closed { k <= self.hi } else { k < self.hi };
        above && below
    }
}

/// Range of the first variation for `α ≤ |grad p| ≤ β`.
pub fn fr_range(alpha: f64, beta: f64, params: &ModelParams) -> Result<RangeInterval> {
    if !(alpha >= 0.0) || !(beta >= alpha) {
        return Err(Error::Precondition(format!("need 0 <= alpha <= beta, got {alpha}, {beta}")));
    }
    let (g, nu) = (params.gamma, params.nu);
    let inf = f64::INFINITY;
    Ok(if g > 1.0 {
        let lo = -((g - 1.0) / g) * beta.powf(2.0 * g / (g - 1.0)) / nu.powf(1.0 / (g - 1.0));
        RangeInterval { lo, hi: inf, lo_closed: true, hi_closed: false }
    } else if g < 1.0 {
        let hi = if alpha == 0.0 {
            inf
        } else {
            ((1.0 - g) / g) / (nu.powf(1.0 / (g - 1.0)) * alpha.powf(2.0 * g / (1.0 - g)))
        };
        RangeInterval { lo: -inf, hi, lo_closed: false, hi_closed: hi.is_finite() }
    } else if beta * beta > nu {
        RangeInterval { lo: -inf, hi: inf, lo_closed: false, hi_closed: false }
    } else {
        RangeInterval { lo: 0.0, hi: inf, lo_closed: true, hi_closed: false }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BranchPolicy {
    #[default]
    Upper,
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecAtom {
    pub x: Vec<f64>,
    /// Unit-norm PSD direction tensor.
    #[serde(rename = "A")]
    pub a: SymTensor,
    pub w: f64,
}

/// Base measure, level constant and branch policy of a stationary measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationaryMeasureSpec {
    #[serde(rename = "K")]
    pub k: f64,
    pub atoms: Vec<SpecAtom>,
    #[serde(default)]
    pub branch: BranchPolicy,
}

impl StationaryMeasureSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(Error::Precondition("stationary spec has no atoms".into()));
        }
        let total: f64 = self.atoms.iter().map(|a| a.w).sum();
        if (total - 1.0).abs() > 1e-12 || self.atoms.iter().any(|a| !(a.w >= 0.0)) {
            return Err(Error::Precondition(format!("spec weights sum to {total}, expected 1")));
        }
        for (i, a) in self.atoms.iter().enumerate() {
            if a.a.dim() != dim || a.x.len() != dim {
                return Err(Error::Precondition(format!("spec atom {i} does not match dimension {dim}")));
            }
            if (a.a.frobenius_norm() - 1.0).abs() > 1e-12 {
                return Err(Error::Precondition(format!("spec atom {i} tensor does not have unit norm")));
            }
            if a.a.min_eigenvalue()? < -1e-10 {
                return Err(Error::Precondition(format!("spec atom {i} tensor is not PSD")));
            }
        }
        Ok(())
    }

    pub fn position(&self, i: usize) -> Vec2 {
        let mut x = [0.0; 2];
        x[..self.atoms[i].x.len()].copy_from_slice(&self.atoms[i].x);
        x
    }
}

fn select(roots: &[f64], policy: BranchPolicy) -> Option<f64> {
    match policy {
        BranchPolicy::Upper => roots.last().copied(),
        BranchPolicy::Lower => roots.first().copied(),
    }
}

/// `C_j = u(grad p · A_j grad p) A_j` on the selected branch.
pub fn fr_stationary_measure(spec: &StationaryMeasureSpec, p: &PressureField, params: &ModelParams) -> Result<ParticleEnsemble> {
    let mesh = &p.mesh;
    spec.validate(mesh.dim)?;
    let range = fr_range(p.min_gradient_norm(), p.max_gradient_norm(), params)?;
    if !range.contains(spec.k) {
        return Err(Error::Precondition(format!("K = {} lies outside the range of the first variation", spec.k)));
    }
    let d = mesh.dim;
    let atoms = (0..spec.atoms.len())
        .map(|i| {
            let x = spec.position(i);
            let g = p.cell_gradient_at(&x)?;
            let a = &spec.atoms[i].a;
            let v = a.quad_form(&g[..d]).max(0.0);
            let roots = branch_solve(&BranchQuery { w: v, k: spec.k, params: *params });
            let u = select(&roots, spec.branch)
                .ok_or_else(|| Error::NoBranch { atom: i, reason: format!("no root for w = {v:e}, K = {:e}", spec.k) })?;
            Ok(Atom { x, c: a.scaled(u), w: spec.atoms[i].w })
        })
        .collect::<Result<Vec<_>>>()?;
    ParticleEnsemble::new(mesh.clone(), atoms)
}

/// Branch `u(v)` with derivative and primitive `U(v) = ∫_0^v u`, for `γ > 1`, `K ≥ 0`.
#[derive(Debug, Clone, Copy)]
pub struct BranchPotential {
    pub params: ModelParams,
    pub k: f64,
    pub policy: BranchPolicy,
    u0: f64,
}

impl BranchPotential {
    pub fn new(params: ModelParams, k: f64, policy: BranchPolicy) -> Result<Self> {
        if !(params.gamma > 1.0) || !(k >= 0.0) || !(params.nu > 0.0) {
            return Err(Error::Precondition("branch potential needs gamma > 1, nu > 0 and K >= 0".into()));
        }
        let mut bp = Self { params, k, policy, u0: 0.0 };
        bp.u0 = bp.u(0.0)?;
        Ok(bp)
    }

    pub fn u(&self, v: f64) -> Result<f64> {
        let roots = branch_solve(&BranchQuery { w: v.max(0.0), k: self.k, params: self.params });
        select(&roots, self.policy).ok_or_else(|| Error::NoBranch { atom: 0, reason: format!("no root at v = {v:e}") })
    }

    /// `u'(v) = u / (ν u^(γ-1) - v)`; zero where the branch is identically zero or `v = 0` on a degenerate start.
    pub fn du(&self, v: f64, u: f64) -> f64 {
        if u == 0.0 || v <= 0.0 && self.k == 0.0 {
            return if self.k == 0.0 && u > 0.0 && self.params.gamma == 2.0 { 2.0 / self.params.nu } else { 0.0 };
        }
        let den = self.params.nu * u.powf(self.params.gamma - 1.0) - v;
        if den > 0.0 {
            u / den
        } else {
            0.0
        }
    }

    /// `U(v) = v u - [(ν/γ²)(u^γ - u0^γ) - K ln(u/u0)]`.
    pub fn potential(&self, v: f64, u: f64) -> f64 {
        if u == 0.0 {
            return 0.0;
        }
        let g = self.params.gamma;
        let mut inner = self.params.nu / (g * g) * (u.powf(g) - self.u0.powf(g));
        if self.k > 0.0 {
            inner -= self.k * (u / self.u0).ln();
        }
        v * u - inner
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(gamma: f64, nu: f64) -> ModelParams {
        ModelParams::new(gamma, nu, 1.0, 2).unwrap()
    }

    fn solve(w: f64, k: f64, gamma: f64, nu: f64) -> Vec<f64> {
        branch_solve(&BranchQuery { w, k, params: params(gamma, nu) })
    }

    #[test]
    fn branch_examples() {
        assert_eq!(solve(0.5, 1.0, 1.0, 1.0), vec![2.0]);
        assert_eq!(solve(1.0, 0.0, 2.0, 1.0), vec![0.0, 2.0]);
        let r = solve(0.0, 0.5, 2.0, 1.0);
        assert_eq!(r.len(), 1);
        assert!((r[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn range_examples() {
        let r = fr_range(0.0, 1.0, &params(2.0, 1.0)).unwrap();
        assert_eq!((r.lo, r.lo_closed), (-0.5, true));
        assert!(r.hi.is_infinite());
        let r = fr_range(0.0, 0.5, &params(1.0, 1.0)).unwrap();
        assert_eq!(r.lo, 0.0);
        let r = fr_range(0.0, 2.0, &params(1.0, 1.0)).unwrap();
        assert!(r.lo.is_infinite() && r.contains(-10.0));
        assert!(fr_range(1.0, 0.5, &params(2.0, 1.0)).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(fr_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert!((fr_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - std::f64::consts::PI).abs() < 1e-15);
        let d = fr_distance(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((d - 0.5236).abs() < 1e-4 && (d - std::f64::consts::PI / 6.0).abs() < 1e-12);
        assert!(fr_distance(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn potential_matches_quadrature() {
        for (g, k) in [(2.0, 0.0), (1.5, 0.3), (3.0, 1.0), (2.0, 0.5)] {
            let bp = BranchPotential::new(params(g, 0.8), k, BranchPolicy::Upper).unwrap();
            let v = 1.7;
            let n = 2000;
            let h = v / n as f64;
            let mut simpson = 0.0;
            for i in 0..=n {
                let wgt = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                simpson += wgt * bp.u(i as f64 * h).unwrap();
            }
            simpson *= h / 3.0;
            let u = bp.u(v).unwrap();
            assert!((bp.potential(v, u) - simpson).abs() < 1e-7 * simpson.max(1.0), "gamma {g} K {k}");
            let e = 1e-6;
            let fd = (bp.u(v + e).unwrap() - bp.u(v - e).unwrap()) / (2.0 * e);
            assert!((bp.du(v, u) - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
