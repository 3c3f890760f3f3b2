//! Explicit integrators for the Wasserstein-type flows and a backtracking driver.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{StructuredMesh, Vec2};
use crate::particles::{
    deposit_permeability, deposit_permeability_scalar, energy_with_pressure, scalar_energy_with_pressure, EnergyBreakdown,
    ParticleEnsemble, ScalarEnsemble,
};
use crate::poisson::{PermeabilityField, PoissonProblem, PressureField};
use crate::tensor::{power_map, ModelParams, SymTensor, ZERO_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub dt: f64,
    pub steps: usize,
    /// Snapshot every this many accepted steps (0: initial state only).
    #[serde(default)]
    pub output_every: usize,
    /// Accepted energy increase relative to `max(1, |E|)`.
    #[serde(default = "default_dissipation_tol")]
    pub dissipation_tol: f64,
}

fn default_dissipation_tol() -> f64 {
    1e-9
}

impl Default for Schedule {
    fn default() -> Self {
        Self { dt: 1e-3, steps: 10_000, output_every: 0, dissipation_tol: default_dissipation_tol() }
    }
}

impl Schedule {
    pub fn new(dt: f64, steps: usize) -> Self {
        Self { dt, steps, ..Self::default() }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            errs.push("dt must be positive".to_string());
        }
        if !(self.dissipation_tol >= 0.0) {
            errs.push("dissipation_tol must be non-negative".to_string());
        }
        errs
    }
}

/// One row of the energy log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    pub step: usize,
    pub t: f64,
    pub energy: f64,
    pub kinetic: f64,
    pub metabolic: f64,
    pub background: f64,
    pub max_residual: f64,
    /// Estimate of `dE/dt` at this state.
    pub dissipation: f64,
}

/// Energy, pressure and diagnostics of one state.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub energy: EnergyBreakdown,
    pub pressure: PressureField,
    pub max_residual: f64,
    pub dissipation: f64,
}

/// A gradient flow advanced by explicit steps from a frozen pressure.
pub trait FlowModel: Sync {
    type State: Clone + Send;

    fn evaluate(&self, state: &Self::State) -> Result<Evaluation>;

    /// Proposes the next state; may reject with [`Error::StepRejected`].
    fn advance(&self, state: &Self::State, eval: &Evaluation, dt: f64) -> Result<Self::State>;

    /// Fallback step used once plain backtracking stalls; `None` when the model has none.
    fn advance_restricted(&self, _state: &Self::State, _eval: &Evaluation, _dt: f64) -> Option<Result<Self::State>> {
        None
    }
}

/// Step shrink factor after which the driver switches to the restricted step.
pub const RESTRICT_AFTER: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Snapshot<S> {
    pub step: usize,
    pub t: f64,
    pub state: S,
}

#[derive(Debug, Clone)]
pub struct FlowRun<S> {
    pub final_state: S,
    pub final_pressure: PressureField,
    pub snapshots: Vec<Snapshot<S>>,
    pub log: Vec<EnergyRecord>,
    /// Trial steps discarded by backtracking.
    pub rejections: usize,
}

fn record(step: usize, t: f64, ev: &Evaluation) -> EnergyRecord {
    EnergyRecord {
        step,
        t,
        energy: ev.energy.total,
        kinetic: ev.energy.kinetic,
        metabolic: ev.energy.metabolic,
        background: ev.energy.background,
        max_residual: ev.max_residual,
        dissipation: ev.dissipation,
    }
}

/// Smallest step accepted by the backtracking driver.
pub const MIN_DT: f64 = 1e-12;

/// Runs `schedule.steps` accepted steps, halving `dt` whenever the energy rises.
pub fn run_flow<M: FlowModel>(model: &M, initial: M::State, schedule: &Schedule) -> Result<FlowRun<M::State>> {
    let errs = schedule.violations();
    if !errs.is_empty() {
        return Err(Error::Precondition(errs.join("; ")));
    }
    let mut state = initial;
    let mut eval = model.evaluate(&state)?;
    let mut t = 0.0;
    let mut log = vec![record(0, t, &eval)];
    let mut snapshots = vec![Snapshot { step: 0, t, state: state.clone() }];
    let mut rejections = 0;
    for step in 1..=schedule.steps {
        let mut h = schedule.dt;
        let mut restricted = false;
        loop {
            if !restricted && h < RESTRICT_AFTER * schedule.dt && model.advance_restricted(&state, &eval, h).is_some() {
                restricted = true;
                h = schedule.dt;
            }
            if h < MIN_DT {
                return Err(Error::DtUnderflow { step, dt: h });
            }
            let trial = if restricted {
                model.advance_restricted(&state, &eval, h).expect("restricted step available")
            } else {
                model.advance(&state, &eval, h)
            };
            match trial {
                Ok(next) => {
                    let ev = model.evaluate(&next)?;
                    if !ev.energy.total.is_finite() {
                        return Err(Error::Integration { step, reason: "non-finite energy".into() });
                    }
                    let slack = schedule.dissipation_tol * eval.energy.total.abs().max(1.0);
                    if ev.energy.total <= eval.energy.total + slack {
                        state = next;
                        eval = ev;
                        t += h;
                        break;
                    }
                    rejections += 1;
                    h *= 0.5;
                }
                Err(Error::StepRejected { suggested_dt, .. }) => {
                    rejections += 1;
                    h = (0.5 * h).min(suggested_dt);
                }
                Err(e) => return Err(e),
            }
        }
        log.push(record(step, t, &eval));
        if schedule.output_every > 0 && step % schedule.output_every == 0 {
            snapshots.push(Snapshot { step, t, state: state.clone() });
        }
    }
    Ok(FlowRun { final_state: state, final_pressure: eval.pressure, snapshots, log, rejections })
}

/// Equilibrium prefactor `k(s)` of `C = k(|grad p|) grad p ⊗ grad p` (`γ ≠ 1`).
pub fn equilibrium_factor(grad_norm: f64, params: &ModelParams) -> f64 {
    if grad_norm == 0.0 {
        return 0.0;
    }
    (1.0 / (params.nu * grad_norm.powf(2.0 * (params.gamma - 2.0)))).powf(1.0 / (params.gamma - 1.0))
}

/// `grad p ⊗ grad p - ν|C|^(γ-2) C`.
pub fn tensor_residual(g: &Vec2, c: &SymTensor, params: &ModelParams) -> SymTensor {
    SymTensor::outer(&g[..c.dim()]).axpy(-1.0, &power_map(c, params))
}

fn diag_factor(c: &SymTensor, params: &ModelParams) -> f64 {
    let n = c.frobenius_norm();
    if n < ZERO_FLOOR {
        0.0
    } else {
        params.nu * (params.gamma - 1.0) * n.powf(params.gamma - 2.0)
    }
}

/// Particle ensemble plus the per-atom density diagnostic carried along characteristics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub ensemble: ParticleEnsemble,
    pub density: Vec<f64>,
}

impl ParticleState {
    pub fn new(ensemble: ParticleEnsemble) -> Self {
        let n = ensemble.atoms.len();
        Self { ensemble, density: vec![1.0; n] }
    }
}

fn c_update(c: &SymTensor, g: &Vec2, params: &ModelParams, dt: f64) -> Result<SymTensor> {
    let next = c.axpy(dt, &tensor_residual(g, c, params)).project_psd()?;
    if !next.is_finite() {
        return Err(Error::Integration { step: 0, reason: "non-finite tensor update".into() });
    }
    Ok(next)
}

/// `C_i ← psd(C_i + dt (g⊗g - ν|C_i|^(γ-2) C_i))` with positions fixed.
pub fn step_reduced(state: &ParticleState, p: &PressureField, params: &ModelParams, dt: f64) -> Result<ParticleState> {
    let updated: Vec<(SymTensor, f64)> = state
        .ensemble
        .atoms
        .par_iter()
        .zip(&state.density)
        .map(|(a, &rho)| {
            let g = p.cell_gradient_at(&a.x)?;
            let factor = (dt * diag_factor(&a.c, params)).exp();
            Ok((c_update(&a.c, &g, params, dt)?, rho * factor))
        })
        .collect::<Result<_>>()?;
    let mut next = state.clone();
    for ((a, d), (c, rho)) in next.ensemble.atoms.iter_mut().zip(next.density.iter_mut()).zip(updated) {
        a.c = c;
        *d = rho;
    }
    Ok(next)
}

/// Drift `2 D²p C grad p` at `x`, with interpolated gradient and Hessian.
pub fn full_drift(p: &PressureField, x: &Vec2, c: &SymTensor) -> Result<Vec2> {
    let d = c.dim();
    let g = p.gradient_at(x)?;
    let h = p.hessian_at(x)?;
    let cg = c.apply(&g[..d]);
    let mut v = [0.0; 2];
    for i in 0..d {
        v[i] = 2.0 * (0..d).map(|j| h[i][j] * cg[j]).sum::<f64>();
    }
    Ok(v)
}

/// Finite-difference Laplacian of `x ↦ grad p(x) · C grad p(x)`.
fn pumping_laplacian(p: &PressureField, x: &Vec2, c: &SymTensor) -> Result<f64> {
    let mesh = &p.mesh;
    let d = mesh.dim;
    let psi = |y: &Vec2| -> Result<f64> {
        let g = p.gradient_at(&mesh.clamp(y))?;
        Ok(c.quad_form(&g[..d]))
    };
    let centre = psi(x)?;
    let mut lap = 0.0;
    for a in 0..d {
        let h = mesh.h(a);
        let mut plus = *x;
        let mut minus = *x;
        plus[a] += h;
        minus[a] -= h;
        lap += (psi(&plus)? - 2.0 * centre + psi(&minus)?) / (h * h);
    }
    Ok(lap)
}

/// Moves atoms along `2 D²p C grad p` (clamped to the domain) and updates tensors.
pub fn step_full(state: &ParticleState, p: &PressureField, params: &ModelParams, dt: f64) -> Result<ParticleState> {
    full_update(state, p, params, dt, false)
}

/// As [`step_full`], but atoms whose move would change their cell stay put.
pub fn step_full_confined(state: &ParticleState, p: &PressureField, params: &ModelParams, dt: f64) -> Result<ParticleState> {
    full_update(state, p, params, dt, true)
}

fn full_update(state: &ParticleState, p: &PressureField, params: &ModelParams, dt: f64, confine: bool) -> Result<ParticleState> {
    let mesh = &state.ensemble.mesh;
    let updated: Vec<(Vec2, SymTensor, f64)> = state
        .ensemble
        .atoms
        .par_iter()
        .zip(&state.density)
        .map(|(a, &rho)| {
            let v = full_drift(p, &a.x, &a.c)?;
            let mut x = mesh.clamp(&[a.x[0] + dt * v[0], a.x[1] + dt * v[1]]);
            if confine && mesh.locate_cell(&x)? != mesh.locate_cell(&a.x)? {
                x = a.x;
            }
            let g = p.cell_gradient_at(&a.x)?;
            let rate = pumping_laplacian(p, &a.x, &a.c)? - diag_factor(&a.c, params);
            Ok((x, c_update(&a.c, &g, params, dt)?, rho * (-dt * rate).exp()))
        })
        .collect::<Result<_>>()?;
    let mut next = state.clone();
    for ((a, d), (x, c, rho)) in next.ensemble.atoms.iter_mut().zip(next.density.iter_mut()).zip(updated) {
        a.x = x;
        a.c = c;
        *d = rho;
    }
    Ok(next)
}

fn particle_evaluation(
    mu: &ParticleEnsemble,
    params: &ModelParams,
    problem: &PoissonProblem,
    with_drift: bool,
) -> Result<Evaluation> {
    let perm = deposit_permeability(mu)?;
    let p = problem.solve(&perm, params.r)?;
    let energy = energy_with_pressure(mu, params, &p)?;
    let mut max_residual: f64 = 0.0;
    let mut dissipation = 0.0;
    for a in &mu.atoms {
        let g = p.cell_gradient_at(&a.x)?;
        let r = tensor_residual(&g, &a.c, params);
        let n2 = r.frobenius_inner(&r);
        max_residual = max_residual.max(n2.sqrt());
        dissipation -= a.w * n2;
        if with_drift {
            let v = full_drift(&p, &a.x, &a.c)?;
            dissipation -= a.w * (v[0] * v[0] + v[1] * v[1]);
        }
    }
    Ok(Evaluation { energy, pressure: p, max_residual, dissipation })
}

/// Tensor-only flow with atoms fixed in space.
#[derive(Debug, Clone)]
pub struct ReducedFlow {
    pub params: ModelParams,
    pub problem: PoissonProblem,
}

impl FlowModel for ReducedFlow {
    type State = ParticleState;

    fn evaluate(&self, s: &ParticleState) -> Result<Evaluation> {
        particle_evaluation(&s.ensemble, &self.params, &self.problem, false)
    }

    fn advance(&self, s: &ParticleState, ev: &Evaluation, dt: f64) -> Result<ParticleState> {
        step_reduced(s, &ev.pressure, &self.params, dt)
    }
}

/// Flow transporting atoms in space and in tensor space.
#[derive(Debug, Clone)]
pub struct FullFlow {
    pub params: ModelParams,
    pub problem: PoissonProblem,
}

impl FlowModel for FullFlow {
    type State = ParticleState;

    fn evaluate(&self, s: &ParticleState) -> Result<Evaluation> {
        particle_evaluation(&s.ensemble, &self.params, &self.problem, true)
    }

    fn advance(&self, s: &ParticleState, ev: &Evaluation, dt: f64) -> Result<ParticleState> {
        step_full(s, &ev.pressure, &self.params, dt)
    }

    fn advance_restricted(&self, s: &ParticleState, ev: &Evaluation, dt: f64) -> Option<Result<ParticleState>> {
        Some(step_full_confined(s, &ev.pressure, &self.params, dt))
    }
}

/// Density and single conductivity tensor per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonokineticState {
    pub mesh: StructuredMesh,
    pub rho: Vec<f64>,
    pub chat: Vec<SymTensor>,
}

impl MonokineticState {
    pub fn uniform(mesh: &StructuredMesh, c0: SymTensor) -> Result<Self> {
        let n = mesh.num_cells();
        Self::new(mesh.clone(), vec![1.0 / mesh.domain_volume(); n], vec![c0; n])
    }

    pub fn new(mesh: StructuredMesh, rho: Vec<f64>, chat: Vec<SymTensor>) -> Result<Self> {
        let s = Self { mesh, rho, chat };
        s.validate()?;
        Ok(s)
    }

    pub fn mass(&self) -> f64 {
        self.rho.iter().sum::<f64>() * self.mesh.cell_volume()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mesh.num_cells();
        if self.rho.len() != n || self.chat.len() != n {
            return Err(Error::Precondition("monokinetic fields do not match the mesh".into()));
        }
        if self.rho.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::Precondition("density must be non-negative".into()));
        }
        if (self.mass() - 1.0).abs() > 1e-12 {
            return Err(Error::Precondition(format!("density has mass {}, expected 1", self.mass())));
        }
        for c in &self.chat {
            if c.dim() != self.mesh.dim || c.min_eigenvalue()? < -1e-10 {
                return Err(Error::Precondition("cell tensors must be PSD and match the mesh".into()));
            }
        }
        Ok(())
    }

    pub fn permeability(&self) -> PermeabilityField {
        PermeabilityField { cells: self.chat.iter().zip(&self.rho).map(|(c, r)| c.scaled(*r)).collect() }
    }
}

fn monokinetic_potential(g: &Vec2, c: &SymTensor, params: &ModelParams) -> f64 {
    c.quad_form(&g[..c.dim()]) - params.metabolic(c.frobenius_norm())
}

/// Face velocities `(ψ_b - ψ_a)/h` for the `axis`-neighbour pairs `(a, b)`.
fn face_velocities(mesh: &StructuredMesh, psi: &[f64]) -> Vec<(usize, usize, f64, f64)> {
    let mut faces = Vec::new();
    let (nx, ny) = (mesh.nx(), mesh.ny());
    for j in 0..ny {
        for i in 0..nx {
            let a = mesh.cell_index(i, j);
            if i + 1 < nx {
                let b = mesh.cell_index(i + 1, j);
                faces.push((a, b, (psi[b] - psi[a]) / mesh.h(0), mesh.h(0)));
            }
            if mesh.dim == 2 && j + 1 < ny {
                let b = mesh.cell_index(i, j + 1);
                faces.push((a, b, (psi[b] - psi[a]) / mesh.h(1), mesh.h(1)));
            }
        }
    }
    faces
}

/// Cell-wise tensor update and conservative upwind transport of the density.
pub fn step_monokinetic(state: &MonokineticState, p: &PressureField, params: &ModelParams, dt: f64) -> Result<MonokineticState> {
    let mesh = &state.mesh;
    let n = mesh.num_cells();
    let psi: Vec<f64> = (0..n).map(|c| monokinetic_potential(&p.gradients[c], &state.chat[c], params)).collect();
    let faces = face_velocities(mesh, &psi);
    let mut outflow = vec![0.0; n];
    for &(a, b, v, h) in &faces {
        if v > 0.0 {
            outflow[a] += v / h;
        } else {
            outflow[b] += -v / h;
        }
    }
    let cfl = outflow.iter().fold(0.0f64, |m, &o| m.max(o));
    if cfl * dt > 1.0 {
        return Err(Error::StepRejected { reason: format!("CFL number {:.3} exceeds 1", cfl * dt), suggested_dt: 0.9 / cfl });
    }
    let mut rho = state.rho.clone();
    for &(a, b, v, h) in &faces {
        let flux = if v > 0.0 { v * state.rho[a] } else { v * state.rho[b] };
        rho[a] -= dt * flux / h;
        rho[b] += dt * flux / h;
    }
    rho.iter_mut().for_each(|r| *r = r.max(0.0));
    let mass = rho.iter().sum::<f64>() * mesh.cell_volume();
    rho.iter_mut().for_each(|r| *r /= mass);
    let chat = (0..n)
        .into_par_iter()
        .map(|c| {
            let ch = &state.chat[c];
            let r = tensor_residual(&p.gradients[c], ch, params);
            ch.axpy(dt * state.rho[c], &r).project_psd()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MonokineticState { mesh: mesh.clone(), rho, chat })
}

#[derive(Debug, Clone)]
pub struct MonokineticFlow {
    pub params: ModelParams,
    pub problem: PoissonProblem,
}

impl FlowModel for MonokineticFlow {
    type State = MonokineticState;

    fn evaluate(&self, s: &MonokineticState) -> Result<Evaluation> {
        let p = self.problem.solve(&s.permeability(), self.params.r)?;
        let vol = s.mesh.cell_volume();
        let mut kinetic = 0.0;
        let mut metabolic = 0.0;
        let mut max_residual: f64 = 0.0;
        let mut dissipation = 0.0;
        let psi: Vec<f64> = (0..s.rho.len()).map(|c| monokinetic_potential(&p.gradients[c], &s.chat[c], &self.params)).collect();
        for c in 0..s.rho.len() {
            let g = &p.gradients[c];
            kinetic += vol * s.rho[c] * s.chat[c].quad_form(&g[..s.mesh.dim]);
            metabolic += vol * s.rho[c] * self.params.metabolic(s.chat[c].frobenius_norm());
            if s.rho[c] > 0.0 {
                let r = tensor_residual(g, &s.chat[c], &self.params);
                let n2 = r.frobenius_inner(&r);
                max_residual = max_residual.max(n2.sqrt());
                dissipation -= vol * s.rho[c] * s.rho[c] * n2;
            }
        }
        for (a, b, v, _) in face_velocities(&s.mesh, &psi) {
            dissipation -= vol * 0.5 * (s.rho[a] + s.rho[b]) * v * v;
        }
        let energy = EnergyBreakdown::new(kinetic, metabolic, self.params.r * p.dirichlet_energy());
        Ok(Evaluation { energy, pressure: p, max_residual, dissipation })
    }

    fn advance(&self, s: &MonokineticState, ev: &Evaluation, dt: f64) -> Result<MonokineticState> {
        step_monokinetic(s, &ev.pressure, &self.params, dt)
    }
}

fn scalar_decay(c: f64, params: &ModelParams) -> f64 {
    if c < ZERO_FLOOR {
        0.0
    } else {
        params.nu * c.powf(params.gamma - 1.0)
    }
}

/// `C_i ← max(0, C_i + dt(|θ_i·grad p|² - ν C_i^(γ-1)))`.
pub fn step_scalar(state: &ScalarEnsemble, p: &PressureField, params: &ModelParams, dt: f64) -> Result<ScalarEnsemble> {
    let cs: Vec<f64> = state
        .atoms
        .par_iter()
        .map(|a| {
            let g = p.cell_gradient_at(&a.x)?;
            let s = a.theta[0] * g[0] + a.theta[1] * g[1];
            let c = (a.c + dt * (s * s - scalar_decay(a.c, params))).max(0.0);
            if !c.is_finite() {
                return Err(Error::Integration { step: 0, reason: "non-finite conductivity".into() });
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut next = state.clone();
    next.atoms.iter_mut().zip(cs).for_each(|(a, c)| a.c = c);
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct ScalarFlow {
    pub params: ModelParams,
    pub problem: PoissonProblem,
}

impl FlowModel for ScalarFlow {
    type State = ScalarEnsemble;

    fn evaluate(&self, s: &ScalarEnsemble) -> Result<Evaluation> {
        let perm = deposit_permeability_scalar(s)?;
        let p = self.problem.solve(&perm, self.params.r)?;
        let energy = scalar_energy_with_pressure(s, &self.params, &p)?;
        let mut max_residual: f64 = 0.0;
        let mut dissipation = 0.0;
        for a in &s.atoms {
            let g = p.cell_gradient_at(&a.x)?;
            let t = a.theta[0] * g[0] + a.theta[1] * g[1];
            let r = t * t - scalar_decay(a.c, &self.params);
            if a.c > 0.0 || r > 0.0 {
                max_residual = max_residual.max(r.abs());
                dissipation -= a.w * r * r;
            }
        }
        Ok(Evaluation { energy, pressure: p, max_residual, dissipation })
    }

    fn advance(&self, s: &ScalarEnsemble, ev: &Evaluation, dt: f64) -> Result<ScalarEnsemble> {
        step_scalar(s, &ev.pressure, &self.params, dt)
    }
}
