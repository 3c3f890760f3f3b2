//! Weighted atoms over position and conductivity, their permeability moment and energy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{StructuredMesh, Vec2};
use crate::poisson::{PermeabilityField, PoissonProblem, PressureField};
use crate::tensor::{ModelParams, SymTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub x: Vec2,
    pub c: SymTensor,
    pub w: f64,
}

/// Serialized atom: `{x, C, w}` with `C` the packed upper triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomRecord {
    pub x: Vec<f64>,
    #[serde(rename = "C")]
    pub c: SymTensor,
    pub w: f64,
}

impl Atom {
    pub fn record(&self) -> AtomRecord {
        AtomRecord { x: self.x[..self.c.dim()].to_vec(), c: self.c.clone(), w: self.w }
    }

    pub fn from_record(r: &AtomRecord) -> Result<Self> {
        if r.x.is_empty() || r.x.len() > 2 {
            return Err(Error::Precondition(format!("atom position has {} coordinates", r.x.len())));
        }
        let mut x = [0.0; 2];
        x[..r.x.len()].copy_from_slice(&r.x);
        Ok(Self { x, c: r.c.clone(), w: r.w })
    }
}

fn check_weights<'a>(ws: impl Iterator<Item = &'a f64>) -> Result<()> {
    let mut total = 0.0;
    for (i, &w) in ws.enumerate() {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Precondition(format!("atom {i} has invalid weight {w}")));
        }
        total += w;
    }
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Precondition(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// Empirical probability measure on positions and conductivity tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub mesh: StructuredMesh,
    pub atoms: Vec<Atom>,
}

impl ParticleEnsemble {
    pub fn new(mesh: StructuredMesh, atoms: Vec<Atom>) -> Result<Self> {
        let e = Self { mesh, atoms };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        self.mesh.validate()?;
        if self.atoms.is_empty() {
            return Err(Error::Precondition("ensemble has no atoms".into()));
        }
        check_weights(self.atoms.iter().map(|a| &a.w))?;
        for (i, a) in self.atoms.iter().enumerate() {
            if a.c.dim() != self.mesh.dim {
                return Err(Error::Precondition(format!("atom {i} tensor dimension does not match the mesh")));
            }
            if !self.mesh.contains(&a.x) {
                return Err(Error::Domain(a.x[..self.mesh.dim].to_vec()));
            }
            if !a.c.is_finite() || a.c.min_eigenvalue()? < -1e-10 {
                return Err(Error::Precondition(format!("atom {i} tensor is not positive semidefinite")));
            }
        }
        Ok(())
    }

    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|a| a.w).sum()
    }

    /// Rescales weights to sum to one.
    pub fn normalize(&mut self) {
        let t = self.total_weight();
        self.atoms.iter_mut().for_each(|a| a.w /= t);
    }

    /// `Σ_i w_i C_i`.
    pub fn first_moment(&self) -> SymTensor {
        let mut m = SymTensor::zeros(self.mesh.dim);
        for a in &self.atoms {
            m.add_assign_scaled(a.w, &a.c);
        }
        m
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for a in &self.atoms {
            s.push_str(&serde_json::to_string(&a.record()).expect("atom serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(mesh: StructuredMesh, text: &str) -> Result<Self> {
        let atoms = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Atom::from_record(&serde_json::from_str(l)?))
            .collect::<Result<Vec<_>>>()?;
        Self::new(mesh, atoms)
    }
}

/// Nearest-cell density deposition `P_c = Σ_{x_i ∈ c} w_i C_i / |c|`.
pub fn deposit_permeability(mu: &ParticleEnsemble) -> Result<PermeabilityField> {
    let mesh = &mu.mesh;
    let mut field = PermeabilityField::zeros(mesh);
    let inv = 1.0 / mesh.cell_volume();
    for a in &mu.atoms {
        let c = mesh.locate_cell(&a.x)?;
        field.cells[c].add_assign_scaled(a.w * inv, &a.c);
    }
    Ok(field)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub kinetic: f64,
    pub metabolic: f64,
    pub background: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn new(kinetic: f64, metabolic: f64, background: f64) -> Self {
        Self { kinetic, metabolic, background, total: kinetic + metabolic + background }
    }
}

/// Energy of the ensemble and its pressure.
///
/// The pumping term uses the gradient of the cell holding each atom, which makes
/// `kinetic + background` equal to `∫ S p` for the discrete solution.
pub fn energy_total(mu: &ParticleEnsemble, params: &ModelParams, problem: &PoissonProblem) -> Result<(EnergyBreakdown, PressureField)> {
    let perm = deposit_permeability(mu)?;
    let p = problem.solve(&perm, params.r)?;
    Ok((energy_with_pressure(mu, params, &p)?, p))
}

pub fn energy_with_pressure(mu: &ParticleEnsemble, params: &ModelParams, p: &PressureField) -> Result<EnergyBreakdown> {
    let d = mu.mesh.dim;
    let mut kinetic = 0.0;
    let mut metabolic = 0.0;
    for a in &mu.atoms {
        let g = p.cell_gradient_at(&a.x)?;
        kinetic += a.w * a.c.quad_form(&g[..d]);
        metabolic += a.w * params.metabolic(a.c.frobenius_norm());
    }
    Ok(EnergyBreakdown::new(kinetic, metabolic, params.r * p.dirichlet_energy()))
}

/// `-grad p · C grad p + (ν/γ)|C|^γ` at `x`.
pub fn first_variation_at(params: &ModelParams, p: &PressureField, x: &Vec2, c: &SymTensor) -> Result<f64> {
    let g = p.cell_gradient_at(x)?;
    Ok(first_variation_with_gradient(params, &g, c))
}

pub fn first_variation_with_gradient(params: &ModelParams, g: &Vec2, c: &SymTensor) -> f64 {
    -c.quad_form(&g[..c.dim()]) + params.metabolic(c.frobenius_norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub trace: Vec<(f64, f64)>,
    pub min_second_difference: f64,
}

/// Energy along `(1-t) mu0 + t mu1` for atoms shared by both ensembles.
pub fn convexity_probe(
    mu0: &ParticleEnsemble,
    mu1: &ParticleEnsemble,
    params: &ModelParams,
    problem: &PoissonProblem,
    n_t: usize,
) -> Result<ConvexityReport> {
    if mu0.atoms.len() != mu1.atoms.len()
        || mu0.atoms.iter().zip(&mu1.atoms).any(|(a, b)| a.x != b.x || a.c != b.c)
    {
        return Err(Error::Precondition("ensembles do not share atom sites".into()));
    }
    if n_t < 3 {
        return Err(Error::Precondition("convexity probe needs at least 3 points".into()));
    }
    let mut trace = Vec::with_capacity(n_t);
    for k in 0..n_t {
        let t = k as f64 / (n_t - 1) as f64;
        let mut mix = mu0.clone();
        for (a, b) in mix.atoms.iter_mut().zip(&mu1.atoms) {
            a.w = (1.0 - t) * a.w + t * b.w;
        }
        let (e, _) = energy_total(&mix, params, problem)?;
        trace.push((t, e.total));
    }
    let min_second_difference = trace
        .windows(3)
        .map(|w| w[0].1 - 2.0 * w[1].1 + w[2].1)
        .fold(f64::INFINITY, f64::min);
    Ok(ConvexityReport { trace, min_second_difference })
}

/// Initial-measure descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// Uniform positions, `C = scale * G G^T / d` with Gaussian `G`.
    Uniform { n: usize, scale: f64 },
    /// Uniform positions, identical tensor `c0`.
    Monokinetic { n: usize, c0: SymTensor },
    /// Explicit atom list.
    Atoms { atoms: Vec<AtomRecord> },
}

fn uniform_point(rng: &mut ChaCha8Rng, mesh: &StructuredMesh) -> Vec2 {
    let mut x = [0.0; 2];
    for a in 0..mesh.dim {
        let (lo, hi) = (mesh.extent[a][0], mesh.extent[a][1]);
        x[a] = lo + (hi - lo) * rng.random::<f64>();
    }
    x
}

/// Deterministic ensemble from a descriptor and seed.
pub fn sample_initial(spec: &InitialSpec, mesh: &StructuredMesh, seed: u64) -> Result<ParticleEnsemble> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = mesh.dim;
    let atoms = match spec {
        InitialSpec::Uniform { n, scale } => {
            if *n == 0 || !(*scale >= 0.0) {
                return Err(Error::Precondition("uniform spec needs n > 0 and scale >= 0".into()));
            }
            (0..*n)
                .map(|_| {
                    let x = uniform_point(&mut rng, mesh);
                    let g: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
                    let mut c = SymTensor::zeros(d);
                    for i in 0..d {
                        for j in i..d {
                            let v: f64 = (0..d).map(|k| g[i * d + k] * g[j * d + k]).sum();
                            c.set(i, j, scale * v / d as f64);
                        }
                    }
                    Atom { x, c, w: 1.0 / *n as f64 }
                })
                .collect()
        }
        InitialSpec::Monokinetic { n, c0 } => {
            if *n == 0 || c0.dim() != d {
                return Err(Error::Precondition("monokinetic spec needs n > 0 and a tensor matching the mesh".into()));
            }
            (0..*n).map(|_| Atom { x: uniform_point(&mut rng, mesh), c: c0.clone(), w: 1.0 / *n as f64 }).collect()
        }
        InitialSpec::Atoms { atoms } => atoms.iter().map(Atom::from_record).collect::<Result<Vec<_>>>()?,
    };
    ParticleEnsemble::new(mesh.clone(), atoms)
}

/// Atom of the scalar model: conductivity `C ≥ 0` along the unit direction `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarAtom {
    pub x: Vec2,
    pub theta: Vec2,
    #[serde(rename = "C")]
    pub c: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarEnsemble {
    pub mesh: StructuredMesh,
    pub atoms: Vec<ScalarAtom>,
}

impl ScalarEnsemble {
    pub fn new(mesh: StructuredMesh, atoms: Vec<ScalarAtom>) -> Result<Self> {
        let e = Self { mesh, atoms };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(Error::Precondition("ensemble has no atoms".into()));
        }
        check_weights(self.atoms.iter().map(|a| &a.w))?;
        for (i, a) in self.atoms.iter().enumerate() {
            let n = (a.theta[0] * a.theta[0] + a.theta[1] * a.theta[1]).sqrt();
            if (n - 1.0).abs() > 1e-12 || a.theta[0] < 0.0 {
                return Err(Error::Precondition(format!("atom {i} direction is not a unit vector with non-negative first component")));
            }
            if !(a.c >= 0.0) || !a.c.is_finite() {
                return Err(Error::Precondition(format!("atom {i} has negative conductivity")));
            }
            if !self.mesh.contains(&a.x) {
                return Err(Error::Domain(a.x[..self.mesh.dim].to_vec()));
            }
        }
        Ok(())
    }

    /// Uniform positions and directions, conductivities uniform on `[0, scale]`.
    pub fn sample(mesh: &StructuredMesh, n: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let atoms = (0..n)
            .map(|_| {
                let x = uniform_point(&mut rng, mesh);
                let theta = if mesh.dim == 1 {
                    [1.0, 0.0]
                } else {
                    let a = std::f64::consts::PI * (rng.random::<f64>() - 0.5);
                    [a.cos().abs(), a.sin()]
                };
                ScalarAtom { x, theta, c: scale * rng.random::<f64>(), w: 1.0 / n as f64 }
            })
            .collect();
        Self::new(mesh.clone(), atoms)
    }
}

/// Deposition of `C θ ⊗ θ` per atom.
pub fn deposit_permeability_scalar(mu: &ScalarEnsemble) -> Result<PermeabilityField> {
    let mesh = &mu.mesh;
    let mut field = PermeabilityField::zeros(mesh);
    let inv = 1.0 / mesh.cell_volume();
    for a in &mu.atoms {
        let c = mesh.locate_cell(&a.x)?;
        field.cells[c].add_assign_scaled(a.w * a.c * inv, &SymTensor::outer(&a.theta[..mesh.dim]));
    }
    Ok(field)
}

pub fn scalar_energy_with_pressure(mu: &ScalarEnsemble, params: &ModelParams, p: &PressureField) -> Result<EnergyBreakdown> {
    let mut kinetic = 0.0;
    let mut metabolic = 0.0;
    for a in &mu.atoms {
        let g = p.cell_gradient_at(&a.x)?;
        let s = a.theta[0] * g[0] + a.theta[1] * g[1];
        kinetic += a.w * a.c * s * s;
        metabolic += a.w * params.metabolic(a.c);
    }
    Ok(EnergyBreakdown::new(kinetic, metabolic, params.r * p.dirichlet_energy()))
}

pub fn scalar_energy_total(mu: &ScalarEnsemble, params: &ModelParams, problem: &PoissonProblem) -> Result<(EnergyBreakdown, PressureField)> {
    let perm = deposit_permeability_scalar(mu)?;
    let p = problem.solve(&perm, params.r)?;
    Ok((scalar_energy_with_pressure(mu, params, &p)?, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_atom_deposit() {
        let m = StructuredMesh::unit_interval(2);
        let mu = ParticleEnsemble::new(m.clone(), vec![Atom { x: [0.25, 0.0], c: SymTensor::identity(1), w: 1.0 }]).unwrap();
        let f = deposit_permeability(&mu).unwrap();
        assert_eq!(f.cells[0].get(0, 0), 2.0);
        assert_eq!(f.cells[1].get(0, 0), 0.0);
    }

    #[test]
    fn one_atom_per_cell() {
        let m = StructuredMesh::new(vec![[0.0, 2.0], [0.0, 1.0]], vec![2, 2]).unwrap();
        let atoms = (0..4).map(|c| Atom { x: m.cell_center(c), c: SymTensor::identity(2), w: 0.25 }).collect();
        let f = deposit_permeability(&ParticleEnsemble::new(m.clone(), atoms).unwrap()).unwrap();
        for t in &f.cells {
            assert!((t.get(0, 0) - 0.5).abs() < 1e-15 && t.get(0, 1) == 0.0);
        }
    }

    #[test]
    fn first_variation_hand_value() {
        let m = StructuredMesh::unit_square(4);
        let p = PressureField::from_fn(&m, |x| x[0]);
        let params = ModelParams::new(2.0, 1.0, 1.0, 2).unwrap();
        let c = SymTensor::outer(&[1.0, 0.0]);
        let v = first_variation_at(&params, &p, &[0.4, 0.4], &c).unwrap();
        assert!((v + 0.5).abs() < 1e-12);
        assert_eq!(first_variation_at(&params, &p, &[0.4, 0.4], &SymTensor::zeros(2)).unwrap(), 0.0);
    }

    #[test]
    fn monokinetic_zero_spec() {
        let m = StructuredMesh::unit_square(4);
        let mu = sample_initial(&InitialSpec::Monokinetic { n: 8, c0: SymTensor::zeros(2) }, &m, 3).unwrap();
        assert!(mu.atoms.iter().all(|a| a.c == SymTensor::zeros(2) && a.w == 0.125));
    }

    #[test]
    fn jsonl_round_trip() {
        let m = StructuredMesh::unit_square(4);
        let mu = sample_initial(&InitialSpec::Uniform { n: 5, scale: 0.7 }, &m, 11).unwrap();
        let back = ParticleEnsemble::from_jsonl(m, &mu.to_jsonl()).unwrap();
        assert_eq!(mu, back);
    }

    #[test]
    fn spec_json_shape() {
        let s: InitialSpec = serde_json::from_str(r#"{"kind":"monokinetic","n":3,"c0":[1,0,1]}"#).unwrap();
        assert_eq!(s, InitialSpec::Monokinetic { n: 3, c0: SymTensor::identity(2) });
    }
}
