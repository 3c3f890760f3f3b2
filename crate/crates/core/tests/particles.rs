mod common;

use common::{rng, two_bumps};
use mesoflow::mesh::StructuredMesh;
use mesoflow::particles::{
    convexity_probe, deposit_permeability, energy_total, first_variation_at, first_variation_with_gradient, sample_initial,
    Atom, InitialSpec, ParticleEnsemble,
};
use mesoflow::poisson::PoissonProblem;
use mesoflow::{ModelParams, SymTensor};
use proptest::prelude::*;
use rand::Rng;

fn problem(n: usize) -> PoissonProblem {
    let mesh = StructuredMesh::unit_square(n);
    let s = two_bumps(&mesh, 5.0);
    PoissonProblem::new(mesh, s).unwrap()
}

fn random_ensemble(seed: u64, mesh: &StructuredMesh, n: usize) -> ParticleEnsemble {
    let mut r = rng(seed);
    let raw: Vec<f64> = (0..n).map(|_| 0.1 + r.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let mut atoms: Vec<Atom> = raw
        .iter()
        .map(|w| Atom {
            x: [r.random::<f64>(), r.random::<f64>()],
            c: common::random_unit_psd(&mut r, 2).scaled(2.0 * r.random::<f64>()),
            w: w / total,
        })
        .collect();
    let drift: f64 = 1.0 - atoms.iter().map(|a| a.w).sum::<f64>();
    atoms[0].w += drift;
    ParticleEnsemble::new(mesh.clone(), atoms).unwrap()
}

#[test]
fn invalid_ensembles_rejected() {
    let mesh = StructuredMesh::unit_square(4);
    let atom = |x: [f64; 2], w: f64| Atom { x, c: SymTensor::identity(2), w };
    assert!(ParticleEnsemble::new(mesh.clone(), vec![atom([0.5, 0.5], 0.9)]).is_err());
    assert!(ParticleEnsemble::new(mesh.clone(), vec![atom([0.5, 0.5], 1.5), atom([0.2, 0.2], -0.5)]).is_err());
    assert!(ParticleEnsemble::new(mesh.clone(), vec![atom([1.5, 0.5], 1.0)]).is_err());
    let mut neg = SymTensor::identity(2);
    neg.set(0, 0, -1.0);
    assert!(ParticleEnsemble::new(mesh, vec![Atom { x: [0.5, 0.5], c: neg, w: 1.0 }]).is_err());
}

#[test]
fn zero_conductivity_energy_is_background_only() {
    let pb = problem(16);
    let atoms = vec![Atom { x: [0.5, 0.5], c: SymTensor::zeros(2), w: 1.0 }];
    let mu = ParticleEnsemble::new(pb.mesh.clone(), atoms).unwrap();
    let params = ModelParams::new(2.0, 1.0, 0.1, 2).unwrap();
    let (e, p) = energy_total(&mu, &params, &pb).unwrap();
    assert_eq!(e.kinetic, 0.0);
    assert_eq!(e.metabolic, 0.0);
    assert!((e.total - 0.1 * p.dirichlet_energy()).abs() < 1e-12 * e.total);
}

#[test]
fn first_variation_example() {
    let params = ModelParams::new(2.0, 1.0, 0.1, 2).unwrap();
    let c = SymTensor::diag(&[2.0, 1.0]);
    // -(g · C g) + (nu/gamma)|C|^2 = -(4*2 + 1*1) + 0.5 * 5.
    let v = first_variation_with_gradient(&params, &[2.0, 1.0], &c);
    assert!((v - (-9.0 + 2.5)).abs() < 1e-14);
}

#[test]
fn uniform_conductivity_is_not_critical_for_bumps() {
    let pb = problem(16);
    let mu = sample_initial(&InitialSpec::Monokinetic { n: 40, c0: SymTensor::identity(2).scaled(0.5) }, &pb.mesh, 3).unwrap();
    let params = ModelParams::new(2.0, 1.0, 0.1, 2).unwrap();
    let (_, p) = energy_total(&mu, &params, &pb).unwrap();
    let vals: Vec<f64> = mu.atoms.iter().map(|a| first_variation_at(&params, &p, &a.x, &a.c).unwrap()).collect();
    let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread > 1e-8, "spread {spread}");
}

#[test]
fn sampling_is_deterministic() {
    let mesh = StructuredMesh::unit_square(8);
    let spec = InitialSpec::Uniform { n: 30, scale: 0.5 };
    let a = sample_initial(&spec, &mesh, 9).unwrap();
    let b = sample_initial(&spec, &mesh, 9).unwrap();
    let c = sample_initial(&spec, &mesh, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn jsonl_round_trip() {
    let mesh = StructuredMesh::unit_square(8);
    let mu = random_ensemble(5, &mesh, 12);
    let back = ParticleEnsemble::from_jsonl(mesh, &mu.to_jsonl()).unwrap();
    assert_eq!(mu, back);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn deposition_preserves_first_moment(seed in 0u64..10_000, n in 1usize..40) {
        let mesh = StructuredMesh::unit_square(8);
        let mu = random_ensemble(seed, &mesh, n);
        let perm = deposit_permeability(&mu).unwrap();
        prop_assert!(perm.integral(&mesh).max_abs_diff(&mu.first_moment()) < 1e-12);
    }

    #[test]
    fn energy_identity_holds(seed in 0u64..10_000, gamma in 0.3f64..3.0) {
        let pb = problem(10);
        let mu = random_ensemble(seed, &pb.mesh, 20);
        let params = ModelParams::new(gamma, 1.0, 0.1, 2).unwrap();
        let (e, p) = energy_total(&mu, &params, &pb).unwrap();
        let work = p.source_work(&pb.source);
        prop_assert!((e.kinetic + e.background - work).abs() <= 1e-8 * work.abs().max(1.0));
        prop_assert!((e.total - (e.kinetic + e.metabolic + e.background)).abs() <= 1e-12 * e.total.abs().max(1.0));
    }

    #[test]
    fn first_variation_affine_in_pumping(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let params = ModelParams::new(1.5, 0.7, 0.1, 2).unwrap();
        let g = [r.random::<f64>() * 4.0 - 2.0, r.random::<f64>() * 4.0 - 2.0];
        let c1 = common::random_unit_psd(&mut r, 2);
        let c2 = common::random_unit_psd(&mut r, 2).scaled(3.0);
        let c12 = c1.axpy(1.0, &c2);
        let pump = |c: &SymTensor| first_variation_with_gradient(&params, &g, c) - params.metabolic(c.frobenius_norm());
        prop_assert!((pump(&c12) - pump(&c1) - pump(&c2)).abs() < 1e-12 * (1.0 + pump(&c12).abs()));
    }

    #[test]
    fn energy_convex_along_weight_interpolation(seed in 0u64..10_000) {
        let pb = problem(8);
        let mu0 = random_ensemble(seed, &pb.mesh, 10);
        let mut mu1 = mu0.clone();
        let mut r = rng(seed + 7);
        let raw: Vec<f64> = (0..10).map(|_| r.random::<f64>() + 0.01).collect();
        let total: f64 = raw.iter().sum();
        for (a, w) in mu1.atoms.iter_mut().zip(&raw) {
            a.w = w / total;
        }
        mu1.normalize();
        let params = ModelParams::new(2.0, 1.0, 0.1, 2).unwrap();
        let rep = convexity_probe(&mu0, &mu1, &params, &pb, 11).unwrap();
        let scale = rep.trace.iter().fold(1.0f64, |m, &(_, e)| m.max(e.abs()));
        prop_assert!(rep.min_second_difference >= -1e-10 * scale);
    }

    #[test]
    fn uniform_samples_are_psd_with_unit_mass(seed in 0u64..10_000, n in 1usize..50) {
        let mesh = StructuredMesh::unit_square(8);
        let mu = sample_initial(&InitialSpec::Uniform { n, scale: 0.5 }, &mesh, seed).unwrap();
        prop_assert!((mu.total_weight() - 1.0).abs() < 1e-12);
        for a in &mu.atoms {
            prop_assert!(a.c.min_eigenvalue().unwrap() >= -1e-14);
            prop_assert!(mesh.contains(&a.x));
        }
    }
}
