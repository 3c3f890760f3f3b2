mod common;

use common::{rng, two_bumps};
use mesoflow::mesh::StructuredMesh;
use mesoflow::poisson::{assemble_and_solve, PermeabilityField, PressureField, SourceField};
use mesoflow::SymTensor;
use proptest::prelude::*;
use rand::Rng;
use std::f64::consts::PI;

fn cosine_source(mesh: &StructuredMesh) -> SourceField {
    SourceField::from_fn(mesh, |x| PI * PI * (PI * x[0]).cos())
}

fn max_err(p: &PressureField, f: impl Fn([f64; 2]) -> f64) -> f64 {
    let exact = PressureField::from_fn(&p.mesh, f);
    p.values.iter().zip(&exact.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn random_perm(seed: u64, mesh: &StructuredMesh) -> PermeabilityField {
    let mut r = rng(seed);
    let cells = (0..mesh.num_cells()).map(|_| common::random_unit_psd(&mut r, 2).scaled(3.0 * r.random::<f64>())).collect();
    PermeabilityField { cells }
}

fn random_source(seed: u64, mesh: &StructuredMesh) -> SourceField {
    let mut r = rng(seed ^ 0xabcd);
    let centers: Vec<([f64; 2], f64)> =
        (0..4).map(|_| ([r.random::<f64>(), r.random::<f64>()], 4.0 * r.random::<f64>() - 2.0)).collect();
    SourceField::from_fn(mesh, |x| {
        centers
            .iter()
            .map(|(c, a)| a * (-((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / 0.02).exp())
            .sum()
    })
}

#[test]
fn cosine_background_only() {
    let mesh = StructuredMesh::unit_square(64);
    let p = assemble_and_solve(&mesh, &PermeabilityField::zeros(&mesh), 1.0, &cosine_source(&mesh)).unwrap();
    assert!(max_err(&p, |x| (PI * x[0]).cos()) < 2e-3);
}

#[test]
fn cosine_with_identity_permeability_halves() {
    let mesh = StructuredMesh::unit_square(64);
    let perm = PermeabilityField::uniform(&mesh, SymTensor::identity(2));
    let p = assemble_and_solve(&mesh, &perm, 1.0, &cosine_source(&mesh)).unwrap();
    assert!(max_err(&p, |x| 0.5 * (PI * x[0]).cos()) < 1e-3);
}

#[test]
fn cosine_error_decreases_quadratically() {
    let errs: Vec<f64> = [16, 32, 64]
        .iter()
        .map(|&n| {
            let mesh = StructuredMesh::unit_square(n);
            let p = assemble_and_solve(&mesh, &PermeabilityField::zeros(&mesh), 1.0, &cosine_source(&mesh)).unwrap();
            max_err(&p, |x| (PI * x[0]).cos())
        })
        .collect();
    assert!(errs[0] / errs[1] > 3.0 && errs[1] / errs[2] > 3.0, "{errs:?}");
}

#[test]
fn zero_source_gives_zero_pressure() {
    let mesh = StructuredMesh::unit_square(8);
    let p = assemble_and_solve(&mesh, &PermeabilityField::zeros(&mesh), 0.5, &SourceField::zeros(&mesh)).unwrap();
    assert!(p.values.iter().all(|&v| v == 0.0));
}

#[test]
fn nonzero_mean_source_rejected() {
    let mesh = StructuredMesh::unit_square(4);
    assert!(SourceField::from_values(&mesh, vec![1.0; 16]).is_err());
}

#[test]
fn gradient_examples() {
    let mesh = StructuredMesh::unit_square(16);
    let affine = PressureField::from_fn(&mesh, |x| 2.0 * x[0] - 3.0 * x[1]);
    for x in [[0.5, 0.5], [0.13, 0.77], [0.01, 0.99]] {
        let g = affine.gradient_at(&x).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] + 3.0).abs() < 1e-12);
    }
    let constant = PressureField::from_fn(&mesh, |_| 4.0);
    assert_eq!(constant.gradient_at(&[0.3, 0.4]).unwrap(), [0.0, 0.0]);
    let cos = PressureField::from_fn(&StructuredMesh::unit_square(64), |x| (PI * x[0]).cos());
    let g = cos.gradient_at(&[0.5, 0.5]).unwrap();
    assert!((g[0] + PI).abs() < 0.02 * PI && g[1].abs() < 1e-12);
}

#[test]
fn quadratic_hessian_exact_inside() {
    let mesh = StructuredMesh::unit_square(16);
    let p = PressureField::from_fn(&mesh, |x| x[0] * x[0] + 0.5 * x[0] * x[1] - x[1] * x[1]);
    let h = p.hessian_at(&[0.41, 0.57]).unwrap();
    assert!((h[0][0] - 2.0).abs() < 1e-9 && (h[0][1] - 0.5).abs() < 1e-9 && (h[1][1] + 2.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn energy_identity_and_bound(seed in 0u64..10_000, r in 0.05f64..2.0) {
        let mesh = StructuredMesh::unit_square(12);
        let perm = random_perm(seed, &mesh);
        let s = random_source(seed, &mesh);
        let p = assemble_and_solve(&mesh, &perm, r, &s).unwrap();
        let lhs = p.permeability_energy(&perm) + r * p.dirichlet_energy();
        let work = p.source_work(&s);
        prop_assert!((lhs - work).abs() <= 1e-8 * work.abs().max(1.0));
        let grad_l2 = p.dirichlet_energy().sqrt();
        let sl2 = s.l2_norm(&mesh);
        // Poincare constant of the unit square is 1/pi.
        prop_assert!(grad_l2 <= sl2 / (PI * r) * (1.0 + 1e-6) + 1e-12);
    }

    #[test]
    fn pressure_has_zero_mean(seed in 0u64..10_000) {
        let mesh = StructuredMesh::unit_square(10);
        let p = assemble_and_solve(&mesh, &random_perm(seed, &mesh), 0.3, &random_source(seed, &mesh)).unwrap();
        let mean: f64 = p.values.iter().zip(mesh.node_weights()).map(|(v, w)| v * w).sum();
        prop_assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn solution_operator_is_self_adjoint(seed in 0u64..10_000) {
        let mesh = StructuredMesh::unit_square(10);
        let perm = random_perm(seed, &mesh);
        let s1 = random_source(seed, &mesh);
        let s2 = random_source(seed + 1, &mesh);
        let p1 = assemble_and_solve(&mesh, &perm, 0.2, &s1).unwrap();
        let p2 = assemble_and_solve(&mesh, &perm, 0.2, &s2).unwrap();
        let a = p2.source_work(&s1);
        let b = p1.source_work(&s2);
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-3));
    }

    #[test]
    fn solve_is_linear_in_source(seed in 0u64..10_000, k in -3.0f64..3.0) {
        let mesh = StructuredMesh::unit_square(10);
        let perm = random_perm(seed, &mesh);
        let s = two_bumps(&mesh, 5.0);
        let p = assemble_and_solve(&mesh, &perm, 0.2, &s).unwrap();
        let pk = assemble_and_solve(&mesh, &perm, 0.2, &s.scaled(k)).unwrap();
        let scale = p.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in p.values.iter().zip(&pk.values) {
            prop_assert!((k * a - b).abs() <= 1e-8 * scale.max(1.0));
        }
    }
}
