mod common;

use common::{random_spec, rng, two_bumps};
use mesoflow::mesh::StructuredMesh;
use mesoflow::poisson::{assemble_and_solve, PermeabilityField, PressureField, SourceField};
use mesoflow::stationary::{
    constrained_minimize_gamma1, fr_functional_minimize, fr_functional_value, plap_el_residual, plap_functional, plap_minimize,
    scalar_stationary_minimize, verify_wass_equilibrium, AngularDensity, DensityField,
};
use mesoflow::ModelParams;
use proptest::prelude::*;
use std::f64::consts::PI;

/// Profile of `p'` for the one-dimensional equilibrium recipe: rises to 1, flat on `[0.3, 0.6]`, falls to 0.
fn slope(x: f64) -> (f64, f64) {
    if x < 0.3 {
        ((PI * x / 0.6).sin().powi(2), PI / 0.6 * (2.0 * PI * x / 0.6).sin())
    } else if x <= 0.6 {
        (1.0, 0.0)
    } else {
        ((PI * (x - 0.6) / 0.8).cos().powi(2), -PI / 0.8 * (2.0 * PI * (x - 0.6) / 0.8).sin())
    }
}

/// Density supported on `[0.3, 0.6]`, vanishing smoothly at both ends.
fn bump_density(x: f64) -> (f64, f64) {
    if (0.3..=0.6).contains(&x) {
        ((PI * (x - 0.3) / 0.3).sin().powi(2), PI / 0.3 * (2.0 * PI * (x - 0.3) / 0.3).sin())
    } else {
        (0.0, 0.0)
    }
}

fn recipe(n: usize, r: f64, nu: f64) -> (StructuredMesh, DensityField, SourceField) {
    let mesh = StructuredMesh::unit_interval(n);
    // Flux (r + ρ p'^2/ν) p' for γ = 2; the source is minus its derivative.
    let s = SourceField::from_fn(&mesh, |x| {
        let ((f, df), (q, dq)) = (slope(x[0]), bump_density(x[0]));
        -(r * df + (dq * f.powi(3) + 3.0 * q * f * f * df) / nu)
    });
    let rho = DensityField::from_fn(&mesh, |x| bump_density(x[0]).0);
    (mesh, rho, s)
}

fn cos_source(mesh: &StructuredMesh, amp: f64) -> SourceField {
    SourceField::from_fn(mesh, |x| amp * ((PI * x[0]).cos() + 0.5 * (PI * x[1]).cos()))
}

#[test]
fn constructed_equilibrium_is_recovered() {
    let params = ModelParams::new(2.0, 1.0, 0.1, 1).unwrap();
    let spreads: Vec<f64> = [200, 400]
        .iter()
        .map(|&n| {
            let (mesh, rho, s) = recipe(n, 0.1, 1.0);
            let (p, rep) = plap_minimize(&mesh, &rho, &s, &params).unwrap();
            assert!(rep.el_residual < 1e-8);
            let wass = verify_wass_equilibrium(&p, &rho, 5e-3).unwrap();
            assert_eq!(wass.components.len(), 1);
            assert!((wass.components[0].omega - 1.0).abs() < 5e-3);
            if n == 400 {
                assert!(wass.is_equilibrium, "{:?}", wass.components);
            }
            wass.components[0].spread
        })
        .collect();
    assert!(spreads[0] / spreads[1] > 3.0, "{spreads:?}");
}

#[test]
fn generic_source_is_not_an_equilibrium() {
    let params = ModelParams::new(2.0, 1.0, 0.1, 1).unwrap();
    let (mesh, rho, _) = recipe(200, 0.1, 1.0);
    let s = SourceField::from_fn(&mesh, |x| (PI * x[0]).cos() + (3.0 * PI * x[0]).cos());
    let (p, _) = plap_minimize(&mesh, &rho, &s, &params).unwrap();
    assert!(!verify_wass_equilibrium(&p, &rho, 5e-3).unwrap().is_equilibrium);
}

#[test]
fn plap_beats_simple_competitors() {
    let mesh = StructuredMesh::unit_square(12);
    let s = two_bumps(&mesh, 5.0);
    let params = ModelParams::new(1.5, 1.0, 0.1, 2).unwrap();
    let rho = DensityField::from_fn(&mesh, |x| 0.5 + x[0]);
    let (p, rep) = plap_minimize(&mesh, &rho, &s, &params).unwrap();
    let j = plap_functional(&p, &rho, &s, &params).unwrap();
    assert!((rep.final_value - j).abs() <= 1e-12 * j.abs());
    let lin = assemble_and_solve(&mesh, &PermeabilityField::zeros(&mesh), 0.1, &s).unwrap();
    assert!(j <= plap_functional(&PressureField::zeros(&mesh), &rho, &s, &params).unwrap());
    assert!(j <= plap_functional(&lin, &rho, &s, &params).unwrap());
    assert!(j < 0.0);
    assert!(plap_el_residual(&p, &rho, &s, &params).unwrap() < 1e-8);
}

#[test]
fn minimum_decreases_under_refinement() {
    let params = ModelParams::new(1.5, 1.0, 0.1, 2).unwrap();
    let vals: Vec<f64> = [8, 16, 32]
        .iter()
        .map(|&n| {
            let mesh = StructuredMesh::unit_square(n);
            let s = two_bumps(&mesh, 5.0);
            let d = DensityField::uniform(&mesh, 1.0);
            plap_minimize(&mesh, &d, &s, &params).unwrap().1.final_value
        })
        .collect();
    assert!(vals[1] < vals[0] && vals[2] < vals[1], "{vals:?}");
    assert!((vals[0] - vals[1]) / (vals[1] - vals[2]) > 3.0, "{vals:?}");
}

#[test]
fn gamma_gt1_solvers_reject_other_exponents() {
    let mesh = StructuredMesh::unit_square(4);
    let s = cos_source(&mesh, 1.0);
    let bad = ModelParams::new(0.5, 1.0, 0.1, 2).unwrap();
    assert!(plap_minimize(&mesh, &DensityField::uniform(&mesh, 1.0), &s, &bad).is_err());
    assert!(scalar_stationary_minimize(&mesh, &AngularDensity::uniform(&mesh, vec![0.0], 1.0), &s, &bad).is_err());
    let one = ModelParams::new(1.0, 1.0, 0.0, 2).unwrap();
    assert!(constrained_minimize_gamma1(&mesh, &DensityField::uniform(&mesh, 1.0), &s, &one).is_err());
}

#[test]
fn gamma1_small_source_is_unconstrained() {
    let mesh = StructuredMesh::unit_square(10);
    let s = cos_source(&mesh, 0.05);
    let params = ModelParams::new(1.0, 1.0, 1.0, 2).unwrap();
    let (p, m, _) = constrained_minimize_gamma1(&mesh, &DensityField::uniform(&mesh, 1.0), &s, &params).unwrap();
    let lin = assemble_and_solve(&mesh, &PermeabilityField::zeros(&mesh), 1.0, &s).unwrap();
    let err = p.values.iter().zip(&lin.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "{err}");
    assert!(m.a2.iter().all(|&a| a == 0.0));
}

#[test]
fn gamma1_large_source_saturates_the_constraint() {
    let mesh = StructuredMesh::unit_square(10);
    let s = cos_source(&mesh, 5.0);
    let params = ModelParams::new(1.0, 0.5, 1.0, 2).unwrap();
    let rho = DensityField::uniform(&mesh, 2.0);
    let (p, m, rep) = constrained_minimize_gamma1(&mesh, &rho, &s, &params).unwrap();
    let cmax = rep.constraint_max.unwrap();
    assert!(cmax <= 0.5 * (1.0 + 1e-8) && cmax >= 0.5 * (1.0 - 1e-6), "{cmax}");
    let scale = m.weighted.iter().cloned().fold(1.0, f64::max);
    for (c, g) in p.gradients.iter().enumerate() {
        let slack = 0.5 - (g[0] * g[0] + g[1] * g[1]);
        assert!(m.weighted[c] >= 0.0 && m.a2[c] >= 0.0);
        assert!((m.weighted[c] * slack).abs() <= 1e-8 * scale);
        assert!((m.a2[c] * 2.0 - m.weighted[c]).abs() <= 1e-12 * scale);
    }
    assert!(m.a2.iter().any(|&a| a > 0.0));
}

#[test]
fn scalar_model_with_one_direction_matches_one_dimensional_plap() {
    let params2 = ModelParams::new(2.0, 1.0, 0.2, 2).unwrap();
    let params1 = ModelParams::new(2.0, 1.0, 0.2, 1).unwrap();
    let n = 32;
    let strip = StructuredMesh::new(vec![[0.0, 1.0], [0.0, 0.25]], vec![n, 2]).unwrap();
    let s2 = SourceField::from_fn(&strip, |x| 3.0 * (PI * x[0]).cos());
    let (p2, _) = scalar_stationary_minimize(&strip, &AngularDensity::uniform(&strip, vec![0.0], 0.7), &s2, &params2).unwrap();
    let line = StructuredMesh::unit_interval(n);
    let s1 = SourceField::from_fn(&line, |x| 3.0 * (PI * x[0]).cos());
    let (p1, _) = plap_minimize(&line, &DensityField::uniform(&line, 0.7), &s1, &params1).unwrap();
    for c in 0..strip.num_cells() {
        let (i, _) = strip.cell_ij(c);
        assert!((p2.gradients[c][0] - p1.gradients[i][0]).abs() < 1e-8);
        assert!(p2.gradients[c][1].abs() < 1e-8);
    }
}

#[test]
fn fr_functional_zero_source() {
    let mesh = StructuredMesh::unit_square(8);
    let params = ModelParams::new(2.0, 1.0, 0.5, 2).unwrap();
    let spec = random_spec(&mut rng(1), 6, 0.3);
    let (p, _) = fr_functional_minimize(&mesh, &spec, &SourceField::zeros(&mesh), &params).unwrap();
    assert!(p.values.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn fr_functional_large_background_is_nearly_linear() {
    let mesh = StructuredMesh::unit_square(8);
    let s = cos_source(&mesh, 1.0);
    let r = 1e3;
    let params = ModelParams::new(2.0, 1.0, r, 2).unwrap();
    let spec = random_spec(&mut rng(2), 6, 0.3);
    let (p, rep) = fr_functional_minimize(&mesh, &spec, &s, &params).unwrap();
    let lin = assemble_and_solve(&mesh, &PermeabilityField::zeros(&mesh), r, &s).unwrap();
    let scale = lin.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = p.values.iter().zip(&lin.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-2 * scale, "{err} vs {scale}");
    assert!(rep.final_value <= fr_functional_value(&lin, &spec, &s, &params).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn plap_flux_identity(seed in 0u64..10_000, gamma in 1.2f64..4.0, nu in 0.3f64..3.0, amp in 0.5f64..5.0) {
        let mesh = StructuredMesh::unit_square(8);
        let s = cos_source(&mesh, amp);
        let params = ModelParams::new(gamma, nu, 0.3, 2).unwrap();
        let mut r = rng(seed);
        let vals: Vec<f64> = (0..mesh.num_cells()).map(|_| rand::Rng::random::<f64>(&mut r) * 2.0).collect();
        let rho = DensityField { values: vals };
        let (p, rep) = plap_minimize(&mesh, &rho, &s, &params).unwrap();
        prop_assert!(rep.el_residual < 1e-8);
        // ∫ S p = ∫ (r + ν^(-1/(γ-1)) ρ |∇p|^(2/(γ-1))) |∇p|^2
        let e = 1.0 / (gamma - 1.0);
        let flux: f64 = p.gradients.iter().zip(&rho.values).map(|(g, q)| {
            let s2 = g[0] * g[0] + g[1] * g[1];
            nu.powf(-e) * q * s2.powf(e) * s2
        }).sum::<f64>() * mesh.cell_volume() + 0.3 * p.dirichlet_energy();
        let work = p.source_work(&s);
        prop_assert!((work - flux).abs() <= 1e-6 * work.abs());
    }
}
