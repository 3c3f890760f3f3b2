#![allow(dead_code)]

use mesoflow::fisher_rao::{BranchPolicy, SpecAtom, StationaryMeasureSpec};
use mesoflow::mesh::StructuredMesh;
use mesoflow::poisson::SourceField;
use mesoflow::semidiscrete::{MetricEdge, MetricGraph, MetricNode, PerCell};
use mesoflow::SymTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Positive Gaussian bump near `(0.3, 0.3)` and a negative one near `(0.7, 0.7)`.
pub fn two_bumps(mesh: &StructuredMesh, amp: f64) -> SourceField {
    let bump = |x: [f64; 2], c: [f64; 2]| (-((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (2.0 * 0.1f64.powi(2))).exp();
    SourceField::from_fn(mesh, |x| amp * (bump(x, [0.3, 0.3]) - bump(x, [0.7, 0.7])))
}

pub fn random_unit_psd(r: &mut ChaCha8Rng, d: usize) -> SymTensor {
    let g: Vec<f64> = (0..d * d).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    let mut t = SymTensor::zeros(d);
    for i in 0..d {
        for j in i..d {
            t.set(i, j, (0..d).map(|k| g[i * d + k] * g[j * d + k]).sum());
        }
    }
    let n = t.frobenius_norm();
    t.scaled(1.0 / n)
}

pub fn random_spec(r: &mut ChaCha8Rng, n: usize, k: f64) -> StationaryMeasureSpec {
    let atoms = (0..n)
        .map(|_| SpecAtom {
            x: vec![0.02 + 0.96 * r.random::<f64>(), 0.02 + 0.96 * r.random::<f64>()],
            a: random_unit_psd(r, 2),
            w: 1.0 / n as f64,
        })
        .collect();
    StationaryMeasureSpec { k, atoms, branch: BranchPolicy::Upper }
}

pub fn branch_f(c: f64, w: f64, k: f64, g: f64, nu: f64) -> f64 {
    nu / g * c.powf(g) - w * c - k
}

/// Bisection on a sign-changing bracket.
pub fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let neg_lo = f(lo) < 0.0;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (f(mid) < 0.0) == neg_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Non-negative roots of the branch equation from a shape analysis around its critical point.
pub fn oracle_roots(w: f64, k: f64, g: f64, nu: f64) -> Vec<f64> {
    let f = |c: f64| branch_f(c, w, k, g, nu);
    if g == 1.0 {
        if k == 0.0 {
            return vec![0.0];
        }
        let c = k / (nu - w);
        return if c > 0.0 && c.is_finite() { vec![c] } else { vec![] };
    }
    if k == 0.0 {
        return if w > 0.0 { vec![0.0, (g * w / nu).powf(1.0 / (g - 1.0))] } else { vec![0.0] };
    }
    let grow = |start: f64, want_pos: bool| {
        let mut hi = start.max(1.0);
        while (f(hi) > 0.0) != want_pos {
            hi *= 2.0;
        }
        hi
    };
    let cs = if w > 0.0 { (w / nu).powf(1.0 / (g - 1.0)) } else { 0.0 };
    let fs = f(cs);
    if g > 1.0 {
        if k > 0.0 {
            vec![bisect(cs, grow(cs, true), f)]
        } else if w == 0.0 || fs > 0.0 {
            vec![]
        } else {
            vec![bisect(0.0, cs, f), bisect(cs, grow(cs, true), f)]
        }
    } else if k < 0.0 {
        if w == 0.0 {
            vec![]
        } else {
            vec![bisect(cs, grow(cs, false), f)]
        }
    } else if w == 0.0 {
        vec![(g * k / nu).powf(1.0 / g)]
    } else if fs < 0.0 {
        vec![]
    } else {
        vec![bisect(0.0, cs, f), bisect(cs, grow(cs, false), f)]
    }
}

/// Random tree with node-only zero-sum sources and `β = 1/L`.
pub fn random_tree(r: &mut ChaCha8Rng, max_nodes: usize) -> MetricGraph {
    let n = r.random_range(2..=max_nodes);
    let mut sources: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    let mean = sources.iter().sum::<f64>() / n as f64;
    sources.iter_mut().for_each(|s| *s -= mean);
    let residual: f64 = sources.iter().sum();
    sources[0] -= residual;
    let nodes = sources
        .iter()
        .map(|&s| MetricNode { x: vec![r.random::<f64>(), r.random::<f64>()], source: s })
        .collect();
    let edges = (1..n)
        .map(|j| {
            let length = 0.5 + 1.5 * r.random::<f64>();
            MetricEdge {
                i: r.random_range(0..j),
                j,
                length,
                cells: r.random_range(1..=6),
                beta: PerCell::Uniform(1.0 / length),
                source: PerCell::Uniform(0.0),
            }
        })
        .collect();
    MetricGraph { nodes, edges }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
