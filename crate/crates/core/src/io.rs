//! Text formats for logs, trajectories and field dumps.

use std::fmt::Write;

use crate::flows::EnergyRecord;
use crate::graph::GraphTrajectory;
use crate::poisson::{PermeabilityField, PressureField};

/// 17 significant digits, round-trip exact.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn energy_csv(log: &[EnergyRecord]) -> String {
    let mut out = String::from("step,t,E,kinetic,metabolic,background,max_residual,dissipation\n");
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            fmt_f64(r.t),
            fmt_f64(r.energy),
            fmt_f64(r.kinetic),
            fmt_f64(r.metabolic),
            fmt_f64(r.background),
            fmt_f64(r.max_residual),
            fmt_f64(r.dissipation)
        );
    }
    out
}

pub fn graph_trajectory_csv(traj: &GraphTrajectory) -> String {
    let ne = traj.conductivities.first().map_or(0, |c| c.len());
    let mut out = String::from("step,time,energy");
    for e in 1..=ne {
        let _ = write!(out, ",C_{e}");
    }
    out.push('\n');
    for (k, ((t, e), c)) in traj.times.iter().zip(&traj.energies).zip(&traj.conductivities).enumerate() {
        let _ = write!(out, "{k},{},{}", fmt_f64(*t), fmt_f64(*e));
        for v in c {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

fn scalars(out: &mut String, name: &str, values: impl Iterator<Item = f64>) {
    let _ = writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default");
    for v in values {
        let _ = writeln!(out, "{}", fmt_f64(v));
    }
}

/// Legacy ASCII structured points: nodal `p`, cell `|grad p|` and permeability components.
pub fn pressure_vtk(p: &PressureField, perm: Option<&PermeabilityField>) -> String {
    let m = &p.mesh;
    let (nx, ny) = m.nodes_per_axis();
    let oy = if m.dim == 2 { m.extent[1][0] } else { 0.0 };
    let hy = if m.dim == 2 { m.h(1) } else { 1.0 };
    let mut out = String::new();
    let _ = writeln!(out, "# vtk DataFile Version 3.0\nmesoflow fields\nASCII\nDATASET STRUCTURED_POINTS");
    let _ = writeln!(out, "DIMENSIONS {nx} {ny} 1");
    let _ = writeln!(out, "ORIGIN {} {} 0", fmt_f64(m.extent[0][0]), fmt_f64(oy));
    let _ = writeln!(out, "SPACING {} {} 1", fmt_f64(m.h(0)), fmt_f64(hy));
    let _ = writeln!(out, "POINT_DATA {}", m.num_nodes());
    scalars(&mut out, "p", p.values.iter().copied());
    if m.dim == 2 {
        let _ = writeln!(out, "CELL_DATA {}", m.num_cells());
        scalars(&mut out, "grad_p_norm", p.gradients.iter().map(|g| (g[0] * g[0] + g[1] * g[1]).sqrt()));
        if let Some(perm) = perm {
            for (name, i, j) in [("P_xx", 0, 0), ("P_xy", 0, 1), ("P_yy", 1, 1)] {
                scalars(&mut out, name, perm.cells.iter().map(|t| t.get(i, j)));
            }
        }
    }
    out
}

/// `x,p` rows of a one-dimensional field, or of the `y`-midline in two dimensions.
pub fn slice_csv(p: &PressureField) -> String {
    let m = &p.mesh;
    let (nx, ny) = m.nodes_per_axis();
    let j = ny / 2;
    let mut out = String::from("x,p\n");
    for i in 0..nx {
        let n = i + nx * j;
        let _ = writeln!(out, "{},{}", fmt_f64(m.node_coord(n)[0]), fmt_f64(p.values[n]));
    }
    out
}
