//! Uniform rectangular grids in one or two dimensions.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Points and vectors on the grid; the second component is unused when `dim = 1`.
pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredMesh {
    pub dim: usize,
    /// `[lo, hi]` per axis.
    pub extent: Vec<[f64; 2]>,
    pub cells: Vec<usize>,
}

impl StructuredMesh {
    pub fn new(extent: Vec<[f64; 2]>, cells: Vec<usize>) -> Result<Self> {
        let m = Self { dim: extent.len(), extent, cells };
        m.validate()?;
        Ok(m)
    }

    pub fn unit_square(n: usize) -> Self {
        Self::new(vec![[0.0, 1.0], [0.0, 1.0]], vec![n, n]).expect("valid mesh")
    }

    pub fn unit_interval(n: usize) -> Self {
        Self::new(vec![[0.0, 1.0]], vec![n]).expect("valid mesh")
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.dim != 1 && self.dim != 2 {
            errs.push("mesh dimension must be 1 or 2".to_string());
        }
        if self.extent.len() != self.dim || self.cells.len() != self.dim {
            errs.push("mesh extent and cells must have one entry per axis".to_string());
            return errs;
        }
        for a in 0..self.dim {
            if !(self.extent[a][1] > self.extent[a][0]) || !self.extent[a].iter().all(|v| v.is_finite()) {
                errs.push(format!("mesh axis {a} has an empty extent"));
            }
            if self.cells[a] < 2 {
                errs.push(format!("mesh axis {a} needs at least 2 cells"));
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Precondition(errs.join("; ")))
        }
    }

    pub fn nx(&self) -> usize {
        self.cells[0]
    }

    /// Cells along the second axis (1 in one dimension).
    pub fn ny(&self) -> usize {
        if self.dim == 2 {
            self.cells[1]
        } else {
            1
        }
    }

    pub fn h(&self, axis: usize) -> f64 {
        (self.extent[axis][1] - self.extent[axis][0]) / self.cells[axis] as f64
    }

    pub fn num_cells(&self) -> usize {
        self.nx() * self.ny()
    }

    pub fn nodes_per_axis(&self) -> (usize, usize) {
        (self.nx() + 1, if self.dim == 2 { self.ny() + 1 } else { 1 })
    }

    pub fn num_nodes(&self) -> usize {
        let (a, b) = self.nodes_per_axis();
        a * b
    }

    pub fn nodes_per_cell(&self) -> usize {
        1 << self.dim
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.h(a)).product()
    }

    pub fn domain_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.extent[a][1] - self.extent[a][0]).product()
    }

    pub fn diameter(&self) -> f64 {
        (0..self.dim).map(|a| (self.extent[a][1] - self.extent[a][0]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i + self.nx() * j
    }

    pub fn cell_ij(&self, c: usize) -> (usize, usize) {
        (c % self.nx(), c / self.nx())
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        i + (self.nx() + 1) * j
    }

    pub fn node_ij(&self, n: usize) -> (usize, usize) {
        (n % (self.nx() + 1), n / (self.nx() + 1))
    }

    /// Node indices of a cell in lexicographic order `(0,0), (1,0), (0,1), (1,1)`.
    pub fn cell_nodes(&self, c: usize) -> SmallVec<[usize; 4]> {
        let (i, j) = self.cell_ij(c);
        if self.dim == 1 {
            smallvec::smallvec![i, i + 1]
        } else {
            smallvec::smallvec![
                self.node_index(i, j),
                self.node_index(i + 1, j),
                self.node_index(i, j + 1),
                self.node_index(i + 1, j + 1)
            ]
        }
    }

    pub fn node_coord(&self, n: usize) -> Vec2 {
        let (i, j) = self.node_ij(n);
        let x = self.extent[0][0] + i as f64 * self.h(0);
        let y = if self.dim == 2 { self.extent[1][0] + j as f64 * self.h(1) } else { 0.0 };
        [x, y]
    }

    pub fn cell_center(&self, c: usize) -> Vec2 {
        let (i, j) = self.cell_ij(c);
        let x = self.extent[0][0] + (i as f64 + 0.5) * self.h(0);
        let y = if self.dim == 2 { self.extent[1][0] + (j as f64 + 0.5) * self.h(1) } else { 0.0 };
        [x, y]
    }

    /// Integral of each nodal hat function (lumped mass).
    pub fn node_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.num_nodes()];
        let share = self.cell_volume() / self.nodes_per_cell() as f64;
        for c in 0..self.num_cells() {
            for n in self.cell_nodes(c) {
                w[n] += share;
            }
        }
        w
    }

    pub fn contains(&self, x: &Vec2) -> bool {
        (0..self.dim).all(|a| {
            let (lo, hi) = (self.extent[a][0], self.extent[a][1]);
            let slack = 1e-12 * (hi - lo);
            x[a] >= lo - slack && x[a] <= hi + slack && x[a].is_finite()
        })
    }

    fn check(&self, x: &Vec2) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::Domain(x[..self.dim].to_vec()))
        }
    }

    /// Cell containing `x`; points on interior faces belong to the upper cell.
    pub fn locate_cell(&self, x: &Vec2) -> Result<usize> {
        self.check(x)?;
        let idx = |a: usize| {
            let s = (x[a] - self.extent[a][0]) / self.h(a);
            (s.floor().max(0.0) as usize).min(self.cells[a] - 1)
        };
        Ok(self.cell_index(idx(0), if self.dim == 2 { idx(1) } else { 0 }))
    }

    /// Projects `x` onto the closed domain.
    pub fn clamp(&self, x: &Vec2) -> Vec2 {
        let mut y = *x;
        for a in 0..self.dim {
            y[a] = y[a].clamp(self.extent[a][0], self.extent[a][1]);
        }
        y
    }

    /// Bilinear interpolation stencil over a lattice with origin `lo`, spacing `h` and `n` points per axis.
    pub(crate) fn lattice_stencil(&self, x: &Vec2, origin: Vec2, n: (usize, usize)) -> SmallVec<[(usize, f64); 4]> {
        let coord = |a: usize, count: usize| -> (usize, f64) {
            if count < 2 {
                return (0, 0.0);
            }
            let s = (x[a] - origin[a]) / self.h(a);
            let i0 = (s.floor().max(0.0) as usize).min(count - 2);
            let t = (s - i0 as f64).clamp(0.0, 1.0);
            (i0, t)
        };
        let (i0, tx) = coord(0, n.0);
        if self.dim == 1 {
            return smallvec::smallvec![(i0, 1.0 - tx), (i0 + 1, tx)];
        }
        let (j0, ty) = coord(1, n.1);
        let id = |i: usize, j: usize| i + n.0 * j;
        smallvec::smallvec![
            (id(i0, j0), (1.0 - tx) * (1.0 - ty)),
            (id(i0 + 1, j0), tx * (1.0 - ty)),
            (id(i0, j0 + 1), (1.0 - tx) * ty),
            (id(i0 + 1, j0 + 1), tx * ty)
        ]
    }

    /// Interpolation weights over cell centers, constant beyond the outermost centers.
    pub fn center_stencil(&self, x: &Vec2) -> Result<SmallVec<[(usize, f64); 4]>> {
        self.check(x)?;
        let origin = [
            self.extent[0][0] + 0.5 * self.h(0),
            if self.dim == 2 { self.extent[1][0] + 0.5 * self.h(1) } else { 0.0 },
        ];
        Ok(self.lattice_stencil(x, origin, (self.nx(), self.ny())))
    }

    /// Bilinear interpolation weights over nodes.
    pub fn node_stencil(&self, x: &Vec2) -> Result<SmallVec<[(usize, f64); 4]>> {
        self.check(x)?;
        let origin = [self.extent[0][0], if self.dim == 2 { self.extent[1][0] } else { 0.0 }];
        Ok(self.lattice_stencil(x, origin, self.nodes_per_axis()))
    }
}
