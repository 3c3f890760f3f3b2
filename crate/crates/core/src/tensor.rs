use serde::{Deserialize, Deserializer, Serialize, Serializer};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Largest supported tensor dimension.
pub const MAX_DIM: usize = 8;

/// Norms below this are treated as the zero tensor by [`power_map`].
pub const ZERO_FLOOR: f64 = 1e-14;

/// Symmetric `d x d` matrix stored as its row-wise upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensor {
    dim: usize,
    entries: SmallVec<[f64; 6]>,
}

/// Number of stored entries for dimension `d`.
pub const fn packed_len(d: usize) -> usize {
    d * (d + 1) / 2
}

impl SymTensor {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1 && dim <= MAX_DIM, "tensor dimension {dim} out of range");
        Self { dim, entries: SmallVec::from_elem(0.0, packed_len(dim)) }
    }

    pub fn identity(dim: usize) -> Self {
        let mut t = Self::zeros(dim);
        for i in 0..dim {
            t.set(i, i, 1.0);
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut t = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            t.set(i, i, v);
        }
        t
    }

    /// Builds from the packed upper triangle (inverse of [`vec_sym`]).
    pub fn from_packed(dim: usize, entries: &[f64]) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Precondition(format!("tensor dimension {dim} out of range")));
        }
        if entries.len() != packed_len(dim) {
            return Err(Error::Precondition(format!(
                "expected {} packed entries for dimension {dim}, got {}",
                packed_len(dim),
                entries.len()
            )));
        }
        Ok(Self { dim, entries: SmallVec::from_slice(entries) })
    }

    /// Infers the dimension from the packed length.
    pub fn from_packed_auto(entries: &[f64]) -> Result<Self> {
        let d = (1..=MAX_DIM)
            .find(|&d| packed_len(d) == entries.len())
            .ok_or_else(|| Error::Precondition(format!("{} is not a triangular length", entries.len())))?;
        Self::from_packed(d, entries)
    }

    /// Symmetrizes a dense row-major matrix.
    pub fn from_dense(dim: usize, a: &[f64]) -> Self {
        assert_eq!(a.len(), dim * dim);
        let mut t = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                t.set(i, j, 0.5 * (a[i * dim + j] + a[j * dim + i]));
            }
        }
        t
    }

    /// `y ⊗ y`.
    pub fn outer(y: &[f64]) -> Self {
        let d = y.len();
        let mut t = Self::zeros(d);
        for i in 0..d {
            for j in i..d {
                t.set(i, j, y[i] * y[j]);
            }
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn packed(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[index(self.dim, i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = index(self.dim, i, j);
        self.entries[k] = v;
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let d = self.dim;
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = self.get(i, j);
            }
        }
        a
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_inner(self).sqrt()
    }

    /// `A : B`, counting off-diagonal entries twice.
    pub fn frobenius_inner(&self, other: &SymTensor) -> f64 {
        assert_eq!(self.dim, other.dim);
        let d = self.dim;
        let mut s = 0.0;
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                let f = if i == j { 1.0 } else { 2.0 };
                s += f * self.entries[k] * other.entries[k];
                k += 1;
            }
        }
        s
    }

    /// `y · A y`.
    pub fn quad_form(&self, y: &[f64]) -> f64 {
        let d = self.dim;
        let mut s = 0.0;
        for i in 0..d {
            s += self.get(i, i) * y[i] * y[i];
            for j in i + 1..d {
                s += 2.0 * self.get(i, j) * y[i] * y[j];
            }
        }
        s
    }

    /// `A y`.
    pub fn apply(&self, y: &[f64]) -> SmallVec<[f64; 4]> {
        let d = self.dim;
        (0..d).map(|i| (0..d).map(|j| self.get(i, j) * y[j]).sum()).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn scaled(&self, s: f64) -> SymTensor {
        SymTensor { dim: self.dim, entries: self.entries.iter().map(|v| v * s).collect() }
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &SymTensor) -> SymTensor {
        assert_eq!(self.dim, other.dim);
        SymTensor {
            dim: self.dim,
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a + s * b).collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, s: f64, other: &SymTensor) {
        assert_eq!(self.dim, other.dim);
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &SymTensor) -> f64 {
        self.entries.iter().zip(&other.entries).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Eigenvalues (ascending) and row-major eigenvector matrix whose columns are eigenvectors.
    pub fn eigen(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        jacobi_eigen(self.dim, self.to_dense())
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(self.eigen()?.0[0])
    }

    /// Frobenius-nearest PSD tensor (negative eigenvalues clipped to zero).
    pub fn project_psd(&self) -> Result<SymTensor> {
        project_psd(self)
    }
}

fn index(d: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < d && j < d);
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * d - i * (i + 1) / 2 + j
}

/// Packed row-wise upper triangle of `a`.
pub fn vec_sym(a: &SymTensor) -> Vec<f64> {
    a.entries.to_vec()
}

/// Inverse of [`vec_sym`].
pub fn unvec_sym(dim: usize, v: &[f64]) -> Result<SymTensor> {
    SymTensor::from_packed(dim, v)
}

/// Cyclic Jacobi eigen-decomposition of a dense symmetric matrix.
fn jacobi_eigen(d: usize, mut a: Vec<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale > 0.0 && d > 1 {
        let mut converged = false;
        for _sweep in 0..100 {
            let off: f64 = (0..d)
                .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i * d + j] * a[i * d + j])
                .sum::<f64>()
                .sqrt();
            if off <= 1e-16 * scale {
                converged = true;
                break;
            }
            for p in 0..d {
                for q in p + 1..d {
                    let apq = a[p * d + q];
                    if apq.abs() <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let app = a[p * d + p];
                    let aqq = a[q * d + q];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let akp = a[k * d + p];
                        let akq = a[k * d + q];
                        a[k * d + p] = c * akp - s * akq;
                        a[k * d + q] = s * akp + c * akq;
                    }
                    for k in 0..d {
                        let apk = a[p * d + k];
                        let aqk = a[q * d + k];
                        a[p * d + k] = c * apk - s * aqk;
                        a[q * d + k] = s * apk + c * aqk;
                    }
                    a[p * d + q] = 0.0;
                    a[q * d + p] = 0.0;
                    for k in 0..d {
                        let vkp = v[k * d + p];
                        let vkq = v[k * d + q];
                        v[k * d + p] = c * vkp - s * vkq;
                        v[k * d + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        if !converged {
            return Err(Error::Eigen(d));
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[i * d + i].total_cmp(&a[j * d + j]));
    let values = order.iter().map(|&i| a[i * d + i]).collect();
    let mut vectors = vec![0.0; d * d];
    for (col, &src) in order.iter().enumerate() {
        for k in 0..d {
            vectors[k * d + col] = v[k * d + src];
        }
    }
    Ok((values, vectors))
}

/// Frobenius-nearest PSD tensor (negative eigenvalues clipped to zero).
pub fn project_psd(a: &SymTensor) -> Result<SymTensor> {
    let d = a.dim;
    if d == 1 {
        return Ok(SymTensor::diag(&[a.entries[0].max(0.0)]));
    }
    let (vals, vecs) = a.eigen()?;
    if vals[0] >= 0.0 {
        return Ok(a.clone());
    }
    let mut out = SymTensor::zeros(d);
    for (k, &lam) in vals.iter().enumerate() {
        if lam <= 0.0 {
            continue;
        }
        for i in 0..d {
            for j in i..d {
                let v = out.get(i, j) + lam * vecs[i * d + k] * vecs[j * d + k];
                out.set(i, j, v);
            }
        }
    }
    Ok(out)
}

/// Model constants: metabolic exponent, metabolic coefficient, background permeability, dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub gamma: f64,
    pub nu: f64,
    pub r: f64,
    pub dim: usize,
}

impl ModelParams {
    pub fn new(gamma: f64, nu: f64, r: f64, dim: usize) -> Result<Self> {
        let p = Self { gamma, nu, r, dim };
        p.validate()?;
        Ok(p)
    }

    /// All violated invariants, in a fixed order.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            errs.push("gamma must be positive".to_string());
        }
        if !(self.nu >= 0.0) || !self.nu.is_finite() {
            errs.push("nu must be non-negative".to_string());
        }
        if !(self.r >= 0.0) || !self.r.is_finite() {
            errs.push("r must be non-negative".to_string());
        }
        if self.dim == 0 || self.dim > MAX_DIM {
            errs.push(format!("dim must lie in 1..={MAX_DIM}"));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(errs.join("; ")))
        }
    }

    /// Metabolic cost density `(nu/gamma)|C|^gamma`.
    pub fn metabolic(&self, norm: f64) -> f64 {
        if norm <= 0.0 {
            0.0
        } else {
            self.nu / self.gamma * norm.powf(self.gamma)
        }
    }
}

/// `nu |C|^(gamma-2) C`, zero when `|C| < ZERO_FLOOR`.
pub fn power_map(c: &SymTensor, params: &ModelParams) -> SymTensor {
    let n = c.frobenius_norm();
    if n < ZERO_FLOOR {
        return SymTensor::zeros(c.dim);
    }
    c.scaled(params.nu * n.powf(params.gamma - 2.0))
}

impl Serialize for SymTensor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.entries.as_slice().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymTensor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        SymTensor::from_packed_auto(&v).map_err(serde::de::Error::custom)
    }
}
