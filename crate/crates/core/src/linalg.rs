//! Covariance estimation, Cholesky factorization and the Mahalanobis forms
//! used by the acceptance criterion.
//!
//! Covariate data is stored unit-major: the `p` covariates of one unit are
//! contiguous, so summing the columns picked by an assignment touches memory
//! sequentially.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pivots below this fraction of the largest diagonal entry are treated as zero.
pub const PIVOT_TOLERANCE: f64 = 1e-10;

/// A `p × m` real matrix of covariates (rows) by units (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMatrix {
    p: usize,
    units: usize,
    data: Vec<f64>,
}

impl CovariateMatrix {
    /// Build from unit-major storage: `data[u * p + i]` is covariate `i` of unit `u`.
    pub fn from_unit_major(p: usize, units: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != p * units {
            return Err(Error::shape(format!(
                "expected {} values for a {p} x {units} matrix, got {}",
                p * units,
                data.len()
            )));
        }
        Ok(Self { p, units, data })
    }

    /// Build from covariate rows, each of length `units`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.len();
        let units = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != units) {
            return Err(Error::shape("covariate rows have unequal lengths"));
        }
        let mut data = vec![0.0; p * units];
        for (i, row) in rows.iter().enumerate() {
            for (u, &v) in row.iter().enumerate() {
                data[u * p + i] = v;
            }
        }
        Ok(Self { p, units, data })
    }

    pub fn from_fn(p: usize, units: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(p * units);
        for u in 0..units {
            for i in 0..p {
                data.push(f(i, u));
            }
        }
        Self { p, units, data }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn get(&self, covariate: usize, unit: usize) -> f64 {
        self.data[unit * self.p + covariate]
    }

    /// The covariate vector of one unit.
    pub fn unit(&self, unit: usize) -> &[f64] {
        &self.data[unit * self.p..(unit + 1) * self.p]
    }

    pub fn row(&self, covariate: usize) -> Vec<f64> {
        (0..self.units).map(|u| self.get(covariate, u)).collect()
    }

    pub fn as_unit_major(&self) -> &[f64] {
        &self.data
    }

    /// Columns `start..end` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> CovariateMatrix {
        CovariateMatrix {
            p: self.p,
            units: end - start,
            data: self.data[start * self.p..end * self.p].to_vec(),
        }
    }

    /// Reorder units so that new column `j` is old column `order[j]`.
    pub fn permute_units(&self, order: &[usize]) -> Result<CovariateMatrix> {
        if order.len() != self.units {
            return Err(Error::shape("permutation length differs from unit count"));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &u in order {
            data.extend_from_slice(self.unit(u));
        }
        Ok(CovariateMatrix {
            p: self.p,
            units: self.units,
            data,
        })
    }

    /// Apply `x -> A x + b` to every unit.
    pub fn affine(&self, a: &[f64], b: &[f64]) -> Result<CovariateMatrix> {
        let p = self.p;
        if a.len() != p * p || b.len() != p {
            return Err(Error::shape("affine transform dimensions do not match p"));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for u in 0..self.units {
            let x = self.unit(u);
            for i in 0..p {
                let row = &a[i * p..(i + 1) * p];
                data.push(dot(row, x) + b[i]);
            }
        }
        Ok(CovariateMatrix {
            p,
            units: self.units,
            data,
        })
    }

    /// Per-covariate sums over all units.
    pub fn column_sum(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.p];
        for u in 0..self.units {
            add_assign(&mut sum, self.unit(u));
        }
        sum
    }
}

/// Binary treatment indicator per unit (`true` = treatment).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AssignmentVector {
    bits: Vec<bool>,
}

impl AssignmentVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Build and check that exactly `omega * len` units are treated.
    pub fn balanced(bits: Vec<bool>, omega: f64) -> Result<Self> {
        let w = Self { bits };
        w.check_balance(omega)?;
        Ok(w)
    }

    pub fn from_treated(len: usize, treated: &[usize]) -> Self {
        let mut bits = vec![false; len];
        for &u in treated {
            bits[u] = true;
        }
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn treated(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn concat(parts: &[AssignmentVector]) -> Self {
        Self {
            bits: parts.iter().flat_map(|w| w.bits.iter().copied()).collect(),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            bits: self.bits[start..end].to_vec(),
        }
    }

    pub fn check_balance(&self, omega: f64) -> Result<()> {
        let expected = treated_count(self.len(), omega)?;
        if self.treated() != expected {
            return Err(Error::domain(format!(
                "assignment treats {} of {} units, expected {expected}",
                self.treated(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Bit string, `1` for treatment.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Number of treated units among `units` at proportion `omega`; errors unless integral.
pub fn treated_count(units: usize, omega: f64) -> Result<usize> {
    if !(omega > 0.0 && omega < 1.0) {
        return Err(Error::domain(format!("omega must lie in (0, 1), got {omega}")));
    }
    let t = omega * units as f64;
    let r = t.round();
    if (t - r).abs() > 1e-9 || r < 1.0 || r >= units as f64 {
        return Err(Error::domain(format!(
            "omega * units = {t} is not a positive integer below {units}"
        )));
    }
    Ok(r as usize)
}

/// Symmetric positive-definite matrix with its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    dim: usize,
    entries: Vec<f64>,
    lower: Vec<f64>,
}

impl SpdMatrix {
    /// Factorize a row-major `dim × dim` matrix.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::shape(format!(
                "expected {} entries for a {dim} x {dim} matrix",
                dim * dim
            )));
        }
        let scale = entries.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (entries[i * dim + j], entries[j * dim + i]);
                if (a - b).abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
                    return Err(Error::domain(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let lower = cholesky(dim, &entries)?;
        Ok(Self {
            dim,
            entries,
            lower,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Row-major lower-triangular factor `L` with `L Lᵀ = self`.
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// Overwrite `v` with `L⁻¹ v`.
    pub fn solve_lower_in_place(&self, v: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let s = v[i] - dot(row, &v[..i]);
            v[i] = s / self.lower[i * n + i];
        }
    }

    /// Solve `A x = b` with one forward and one backward substitution.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lower[j * n + i] * x[j];
            }
            x[i] = s / self.lower[i * n + i];
        }
        x
    }

    /// `vᵀ A⁻¹ v` through one forward substitution.
    pub fn inv_quad_form(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.dim);
        let mut y = v.to_vec();
        self.solve_lower_in_place(&mut y);
        dot(&y, &y)
    }

    /// `vᵀ A⁻¹ v` using caller-provided scratch space of length `dim`.
    pub fn inv_quad_form_with(&self, v: &[f64], scratch: &mut [f64]) -> f64 {
        scratch.copy_from_slice(v);
        self.solve_lower_in_place(scratch);
        dot(scratch, scratch)
    }

    /// Symmetric inverse square root `A^{-1/2}` (row-major), via Jacobi eigendecomposition.
    pub fn inv_sqrt(&self) -> Vec<f64> {
        let n = self.dim;
        let (values, vectors) = symmetric_eigen(n, &self.entries);
        let mut out = vec![0.0; n * n];
        for (k, &lambda) in values.iter().enumerate() {
            let w = 1.0 / lambda.sqrt();
            for i in 0..n {
                let vi = vectors[i * n + k] * w;
                for j in 0..n {
                    out[i * n + j] += vi * vectors[j * n + k];
                }
            }
        }
        out
    }
}

/// Row-major Cholesky factor; `RankDeficient` on a pivot below the tolerance.
fn cholesky(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    let max_diag = (0..n).fold(0.0f64, |m, i| m.max(a[i * n + i]));
    let tol = PIVOT_TOLERANCE * max_diag;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let pivot = a[j * n + j] - dot(&l[j * n..j * n + j], &l[j * n..j * n + j]);
        if !(pivot > tol) || max_diag <= 0.0 {
            return Err(Error::RankDeficient { index: j, pivot });
        }
        let d = pivot.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let s = a[i * n + j] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            l[i * n + j] = s / d;
        }
    }
    Ok(l)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns eigenvalues and row-major eigenvectors (column `k` pairs with value `k`).
fn symmetric_eigen(n: usize, a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let total: f64 = m.iter().map(|x| x * x).sum();
        if off <= 1e-30 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

/// Sample covariance with divisor `m − 1`, factorized.
pub fn sample_covariance(x: &CovariateMatrix) -> Result<SpdMatrix> {
    let (p, m) = (x.p(), x.units());
    if m < 2 {
        return Err(Error::shape(format!(
            "sample covariance needs at least 2 units, got {m}"
        )));
    }
    let mean: Vec<f64> = x.column_sum().iter().map(|s| s / m as f64).collect();
    let mut cov = vec![0.0; p * p];
    let mut centered = vec![0.0; p];
    for u in 0..m {
        for (c, (v, mu)) in centered.iter_mut().zip(x.unit(u).iter().zip(&mean)) {
            *c = v - mu;
        }
        for i in 0..p {
            let ci = centered[i];
            for j in 0..=i {
                cov[i * p + j] += ci * centered[j];
            }
        }
    }
    let denom = (m - 1) as f64;
    for i in 0..p {
        for j in 0..=i {
            let v = cov[i * p + j] / denom;
            cov[i * p + j] = v;
            cov[j * p + i] = v;
        }
    }
    SpdMatrix::new(p, cov)
}

/// Treatment mean minus control mean, per covariate.
pub fn mean_difference(x: &CovariateMatrix, w: &AssignmentVector, omega: f64) -> Result<Vec<f64>> {
    if x.units() != w.len() {
        return Err(Error::shape(format!(
            "{} units but assignment of length {}",
            x.units(),
            w.len()
        )));
    }
    w.check_balance(omega)?;
    let t = w.treated() as f64;
    let c = (w.len() - w.treated()) as f64;
    let mut sum_t = vec![0.0; x.p()];
    let mut sum_c = vec![0.0; x.p()];
    for (u, &b) in w.bits().iter().enumerate() {
        add_assign(if b { &mut sum_t } else { &mut sum_c }, x.unit(u));
    }
    Ok(sum_t
        .iter()
        .zip(&sum_c)
        .map(|(st, sc)| st / t - sc / c)
        .collect())
}

/// `2 n ω(1−ω) Dᵀ cov⁻¹ D` over the `2n` units of `x`, using the supplied covariance.
pub fn mahalanobis_homogeneous(
    x: &CovariateMatrix,
    w: &AssignmentVector,
    omega: f64,
    cov: &SpdMatrix,
) -> Result<f64> {
    if cov.dim() != x.p() {
        return Err(Error::shape("covariance dimension differs from p"));
    }
    let d = mean_difference(x, w, omega)?;
    Ok(x.units() as f64 * omega * (1.0 - omega) * cov.inv_quad_form(&d))
}

/// Standardized covariate difference `Z_k` of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizedDiff {
    z: Vec<f64>,
}

impl StandardizedDiff {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("standardized difference has non-finite entries"));
        }
        Ok(Self { z })
    }

    pub fn zeros(p: usize) -> Self {
        Self { z: vec![0.0; p] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.z
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.z, &self.z)
    }
}

/// Precomputed `{2 n ω(1−ω)}^{1/2} cov(X_k)^{-1/2}` for one group.
#[derive(Debug, Clone)]
pub struct GroupWhitener {
    p: usize,
    scaled_inv_sqrt: Vec<f64>,
}

impl GroupWhitener {
    pub fn new(x_k: &CovariateMatrix, omega: f64) -> Result<Self> {
        let cov = sample_covariance(x_k)?;
        Ok(Self::from_covariance(&cov, x_k.units(), omega))
    }

    pub fn from_covariance(cov: &SpdMatrix, units: usize, omega: f64) -> Self {
        let scale = (units as f64 * omega * (1.0 - omega)).sqrt();
        let scaled_inv_sqrt = cov.inv_sqrt().into_iter().map(|v| v * scale).collect();
        Self {
            p: cov.dim(),
            scaled_inv_sqrt,
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Write `Z` for mean difference `d` into `out`.
    pub fn apply_into(&self, d: &[f64], out: &mut [f64]) {
        let p = self.p;
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.scaled_inv_sqrt[i * p..(i + 1) * p], d);
        }
    }

    pub fn apply(&self, d: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p];
        self.apply_into(d, &mut out);
        out
    }
}

/// `Z_k = {2 n_k ω(1−ω)}^{1/2} cov(X_k)^{-1/2} D_k` using the symmetric inverse square root.
pub fn standardized_diff(
    x_k: &CovariateMatrix,
    w_k: &AssignmentVector,
    omega: f64,
) -> Result<StandardizedDiff> {
    let d = mean_difference(x_k, w_k, omega)?;
    let whitener = GroupWhitener::new(x_k, omega)?;
    StandardizedDiff::new(whitener.apply(&d))
}

/// `(1/n_{1:k}) ‖Σ_j √n_j Z_j‖²` with `current` in the last slot.
///
/// `group_sizes` holds `n_1..n_k` (any common scale works; only ratios enter).
pub fn mahalanobis_heterogeneous(
    previous: &[StandardizedDiff],
    current: &StandardizedDiff,
    group_sizes: &[f64],
) -> Result<f64> {
    let k = previous.len() + 1;
    if group_sizes.len() < k {
        return Err(Error::shape(format!(
            "{k} standardized differences but {} group sizes",
            group_sizes.len()
        )));
    }
    let p = current.z.len();
    if previous.iter().any(|z| z.z.len() != p) {
        return Err(Error::shape("standardized differences differ in length"));
    }
    let mut acc = vec![0.0; p];
    for (z, &n) in previous.iter().chain(std::iter::once(current)).zip(group_sizes) {
        let w = n.sqrt();
        for (a, v) in acc.iter_mut().zip(&z.z) {
            *a += w * v;
        }
    }
    let total: f64 = group_sizes[..k].iter().sum();
    Ok(dot(&acc, &acc) / total)
}

/// How the Mahalanobis distance of the first `k` groups is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    /// Pooled covariance of the first `k` groups.
    #[default]
    Homogeneous,
    /// Per-group standardization, combined with `√n_j` weights.
    Heterogeneous,
}

/// Fixed covariates partitioned into sequential groups.
#[derive(Debug, Clone)]
pub struct CovariateDataset {
    data: CovariateMatrix,
    group_units: Vec<usize>,
    offsets: Vec<usize>,
    omega: f64,
    mode: CovarianceMode,
}

impl CovariateDataset {
    /// `group_units[k]` is the number of units (`2 n_k`) in group `k`.
    pub fn new(
        data: CovariateMatrix,
        group_units: Vec<usize>,
        omega: f64,
        mode: CovarianceMode,
    ) -> Result<Self> {
        if group_units.is_empty() || group_units.contains(&0) {
            return Err(Error::shape("group sizes must be positive and non-empty"));
        }
        let total: usize = group_units.iter().sum();
        if total != data.units() {
            return Err(Error::shape(format!(
                "groups cover {total} units but data has {}",
                data.units()
            )));
        }
        for &g in &group_units {
            treated_count(g, omega)?;
        }
        let mut offsets = Vec::with_capacity(group_units.len() + 1);
        offsets.push(0);
        for &g in &group_units {
            offsets.push(offsets.last().unwrap() + g);
        }
        Ok(Self {
            data,
            group_units,
            offsets,
            omega,
            mode,
        })
    }

    /// Single group holding every unit, equal allocation, homogeneous mode.
    pub fn single_group(data: CovariateMatrix) -> Result<Self> {
        let units = data.units();
        Self::new(data, vec![units], 0.5, CovarianceMode::Homogeneous)
    }

    pub fn data(&self) -> &CovariateMatrix {
        &self.data
    }

    pub fn p(&self) -> usize {
        self.data.p()
    }

    pub fn units(&self) -> usize {
        self.data.units()
    }

    pub fn groups(&self) -> usize {
        self.group_units.len()
    }

    pub fn group_units(&self) -> &[usize] {
        &self.group_units
    }

    /// `n_k` (half the group's unit count).
    pub fn group_sizes(&self) -> Vec<f64> {
        self.group_units.iter().map(|&u| u as f64 / 2.0).collect()
    }

    /// Column range of group `k` (0-based).
    pub fn group_range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    pub fn with_mode(mut self, mode: CovarianceMode) -> Self {
        self.mode = mode;
        self
    }

    /// Same covariates, new partition.
    pub fn regroup(&self, group_units: Vec<usize>) -> Result<Self> {
        Self::new(self.data.clone(), group_units, self.omega, self.mode)
    }

    /// Same partition, units reordered.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        Self::new(
            self.data.permute_units(order)?,
            self.group_units.clone(),
            self.omega,
            self.mode,
        )
    }

    pub fn group(&self, k: usize) -> CovariateMatrix {
        let r = self.group_range(k);
        self.data.columns(r.start, r.end)
    }

    /// Columns of groups `1..=k` (0-based `k` inclusive).
    pub fn prefix(&self, k: usize) -> CovariateMatrix {
        self.data.columns(0, self.offsets[k + 1])
    }

    /// Mahalanobis distance of the whole dataset under `w`, recomputed from scratch.
    pub fn mahalanobis(&self, w: &AssignmentVector) -> Result<f64> {
        if w.len() != self.units() {
            return Err(Error::shape("assignment length differs from unit count"));
        }
        match self.mode {
            CovarianceMode::Homogeneous => {
                let cov = sample_covariance(&self.data)?;
                mahalanobis_homogeneous(&self.data, w, self.omega, &cov)
            }
            CovarianceMode::Heterogeneous => {
                let k = self.groups();
                let mut zs = Vec::with_capacity(k);
                for g in 0..k {
                    let r = self.group_range(g);
                    zs.push(standardized_diff(
                        &self.group(g),
                        &w.slice(r.start, r.end),
                        self.omega,
                    )?);
                }
                let last = zs.pop().expect("at least one group");
                mahalanobis_heterogeneous(&zs, &last, &self.group_sizes())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_cov(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let m = rows[0].len();
        let means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / m as f64).collect();
        let mut out = vec![vec![0.0; rows.len()]; rows.len()];
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                let mut s = 0.0;
                for u in 0..m {
                    s += (rows[i][u] - means[i]) * (rows[j][u] - means[j]);
                }
                out[i][j] = s / (m as f64 - 1.0);
            }
        }
        out
    }

    #[test]
    fn two_point_variance() {
        let x = CovariateMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let c = sample_covariance(&x).unwrap();
        assert!((c.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_row_is_rank_deficient() {
        let x = CovariateMatrix::from_rows(&[vec![1.0, 2.0, 4.0, 3.0], vec![7.0; 4]]).unwrap();
        match sample_covariance(&x) {
            Err(Error::RankDeficient { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected RankDeficient, got {other:?}"),
        }
    }

    #[test]
    fn collinear_rows_are_rank_deficient() {
        let a = vec![1.0, 2.0, 4.0, 3.0, 0.5];
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v - 1.0).collect();
        let x = CovariateMatrix::from_rows(&[a, b]).unwrap();
        assert!(matches!(
            sample_covariance(&x),
            Err(Error::RankDeficient { index: 1, .. })
        ));
    }

    #[test]
    fn covariance_matches_double_loop() {
        let rows = vec![
            vec![0.3, -1.2, 2.5, 0.9, -0.4, 1.7],
            vec![1.1, 0.2, -0.7, 2.2, 0.5, -1.9],
        ];
        let x = CovariateMatrix::from_rows(&rows).unwrap();
        let c = sample_covariance(&x).unwrap();
        let oracle = naive_cov(&rows);
        for i in 0..2 {
            for j in 0..2 {
                assert!((c.get(i, j) - oracle[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_difference_cases() {
        let x = CovariateMatrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let w = AssignmentVector::new(vec![true, true, false, false]);
        let d = mean_difference(&x, &w, 0.5).unwrap();
        assert!((d[0] + 2.0).abs() < 1e-15);
        let flipped = mean_difference(&x, &w.complement(), 0.5).unwrap();
        assert!((flipped[0] - 2.0).abs() < 1e-15);

        let constant = CovariateMatrix::from_rows(&[vec![3.0; 4], vec![-1.0; 4]]).unwrap();
        assert!(mean_difference(&constant, &w, 0.5)
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-15));

        let short = AssignmentVector::new(vec![true, false]);
        assert!(matches!(
            mean_difference(&x, &short, 0.5),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn scalar_mahalanobis_by_hand() {
        // units {0, 1}: variance 0.5, D = ±1, M = (1/2) * 1 / 0.5 for both assignments
        let x = CovariateMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let cov = sample_covariance(&x).unwrap();
        for bits in [vec![true, false], vec![false, true]] {
            let w = AssignmentVector::new(bits);
            let m = mahalanobis_homogeneous(&x, &w, 0.5, &cov).unwrap();
            assert!((m - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn mahalanobis_zero_and_complement() {
        let x = CovariateMatrix::from_rows(&[
            vec![1.0, 1.0, 2.0, 2.0, 0.5, 3.0],
            vec![0.0, 0.0, 1.0, 1.0, 2.0, -1.0],
        ])
        .unwrap();
        let cov = sample_covariance(&x).unwrap();
        // treated units mirror control units exactly
        let w = AssignmentVector::new(vec![true, false, true, false, true, false]);
        let w0 = AssignmentVector::new(vec![true, false, true, false, false, true]);
        let m = mahalanobis_homogeneous(&x, &w, 0.5, &cov).unwrap();
        let mc = mahalanobis_homogeneous(&x, &w.complement(), 0.5, &cov).unwrap();
        assert!((m - mc).abs() < 1e-12 * m.max(1.0));
        let _ = mahalanobis_homogeneous(&x, &w0, 0.5, &cov).unwrap();

        let pairs = CovariateMatrix::from_rows(&[
            vec![1.0, 1.0, 2.0, 2.0, 5.0, 5.0],
            vec![0.0, 0.0, 3.0, 3.0, -1.0, -1.0],
        ])
        .unwrap();
        let cov = sample_covariance(&pairs);
        // duplicated units are collinear only if the rows are; here they are not
        let cov = cov.unwrap();
        let m = mahalanobis_homogeneous(&pairs, &w, 0.5, &cov).unwrap();
        assert!(m.abs() < 1e-14);
    }

    #[test]
    fn standardized_diff_norm_is_within_group_distance() {
        let x = CovariateMatrix::from_rows(&[
            vec![0.1, 1.4, -0.3, 2.2, 0.8, -1.1, 0.6, 1.9],
            vec![1.0, -0.4, 0.7, 0.2, -1.5, 0.9, 2.1, -0.2],
            vec![0.5, 0.5, -2.0, 1.0, 0.3, 0.0, -0.7, 1.2],
        ])
        .unwrap();
        let w = AssignmentVector::new(vec![true, false, false, true, true, false, true, false]);
        let z = standardized_diff(&x, &w, 0.5).unwrap();
        let cov = sample_covariance(&x).unwrap();
        let m = mahalanobis_homogeneous(&x, &w, 0.5, &cov).unwrap();
        assert!((z.norm_sq() - m).abs() < 1e-10 * m);

        let balanced = AssignmentVector::new(vec![true, true, true, true, false, false, false, false]);
        let zero_x = CovariateMatrix::from_rows(&[
            vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0],
            vec![0.0, 1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 2.0],
        ])
        .unwrap();
        let z0 = standardized_diff(&zero_x, &balanced, 0.5).unwrap();
        assert!(z0.as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn heterogeneous_trivial_cases() {
        let z = StandardizedDiff::new(vec![0.3, -1.2]).unwrap();
        let m = mahalanobis_heterogeneous(&[], &z, &[5.0]).unwrap();
        assert!((m - z.norm_sq()).abs() < 1e-15);
        let zero = StandardizedDiff::zeros(2);
        let m0 = mahalanobis_heterogeneous(&[zero.clone(), zero.clone()], &zero, &[1.0, 2.0, 3.0])
            .unwrap();
        assert_eq!(m0, 0.0);
        assert!(matches!(
            mahalanobis_heterogeneous(&[StandardizedDiff::zeros(3)], &zero, &[1.0, 1.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn inv_sqrt_squares_to_inverse() {
        let a = SpdMatrix::new(3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]).unwrap();
        let r = a.inv_sqrt();
        // r * a * r = I
        let mut ra = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                ra[i * 3 + j] = (0..3).map(|k| r[i * 3 + k] * a.get(k, j)).sum();
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| ra[i * 3 + k] * r[k * 3 + j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-12, "({i},{j}) = {v}");
            }
        }
    }

    #[test]
    fn dataset_validates_partition() {
        let x = CovariateMatrix::from_fn(1, 6, |_, u| u as f64);
        assert!(CovariateDataset::new(x.clone(), vec![2, 2], 0.5, CovarianceMode::Homogeneous).is_err());
        assert!(CovariateDataset::new(x.clone(), vec![3, 3], 0.5, CovarianceMode::Homogeneous).is_err());
        let d = CovariateDataset::new(x, vec![2, 4], 0.5, CovarianceMode::Homogeneous).unwrap();
        assert_eq!(d.group_range(1), 2..6);
        assert_eq!(d.group_sizes(), vec![1.0, 2.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        use rand_distr::StandardNormal;

        fn gaussian(seed: u64, p: usize, units: usize) -> CovariateMatrix {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            CovariateMatrix::from_fn(p, units, |_, _| rng.sample::<f64, _>(StandardNormal))
        }

        fn random_assignment(seed: u64, units: usize) -> AssignmentVector {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut idx: Vec<usize> = (0..units).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            AssignmentVector::from_treated(units, &idx[..units / 2])
        }

        /// Product of Givens rotations by the given angles.
        fn rotation(p: usize, angles: &[f64]) -> Vec<f64> {
            let mut q = vec![0.0; p * p];
            for i in 0..p {
                q[i * p + i] = 1.0;
            }
            for (n, &t) in angles.iter().enumerate() {
                let (i, j) = (n % p, (n + 1) % p);
                if i == j {
                    continue;
                }
                let (c, s) = (t.cos(), t.sin());
                for col in 0..p {
                    let (a, b) = (q[i * p + col], q[j * p + col]);
                    q[i * p + col] = c * a - s * b;
                    q[j * p + col] = s * a + c * b;
                }
            }
            q
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn mahalanobis_is_affine_invariant(
                seed in any::<u64>(),
                p in 1usize..5,
                half in 4usize..20,
                perturb in proptest::collection::vec(-0.4f64..0.4, 16),
                shift in proptest::collection::vec(-50.0f64..50.0, 4),
                scale in 0.1f64..10.0,
            ) {
                let units = 2 * half.max(p + 1);
                let x = gaussian(seed, p, units);
                let w = random_assignment(seed, units);
                let mut a = vec![0.0; p * p];
                for i in 0..p {
                    for j in 0..p {
                        a[i * p + j] = scale * (if i == j { 1.0 } else { 0.0 } + perturb[i * 4 + j] / p as f64);
                    }
                }
                let y = x.affine(&a, &shift[..p]).unwrap();
                let m_x = mahalanobis_homogeneous(&x, &w, 0.5, &sample_covariance(&x).unwrap()).unwrap();
                let m_y = mahalanobis_homogeneous(&y, &w, 0.5, &sample_covariance(&y).unwrap()).unwrap();
                prop_assert!((m_x - m_y).abs() <= 1e-8 * m_x.max(1.0), "{m_x} vs {m_y}");
            }

            #[test]
            fn standardized_norm_is_rotation_invariant(
                seed in any::<u64>(),
                p in 2usize..5,
                angles in proptest::collection::vec(-3.2f64..3.2, 6),
            ) {
                let units = 4 * p + 4;
                let x = gaussian(seed, p, units);
                let w = random_assignment(seed, units);
                let q = rotation(p, &angles);
                let y = x.affine(&q, &vec![0.0; p]).unwrap();
                let zx = standardized_diff(&x, &w, 0.5).unwrap().norm_sq();
                let zy = standardized_diff(&y, &w, 0.5).unwrap().norm_sq();
                prop_assert!((zx - zy).abs() <= 1e-8 * zx.max(1.0), "{zx} vs {zy}");
            }

            #[test]
            fn modes_agree_under_a_common_covariance(
                seed in any::<u64>(),
                p in 1usize..4,
                groups in proptest::collection::vec(2usize..6, 1..4),
            ) {
                let group_units: Vec<usize> = groups.iter().map(|g| 2 * (g + p)).collect();
                let units: usize = group_units.iter().sum();
                let x = gaussian(seed, p, units);
                let cov = sample_covariance(&x).unwrap();
                let mut parts = Vec::new();
                let mut zs = Vec::new();
                let mut start = 0;
                for (k, &g) in group_units.iter().enumerate() {
                    let w = random_assignment(seed.wrapping_add(k as u64), g);
                    let d = mean_difference(&x.columns(start, start + g), &w, 0.5).unwrap();
                    let z = GroupWhitener::from_covariance(&cov, g, 0.5).apply(&d);
                    zs.push(StandardizedDiff::new(z).unwrap());
                    parts.push(w);
                    start += g;
                }
                let sizes: Vec<f64> = group_units.iter().map(|&g| g as f64 / 2.0).collect();
                let (last, previous) = zs.split_last().unwrap();
                let hetero = mahalanobis_heterogeneous(previous, last, &sizes).unwrap();
                let homo = mahalanobis_homogeneous(&x, &AssignmentVector::concat(&parts), 0.5, &cov).unwrap();
                prop_assert!((hetero - homo).abs() <= 1e-8 * homo.max(1.0), "{hetero} vs {homo}");
            }
        }
    }
}
