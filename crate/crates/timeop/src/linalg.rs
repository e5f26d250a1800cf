//! Dense Hermitian operators, joint diagonalisation of commuting families and
//! the multivariate functional calculus built on top of it.
//!
//! All downstream modules consume operators through [`HermitianOperator`] and
//! spectral data through [`JointSpectralData`]; the latter carries a common
//! orthonormal eigenbasis together with one real eigenvalue per operator and
//! per basis column, so that scalar functions of several commuting operators
//! become diagonal multipliers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Relative Hermiticity tolerance enforced on construction.
pub const HERMITICITY_TOL: f64 = 1e-12;

/// Relative residual tolerance for joint eigenpairs.
pub const JOINT_TOL: f64 = 1e-8;

/// Relative eigenvalue gap below which two columns belong to one cluster.
pub const CLUSTER_GAP: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("`{label}` is not Hermitian: max asymmetry {max_asymmetry:.3e} exceeds {allowed:.3e}")]
    NonHermitian {
        label: String,
        max_asymmetry: f64,
        allowed: f64,
    },
    #[error("operator dimension must be at least 1")]
    EmptyMatrix,
    #[error("dimension mismatch: `{left}` is {left_dim}x{left_dim} but `{right}` is {right_dim}x{right_dim}")]
    DimensionMismatch {
        left: String,
        left_dim: usize,
        right: String,
        right_dim: usize,
    },
    #[error("`{first}` and `{second}` do not commute: relative residual {residual:.3e} exceeds {allowed:.3e}")]
    NotCommuting {
        first: String,
        second: String,
        residual: f64,
        allowed: f64,
    },
    #[error("joint refinement failed for `{label}`: residual {residual:.3e} exceeds {allowed:.3e}")]
    DegeneracyUnresolved {
        label: String,
        residual: f64,
        allowed: f64,
    },
    #[error("function evaluated to a non-finite value at eigenvalue tuple {tuple:?}")]
    DomainError { tuple: Vec<f64> },
    #[error("operator index {index} out of range (family has {len} members)")]
    BadOperatorIndex { index: usize, len: usize },
}

/// A dense complex Hermitian matrix with a human-readable label.
#[derive(Debug, Clone)]
pub struct HermitianOperator {
    dim: usize,
    entries: CMatrix,
    label: String,
}

impl HermitianOperator {
    /// Wraps a matrix after checking the Hermiticity invariant.
    pub fn new(label: impl Into<String>, entries: CMatrix) -> Result<Self, LinalgError> {
        let label = label.into();
        if entries.nrows() == 0 || entries.nrows() != entries.ncols() {
            return Err(LinalgError::EmptyMatrix);
        }
        let scale = max_abs(&entries).max(1.0);
        let asym = max_asymmetry(&entries);
        if asym > HERMITICITY_TOL * scale {
            return Err(LinalgError::NonHermitian {
                label,
                max_asymmetry: asym,
                allowed: HERMITICITY_TOL * scale,
            });
        }
        Ok(Self {
            dim: entries.nrows(),
            entries,
            label,
        })
    }

    /// Replaces the matrix by its Hermitian part `(M + M*)/2` and returns the
    /// operator together with the removed asymmetry defect.
    pub fn symmetrized(label: impl Into<String>, entries: CMatrix) -> (Self, f64) {
        let defect = max_asymmetry(&entries);
        let herm = (&entries + entries.adjoint()).scale(0.5);
        (
            Self {
                dim: herm.nrows(),
                entries: herm,
                label: label.into(),
            },
            defect,
        )
    }

    pub fn identity(label: impl Into<String>, dim: usize) -> Self {
        Self {
            dim,
            entries: CMatrix::identity(dim, dim),
            label: label.into(),
        }
    }

    pub fn from_real(label: impl Into<String>, entries: DMatrix<f64>) -> Result<Self, LinalgError> {
        Self::new(label, entries.map(|x| C64::new(x, 0.0)))
    }

    pub fn from_real_diagonal(label: impl Into<String>, diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut entries = CMatrix::zeros(dim, dim);
        for (i, &x) in diag.iter().enumerate() {
            entries[(i, i)] = C64::new(x, 0.0);
        }
        Self {
            dim,
            entries,
            label: label.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_matrix(self) -> CMatrix {
        self.entries
    }

    pub fn relabeled(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.norm()
    }

    pub fn max_asymmetry(&self) -> f64 {
        max_asymmetry(&self.entries)
    }

    pub fn apply(&self, v: &CVector) -> CVector {
        &self.entries * v
    }

    /// `i [A, B] = i (A B - B A)`, symmetrised; returns the asymmetry defect
    /// removed by the symmetrisation (roundoff plus truncation effects).
    pub fn commutator_i(&self, other: &Self, label: impl Into<String>) -> (Self, f64) {
        let raw = (&self.entries * &other.entries - &other.entries * &self.entries)
            .map(|z| C64::new(0.0, 1.0) * z);
        Self::symmetrized(label, raw)
    }
}

fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0f64, |acc, z| acc.max(z.norm()))
}

fn max_asymmetry(m: &CMatrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            let d = (m[(i, j)] - m[(j, i)].conj()).norm();
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

/// Ascending eigendecomposition of a Hermitian operator.
///
/// Returns eigenvalues sorted ascending and the unitary whose columns are the
/// matching eigenvectors, so `op = U diag(λ) U*`.
pub fn eigh(op: &HermitianOperator) -> (Vec<f64>, CMatrix) {
    eigh_matrix(op.matrix())
}

pub(crate) fn eigh_matrix(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let se = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        se.eigenvalues[a]
            .partial_cmp(&se.eigenvalues[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let mut basis = CMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        basis.set_column(dst, &se.eigenvectors.column(src));
    }
    (eigenvalues, basis)
}

/// Common orthonormal eigenbasis of a commuting Hermitian family.
///
/// `table[k][i]` is the eigenvalue of family member `k` on basis column `i`.
#[derive(Debug, Clone)]
pub struct JointSpectralData {
    basis: CMatrix,
    table: Vec<Vec<f64>>,
    labels: Vec<String>,
}

impl JointSpectralData {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn family_len(&self) -> usize {
        self.table.len()
    }

    pub fn basis(&self) -> &CMatrix {
        &self.basis
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn eigenvalues(&self, which: usize) -> &[f64] {
        &self.table[which]
    }

    /// Eigenvalue tuple of column `i`, one entry per family member.
    pub fn tuple(&self, i: usize) -> Vec<f64> {
        self.table.iter().map(|row| row[i]).collect()
    }

    /// Assembles spectral data from an explicitly known eigenbasis.
    ///
    /// Used by model builders whose eigenstructure is available in closed form
    /// (plane waves on a periodic box, transverse modes, …); the stored data
    /// satisfies the same invariants as the output of [`joint_diagonalize`]
    /// and can be checked with [`JointSpectralData::residual`].
    pub fn from_parts(basis: CMatrix, table: Vec<Vec<f64>>, labels: Vec<String>) -> Self {
        assert_eq!(table.len(), labels.len());
        for row in &table {
            assert_eq!(row.len(), basis.ncols());
        }
        Self {
            basis,
            table,
            labels,
        }
    }

    /// `‖U*U − I‖_max`.
    pub fn unitarity_defect(&self) -> f64 {
        let n = self.dim();
        let gram = self.basis.adjoint() * &self.basis;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
                worst = worst.max((gram[(i, j)] - target).norm());
            }
        }
        worst
    }

    /// Relative eigenpair residual `max_i ‖O u_i − λ_{k,i} u_i‖ / ‖O‖` for
    /// family member `k` against an explicitly supplied operator.
    pub fn residual(&self, op: &HermitianOperator, which: usize) -> f64 {
        let scale = self.table[which]
            .iter()
            .fold(0.0f64, |a, &x| a.max(x.abs()))
            .max(1e-300);
        let image = op.matrix() * &self.basis;
        let mut worst = 0.0f64;
        for i in 0..self.dim() {
            let lambda = self.table[which][i];
            let mut err2 = 0.0f64;
            for r in 0..self.dim() {
                let d = image[(r, i)] - self.basis[(r, i)].scale(lambda);
                err2 += d.norm_sqr();
            }
            worst = worst.max(err2.sqrt());
        }
        worst / scale
    }

    /// Coefficients of `v` in the joint eigenbasis (`U* v`).
    pub fn to_basis(&self, v: &CVector) -> CVector {
        self.basis.adjoint() * v
    }

    /// Reconstructs a vector from eigenbasis coefficients (`U c`).
    pub fn from_basis(&self, coeffs: &CVector) -> CVector {
        &self.basis * coeffs
    }

    /// Diagonal values `g(λ_i)` of a scalar function over selected members.
    pub fn scalar_values<F>(&self, which: &[usize], g: F) -> Result<Vec<C64>, LinalgError>
    where
        F: Fn(&[f64]) -> C64,
    {
        for &k in which {
            if k >= self.family_len() {
                return Err(LinalgError::BadOperatorIndex {
                    index: k,
                    len: self.family_len(),
                });
            }
        }
        let n = self.dim();
        let mut values = Vec::with_capacity(n);
        let mut args = vec![0.0f64; which.len()];
        for i in 0..n {
            for (slot, &k) in args.iter_mut().zip(which) {
                *slot = self.table[k][i];
            }
            let v = g(&args);
            if !v.re.is_finite() || !v.im.is_finite() {
                return Err(LinalgError::DomainError { tuple: args });
            }
            values.push(v);
        }
        Ok(values)
    }

    /// `U diag(g(λ_i)) U*`; exactly Hermitian whenever `g` is real-valued.
    pub fn apply_function<F>(&self, which: &[usize], g: F) -> Result<CMatrix, LinalgError>
    where
        F: Fn(&[f64]) -> C64,
    {
        let values = self.scalar_values(which, g)?;
        Ok(self.matrix_from_values(&values))
    }

    /// Builds `U diag(values) U*` from precomputed diagonal values.
    pub fn matrix_from_values(&self, values: &[C64]) -> CMatrix {
        let mut scaled = self.basis.clone();
        for (i, v) in values.iter().enumerate() {
            let mut col = scaled.column_mut(i);
            for z in col.iter_mut() {
                *z *= v;
            }
        }
        let mut m = scaled * self.basis.adjoint();
        if values.iter().all(|v| v.im == 0.0) {
            let herm = (&m + m.adjoint()).scale(0.5);
            m = herm;
        }
        m
    }

    /// Applies `g` of the selected members to a single vector (`U g(λ) U* v`).
    pub fn apply_function_vec<F>(
        &self,
        which: &[usize],
        g: F,
        v: &CVector,
    ) -> Result<CVector, LinalgError>
    where
        F: Fn(&[f64]) -> C64,
    {
        let values = self.scalar_values(which, g)?;
        let mut coeffs = self.to_basis(v);
        for (c, val) in coeffs.iter_mut().zip(values.iter()) {
            *c *= val;
        }
        Ok(self.from_basis(&coeffs))
    }
}

/// Joint diagonalisation of a commuting Hermitian family.
///
/// Diagonalises a random real-coefficient combination of the family, then
/// refines every degenerate cluster against each member in turn. The random
/// coefficients come from a seeded generator, so identical inputs and seed
/// reproduce the output bitwise.
pub fn joint_diagonalize(
    family: &[&HermitianOperator],
    comm_tol: f64,
    seed: u64,
) -> Result<JointSpectralData, LinalgError> {
    assert!(!family.is_empty(), "family must not be empty");
    let n = family[0].dim();
    for op in family {
        if op.dim() != n {
            return Err(LinalgError::DimensionMismatch {
                left: family[0].label().to_string(),
                left_dim: n,
                right: op.label().to_string(),
                right_dim: op.dim(),
            });
        }
    }

    // Pairwise commutation pre-check.
    for a in 0..family.len() {
        for b in (a + 1)..family.len() {
            let na = family[a].frobenius_norm();
            let nb = family[b].frobenius_norm();
            let scale = (na * nb).max(1e-300);
            let comm = family[a].matrix() * family[b].matrix()
                - family[b].matrix() * family[a].matrix();
            let residual = comm.norm() / scale;
            if residual > comm_tol {
                return Err(LinalgError::NotCommuting {
                    first: family[a].label().to_string(),
                    second: family[b].label().to_string(),
                    residual,
                    allowed: comm_tol,
                });
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs: Vec<f64> = (0..family.len())
        .map(|_| rng.gen_range(0.25..1.0))
        .collect();
    let mut mix = CMatrix::zeros(n, n);
    for (c, op) in coeffs.iter().zip(family) {
        mix += op.matrix().map(|z| z.scale(*c));
    }
    let mix = (&mix + mix.adjoint()).scale(0.5);
    let (mix_vals, mut basis) = eigh_matrix(&mix);

    // Initial clusters from the mixed spectrum.
    let mut clusters = split_clusters(&mix_vals, cluster_threshold(&mix_vals));

    // Refine each cluster against each member; clusters shrink monotonically.
    for op in family {
        let mut next = Vec::new();
        for cluster in clusters {
            if cluster.len() == 1 {
                next.push(cluster);
                continue;
            }
            let cols = basis.select_columns(cluster.iter());
            let block = cols.adjoint() * op.matrix() * &cols;
            let block = (&block + block.adjoint()).scale(0.5);
            let (block_vals, rot) = eigh_matrix(&block);
            let rotated = cols * rot;
            for (slot, &col_idx) in cluster.iter().enumerate() {
                basis.set_column(col_idx, &rotated.column(slot));
            }
            let threshold = cluster_threshold(&block_vals);
            for sub in split_clusters(&block_vals, threshold) {
                next.push(sub.iter().map(|&local| cluster[local]).collect());
            }
        }
        clusters = next;
    }

    // Read the per-member eigenvalues off the refined basis and validate.
    let mut table = Vec::with_capacity(family.len());
    for op in family {
        let image = op.matrix() * &basis;
        let mut row = Vec::with_capacity(n);
        for i in 0..n {
            let mut lambda = C64::new(0.0, 0.0);
            for r in 0..n {
                lambda += basis[(r, i)].conj() * image[(r, i)];
            }
            row.push(lambda.re);
        }
        let scale = row.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1e-300);
        let mut worst = 0.0f64;
        for i in 0..n {
            let mut err2 = 0.0f64;
            for r in 0..n {
                let d = image[(r, i)] - basis[(r, i)].scale(row[i]);
                err2 += d.norm_sqr();
            }
            worst = worst.max(err2.sqrt());
        }
        if worst > JOINT_TOL * scale {
            return Err(LinalgError::DegeneracyUnresolved {
                label: op.label().to_string(),
                residual: worst / scale,
                allowed: JOINT_TOL,
            });
        }
        table.push(row);
    }

    Ok(JointSpectralData {
        basis,
        table,
        labels: family.iter().map(|op| op.label().to_string()).collect(),
    })
}

fn cluster_threshold(vals: &[f64]) -> f64 {
    let (min, max) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let diameter = (max - min).max(1e-300);
    CLUSTER_GAP * diameter
}

fn split_clusters(sorted_vals: &[f64], threshold: f64) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..sorted_vals.len() {
        match clusters.last_mut() {
            Some(current)
                if sorted_vals[i] - sorted_vals[*current.last().unwrap()] <= threshold =>
            {
                current.push(i);
            }
            _ => clusters.push(vec![i]),
        }
    }
    clusters
}

/// Smoothstep polynomial of odd degree `m = 2k+1`: `C^k`, 0 below 0, 1 above 1.
pub fn smoothstep(degree: u32, t: f64) -> f64 {
    assert!(degree >= 3 && degree % 2 == 1, "degree must be odd and >= 3");
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let k = (degree as i64 - 1) / 2;
    let mut sum = 0.0;
    for i in 0..=k {
        let c = binomial(k + i, i) * binomial(2 * k + 1, k - i);
        sum += c * (-t).powi(i as i32);
    }
    sum * t.powi(k as i32 + 1)
}

/// First derivative of [`smoothstep`].
pub fn smoothstep_deriv(degree: u32, t: f64) -> f64 {
    assert!(degree >= 3 && degree % 2 == 1, "degree must be odd and >= 3");
    if t <= 0.0 || t >= 1.0 {
        return 0.0;
    }
    let k = (degree as i64 - 1) / 2;
    let mut sum = 0.0;
    for i in 0..=k {
        let c = binomial(k + i, i) * binomial(2 * k + 1, k - i);
        let power = k + 1 + i;
        sum += c * (power as f64) * (-1.0f64).powi(i as i32) * t.powi(power as i32 - 1);
    }
    sum
}

fn binomial(n: i64, k: i64) -> f64 {
    if k < 0 || k > n {
        return 0.0;
    }
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * ((n - i) as f64) / ((i + 1) as f64);
    }
    acc
}

/// A compactly supported plateau filter for spectral cutoffs `η(H)`.
///
/// `η = 1` on `[center − half_width, center + half_width]`, `η = 0` outside
/// the margin-enlarged interval, smoothstep transition in between.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralFilter {
    pub center: f64,
    pub half_width: f64,
    pub margin: f64,
    pub smooth_order: u32,
}

impl SpectralFilter {
    pub fn new(center: f64, half_width: f64, margin: f64) -> Self {
        Self {
            center,
            half_width,
            margin,
            smooth_order: 5,
        }
    }

    pub fn with_order(mut self, smooth_order: u32) -> Self {
        self.smooth_order = smooth_order;
        self
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        let lo = self.center - self.half_width;
        let hi = self.center + self.half_width;
        if x >= lo && x <= hi {
            1.0
        } else if x < lo {
            smoothstep(self.smooth_order, (x - (lo - self.margin)) / self.margin)
        } else {
            smoothstep(self.smooth_order, ((hi + self.margin) - x) / self.margin)
        }
    }

    /// Closed support `[center − half_width − margin, center + half_width + margin]`.
    pub fn support(&self) -> (f64, f64) {
        (
            self.center - self.half_width - self.margin,
            self.center + self.half_width + self.margin,
        )
    }
}

/// `η(H)` as a matrix over spectral data containing `H` at index `h_index`.
pub fn filter_matrix(
    data: &JointSpectralData,
    h_index: usize,
    filter: &SpectralFilter,
) -> Result<CMatrix, LinalgError> {
    data.apply_function(&[h_index], |lam| C64::new(filter.evaluate(lam[0]), 0.0))
}

/// Idempotence defect `‖η(H)² − η(H)‖` — the spectral mass sitting in the
/// filter's transition band. Reported, never an error.
pub fn filter_idempotence_defect(
    data: &JointSpectralData,
    h_index: usize,
    filter: &SpectralFilter,
) -> f64 {
    data.eigenvalues(h_index)
        .iter()
        .map(|&lam| {
            let e = filter.evaluate(lam);
            (e * e - e).abs()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(label: &str, vals: &[f64]) -> HermitianOperator {
        HermitianOperator::from_real_diagonal(label, vals)
    }

    #[test]
    fn eigh_identity() {
        let op = HermitianOperator::identity("one", 3);
        let (vals, basis) = eigh(&op);
        assert_eq!(vals, vec![1.0, 1.0, 1.0]);
        let gram = basis.adjoint() * &basis;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - C64::new(target, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn eigh_sorts_ascending() {
        let op = diag("d", &[2.0, -1.0]);
        let (vals, _) = eigh(&op);
        assert_eq!(vals, vec![-1.0, 2.0]);
    }

    #[test]
    fn non_hermitian_rejected() {
        let mut m = CMatrix::zeros(2, 2);
        m[(0, 1)] = C64::new(1.0, 0.0);
        let err = HermitianOperator::new("bad", m).unwrap_err();
        match err {
            LinalgError::NonHermitian { max_asymmetry, .. } => {
                assert!((max_asymmetry - 1.0).abs() < 1e-15);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn joint_diagonal_family() {
        let a = diag("a", &[1.0, 2.0]);
        let b = diag("b", &[5.0, 5.0]);
        let data = joint_diagonalize(&[&a, &b], 1e-12, 0).unwrap();
        // Columns ordered by the random mix, which is increasing in `a` here.
        let mut pairs: Vec<(f64, f64)> = (0..2)
            .map(|i| (data.eigenvalues(0)[i], data.eigenvalues(1)[i]))
            .collect();
        pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        assert!((pairs[0].0 - 1.0).abs() < 1e-12 && (pairs[0].1 - 5.0).abs() < 1e-12);
        assert!((pairs[1].0 - 2.0).abs() < 1e-12 && (pairs[1].1 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn joint_duplicate_operator() {
        let h = HermitianOperator::from_real(
            "h",
            DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]),
        )
        .unwrap();
        let data = joint_diagonalize(&[&h, &h], 1e-12, 7).unwrap();
        for i in 0..3 {
            assert!((data.eigenvalues(0)[i] - data.eigenvalues(1)[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn joint_rejects_noncommuting() {
        let x = HermitianOperator::from_real("x", DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]))
            .unwrap();
        let z = diag("z", &[1.0, -1.0]);
        let err = joint_diagonalize(&[&x, &z], 1e-12, 0).unwrap_err();
        assert!(matches!(err, LinalgError::NotCommuting { .. }));
    }

    #[test]
    fn joint_seed_deterministic() {
        let a = diag("a", &[1.0, 1.0, 3.0]);
        let b = HermitianOperator::from_real(
            "b",
            DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 7.0]),
        )
        .unwrap();
        let d1 = joint_diagonalize(&[&a, &b], 1e-12, 42).unwrap();
        let d2 = joint_diagonalize(&[&a, &b], 1e-12, 42).unwrap();
        for k in 0..2 {
            for i in 0..3 {
                assert_eq!(d1.eigenvalues(k)[i].to_bits(), d2.eigenvalues(k)[i].to_bits());
            }
        }
    }

    #[test]
    fn apply_function_identity_and_reconstruction() {
        let h = HermitianOperator::from_real(
            "h",
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, -1.0]),
        )
        .unwrap();
        let data = joint_diagonalize(&[&h], 1e-12, 0).unwrap();
        let one = data
            .apply_function(&[0], |_| C64::new(1.0, 0.0))
            .unwrap();
        assert!((one - CMatrix::identity(2, 2)).norm() < 1e-12);
        let back = data
            .apply_function(&[0], |lam| C64::new(lam[0], 0.0))
            .unwrap();
        assert!((back - h.matrix()).norm() < 1e-10);
    }

    #[test]
    fn apply_exponential_diagonal() {
        let h = diag("h", &[0.0, std::f64::consts::PI]);
        let data = joint_diagonalize(&[&h], 1e-12, 0).unwrap();
        let t = 0.7;
        let m = data
            .apply_function(&[0], |lam| (C64::new(0.0, t * lam[0])).exp())
            .unwrap();
        assert!((m[(0, 0)] - C64::new(1.0, 0.0)).norm() < 1e-14);
        let expected = C64::new(0.0, 0.7 * std::f64::consts::PI).exp();
        assert!((m[(1, 1)] - expected).norm() < 1e-14);
    }

    #[test]
    fn apply_function_domain_error() {
        let h = diag("h", &[0.0, 1.0]);
        let data = joint_diagonalize(&[&h], 1e-12, 0).unwrap();
        let err = data
            .apply_function(&[0], |lam| C64::new(1.0 / lam[0], 0.0))
            .unwrap_err();
        assert!(matches!(err, LinalgError::DomainError { .. }));
    }

    #[test]
    fn filter_plateau_and_zero() {
        let h = diag("h", &[0.0, 1.0, 2.0]);
        let data = joint_diagonalize(&[&h], 1e-12, 0).unwrap();
        let filter = SpectralFilter::new(1.0, 0.25, 0.5);
        let m = filter_matrix(&data, 0, &filter).unwrap();
        let expected = CMatrix::from_diagonal(&CVector::from_vec(vec![
            C64::new(0.0, 0.0),
            C64::new(1.0, 0.0),
            C64::new(0.0, 0.0),
        ]));
        assert!((m - expected).norm() < 1e-14);

        let cover = SpectralFilter::new(1.0, 3.0, 1.0);
        let m = filter_matrix(&data, 0, &cover).unwrap();
        assert!((m - CMatrix::identity(3, 3)).norm() < 1e-14);

        let outside = SpectralFilter::new(10.0, 0.5, 1.0);
        let m = filter_matrix(&data, 0, &outside).unwrap();
        assert!(m.norm() < 1e-14);
    }

    #[test]
    fn filter_commutes_with_h() {
        let h = HermitianOperator::from_real(
            "h",
            DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 2.0, 0.3, 0.0, 0.3, 3.0]),
        )
        .unwrap();
        let data = joint_diagonalize(&[&h], 1e-12, 0).unwrap();
        let filter = SpectralFilter::new(2.0, 0.4, 0.3);
        let eta = filter_matrix(&data, 0, &filter).unwrap();
        let comm = &eta * h.matrix() - h.matrix() * &eta;
        assert!(comm.norm() <= 1e-10 * h.frobenius_norm());
    }

    #[test]
    fn smoothstep_basics() {
        assert_eq!(smoothstep(5, -0.2), 0.0);
        assert_eq!(smoothstep(5, 1.3), 1.0);
        let t = 0.37;
        let expected = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
        assert!((smoothstep(5, t) - expected).abs() < 1e-14);
        let h = 1e-6;
        let fd = (smoothstep(7, t + h) - smoothstep(7, t - h)) / (2.0 * h);
        assert!((smoothstep_deriv(7, t) - fd).abs() < 1e-8);
    }
}
