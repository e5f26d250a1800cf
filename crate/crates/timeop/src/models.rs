//! Catalog of concrete (H, Φ) pairs, discretised to finite dimension.
//!
//! Truncation scheme: Jacobi half-line operators get a hard wall at the top
//! index; lattice and grid models keep a periodic `H` (so the exact symbol
//! calculus survives) but the genuine, non-periodic position operator `Φ`.
//! Identities that hold on the infinite model are therefore asserted only on
//! interior states: for finite-range models these are basis vectors away
//! from the cut or wrap seam (the identities hold entrywise there), while
//! spectrally discretised models use smooth wave packets whose position and
//! momentum content stay clear of the seam and of the band edges.
//!
//! Each builder also records the exact derived operators (`H'_j`, `H''_{jk}`)
//! and, where the eigenstructure is available in closed form, assembles the
//! joint spectral data directly instead of going through the dense solver.

use crate::linalg::{
    eigh, joint_diagonalize, CMatrix, CVector, HermitianOperator, JointSpectralData, LinalgError,
    C64,
};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::{Arc, OnceLock};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad dimension: {0}")]
    BadDimension(String),
    #[error("velocity must be nonzero")]
    ZeroVelocity,
    #[error("measure is not symmetric at lattice point {g:?}")]
    AsymmetricMeasure { g: Vec<i64> },
    #[error("support radius {support} on axis {axis} needs box radius >= {needed}, got {radius}")]
    SupportTooLargeForBox {
        axis: usize,
        support: i64,
        needed: i64,
        radius: i64,
    },
    #[error("symbol evaluates to a non-finite value at momentum index {index} (p = {p})")]
    NonFiniteSymbol { index: usize, p: f64 },
    #[error("graph is not admissible: {reason}")]
    NotAdmissible { reason: String },
    #[error("invalid operator pair: {0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Finitely supported symmetric measure on `ℤ^d` and its Fourier symbol.
///
/// The symbol is `m(ξ) = Σ_g μ(g) e^{−i g·ξ}` on the torus `(−π, π]^d`;
/// symmetry `μ(−g) = conj(μ(g))` makes `m` real. Derivative symbols come
/// from multiplying coefficients by `−i g_j`.
#[derive(Debug, Clone)]
pub struct SymbolData {
    pub dimension: usize,
    pub coeffs: Vec<(Vec<i64>, C64)>,
}

impl SymbolData {
    pub fn new(dimension: usize, coeffs: Vec<(Vec<i64>, C64)>) -> Result<Self, ModelError> {
        for (g, c) in &coeffs {
            if g.len() != dimension {
                return Err(ModelError::BadDimension(format!(
                    "coefficient at {g:?} has wrong dimension"
                )));
            }
            let neg: Vec<i64> = g.iter().map(|x| -x).collect();
            let partner = coeffs
                .iter()
                .find(|(h, _)| *h == neg)
                .map(|(_, v)| *v)
                .unwrap_or_else(|| C64::new(0.0, 0.0));
            if (partner - c.conj()).norm() > 1e-14 * (1.0 + c.norm()) {
                return Err(ModelError::AsymmetricMeasure { g: g.clone() });
            }
        }
        Ok(Self { dimension, coeffs })
    }

    pub fn support_radius(&self, axis: usize) -> i64 {
        self.coeffs
            .iter()
            .map(|(g, _)| g[axis].abs())
            .max()
            .unwrap_or(0)
    }

    /// `m(ξ)`; real because the measure is symmetric.
    pub fn m(&self, xi: &[f64]) -> f64 {
        let mut acc = C64::new(0.0, 0.0);
        for (g, c) in &self.coeffs {
            let phase: f64 = g.iter().zip(xi).map(|(&gi, &x)| gi as f64 * x).sum();
            acc += c * C64::new(0.0, -phase).exp();
        }
        acc.re
    }

    /// Partial derivative symbol `(∂^α m)(ξ)` for a multi-index given as a
    /// list of axes (repetitions allowed, order irrelevant).
    pub fn dm(&self, axes: &[usize], xi: &[f64]) -> f64 {
        let mut acc = C64::new(0.0, 0.0);
        for (g, c) in &self.coeffs {
            let mut factor = C64::new(1.0, 0.0);
            for &a in axes {
                factor *= C64::new(0.0, -(g[a] as f64));
            }
            let phase: f64 = g.iter().zip(xi).map(|(&gi, &x)| gi as f64 * x).sum();
            acc += c * factor * C64::new(0.0, -phase).exp();
        }
        acc.re
    }

    /// `Σ_j (∂_j m)(ξ)²`.
    pub fn grad_sq(&self, xi: &[f64]) -> f64 {
        (0..self.dimension).map(|j| self.dm(&[j], xi).powi(2)).sum()
    }

    /// True when every derivative coefficient vanishes (support ⊆ {0}).
    pub fn is_constant(&self) -> bool {
        self.coeffs.iter().all(|(g, c)| c.norm() == 0.0 || g.iter().all(|&x| x == 0))
    }
}

/// Exact structural information a model carries beyond its matrices.
#[derive(Debug, Clone)]
pub enum ExactStructure {
    /// Convolution on `ℤ^d`: full symbol calculus on the torus.
    Symbol(SymbolData),
    /// `H = h(P)` on a periodic grid: sampled symbol and derivatives.
    MomentumFunction {
        h: Vec<f64>,
        dh: Vec<f64>,
        d2h: Vec<f64>,
    },
    /// `H' = v` identically (Friedrichs type).
    ConstantVelocity { v: Vec<f64> },
    /// `H' = H`, `H'' = H` (Φ-homogeneous of degree 1, Laguerre type).
    PhiScaling,
    /// `H' = 1`, `H'' = 0` (Hermite type).
    UnitVelocity,
    /// Waveguide `H = E_k ⊗ 1 + 1 ⊗ P²`: `H' = 1 ⊗ 2P`, `H'' = 2`.
    Waveguide {
        mode_energies: Vec<f64>,
    },
    /// Adjacency on a level graph: `H'` is the `±i`-directed adjacency and
    /// `H'' = −H`.
    DirectedAdjacency,
}

/// How interior residuals are evaluated for this model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualStyle {
    /// Finite-range model: identities hold entrywise on interior columns.
    InteriorColumns,
    /// Spectral grid model: identities hold on smooth interior wave packets.
    WavePackets,
}

/// Geometric layout of the storage basis.
#[derive(Debug, Clone)]
pub enum Geometry {
    /// Jacobi half-line, indices n = 1..N stored 0-based; hard wall at N.
    HalfLine { n: usize },
    /// `ℤ^d` box, axis a holds `2 B_a` sites `g ∈ [−B_a, B_a − 1]`, row-major.
    PeriodicLattice { radius: Vec<i64> },
    /// 1-d grid `x_j = −L/2 + j L/n`, j = 0..n−1, periodic `H`.
    PeriodicGrid { n: usize, length: f64 },
    /// Mode index (slow) ⊗ periodic grid (fast).
    ModesLine { modes: usize, n: usize, length: f64 },
    /// Cyclic level graph: one vertex entry per site, carrying its level.
    LevelGraph {
        levels: Vec<i64>,
        vertex_level: Vec<i64>,
        num_levels: usize,
    },
}

/// A model instance: `H`, the commuting family `Φ`, truncation metadata and
/// whatever exact structure the construction provides.
#[derive(Debug)]
pub struct OperatorPair {
    pub h: HermitianOperator,
    pub phi: Vec<HermitianOperator>,
    pub interior_mask: Vec<bool>,
    pub model_id: String,
    pub exact: Option<ExactStructure>,
    pub geometry: Geometry,
    pub residual_style: ResidualStyle,
    spectral_cache: OnceLock<Arc<JointSpectralData>>,
}

impl Clone for OperatorPair {
    fn clone(&self) -> Self {
        Self {
            h: self.h.clone(),
            phi: self.phi.clone(),
            interior_mask: self.interior_mask.clone(),
            model_id: self.model_id.clone(),
            exact: self.exact.clone(),
            geometry: self.geometry.clone(),
            residual_style: self.residual_style,
            spectral_cache: OnceLock::new(),
        }
    }
}

impl OperatorPair {
    /// Assembles a pair from explicit parts (used for reduced models).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        h: HermitianOperator,
        phi: Vec<HermitianOperator>,
        interior_mask: Vec<bool>,
        model_id: String,
        exact: Option<ExactStructure>,
        geometry: Geometry,
        residual_style: ResidualStyle,
    ) -> Self {
        Self {
            h,
            phi,
            interior_mask,
            model_id,
            exact,
            geometry,
            residual_style,
            spectral_cache: OnceLock::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.h.dim()
    }

    /// Number of position components.
    pub fn d(&self) -> usize {
        self.phi.len()
    }

    /// Pairwise commutation of the Φ family plus mask sanity.
    pub fn validate(&self) -> Result<(), ModelError> {
        for j in 0..self.phi.len() {
            for k in (j + 1)..self.phi.len() {
                let a = self.phi[j].matrix();
                let b = self.phi[k].matrix();
                let comm = (a * b - b * a).norm();
                let scale = (self.phi[j].frobenius_norm() * self.phi[k].frobenius_norm()).max(1e-300);
                if comm > 1e-12 * scale {
                    return Err(ModelError::Invalid(format!(
                        "Φ_{j} and Φ_{k} do not commute (relative residual {:.3e})",
                        comm / scale
                    )));
                }
            }
        }
        let kept = self.interior_mask.iter().filter(|&&b| b).count();
        if 2 * kept < self.dim() {
            return Err(ModelError::Invalid(format!(
                "interior mask keeps {kept} of {} basis vectors (floor is 50%)",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Per-site position vectors when every Φ component is diagonal.
    pub fn phi_positions(&self) -> Option<Vec<Vec<f64>>> {
        let n = self.dim();
        let mut out = vec![vec![0.0; self.phi.len()]; n];
        for (a, phi) in self.phi.iter().enumerate() {
            let m = phi.matrix();
            for i in 0..n {
                for j in 0..n {
                    if i != j && m[(i, j)].norm() > 0.0 {
                        return None;
                    }
                }
                out[i][a] = m[(i, i)].re;
            }
        }
        Some(out)
    }

    /// Fraction of `‖v‖²` carried by interior basis vectors.
    pub fn interior_mass(&self, v: &CVector) -> f64 {
        let total: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        if total == 0.0 {
            return 0.0;
        }
        let inside: f64 = v
            .iter()
            .zip(&self.interior_mask)
            .filter(|(_, &m)| m)
            .map(|(z, _)| z.norm_sqr())
            .sum();
        inside / total
    }

    /// Exact derived operators `H'_j` where the construction provides them.
    pub fn exact_hp(&self) -> Option<Vec<HermitianOperator>> {
        let n = self.dim();
        match self.exact.as_ref()? {
            ExactStructure::Symbol(sym) => {
                let mut out = Vec::new();
                for j in 0..sym.dimension {
                    let coeffs: Vec<(Vec<i64>, C64)> = sym
                        .coeffs
                        .iter()
                        .map(|(g, c)| (g.clone(), C64::new(0.0, -(g[j] as f64)) * c))
                        .collect();
                    out.push(self.circulant_from_coeffs(&coeffs, &format!("Hp{j}")));
                }
                Some(out)
            }
            ExactStructure::MomentumFunction { dh, .. } => {
                Some(vec![self.momentum_multiplier(dh, "Hp0")])
            }
            ExactStructure::ConstantVelocity { v } => Some(
                v.iter()
                    .enumerate()
                    .map(|(j, &vj)| {
                        let mut m = CMatrix::zeros(n, n);
                        for i in 0..n {
                            m[(i, i)] = C64::new(vj, 0.0);
                        }
                        HermitianOperator::new(format!("Hp{j}"), m).unwrap()
                    })
                    .collect(),
            ),
            ExactStructure::PhiScaling => Some(vec![self.h.clone().relabeled("Hp0")]),
            ExactStructure::UnitVelocity => {
                Some(vec![HermitianOperator::identity("Hp0", n)])
            }
            ExactStructure::Waveguide { .. } => {
                let (modes, grid, length) = match &self.geometry {
                    Geometry::ModesLine { modes, n, length } => (*modes, *n, *length),
                    _ => return None,
                };
                let momenta = grid_momenta(grid, length);
                let dh: Vec<f64> = momenta.iter().map(|&p| 2.0 * p).collect();
                let line = momentum_multiplier_matrix(grid, length, &dh);
                Some(vec![HermitianOperator::new(
                    "Hp0",
                    kron_identity_left(modes, &line),
                )
                .unwrap()])
            }
            ExactStructure::DirectedAdjacency => {
                let (vertex_level, num_levels) = match &self.geometry {
                    Geometry::LevelGraph {
                        vertex_level,
                        num_levels,
                        ..
                    } => (vertex_level, *num_levels),
                    _ => return None,
                };
                let mut m = CMatrix::zeros(n, n);
                let hm = self.h.matrix();
                for r in 0..n {
                    for c in 0..n {
                        if hm[(r, c)].norm() > 0.0 {
                            // +i when the column vertex sits one level above
                            // the row vertex (cyclically), −i otherwise.
                            let up = cyclic_next(vertex_level[r], vertex_level[c], num_levels);
                            let sign = if up { 1.0 } else { -1.0 };
                            m[(r, c)] = C64::new(0.0, sign) * hm[(r, c)];
                        }
                    }
                }
                Some(vec![HermitianOperator::new("Hp0", m).unwrap()])
            }
        }
    }

    /// Exact second-derivative operators `H''_{jk}`.
    pub fn exact_hpp(&self) -> Option<Vec<Vec<HermitianOperator>>> {
        let n = self.dim();
        let d = self.d();
        match self.exact.as_ref()? {
            ExactStructure::Symbol(sym) => {
                let mut rows = Vec::new();
                for j in 0..d {
                    let mut row = Vec::new();
                    for k in 0..d {
                        let coeffs: Vec<(Vec<i64>, C64)> = sym
                            .coeffs
                            .iter()
                            .map(|(g, c)| {
                                (
                                    g.clone(),
                                    C64::new(-(g[j] as f64) * (g[k] as f64), 0.0) * c,
                                )
                            })
                            .collect();
                        row.push(self.circulant_from_coeffs(&coeffs, &format!("Hpp{j}{k}")));
                    }
                    rows.push(row);
                }
                Some(rows)
            }
            ExactStructure::MomentumFunction { d2h, .. } => {
                Some(vec![vec![self.momentum_multiplier(d2h, "Hpp00")]])
            }
            ExactStructure::ConstantVelocity { .. } => {
                let zero = HermitianOperator::new("Hpp", CMatrix::zeros(n, n)).unwrap();
                Some(vec![vec![zero; d]; d])
            }
            ExactStructure::PhiScaling => Some(vec![vec![self.h.clone().relabeled("Hpp00")]]),
            ExactStructure::UnitVelocity => Some(vec![vec![HermitianOperator::new(
                "Hpp00",
                CMatrix::zeros(n, n),
            )
            .unwrap()]]),
            ExactStructure::Waveguide { .. } => {
                let two = CMatrix::identity(n, n).map(|z| z.scale(2.0));
                Some(vec![vec![HermitianOperator::new("Hpp00", two).unwrap()]])
            }
            ExactStructure::DirectedAdjacency => {
                let neg = self.h.matrix().map(|z| -z);
                Some(vec![vec![HermitianOperator::new("Hpp00", neg).unwrap()]])
            }
        }
    }

    fn circulant_from_coeffs(&self, coeffs: &[(Vec<i64>, C64)], label: &str) -> HermitianOperator {
        let radius = match &self.geometry {
            Geometry::PeriodicLattice { radius } => radius.clone(),
            _ => panic!("circulant construction requires a periodic lattice"),
        };
        let sites = lattice_sites(&radius);
        let n = sites.len();
        let mut m = CMatrix::zeros(n, n);
        for (r, g1) in sites.iter().enumerate() {
            for (c, g2) in sites.iter().enumerate() {
                let mut h = vec![0i64; radius.len()];
                for a in 0..radius.len() {
                    h[a] = wrap_difference(g1[a] - g2[a], radius[a]);
                }
                if let Some((_, v)) = coeffs.iter().find(|(g, _)| *g == h) {
                    m[(r, c)] = *v;
                }
            }
        }
        HermitianOperator::new(label, m).unwrap()
    }

    fn momentum_multiplier(&self, values: &[f64], label: &str) -> HermitianOperator {
        let (n, length) = match &self.geometry {
            Geometry::PeriodicGrid { n, length } => (*n, *length),
            _ => panic!("momentum multiplier requires a periodic grid"),
        };
        HermitianOperator::new(label, momentum_multiplier_matrix(n, length, values)).unwrap()
    }

    /// Joint spectral data for the family `{H, H'_j, H''_{jk} (j ≤ k)}`,
    /// built from exact structure where available (plane waves, or a dense
    /// eigendecomposition of `H` combined with exact scalar relations).
    ///
    /// Labels follow the convention `H`, `Hp0`…, `Hpp00`, `Hpp01`, ….
    pub fn spectral(&self) -> Result<Arc<JointSpectralData>, ModelError> {
        if let Some(cached) = self.spectral_cache.get() {
            return Ok(cached.clone());
        }
        let data = self.build_spectral()?;
        let arc = Arc::new(data);
        let _ = self.spectral_cache.set(arc.clone());
        Ok(arc)
    }

    fn build_spectral(&self) -> Result<JointSpectralData, ModelError> {
        let d = self.d();
        let mut labels = vec!["H".to_string()];
        for j in 0..d {
            labels.push(format!("Hp{j}"));
        }
        for j in 0..d {
            for k in j..d {
                labels.push(format!("Hpp{j}{k}"));
            }
        }

        match self.exact.as_ref() {
            Some(ExactStructure::Symbol(sym)) => {
                let radius = match &self.geometry {
                    Geometry::PeriodicLattice { radius } => radius.clone(),
                    _ => unreachable!(),
                };
                let sites = lattice_sites(&radius);
                let momenta = lattice_momenta(&radius);
                let n = sites.len();
                let norm = 1.0 / (n as f64).sqrt();
                let mut basis = CMatrix::zeros(n, n);
                for (col, xi) in momenta.iter().enumerate() {
                    for (row, g) in sites.iter().enumerate() {
                        let phase: f64 =
                            g.iter().zip(xi).map(|(&gi, &x)| gi as f64 * x).sum();
                        basis[(row, col)] = C64::new(0.0, phase).exp().scale(norm);
                    }
                }
                let mut table = vec![momenta.iter().map(|xi| sym.m(xi)).collect::<Vec<f64>>()];
                for j in 0..d {
                    table.push(momenta.iter().map(|xi| sym.dm(&[j], xi)).collect());
                }
                for j in 0..d {
                    for k in j..d {
                        table.push(momenta.iter().map(|xi| sym.dm(&[j, k], xi)).collect());
                    }
                }
                Ok(JointSpectralData::from_parts(basis, table, labels))
            }
            Some(ExactStructure::MomentumFunction { h, dh, d2h }) => {
                let (n, length) = match &self.geometry {
                    Geometry::PeriodicGrid { n, length } => (*n, *length),
                    _ => unreachable!(),
                };
                let basis = plane_wave_basis(n, length);
                let table = vec![h.clone(), dh.clone(), d2h.clone()];
                Ok(JointSpectralData::from_parts(basis, table, labels))
            }
            Some(ExactStructure::ConstantVelocity { v }) => {
                let (vals, basis) = eigh(&self.h);
                let n = vals.len();
                let mut table = vec![vals];
                for &vj in v {
                    table.push(vec![vj; n]);
                }
                for _ in 0..(d * (d + 1)) / 2 {
                    table.push(vec![0.0; n]);
                }
                Ok(JointSpectralData::from_parts(basis, table, labels))
            }
            Some(ExactStructure::PhiScaling) => {
                let (vals, basis) = eigh(&self.h);
                let table = vec![vals.clone(), vals.clone(), vals];
                Ok(JointSpectralData::from_parts(basis, table, labels))
            }
            Some(ExactStructure::UnitVelocity) => {
                let (vals, basis) = eigh(&self.h);
                let n = vals.len();
                let table = vec![vals, vec![1.0; n], vec![0.0; n]];
                Ok(JointSpectralData::from_parts(basis, table, labels))
            }
            Some(ExactStructure::Waveguide { mode_energies }) => {
                let (modes, grid, length) = match &self.geometry {
                    Geometry::ModesLine { modes, n, length } => (*modes, *n, *length),
                    _ => unreachable!(),
                };
                let line = plane_wave_basis(grid, length);
                let basis = kron_identity_left(modes, &line);
                let momenta = grid_momenta(grid, length);
                let n = modes * grid;
                let mut h_row = Vec::with_capacity(n);
                let mut dh_row = Vec::with_capacity(n);
                let mut d2h_row = Vec::with_capacity(n);
                for &e in mode_energies.iter().take(modes) {
                    for &p in &momenta {
                        h_row.push(e + p * p);
                        dh_row.push(2.0 * p);
                        d2h_row.push(2.0);
                    }
                }
                let table = vec![h_row, dh_row, d2h_row];
                Ok(JointSpectralData::from_parts(basis, table, labels))
            }
            Some(ExactStructure::DirectedAdjacency) => {
                let hp = self.exact_hp().unwrap().remove(0);
                let data = joint_diagonalize(&[&self.h, &hp], 1e-12, 0)?;
                let basis = data.basis().clone();
                let h_row = data.eigenvalues(0).to_vec();
                let hp_row = data.eigenvalues(1).to_vec();
                let hpp_row: Vec<f64> = h_row.iter().map(|&x| -x).collect();
                Ok(JointSpectralData::from_parts(
                    basis,
                    vec![h_row, hp_row, hpp_row],
                    labels,
                ))
            }
            None => Err(ModelError::Invalid(format!(
                "model `{}` carries no exact structure; diagonalize explicitly",
                self.model_id
            ))),
        }
    }

    /// Deterministic interior residual probes.
    ///
    /// For finite-range models these are interior basis vectors (subsampled);
    /// for spectral grid models, Gaussian wave packets whose position and
    /// momentum supports stay away from the seam and the band edges.
    pub fn residual_states(&self, count: usize, seed: u64) -> Vec<CVector> {
        match self.residual_style {
            ResidualStyle::InteriorColumns => {
                let interior: Vec<usize> = (0..self.dim())
                    .filter(|&i| self.interior_mask[i])
                    .collect();
                let take = count.max(8).min(interior.len());
                let stride = (interior.len().max(1) / take.max(1)).max(1);
                interior
                    .iter()
                    .step_by(stride)
                    .take(take)
                    .map(|&i| {
                        let mut v = CVector::zeros(self.dim());
                        v[i] = C64::new(1.0, 0.0);
                        v
                    })
                    .collect()
            }
            ResidualStyle::WavePackets => self.interior_packets(count, seed),
        }
    }

    /// Normalised Gaussian wave packets localised well inside the interior.
    pub fn interior_packets(&self, count: usize, seed: u64) -> Vec<CVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7061636b);
        let n = self.dim();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let v = match &self.geometry {
                Geometry::PeriodicGrid { n: grid, length } => {
                    let center = rng.gen_range(-0.10..0.10) * length;
                    let spacing = length / *grid as f64;
                    let sigma = (4.0 * spacing).max(length / 80.0);
                    let p_max = std::f64::consts::PI * (*grid as f64) / length;
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let p0 = sign * rng.gen_range(0.08..0.30) * p_max;
                    grid_packet(*grid, *length, center, sigma, p0)
                }
                Geometry::PeriodicLattice { radius } => {
                    lattice_packet(radius, &mut rng)
                }
                Geometry::HalfLine { n } => {
                    // Φ generates an index dilation on these chains, so keep
                    // packets low enough that moderate conjugations cannot
                    // push their support into the truncation cut.
                    let center = rng.gen_range(0.25..0.40) * (*n as f64);
                    let sigma = *n as f64 / 24.0;
                    let theta = rng.gen_range(0.2..0.8) * std::f64::consts::PI;
                    index_packet(*n, center, sigma, theta)
                }
                Geometry::ModesLine { modes, n: grid, length } => {
                    let center = rng.gen_range(-0.10..0.10) * length;
                    let spacing = length / *grid as f64;
                    let sigma = (3.0 * spacing).max(length / 80.0);
                    let p_max = std::f64::consts::PI * (*grid as f64) / length;
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let p0 = sign * rng.gen_range(0.08..0.35) * p_max;
                    let line = grid_packet(*grid, *length, center, sigma, p0);
                    let mut v = CVector::zeros(*modes * *grid);
                    let mut amps: Vec<C64> = (0..*modes)
                        .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                        .collect();
                    let norm: f64 = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
                    for a in amps.iter_mut() {
                        *a /= C64::new(norm, 0.0);
                    }
                    for (k, amp) in amps.iter().enumerate() {
                        for j in 0..*grid {
                            v[k * *grid + j] = amp * line[j];
                        }
                    }
                    v
                }
                Geometry::LevelGraph {
                    levels,
                    vertex_level,
                    num_levels,
                } => {
                    // Centre the envelope opposite the wrap seam.
                    let z_min = *levels.iter().min().unwrap() as f64;
                    let z_max = *levels.iter().max().unwrap() as f64;
                    let mid = 0.5 * (z_min + z_max) + rng.gen_range(-0.1..0.1) * (*num_levels as f64);
                    let sigma = *num_levels as f64 / 14.0;
                    let theta = rng.gen_range(0.2..0.8) * std::f64::consts::PI;
                    let mut v = CVector::zeros(n);
                    for (i, &z) in vertex_level.iter().enumerate() {
                        let env = (-((z as f64 - mid) / (2.0 * sigma)).powi(2)).exp();
                        let phase = C64::new(0.0, theta * z as f64).exp();
                        let jitter = C64::new(rng.gen_range(0.5..1.0), 0.0);
                        v[i] = phase * jitter.scale(env);
                    }
                    v
                }
            };
            let norm = v.norm();
            if norm > 0.0 {
                out.push(v.map(|z| z / C64::new(norm, 0.0)));
            }
        }
        out
    }

    /// `max_v ‖D v‖` over the deterministic residual states.
    pub fn interior_residual(&self, diff: &CMatrix) -> f64 {
        let states = self.residual_states(12, 0);
        states
            .iter()
            .map(|v| (diff * v).norm())
            .fold(0.0, f64::max)
    }

    /// Like [`Self::interior_residual`] but for an operator given as a map.
    pub fn interior_residual_op<F>(&self, apply: F) -> f64
    where
        F: Fn(&CVector) -> CVector,
    {
        let states = self.residual_states(12, 0);
        states.iter().map(|v| apply(v).norm()).fold(0.0, f64::max)
    }

    /// Residual probes for checks involving conjugations `e^{−ix·Φ} A e^{ix·Φ}`.
    ///
    /// With diagonal Φ the conjugation is a diagonal phase, so banded
    /// operators stay banded and seam corruption stays at the seam: interior
    /// columns remain exact probes. Non-diagonal Φ (the half-line chains)
    /// generates a genuine flow, which needs flow-aware packets instead.
    pub fn conjugation_states(&self) -> Vec<CVector> {
        match (&self.geometry, self.residual_style) {
            (Geometry::HalfLine { .. }, _) => self.interior_packets(12, 0),
            (_, ResidualStyle::InteriorColumns) => self.residual_states(12, 0),
            (_, ResidualStyle::WavePackets) => self.interior_packets(12, 0),
        }
    }

    /// `max_v ‖apply(v)‖` over [`Self::conjugation_states`].
    pub fn packet_residual_op<F>(&self, apply: F) -> f64
    where
        F: Fn(&CVector) -> CVector,
    {
        self.conjugation_states()
            .iter()
            .map(|v| apply(v).norm())
            .fold(0.0, f64::max)
    }

    /// Safe magnitude for conjugation parameters `x` in `e^{−ix·Φ}`.
    ///
    /// On the half-line chains the Φ-flow dilates the site index, so desk
    /// scale windows only support small conjugation parameters before the
    /// probe support reaches the cut.
    pub fn conjugation_x_scale(&self) -> f64 {
        match self.geometry {
            Geometry::HalfLine { .. } => 0.4,
            _ => 2.0,
        }
    }

    /// Deterministic conjugation-parameter samples within the safe range.
    pub fn conjugation_samples(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f6e6a);
        let scale = self.conjugation_x_scale();
        (0..count)
            .map(|_| {
                (0..self.d())
                    .map(|_| rng.gen_range(-scale..scale))
                    .collect()
            })
            .collect()
    }

    /// Upper bound for `‖H‖` (max absolute row sum).
    pub fn h_norm_bound(&self) -> f64 {
        let m = self.h.matrix();
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Full extent of the position range per axis (for box-validity guards).
    pub fn phi_extent(&self) -> Vec<f64> {
        match self.phi_positions() {
            Some(pos) => {
                let d = self.d();
                (0..d)
                    .map(|a| {
                        let (lo, hi) = pos.iter().fold(
                            (f64::INFINITY, f64::NEG_INFINITY),
                            |(lo, hi), p| (lo.min(p[a]), hi.max(p[a])),
                        );
                        hi - lo
                    })
                    .collect()
            }
            None => {
                // Tridiagonal Φ: use the spectral range estimate instead.
                self.phi
                    .iter()
                    .map(|phi| 2.0 * phi.frobenius_norm() / (phi.dim() as f64).sqrt())
                    .collect()
            }
        }
    }
}

fn cyclic_next(from: i64, to: i64, num_levels: usize) -> bool {
    let l = num_levels as i64;
    (to - from).rem_euclid(l) == 1
}

fn wrap_difference(diff: i64, radius: i64) -> i64 {
    let n = 2 * radius;
    let mut d = diff.rem_euclid(n);
    if d >= radius {
        d -= n;
    }
    d
}

/// Row-major enumeration of `Π_a [−B_a, B_a − 1]`.
pub fn lattice_sites(radius: &[i64]) -> Vec<Vec<i64>> {
    let mut sites = vec![vec![]];
    for &b in radius {
        let mut next = Vec::with_capacity(sites.len() * (2 * b) as usize);
        for s in &sites {
            for g in -b..b {
                let mut t = s.clone();
                t.push(g);
                next.push(t);
            }
        }
        sites = next;
    }
    sites
}

/// Momenta `ξ_a = π k_a / B_a`, enumerated exactly like [`lattice_sites`].
pub fn lattice_momenta(radius: &[i64]) -> Vec<Vec<f64>> {
    lattice_sites(radius)
        .into_iter()
        .map(|k| {
            k.iter()
                .zip(radius)
                .map(|(&ki, &b)| std::f64::consts::PI * ki as f64 / b as f64)
                .collect()
        })
        .collect()
}

/// Grid momenta `p_k = 2π k̃ / L`, `k̃ = −n/2 … n/2 − 1`, ascending.
pub fn grid_momenta(n: usize, length: f64) -> Vec<f64> {
    let half = n as i64 / 2;
    (-half..half)
        .map(|k| 2.0 * std::f64::consts::PI * k as f64 / length)
        .collect()
}

/// Grid positions `x_j = −L/2 + j L / n`.
pub fn grid_positions(n: usize, length: f64) -> Vec<f64> {
    (0..n)
        .map(|j| -0.5 * length + j as f64 * length / n as f64)
        .collect()
}

fn plane_wave_basis(n: usize, length: f64) -> CMatrix {
    let xs = grid_positions(n, length);
    let ps = grid_momenta(n, length);
    let norm = 1.0 / (n as f64).sqrt();
    let mut basis = CMatrix::zeros(n, n);
    for (col, &p) in ps.iter().enumerate() {
        for (row, &x) in xs.iter().enumerate() {
            basis[(row, col)] = C64::new(0.0, p * x).exp().scale(norm);
        }
    }
    basis
}

fn momentum_multiplier_matrix(n: usize, length: f64, values: &[f64]) -> CMatrix {
    let basis = plane_wave_basis(n, length);
    let mut scaled = basis.clone();
    for (col, &v) in values.iter().enumerate() {
        for z in scaled.column_mut(col).iter_mut() {
            *z *= C64::new(v, 0.0);
        }
    }
    let m = scaled * basis.adjoint();
    (&m + m.adjoint()).scale(0.5)
}

fn kron_identity_left(copies: usize, block: &CMatrix) -> CMatrix {
    let b = block.nrows();
    let n = copies * b;
    let mut m = CMatrix::zeros(n, n);
    for c in 0..copies {
        for i in 0..b {
            for j in 0..b {
                m[(c * b + i, c * b + j)] = block[(i, j)];
            }
        }
    }
    m
}

fn grid_packet(n: usize, length: f64, center: f64, sigma: f64, p0: f64) -> CVector {
    let xs = grid_positions(n, length);
    CVector::from_iterator(
        n,
        xs.iter().map(|&x| {
            let env = (-((x - center) / (2.0 * sigma)).powi(2)).exp();
            C64::new(0.0, p0 * x).exp().scale(env)
        }),
    )
}

fn index_packet(n: usize, center: f64, sigma: f64, theta: f64) -> CVector {
    CVector::from_iterator(
        n,
        (0..n).map(|i| {
            let env = (-((i as f64 - center) / (2.0 * sigma)).powi(2)).exp();
            C64::new(0.0, theta * i as f64).exp().scale(env)
        }),
    )
}

fn lattice_packet(radius: &[i64], rng: &mut ChaCha8Rng) -> CVector {
    let sites = lattice_sites(radius);
    let d = radius.len();
    let centers: Vec<f64> = radius
        .iter()
        .map(|&b| rng.gen_range(-0.15..0.15) * b as f64)
        .collect();
    let sigmas: Vec<f64> = radius
        .iter()
        .map(|&b| (b as f64 / 40.0).max(3.0))
        .collect();
    let carriers: Vec<f64> = (0..d)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.2..0.8) * std::f64::consts::PI
        })
        .collect();
    CVector::from_iterator(
        sites.len(),
        sites.iter().map(|g| {
            let mut env = 0.0;
            let mut phase = 0.0;
            for a in 0..d {
                env += -((g[a] as f64 - centers[a]) / (2.0 * sigmas[a])).powi(2);
                phase += carriers[a] * g[a] as f64;
            }
            C64::new(0.0, phase).exp().scale(env.exp())
        }),
    )
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

/// Jacobi matrix of the Hermite-type recursion, with `H' = 1`.
///
/// Row `n` (1-based): `(Hφ)(n) = (√(n−1)/2) φ(n−1) + (√n/2) φ(n+1)`,
/// `(Φφ)(n) = −i{√(n−1) φ(n−1) − √n φ(n+1)}`, with `φ(0) = 0`.
pub fn build_jacobi_hermite(n: usize) -> Result<OperatorPair, ModelError> {
    if n < 8 {
        return Err(ModelError::BadDimension(format!(
            "Hermite chain needs at least 8 sites, got {n}"
        )));
    }
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut phi = CMatrix::zeros(n, n);
    for i in 0..n - 1 {
        let c = ((i + 1) as f64).sqrt();
        h[(i, i + 1)] = c / 2.0;
        h[(i + 1, i)] = c / 2.0;
        phi[(i, i + 1)] = C64::new(0.0, c);
        phi[(i + 1, i)] = C64::new(0.0, -c);
    }
    let cut = n - n.div_ceil(8);
    Ok(OperatorPair {
        h: HermitianOperator::from_real("H", h)?,
        phi: vec![HermitianOperator::new("Phi0", phi)?],
        interior_mask: (0..n).map(|i| i < cut).collect(),
        model_id: "jacobi_hermite".into(),
        exact: Some(ExactStructure::UnitVelocity),
        geometry: Geometry::HalfLine { n },
        residual_style: ResidualStyle::InteriorColumns,
        spectral_cache: OnceLock::new(),
    })
}

/// Jacobi matrix of the Laguerre-type recursion, with `H' = H`.
///
/// Row `n`: `(Hφ)(n) = (n−1) φ(n−1) + (2n−1) φ(n) + n φ(n+1)`,
/// `(Φφ)(n) = −(i/2){(n−1) φ(n−1) − n φ(n+1)}`.
pub fn build_jacobi_laguerre(n: usize) -> Result<OperatorPair, ModelError> {
    if n < 8 {
        return Err(ModelError::BadDimension(format!(
            "Laguerre chain needs at least 8 sites, got {n}"
        )));
    }
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut phi = CMatrix::zeros(n, n);
    for i in 0..n {
        h[(i, i)] = (2 * i + 1) as f64;
    }
    for i in 0..n - 1 {
        let c = (i + 1) as f64;
        h[(i, i + 1)] = c;
        h[(i + 1, i)] = c;
        phi[(i, i + 1)] = C64::new(0.0, c / 2.0);
        phi[(i + 1, i)] = C64::new(0.0, -c / 2.0);
    }
    let cut = n - n.div_ceil(8);
    Ok(OperatorPair {
        h: HermitianOperator::from_real("H", h)?,
        phi: vec![HermitianOperator::new("Phi0", phi)?],
        interior_mask: (0..n).map(|i| i < cut).collect(),
        model_id: "jacobi_laguerre".into(),
        exact: Some(ExactStructure::PhiScaling),
        geometry: Geometry::HalfLine { n },
        residual_style: ResidualStyle::InteriorColumns,
        spectral_cache: OnceLock::new(),
    })
}

/// Convolution by a finitely supported symmetric measure on a periodic
/// `ℤ^d` box with `2 B_a` sites per axis; Φ stays the true position.
pub fn build_convolution_zd(
    coeffs: Vec<(Vec<i64>, C64)>,
    box_radius: Vec<i64>,
) -> Result<OperatorPair, ModelError> {
    let d = box_radius.len();
    let sym = SymbolData::new(d, coeffs)?;
    for (axis, &b) in box_radius.iter().enumerate() {
        let support = sym.support_radius(axis);
        if b < (4 * support).max(2) {
            return Err(ModelError::SupportTooLargeForBox {
                axis,
                support,
                needed: (4 * support).max(2),
                radius: b,
            });
        }
    }
    let sites = lattice_sites(&box_radius);
    let n = sites.len();
    let mut h = CMatrix::zeros(n, n);
    for (r, g1) in sites.iter().enumerate() {
        for (c, g2) in sites.iter().enumerate() {
            let mut diff = vec![0i64; d];
            for a in 0..d {
                diff[a] = wrap_difference(g1[a] - g2[a], box_radius[a]);
            }
            if let Some((_, v)) = sym.coeffs.iter().find(|(g, _)| *g == diff) {
                h[(r, c)] = *v;
            }
        }
    }
    let mut phi = Vec::with_capacity(d);
    for a in 0..d {
        let diag: Vec<f64> = sites.iter().map(|g| g[a] as f64).collect();
        phi.push(HermitianOperator::from_real_diagonal(format!("Phi{a}"), &diag));
    }
    let mask: Vec<bool> = sites
        .iter()
        .map(|g| {
            (0..d).all(|a| {
                let b = box_radius[a];
                let margin = (2 * sym.support_radius(a)).max(1);
                let dist = (g[a] + b).min(b - 1 - g[a]);
                dist >= margin
            })
        })
        .collect();
    Ok(OperatorPair {
        h: HermitianOperator::new("H", h)?,
        phi,
        interior_mask: mask,
        model_id: "convolution_zd".into(),
        exact: Some(ExactStructure::Symbol(sym)),
        geometry: Geometry::PeriodicLattice { radius: box_radius },
        residual_style: ResidualStyle::InteriorColumns,
        spectral_cache: OnceLock::new(),
    })
}

/// Nearest-neighbour hopping `μ = c(δ_1 + δ_{−1})` on `ℤ` (symbol `2c·cos ξ`).
pub fn hopping_measure(c: f64) -> Vec<(Vec<i64>, C64)> {
    vec![
        (vec![1], C64::new(c, 0.0)),
        (vec![-1], C64::new(c, 0.0)),
    ]
}

/// Transport Hamiltonian `H = v·P + V(Q)` on a periodic grid, `Φ = Q`.
pub fn build_friedrichs(
    v: f64,
    potential: &[f64],
    n: usize,
    box_length: f64,
) -> Result<OperatorPair, ModelError> {
    if v == 0.0 {
        return Err(ModelError::ZeroVelocity);
    }
    if !n.is_power_of_two() || n < 16 {
        return Err(ModelError::BadDimension(format!(
            "grid size must be a power of two >= 16, got {n}"
        )));
    }
    if potential.len() != n {
        return Err(ModelError::BadDimension(format!(
            "potential has {} samples but the grid has {n}",
            potential.len()
        )));
    }
    if potential.iter().any(|x| !x.is_finite()) {
        return Err(ModelError::BadDimension("potential must be finite".into()));
    }
    let momenta = grid_momenta(n, box_length);
    let scaled: Vec<f64> = momenta.iter().map(|&p| v * p).collect();
    let mut h = momentum_multiplier_matrix(n, box_length, &scaled);
    for j in 0..n {
        h[(j, j)] += C64::new(potential[j], 0.0);
    }
    let positions = grid_positions(n, box_length);
    Ok(OperatorPair {
        h: HermitianOperator::new("H", h)?,
        phi: vec![HermitianOperator::from_real_diagonal("Phi0", &positions)],
        interior_mask: interior_quarter_mask(n),
        model_id: "friedrichs".into(),
        exact: Some(ExactStructure::ConstantVelocity { v: vec![v] }),
        geometry: Geometry::PeriodicGrid { n, length: box_length },
        residual_style: ResidualStyle::WavePackets,
        spectral_cache: OnceLock::new(),
    })
}

/// Dispersive Hamiltonian `H = h(P)` on a periodic grid, `Φ = Q`.
///
/// The second derivative is optional; when absent it is recovered from `h'`
/// by central differences on the momentum grid.
pub fn build_dispersive<F, G>(
    h_symbol: F,
    dh_symbol: G,
    d2h_symbol: Option<Box<dyn Fn(f64) -> f64>>,
    n: usize,
    box_length: f64,
) -> Result<OperatorPair, ModelError>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    if !n.is_power_of_two() || n < 16 {
        return Err(ModelError::BadDimension(format!(
            "grid size must be a power of two >= 16, got {n}"
        )));
    }
    let momenta = grid_momenta(n, box_length);
    let mut h_vals = Vec::with_capacity(n);
    let mut dh_vals = Vec::with_capacity(n);
    let mut d2h_vals = Vec::with_capacity(n);
    for (idx, &p) in momenta.iter().enumerate() {
        let hv = h_symbol(p);
        let dv = dh_symbol(p);
        let d2 = match &d2h_symbol {
            Some(f) => f(p),
            None => {
                let step = 1e-5 * (1.0 + p.abs());
                (dh_symbol(p + step) - dh_symbol(p - step)) / (2.0 * step)
            }
        };
        if !hv.is_finite() || !dv.is_finite() || !d2.is_finite() {
            return Err(ModelError::NonFiniteSymbol { index: idx, p });
        }
        h_vals.push(hv);
        dh_vals.push(dv);
        d2h_vals.push(d2);
    }
    let h = momentum_multiplier_matrix(n, box_length, &h_vals);
    let positions = grid_positions(n, box_length);
    Ok(OperatorPair {
        h: HermitianOperator::new("H", h)?,
        phi: vec![HermitianOperator::from_real_diagonal("Phi0", &positions)],
        interior_mask: interior_quarter_mask(n),
        model_id: "dispersive".into(),
        exact: Some(ExactStructure::MomentumFunction {
            h: h_vals,
            dh: dh_vals,
            d2h: d2h_vals,
        }),
        geometry: Geometry::PeriodicGrid { n, length: box_length },
        residual_style: ResidualStyle::WavePackets,
        spectral_cache: OnceLock::new(),
    })
}

/// Waveguide `H = −Δ_D^Σ ⊗ 1 + 1 ⊗ P²` with Φ the longitudinal position.
///
/// The transverse cross-section is an interval of length `l_transverse`, so
/// the Dirichlet thresholds are `E_k = (kπ/l_transverse)²`, k = 1..modes.
pub fn build_waveguide(
    l_transverse: f64,
    modes: usize,
    n: usize,
    l_long: f64,
) -> Result<OperatorPair, ModelError> {
    if modes < 1 {
        return Err(ModelError::BadDimension("need at least one mode".into()));
    }
    if !n.is_power_of_two() || n < 16 {
        return Err(ModelError::BadDimension(format!(
            "longitudinal grid must be a power of two >= 16, got {n}"
        )));
    }
    let momenta = grid_momenta(n, l_long);
    let p_sq: Vec<f64> = momenta.iter().map(|&p| p * p).collect();
    let line = momentum_multiplier_matrix(n, l_long, &p_sq);
    let mode_energies: Vec<f64> = (1..=modes)
        .map(|k| (k as f64 * std::f64::consts::PI / l_transverse).powi(2))
        .collect();
    let dim = modes * n;
    let mut h = kron_identity_left(modes, &line);
    for (k, &e) in mode_energies.iter().enumerate() {
        for j in 0..n {
            h[(k * n + j, k * n + j)] += C64::new(e, 0.0);
        }
    }
    let positions = grid_positions(n, l_long);
    let mut phi_diag = vec![0.0; dim];
    for k in 0..modes {
        for j in 0..n {
            phi_diag[k * n + j] = positions[j];
        }
    }
    let line_mask = interior_quarter_mask(n);
    let mask: Vec<bool> = (0..dim).map(|i| line_mask[i % n]).collect();
    Ok(OperatorPair {
        h: HermitianOperator::new("H", h)?,
        phi: vec![HermitianOperator::from_real_diagonal("Phi0", &phi_diag)],
        interior_mask: mask,
        model_id: "waveguide".into(),
        exact: Some(ExactStructure::Waveguide { mode_energies }),
        geometry: Geometry::ModesLine { modes, n, length: l_long },
        residual_style: ResidualStyle::WavePackets,
        spectral_cache: OnceLock::new(),
    })
}

fn interior_quarter_mask(n: usize) -> Vec<bool> {
    (0..n).map(|j| j >= n / 4 && j < n - n / 4).collect()
}

// ---------------------------------------------------------------------------
// Adjacency operators on level graphs
// ---------------------------------------------------------------------------

/// A graded graph: consecutive integer levels with per-level multiplicities,
/// complete bipartite edges between consecutive levels.
#[derive(Debug, Clone)]
pub struct GraphSpec {
    /// `(level, multiplicity)`, levels consecutive and ascending.
    pub levels: Vec<(i64, usize)>,
}

impl GraphSpec {
    /// Alternating multiplicities: 1 on even levels, 2 on odd levels.
    pub fn alternating(num_levels: usize) -> Self {
        let half = num_levels as i64 / 2;
        Self {
            levels: (-half..(num_levels as i64 - half))
                .map(|z| (z, if z.rem_euclid(2) == 0 { 1 } else { 2 }))
                .collect(),
        }
    }

    /// Single chain: every level has multiplicity 1.
    pub fn line(num_levels: usize) -> Self {
        let half = num_levels as i64 / 2;
        Self {
            levels: (-half..(num_levels as i64 - half)).map(|z| (z, 1)).collect(),
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.levels.iter().map(|&(_, m)| m).sum()
    }
}

#[derive(Debug, Clone)]
pub struct AdmissibilityReport {
    pub pass: bool,
    /// Closed paths have index zero (automatic for a level grading).
    pub condition_a: bool,
    /// `#{fathers(g) ∩ fathers(h)} = #{sons(g) ∩ sons(h)}` for all pairs.
    pub condition_b: bool,
    pub violation: Option<String>,
}

/// Exhaustive admissibility check on the open (non-periodised) window.
pub fn validate_admissible(spec: &GraphSpec) -> AdmissibilityReport {
    // Levels must be consecutive for the grading argument.
    for w in spec.levels.windows(2) {
        if w[1].0 != w[0].0 + 1 {
            return AdmissibilityReport {
                pass: false,
                condition_a: false,
                condition_b: false,
                violation: Some(format!(
                    "levels {} and {} are not consecutive",
                    w[0].0, w[1].0
                )),
            };
        }
    }
    if spec.levels.iter().any(|&(_, m)| m == 0) {
        return AdmissibilityReport {
            pass: false,
            condition_a: false,
            condition_b: false,
            violation: Some("every level needs multiplicity >= 1".into()),
        };
    }
    // Condition (a): every edge changes the level by exactly +1, so any
    // closed path has as many up-steps as down-steps.
    let condition_a = true;

    // Condition (b) by brute force over same-level vertex pairs (pairs on
    // different levels share no fathers and no sons). Fathers of a vertex at
    // level z form the whole level z+1, sons the level z−1. Levels at the
    // window edge are vacuous: their missing neighbour lies outside the
    // window, so the condition is only checkable when both neighbours exist.
    let mult = |z: i64| -> Option<usize> {
        spec.levels
            .iter()
            .find(|&&(lz, _)| lz == z)
            .map(|&(_, m)| m)
    };
    let mut condition_b = true;
    let mut violation = None;
    for &(zg, _) in &spec.levels {
        let (fathers, sons) = match (mult(zg + 1), mult(zg - 1)) {
            (Some(f), Some(s)) => (f, s),
            _ => continue,
        };
        if fathers != sons {
            condition_b = false;
            violation = Some(format!(
                "level {zg}: {fathers} common fathers vs {sons} common sons"
            ));
            break;
        }
    }
    AdmissibilityReport {
        pass: condition_a && condition_b,
        condition_a,
        condition_b,
        violation,
    }
}

/// Adjacency operator of the periodised level graph with the true level map
/// as Φ. The wrap seam plays the role of the lattice seam; interior masking
/// excludes the two levels on each side of it.
pub fn build_adjacency(spec: &GraphSpec) -> Result<OperatorPair, ModelError> {
    let report = validate_admissible(spec);
    if !report.pass {
        return Err(ModelError::NotAdmissible {
            reason: report.violation.unwrap_or_else(|| "unknown".into()),
        });
    }
    let num_levels = spec.num_levels();
    if num_levels < 6 || num_levels % 2 != 0 {
        return Err(ModelError::BadDimension(format!(
            "need an even number of levels >= 6 for the periodised window, got {num_levels}"
        )));
    }
    // The wrap must itself satisfy the father/son balance, cyclically.
    let mults: Vec<usize> = spec.levels.iter().map(|&(_, m)| m).collect();
    for i in 0..num_levels {
        let up = mults[(i + 1) % num_levels];
        let down = mults[(i + num_levels - 1) % num_levels];
        if up != down {
            return Err(ModelError::NotAdmissible {
                reason: format!(
                    "periodised window unbalanced at level offset {i}: {up} fathers vs {down} sons"
                ),
            });
        }
    }

    let mut vertex_level = Vec::new();
    let mut level_of_index = Vec::new();
    for (li, &(z, m)) in spec.levels.iter().enumerate() {
        for _ in 0..m {
            vertex_level.push(z);
            level_of_index.push(li);
        }
    }
    let n = vertex_level.len();
    let mut h = CMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            if r == c {
                continue;
            }
            let lr = level_of_index[r];
            let lc = level_of_index[c];
            let up = (lc + num_levels - lr) % num_levels == 1;
            let down = (lr + num_levels - lc) % num_levels == 1;
            if up || down {
                h[(r, c)] = C64::new(1.0, 0.0);
            }
        }
    }
    let phi_diag: Vec<f64> = vertex_level.iter().map(|&z| z as f64).collect();
    let mask: Vec<bool> = level_of_index
        .iter()
        .map(|&li| {
            let dist = li.min(num_levels - 1 - li);
            dist >= 2
        })
        .collect();
    Ok(OperatorPair {
        h: HermitianOperator::new("H", h)?,
        phi: vec![HermitianOperator::from_real_diagonal("Phi0", &phi_diag)],
        interior_mask: mask,
        model_id: "adjacency".into(),
        exact: Some(ExactStructure::DirectedAdjacency),
        geometry: Geometry::LevelGraph {
            levels: spec.levels.iter().map(|&(z, _)| z).collect(),
            vertex_level,
            num_levels,
        },
        residual_style: ResidualStyle::InteriorColumns,
        spectral_cache: OnceLock::new(),
    })
}

/// The canonical reduction of the alternating graph to the complement of
/// `ker((H')²)`: a `√2`-weighted hopping chain over the levels, built as a
/// convolution pair so the full symbol machinery applies.
pub fn build_adjacency_reduced(spec: &GraphSpec) -> Result<OperatorPair, ModelError> {
    let num_levels = spec.num_levels();
    let mut pair = build_convolution_zd(
        hopping_measure(2f64.sqrt()),
        vec![num_levels as i64 / 2],
    )?;
    pair.model_id = "adjacency_reduced".into();
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_row_two() {
        let pair = build_jacobi_hermite(8).unwrap();
        let h = pair.h.matrix();
        assert!((h[(1, 0)].re - 0.5).abs() < 1e-15);
        assert_eq!(h[(1, 1)].re, 0.0);
        assert!((h[(1, 2)].re - 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(pair.h.max_asymmetry(), 0.0);
    }

    #[test]
    fn laguerre_three_by_three_corner() {
        let pair = build_jacobi_laguerre(8).unwrap();
        let h = pair.h.matrix();
        let expected = [[1.0, 1.0, 0.0], [1.0, 3.0, 2.0], [0.0, 2.0, 5.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((h[(i, j)].re - expected[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hermite_commutator_is_identity_on_interior() {
        let pair = build_jacobi_hermite(64).unwrap();
        let (hp, _) = pair.h.commutator_i(&pair.phi[0], "Hp");
        let diff = hp.matrix() - CMatrix::identity(64, 64);
        assert!(pair.interior_residual(&diff) < 1e-12);
    }

    #[test]
    fn laguerre_commutator_is_h_on_interior() {
        let pair = build_jacobi_laguerre(64).unwrap();
        let (hp, _) = pair.h.commutator_i(&pair.phi[0], "Hp");
        let diff = hp.matrix() - pair.h.matrix();
        assert!(pair.interior_residual(&diff) < 1e-12);
    }

    #[test]
    fn convolution_hopping_symbol() {
        let pair = build_convolution_zd(hopping_measure(1.0), vec![32]).unwrap();
        assert_eq!(pair.dim(), 64);
        let h = pair.h.matrix();
        assert!((h[(5, 4)].re - 1.0).abs() < 1e-15);
        assert!((h[(0, 63)].re - 1.0).abs() < 1e-15, "wrap entry");
        let sym = match pair.exact.as_ref().unwrap() {
            ExactStructure::Symbol(s) => s.clone(),
            _ => panic!(),
        };
        let xi = [0.37];
        assert!((sym.m(&xi) - 2.0 * 0.37f64.cos()).abs() < 1e-14);
        assert!((sym.dm(&[0], &xi) + 2.0 * 0.37f64.sin()).abs() < 1e-14);
    }

    #[test]
    fn convolution_spectral_data_is_exact() {
        let pair = build_convolution_zd(hopping_measure(1.0), vec![16]).unwrap();
        let data = pair.spectral().unwrap();
        assert!(data.unitarity_defect() < 1e-12);
        assert!(data.residual(&pair.h, 0) < 1e-12);
        let hp = pair.exact_hp().unwrap().remove(0);
        assert!(data.residual(&hp, 1) < 1e-12);
    }

    #[test]
    fn convolution_momenta_include_zero_and_pi() {
        let pair = build_convolution_zd(hopping_measure(1.0), vec![8]).unwrap();
        let data = pair.spectral().unwrap();
        let h_vals = data.eigenvalues(0);
        let has_two = h_vals.iter().any(|&x| (x - 2.0).abs() < 1e-12);
        let has_minus_two = h_vals.iter().any(|&x| (x + 2.0).abs() < 1e-12);
        assert!(has_two && has_minus_two);
    }

    #[test]
    fn delta_zero_measure() {
        let pair =
            build_convolution_zd(vec![(vec![0], C64::new(1.0, 0.0))], vec![4]).unwrap();
        let eye = CMatrix::identity(8, 8);
        assert!((pair.h.matrix() - &eye).norm() < 1e-15);
        let hp = pair.exact_hp().unwrap().remove(0);
        assert!(hp.frobenius_norm() < 1e-15);
    }

    #[test]
    fn asymmetric_measure_rejected() {
        let err = build_convolution_zd(vec![(vec![1], C64::new(1.0, 0.0))], vec![8]);
        assert!(matches!(err, Err(ModelError::AsymmetricMeasure { .. })));
    }

    #[test]
    fn friedrichs_free_transport() {
        let n = 128;
        let pair = build_friedrichs(1.0, &vec![0.0; n], n, 64.0).unwrap();
        // i[H, Q] = v on interior packets.
        let q = pair.phi[0].matrix();
        let (ihq, _) = pair.h.commutator_i(&pair.phi[0], "hp");
        let _ = q;
        let diff = ihq.matrix() - CMatrix::identity(n, n);
        let resid = pair.interior_residual(&diff);
        assert!(resid < 1e-10, "interior residual {resid}");
    }

    #[test]
    fn friedrichs_with_potential_keeps_velocity() {
        let n = 128;
        let length = 64.0;
        let xs = grid_positions(n, length);
        let vpot: Vec<f64> = xs
            .iter()
            .map(|&x| 0.3 * (2.0 * std::f64::consts::PI * x / length).cos())
            .collect();
        let pair = build_friedrichs(1.0, &vpot, n, length).unwrap();
        let (ihq, _) = pair.h.commutator_i(&pair.phi[0], "hp");
        let diff = ihq.matrix() - CMatrix::identity(n, n);
        let resid = pair.interior_residual(&diff);
        assert!(resid < 1e-10, "interior residual {resid}");
    }

    #[test]
    fn dispersive_linear_matches_friedrichs() {
        let n = 32;
        let disp = build_dispersive(|p| p, |_| 1.0, None, n, 16.0).unwrap();
        let fried = build_friedrichs(1.0, &vec![0.0; n], n, 16.0).unwrap();
        assert!((disp.h.matrix() - fried.h.matrix()).norm() < 1e-10);
    }

    #[test]
    fn dispersive_quadratic_hp() {
        let n = 128;
        let pair = build_dispersive(|p| p * p, |p| 2.0 * p, Some(Box::new(|_| 2.0)), n, 64.0)
            .unwrap();
        let (ihq, _) = pair.h.commutator_i(&pair.phi[0], "hp");
        let two_p = pair.exact_hp().unwrap().remove(0);
        let diff = ihq.matrix() - two_p.matrix();
        let resid = pair.interior_residual(&diff);
        assert!(resid < 1e-8, "interior residual {resid}");
    }

    #[test]
    fn waveguide_single_mode_is_dispersive() {
        let n = 32;
        let wg = build_waveguide(std::f64::consts::PI, 1, n, 16.0).unwrap();
        let e1 = 1.0;
        let disp = build_dispersive(|p| p * p + e1, |p| 2.0 * p, Some(Box::new(|_| 2.0)), n, 16.0)
            .unwrap();
        assert!((wg.h.matrix() - disp.h.matrix()).norm() < 1e-10);
    }

    #[test]
    fn figure_graph_admissible_and_commuting() {
        let spec = GraphSpec::alternating(12);
        let report = validate_admissible(&spec);
        assert!(report.pass, "{report:?}");
        let pair = build_adjacency(&spec).unwrap();
        pair.validate().unwrap();
        let hp = pair.exact_hp().unwrap().remove(0);
        let comm = pair.h.matrix() * hp.matrix() - hp.matrix() * pair.h.matrix();
        assert!(comm.norm() < 1e-12, "cyclic [H, H'] = {}", comm.norm());
    }

    #[test]
    fn graph_kernel_vectors() {
        let spec = GraphSpec::alternating(12);
        let pair = build_adjacency(&spec).unwrap();
        let hp = pair.exact_hp().unwrap().remove(0);
        // Sign-flip vector on an interior odd level is annihilated by H and H'.
        let (levels, vertex_level) = match &pair.geometry {
            Geometry::LevelGraph { levels, vertex_level, .. } => (levels, vertex_level),
            _ => panic!(),
        };
        let odd = levels.iter().find(|&&z| z.rem_euclid(2) == 1).unwrap();
        let idx: Vec<usize> = vertex_level
            .iter()
            .enumerate()
            .filter(|(_, &z)| z == *odd)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(idx.len(), 2);
        let mut v = CVector::zeros(pair.dim());
        v[idx[0]] = C64::new(1.0, 0.0);
        v[idx[1]] = C64::new(-1.0, 0.0);
        assert!((pair.h.matrix() * &v).norm() < 1e-14);
        assert!((hp.matrix() * &v).norm() < 1e-14);
    }

    #[test]
    fn graph_spectrum_matches_reduced_chain() {
        let spec = GraphSpec::alternating(16);
        let pair = build_adjacency(&spec).unwrap();
        let reduced = build_adjacency_reduced(&spec).unwrap();
        let (full_vals, _) = eigh(&pair.h);
        let (red_vals, _) = eigh(&reduced.h);
        // Spectrum of the full graph = reduced chain ∪ kernel zeros.
        let kernel_dim = pair.dim() - reduced.dim();
        let mut residual: Vec<f64> = full_vals.clone();
        for rv in &red_vals {
            let (pos, _) = residual
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    (*a - rv).abs().partial_cmp(&(*b - rv).abs()).unwrap()
                })
                .unwrap();
            let closest = residual.remove(pos);
            assert!((closest - rv).abs() < 1e-10);
        }
        assert_eq!(residual.len(), kernel_dim);
        for leftover in residual {
            assert!(leftover.abs() < 1e-10);
        }
    }

    #[test]
    fn line_graph_is_plain_chain() {
        let spec = GraphSpec::line(8);
        let pair = build_adjacency(&spec).unwrap();
        let h = pair.h.matrix();
        for i in 0..8usize {
            for j in 0..8usize {
                let expected = if (i as i64 - j as i64).abs() == 1
                    || (i == 0 && j == 7)
                    || (i == 7 && j == 0)
                {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(h[(i, j)].re, expected);
            }
        }
    }

    #[test]
    fn single_level_vacuous_admissibility() {
        let spec = GraphSpec {
            levels: vec![(0, 3)],
        };
        let report = validate_admissible(&spec);
        assert!(report.pass);
    }

    #[test]
    fn mixed_multiplicity_condition_b() {
        // Levels with multiplicities 1,2,3: the middle level (z=1) has
        // 3 common fathers but 1 common son for its vertex pairs.
        let spec = GraphSpec {
            levels: vec![(0, 1), (1, 2), (2, 3)],
        };
        let report = validate_admissible(&spec);
        assert!(!report.pass);
        assert!(!report.condition_b);
    }

    #[test]
    fn waveguide_spectral_rows() {
        let pair = build_waveguide(std::f64::consts::PI, 2, 32, 16.0).unwrap();
        let data = pair.spectral().unwrap();
        assert!(data.unitarity_defect() < 1e-12);
        assert!(data.residual(&pair.h, 0) < 1e-10);
        // Thresholds 1 and 4 are on the spectrum (p = 0 columns).
        let h_vals = data.eigenvalues(0);
        assert!(h_vals.iter().any(|&x| (x - 1.0).abs() < 1e-12));
        assert!(h_vals.iter().any(|&x| (x - 4.0).abs() < 1e-12));
    }

    #[test]
    fn interior_mask_floor() {
        for pair in [
            build_jacobi_hermite(64).unwrap(),
            build_jacobi_laguerre(64).unwrap(),
            build_convolution_zd(hopping_measure(1.0), vec![16]).unwrap(),
            build_friedrichs(1.0, &vec![0.0; 32], 32, 16.0).unwrap(),
        ] {
            pair.validate().unwrap();
        }
    }
}
