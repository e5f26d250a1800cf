//! The conjugate operator `A = ½(Π·Φ + Φ·Π)` with `Π_j = ⟨H⟩^{−2} H'_j ⟨H⟩^{−2}`
//! and the positive-commutator (Mourre) window estimates built from it.
//!
//! The commutator `i[H, A]` extends to the bounded positive operator
//! `⟨H⟩^{−2} (H')² ⟨H⟩^{−2}`; numerically the two sides are compared on
//! interior packets (the matrix commutator picks up seam corruption from the
//! truncated Φ, the closed form does not). Window compressions of the closed
//! form then quantify strict positivity away from the critical set and its
//! failure at critical values — the window scan reproduces the critical set
//! through an independent, operator-level route.

use crate::linalg::{eigh_matrix, CMatrix, HermitianOperator, JointSpectralData};
use crate::models::{ModelError, OperatorPair};
use crate::spectral::{dedupe_for_scan, CriticalSetEstimate, KappaMethod, KappaPoint};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MourreError {
    #[error("spectral window ({lo}, {hi}) contains no spectrum")]
    EmptyWindow { lo: f64, hi: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The conjugate operator and both routes to its commutator with `H`.
#[derive(Debug, Clone)]
pub struct ConjugateOperatorData {
    pub pi: Vec<HermitianOperator>,
    pub a: HermitianOperator,
    /// Matrix commutator `i(HA − AH)`, symmetrised.
    pub iha_matrix: HermitianOperator,
    /// Closed form `⟨H⟩^{−2} (H')² ⟨H⟩^{−2}`.
    pub iha_closed: HermitianOperator,
    /// Asymmetry removed when symmetrising the matrix commutator.
    pub iha_asymmetry: f64,
}

/// Assembles `Π`, `A` and both commutator routes with dense algebra.
///
/// `⟨H⟩^{−2}` is taken through the spectral data of `H` so that it commutes
/// exactly with the exact-route `H'_j`.
pub fn build_conjugate(
    pair: &OperatorPair,
    hp: &[HermitianOperator],
) -> Result<ConjugateOperatorData, ModelError> {
    let spectral = pair.spectral()?;
    let weight = spectral.apply_function(&[0], |lam| {
        Complex64::new(1.0 / (1.0 + lam[0] * lam[0]), 0.0)
    })?;

    let mut pi = Vec::with_capacity(hp.len());
    for (j, hpj) in hp.iter().enumerate() {
        let m = &weight * hpj.matrix() * &weight;
        let (op, _) = HermitianOperator::symmetrized(format!("Pi{j}"), m);
        pi.push(op);
    }

    let n = pair.dim();
    let mut a = CMatrix::zeros(n, n);
    for (pij, phij) in pi.iter().zip(&pair.phi) {
        a += pij.matrix() * phij.matrix() + phij.matrix() * pij.matrix();
    }
    let a = a.scale(0.5);
    let (a, _) = HermitianOperator::symmetrized("A", a);

    let raw = (pair.h.matrix() * a.matrix() - a.matrix() * pair.h.matrix())
        .map(|z| Complex64::new(0.0, 1.0) * z);
    let (iha_matrix, iha_asymmetry) = HermitianOperator::symmetrized("i[H,A]", raw);

    let mut hp_sq = CMatrix::zeros(n, n);
    for hpj in hp {
        hp_sq += hpj.matrix() * hpj.matrix();
    }
    let closed = &weight * hp_sq * &weight;
    let (iha_closed, _) = HermitianOperator::symmetrized("<H>^-2 (H')^2 <H>^-2", closed);

    Ok(ConjugateOperatorData {
        pi,
        a,
        iha_matrix,
        iha_closed,
        iha_asymmetry,
    })
}

/// Interior residual of `i[H,A] = ⟨H⟩^{−2}(H')²⟨H⟩^{−2}`, relative to the
/// closed form's scale.
pub fn check_commutator_identity(pair: &OperatorPair, data: &ConjugateOperatorData) -> f64 {
    let diff = data.iha_matrix.matrix() - data.iha_closed.matrix();
    let scale = data.iha_closed.frobenius_norm().max(1e-300);
    let states = pair.interior_packets(12, 0);
    states
        .iter()
        .map(|v| (&diff * v).norm())
        .fold(0.0, f64::max)
        / scale
}

/// Smallest Rayleigh quotient of the matrix-route `i[H,A]` over interior
/// states, normalised by `‖(H')²‖`; the closed form says it must be
/// nonnegative up to roundoff.
pub fn positivity_floor(pair: &OperatorPair, data: &ConjugateOperatorData, hp_sq_norm: f64) -> f64 {
    let states = pair.conjugation_states();
    states
        .iter()
        .map(|v| {
            let w = data.iha_matrix.matrix() * v;
            let q: Complex64 = v
                .iter()
                .zip(w.iter())
                .map(|(a, b)| a.conj() * b)
                .sum();
            q.re / v.norm().powi(2)
        })
        .fold(f64::INFINITY, f64::min)
        / hp_sq_norm.max(1e-300)
}

/// Outcome of one Mourre window estimate.
#[derive(Debug, Clone, Copy)]
pub struct MourreWindow {
    pub lambda: f64,
    pub delta: f64,
    /// Smallest eigenvalue of the window compression of `i[H,A]`.
    pub a_measured: f64,
    /// `min_window (H')² · inf_window ⟨μ⟩^{−4}`.
    pub a_predicted: f64,
    pub pass: bool,
    pub window_dim: usize,
}

/// Compresses the closed-form commutator to `ran E^H((λ−δ, λ+δ))` and
/// compares its bottom eigenvalue against the scalar prediction.
pub fn mourre_window(
    data: &ConjugateOperatorData,
    spectral: &JointSpectralData,
    hp_idx: &[usize],
    lambda: f64,
    delta: f64,
) -> Result<MourreWindow, MourreError> {
    let h_vals = spectral.eigenvalues(0);
    let cols: Vec<usize> = (0..h_vals.len())
        .filter(|&i| (h_vals[i] - lambda).abs() < delta)
        .collect();
    if cols.is_empty() {
        return Err(MourreError::EmptyWindow {
            lo: lambda - delta,
            hi: lambda + delta,
        });
    }
    let block_basis = spectral.basis().select_columns(cols.iter());
    let block = block_basis.adjoint() * data.iha_closed.matrix() * &block_basis;
    let block = (&block + block.adjoint()).scale(0.5);
    let (vals, _) = eigh_matrix(&block);
    let a_measured = vals[0];

    let min_speed = cols
        .iter()
        .map(|&i| {
            hp_idx
                .iter()
                .map(|&j| spectral.eigenvalues(j)[i].powi(2))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    let mu_star = (lambda - delta).abs().max((lambda + delta).abs());
    let weight_inf = (1.0 + mu_star * mu_star).powi(-2);
    let a_predicted = min_speed * weight_inf;

    Ok(MourreWindow {
        lambda,
        delta,
        a_measured,
        a_predicted,
        pass: a_measured >= a_predicted - 1e-8,
        window_dim: cols.len(),
    })
}

/// Scans Mourre windows centred on the (deduplicated) spectrum of `H` and
/// returns the points where strict positivity fails at the given velocity
/// threshold — the window-route estimate of the critical set.
pub fn kappa_window_scan(
    data: &ConjugateOperatorData,
    spectral: &JointSpectralData,
    hp_idx: &[usize],
    delta: f64,
    threshold: f64,
) -> CriticalSetEstimate {
    let h_vals = spectral.eigenvalues(0);
    let centers = dedupe_for_scan(h_vals, delta / 2.0);
    let mut raw = Vec::new();
    for &lambda in &centers {
        if let Ok(window) = mourre_window(data, spectral, hp_idx, lambda, delta) {
            let mu_star = (lambda - delta).abs().max((lambda + delta).abs());
            let weight_inf = (1.0 + mu_star * mu_star).powi(-2);
            let cutoff = threshold * weight_inf;
            if window.a_measured <= cutoff {
                raw.push(KappaPoint {
                    lambda,
                    hprime_sq_min: window.a_measured / weight_inf.max(1e-300),
                });
            }
        }
    }
    CriticalSetEstimate {
        points: crate::spectral::dedupe_points_for_scan(raw, delta),
        delta,
        threshold,
        method: KappaMethod::MourreWindow,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commutators::commutator_chain;
    use crate::models::{
        build_convolution_zd, build_dispersive, build_friedrichs, build_jacobi_hermite,
        build_jacobi_laguerre, hopping_measure,
    };
    use crate::spectral::{default_delta, default_threshold, hp_indices, kappa_estimate};
    use num_complex::Complex64 as C64;

    #[test]
    fn hermite_pi_is_resolvent_power() {
        // H' = 1, so Π = ⟨H⟩^{−4}.
        let pair = build_jacobi_hermite(48).unwrap();
        let derived = commutator_chain(&pair, 1).unwrap();
        let data = build_conjugate(&pair, &derived.hp).unwrap();
        let spectral = pair.spectral().unwrap();
        let expected = spectral
            .apply_function(&[0], |lam| {
                C64::new((1.0 + lam[0] * lam[0]).powi(-2), 0.0)
            })
            .unwrap();
        assert!((data.pi[0].matrix() - expected).norm() < 1e-10);
        assert!(data.a.max_asymmetry() < 1e-12);
    }

    #[test]
    fn commutator_identity_dispersive() {
        let n = 256;
        let pair = build_dispersive(|p| p * p, |p| 2.0 * p, Some(Box::new(|_| 2.0)), n, 128.0)
            .unwrap();
        let derived = commutator_chain(&pair, 1).unwrap();
        let data = build_conjugate(&pair, &derived.hp).unwrap();
        let resid = check_commutator_identity(&pair, &data);
        assert!(resid < 1e-9, "identity residual {resid}");
    }

    #[test]
    fn commutator_identity_laguerre() {
        let pair = build_jacobi_laguerre(192).unwrap();
        let derived = commutator_chain(&pair, 1).unwrap();
        let data = build_conjugate(&pair, &derived.hp).unwrap();
        let resid = check_commutator_identity(&pair, &data);
        assert!(resid < 1e-8, "identity residual {resid}");
    }

    #[test]
    fn delta_zero_measure_both_sides_vanish() {
        let pair = build_convolution_zd(vec![(vec![0], C64::new(1.0, 0.0))], vec![4]).unwrap();
        let derived = commutator_chain(&pair, 1).unwrap();
        let data = build_conjugate(&pair, &derived.hp).unwrap();
        assert!(data.iha_matrix.frobenius_norm() < 1e-12);
        assert!(data.iha_closed.frobenius_norm() < 1e-12);
    }

    #[test]
    fn positivity_on_catalog_models() {
        let pair = build_convolution_zd(hopping_measure(1.0), vec![32]).unwrap();
        let derived = commutator_chain(&pair, 1).unwrap();
        let data = build_conjugate(&pair, &derived.hp).unwrap();
        let hp_sq_norm = derived.hp[0].frobenius_norm().powi(2);
        let floor = positivity_floor(&pair, &data, hp_sq_norm);
        assert!(floor > -1e-10, "positivity floor {floor}");
    }

    #[test]
    fn friedrichs_windows_pass_everywhere() {
        let n = 128;
        let pair = build_friedrichs(1.0, &vec![0.0; n], n, 64.0).unwrap();
        let derived = commutator_chain(&pair, 1).unwrap();
        let data = build_conjugate(&pair, &derived.hp).unwrap();
        let spectral = pair.spectral().unwrap();
        let hp_idx = hp_indices(&spectral, 1).unwrap();
        let h_vals = spectral.eigenvalues(0);
        let delta = default_delta(h_vals);
        for frac in [0.2, 0.45, 0.7] {
            let lambda = h_vals[(frac * n as f64) as usize];
            let w = mourre_window(&data, &spectral, &hp_idx, lambda, delta).unwrap();
            assert!(w.pass, "{w:?}");
            // (H')² = 1, so the prediction is the pure resolvent weight.
            let mu_star = (lambda - delta).abs().max((lambda + delta).abs());
            let expect = (1.0 + mu_star * mu_star).powi(-2);
            assert!((w.a_predicted - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn laguerre_positive_window_and_kappa_scan() {
        let pair = build_jacobi_laguerre(160).unwrap();
        let derived = commutator_chain(&pair, 1).unwrap();
        let data = build_conjugate(&pair, &derived.hp).unwrap();
        let spectral = pair.spectral().unwrap();
        let hp_idx = hp_indices(&spectral, 1).unwrap();
        let h_vals = spectral.eigenvalues(0);
        let delta = default_delta(h_vals);
        let threshold = default_threshold(&spectral, &hp_idx);

        // A window strictly inside (0, ∞): positive prediction, passes.
        let lambda = h_vals[h_vals.len() / 2];
        let w = mourre_window(&data, &spectral, &hp_idx, lambda, delta).unwrap();
        assert!(w.pass && w.a_predicted > 0.0, "{w:?}");

        // Window-route critical set matches the joint-table route.
        let scan = kappa_window_scan(&data, &spectral, &hp_idx, delta, threshold);
        let joint = kappa_estimate(&spectral, 0, &hp_idx, delta, threshold);
        assert!(scan.agrees_with(&joint), "{:?} vs {:?}", scan.lambdas(), joint.lambdas());
    }

    #[test]
    fn cos_band_edges_fail_strict_positivity() {
        let pair = build_convolution_zd(hopping_measure(1.0), vec![64]).unwrap();
        let derived = commutator_chain(&pair, 1).unwrap();
        let data = build_conjugate(&pair, &derived.hp).unwrap();
        let spectral = pair.spectral().unwrap();
        let hp_idx = hp_indices(&spectral, 1).unwrap();
        let delta = default_delta(spectral.eigenvalues(0));
        let w = mourre_window(&data, &spectral, &hp_idx, 2.0, delta).unwrap();
        // At the band edge the compressed commutator degenerates.
        assert!(w.a_measured < 1e-8, "{w:?}");

        let empty = mourre_window(&data, &spectral, &hp_idx, 5.0, delta);
        assert!(matches!(empty, Err(MourreError::EmptyWindow { .. })));
    }
}
