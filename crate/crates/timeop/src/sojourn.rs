//! Time-evolved localisation integrals and their large-dilation limits.
//!
//! For a filtered state `φ` and dilation `r`, the sojourn difference is
//!
//! ```text
//! I_r = ½ ∫_0^∞ dt [ ⟨φ, e^{−itH} f(Φ/r) e^{itH} φ⟩
//!                  − ⟨φ, e^{itH} f(Φ/r) e^{−itH} φ⟩ ],
//! ```
//!
//! the difference between the time spent by the past and future evolutions
//! inside the dilated localisation region. As `r → ∞` it converges to the
//! stationary expectation `t_f(φ)`; the sweep fits `I_r = I_∞ + c·r^{−p}`
//! and compares the extrapolated limit against that target.
//!
//! Everything is evaluated through the joint eigenbasis: the evolution is a
//! diagonal phase, and `f(Φ/r)` compresses to the state's active coefficient
//! set, so one integrand sample costs one small dense mat-vec. In a finite
//! box the integral only makes sense before wavefronts wrap around, so the
//! time budget is capped at half the box crossing time and the trailing
//! decay of the integrand is verified, with a fitted power-law tail added.

use crate::linalg::{CMatrix, CVector, JointSpectralData, LinalgError, C64};
use crate::localisation::{LocalisationError, LocalisationProfile};
use crate::models::{ModelError, OperatorPair};
use crate::quadrature::integrate;
use crate::spectral::SpectralError;
use crate::time_operator::{eval_tf_form, family_indices, GradientRoute, TimeOperatorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SojournError {
    #[error("integrand failed to decay before the box-revival cap t = {t_cap:.3}: trailing max {trailing:.3e} vs peak {peak:.3e}")]
    TailNotDecaying {
        t_cap: f64,
        trailing: f64,
        peak: f64,
    },
    #[error("need at least 4 ascending r values, got {0}")]
    RListTooShort(usize),
    #[error("r values must be strictly ascending")]
    RListNotAscending,
    #[error("r = {r} too large for the box: bound {bound:.3} from extent {extent:.3} and packet width {width:.3}")]
    RTooLargeForBox {
        r: f64,
        bound: f64,
        extent: f64,
        width: f64,
    },
    #[error("power-law fit is ill-conditioned")]
    FitIllConditioned,
    #[error(transparent)]
    TimeOperator(#[from] TimeOperatorError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Localisation(#[from] LocalisationError),
}

#[derive(Debug, Clone, Copy)]
pub struct SojournConfig {
    /// Trailing-window decay threshold relative to the integrand peak.
    pub tail_tol: f64,
    /// Absolute quadrature tolerance for the time integral.
    pub quad_tol: f64,
    /// Coefficients below `active_tol · max` are dropped from the state.
    pub active_tol: f64,
}

impl Default for SojournConfig {
    fn default() -> Self {
        Self {
            tail_tol: 1e-4,
            quad_tol: 1e-8,
            active_tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SojournResult {
    pub r: f64,
    pub i_r: f64,
    pub t_max_used: f64,
    pub tail_estimate: f64,
    pub quadrature_error: f64,
    /// Largest imaginary part seen in the (theoretically real) integrand.
    pub max_imag: f64,
    /// Tail estimate stayed below 1% of the integral.
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct ConvergenceTable {
    pub rows: Vec<SojournResult>,
    pub extrapolated: f64,
    pub fit_exponent: f64,
    pub fit_coefficient: f64,
    /// Stationary target `t_f(φ)`.
    pub target: f64,
    pub relative_gap: f64,
}

/// Integrand machinery compressed to the state's active coefficients.
struct Integrand {
    /// `M_{kl} = ⟨u_k, f(Φ/r) u_l⟩` over active columns.
    m: CMatrix,
    coeffs: CVector,
    energies: Vec<f64>,
}

impl Integrand {
    /// `g(t)`, tracking the imaginary defect.
    fn eval(&self, t: f64) -> (f64, f64) {
        let phases: Vec<C64> = self
            .energies
            .iter()
            .map(|&e| C64::new(0.0, t * e).exp())
            .collect();
        let mut w = self.coeffs.clone();
        for (wi, ph) in w.iter_mut().zip(&phases) {
            *wi *= ph;
        }
        let mw = &self.m * &w;
        let forward: C64 = w.iter().zip(mw.iter()).map(|(a, b)| a.conj() * b).sum();
        // Backward evolution: conjugate phases.
        let mut wb = self.coeffs.clone();
        for (wi, ph) in wb.iter_mut().zip(&phases) {
            *wi *= ph.conj();
        }
        let mwb = &self.m * &wb;
        let backward: C64 = wb.iter().zip(mwb.iter()).map(|(a, b)| a.conj() * b).sum();
        let g = forward - backward;
        (g.re, forward.im.abs().max(backward.im.abs()))
    }
}

fn build_integrand(
    pair: &OperatorPair,
    spectral: &JointSpectralData,
    profile: &LocalisationProfile,
    r: f64,
    phi: &CVector,
    config: &SojournConfig,
) -> Result<Option<Integrand>, SojournError> {
    profile.validate_even()?;
    let (h_idx, _, _) = family_indices(spectral, pair.d())?;
    let coeffs_full = spectral.to_basis(phi);
    let max_c = coeffs_full.iter().fold(0.0f64, |a, z| a.max(z.norm()));
    if max_c == 0.0 {
        return Ok(None);
    }
    let active: Vec<usize> = (0..spectral.dim())
        .filter(|&i| coeffs_full[i].norm() > config.active_tol * max_c)
        .collect();
    let n_act = active.len();

    // f(Φ/r) in the position frame: diagonal when Φ is diagonal, else
    // through the spectral decomposition of the (single) position operator.
    let n = pair.dim();
    let u_act = spectral.basis().select_columns(active.iter());
    let m = match pair.phi_positions() {
        Some(positions) => {
            let mut weighted = u_act.clone();
            for (row, pos) in positions.iter().enumerate() {
                let scaled: Vec<f64> = pos.iter().map(|&x| x / r).collect();
                let f = profile.eval_f(&scaled)?;
                for c in 0..n_act {
                    weighted[(row, c)] *= C64::new(f, 0.0);
                }
            }
            u_act.adjoint() * weighted
        }
        None => {
            let (vals, basis) = crate::linalg::eigh_matrix(pair.phi[0].matrix());
            let w = basis.adjoint() * &u_act;
            let mut weighted = w.clone();
            for (row, &mu) in vals.iter().enumerate().take(n) {
                let f = profile.eval_f(&[mu / r])?;
                for c in 0..n_act {
                    weighted[(row, c)] *= C64::new(f, 0.0);
                }
            }
            w.adjoint() * weighted
        }
    };
    let m = (&m + m.adjoint()).scale(0.5);

    let coeffs = CVector::from_iterator(n_act, active.iter().map(|&i| coeffs_full[i]));
    let energies: Vec<f64> = active
        .iter()
        .map(|&i| spectral.eigenvalues(h_idx)[i])
        .collect();
    Ok(Some(Integrand {
        m,
        coeffs,
        energies,
    }))
}

/// Largest group speed carried by the state (for the revival cap).
fn max_group_speed(
    pair: &OperatorPair,
    spectral: &JointSpectralData,
    phi: &CVector,
    config: &SojournConfig,
) -> Result<f64, SojournError> {
    let (_, hp_idx, _) = family_indices(spectral, pair.d())?;
    let coeffs = spectral.to_basis(phi);
    let max_c = coeffs.iter().fold(0.0f64, |a, z| a.max(z.norm()));
    let mut v = 0.0f64;
    for i in 0..spectral.dim() {
        if coeffs[i].norm() <= config.active_tol * max_c {
            continue;
        }
        let s: f64 = hp_idx
            .iter()
            .map(|&j| spectral.eigenvalues(j)[i].powi(2))
            .sum();
        v = v.max(s.sqrt());
    }
    Ok(v.max(1e-12))
}

/// One sojourn integral at fixed dilation `r`.
pub fn sojourn_integral(
    pair: &OperatorPair,
    spectral: &JointSpectralData,
    profile: &LocalisationProfile,
    r: f64,
    phi: &CVector,
    config: &SojournConfig,
) -> Result<SojournResult, SojournError> {
    let Some(integrand) = build_integrand(pair, spectral, profile, r, phi, config)? else {
        return Ok(SojournResult {
            r,
            i_r: 0.0,
            t_max_used: 0.0,
            tail_estimate: 0.0,
            quadrature_error: 0.0,
            max_imag: 0.0,
            converged: true,
        });
    };

    let extent = pair.phi_extent().into_iter().fold(0.0f64, f64::max).max(1.0);
    let v_max = max_group_speed(pair, spectral, phi, config)?;
    let t_cap = 0.5 * extent / v_max;

    // March in windows until the integrand has decayed relative to its peak.
    let windows = 64usize;
    let window_len = t_cap / windows as f64;
    // Resolve the fastest phase difference in the active set.
    let (e_lo, e_hi) = integrand
        .energies
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| {
            (lo.min(e), hi.max(e))
        });
    let omega = (e_hi - e_lo).max(1e-12);
    let samples_per_window = ((window_len * omega) as usize).clamp(8, 400);

    let mut peak = 0.0f64;
    let mut max_imag = 0.0f64;
    let mut t_max = t_cap;
    let mut decayed = false;
    let mut trailing = f64::INFINITY;
    let mut window_maxima = Vec::with_capacity(windows);
    for w in 0..windows {
        let mut wmax = 0.0f64;
        for s in 0..samples_per_window {
            let t = (w as f64 + s as f64 / samples_per_window as f64) * window_len;
            let (g, imag) = integrand.eval(t);
            wmax = wmax.max(g.abs());
            max_imag = max_imag.max(imag);
        }
        window_maxima.push(wmax);
        peak = peak.max(wmax);
        if w >= 2 && wmax < config.tail_tol * peak {
            t_max = (w as f64 + 1.0) * window_len;
            trailing = wmax;
            decayed = true;
            break;
        }
        trailing = wmax;
    }
    if peak <= 1e-13 {
        // Integrand is zero to roundoff (profile covers the whole box).
        t_max = 3.0 * window_len;
        decayed = true;
    }
    if !decayed {
        return Err(SojournError::TailNotDecaying {
            t_cap,
            trailing,
            peak,
        });
    }

    let quad = integrate(|t| integrand.eval(t).0, 0.0, t_max, config.quad_tol);

    // Power-law tail estimate from the decaying window maxima.
    let tail_estimate = fit_tail(&window_maxima, window_len, t_max);
    let i_r = 0.5 * quad.value;
    let converged = tail_estimate.abs() <= 0.01 * i_r.abs().max(1e-12);
    Ok(SojournResult {
        r,
        i_r,
        t_max_used: t_max,
        tail_estimate,
        quadrature_error: 0.5 * quad.error_estimate,
        max_imag,
        converged,
    })
}

/// Bound on the leftover `½∫_{T}^{∞} |g|` from a power-law fit of the window
/// maxima `|g| ≈ A t^{−q}`.
fn fit_tail(window_maxima: &[f64], window_len: f64, t_max: f64) -> f64 {
    let pts: Vec<(f64, f64)> = window_maxima
        .iter()
        .enumerate()
        .filter(|&(w, &m)| m > 0.0 && (w as f64 + 0.5) * window_len <= t_max)
        .map(|(w, &m)| (((w as f64 + 0.5) * window_len).ln(), m.ln()))
        .collect();
    if pts.len() < 3 {
        return 0.0;
    }
    let tail_pts = &pts[pts.len().saturating_sub(6)..];
    let n = tail_pts.len() as f64;
    let sx: f64 = tail_pts.iter().map(|p| p.0).sum();
    let sy: f64 = tail_pts.iter().map(|p| p.1).sum();
    let sxx: f64 = tail_pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = tail_pts.iter().map(|p| p.0 * p.1).sum();
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-12 {
        return 0.0;
    }
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / n;
    let q = -slope;
    let a = intercept.exp();
    if q > 1.05 {
        // ½ ∫_T^∞ A t^{−q} dt
        0.5 * a * t_max.powf(1.0 - q) / (q - 1.0)
    } else {
        // No integrable decay detected; report a crude single-window bound.
        0.5 * a * t_max.powf(-q.max(0.0)) * window_len
    }
}

/// Runs the dilation sweep, fits `I_r = I_∞ + c·r^{−p}` and compares the
/// limit against the stationary form `t_f(φ)`.
#[allow(clippy::too_many_arguments)]
pub fn sojourn_sweep(
    pair: &OperatorPair,
    spectral: &JointSpectralData,
    profile: &LocalisationProfile,
    route: GradientRoute,
    phi: &CVector,
    r_list: &[f64],
    config: &SojournConfig,
) -> Result<ConvergenceTable, SojournError> {
    if r_list.len() < 4 {
        return Err(SojournError::RListTooShort(r_list.len()));
    }
    if r_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SojournError::RListNotAscending);
    }

    // Box-validity guard: the dilated plateau must leave room for transport
    // before the wrap, and the packet must be small on the box scale.
    let extent = pair.phi_extent().into_iter().fold(0.0f64, f64::max).max(1.0);
    let width = packet_width(pair, phi);
    let bound = extent / (4.0 * profile.plateau_radius.max(1e-12));
    for &r in r_list {
        if r > bound || width > extent / 8.0 {
            return Err(SojournError::RTooLargeForBox {
                r,
                bound,
                extent,
                width,
            });
        }
    }

    let mut rows = Vec::with_capacity(r_list.len());
    for &r in r_list {
        rows.push(sojourn_integral(pair, spectral, profile, r, phi, config)?);
    }

    let target = eval_tf_form(pair, spectral, profile, route, phi, None)?.re;
    let (extrapolated, fit_exponent, fit_coefficient) = fit_power_law(&rows)?;
    let relative_gap = (extrapolated - target).abs() / target.abs().max(1e-12);
    Ok(ConvergenceTable {
        rows,
        extrapolated,
        fit_exponent,
        fit_coefficient,
        target,
        relative_gap,
    })
}

/// Mean-square position spread of the state (largest over components).
pub fn packet_width(pair: &OperatorPair, phi: &CVector) -> f64 {
    let norm_sq: f64 = phi.iter().map(|z| z.norm_sqr()).sum();
    if norm_sq == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for op in &pair.phi {
        let pv = op.apply(phi);
        let mean: f64 = phi
            .iter()
            .zip(pv.iter())
            .map(|(a, b)| (a.conj() * b).re)
            .sum::<f64>()
            / norm_sq;
        let second: f64 = pv.iter().map(|z| z.norm_sqr()).sum::<f64>() / norm_sq;
        worst = worst.max((second - mean * mean).max(0.0).sqrt());
    }
    worst
}

/// Least squares for `I_r = I_∞ + c·r^{−p}`: linear solve in `(I_∞, c)` on a
/// grid of exponents, then golden-section refinement.
fn fit_power_law(rows: &[SojournResult]) -> Result<(f64, f64, f64), SojournError> {
    let pts: Vec<(f64, f64)> = rows.iter().map(|row| (row.r, row.i_r)).collect();
    let ssr = |p: f64| -> Option<(f64, f64, f64)> {
        // Design matrix [1, r^{−p}].
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|&(r, _)| r.powf(-p)).sum();
        let sxx: f64 = pts.iter().map(|&(r, _)| r.powf(-2.0 * p)).sum();
        let sy: f64 = pts.iter().map(|&(_, y)| y).sum();
        let sxy: f64 = pts.iter().map(|&(r, y)| y * r.powf(-p)).sum();
        let det = n * sxx - sx * sx;
        if det.abs() < 1e-14 * (n * sxx).abs().max(1e-300) {
            return None;
        }
        let c = (n * sxy - sx * sy) / det;
        let i_inf = (sy - c * sx) / n;
        let err: f64 = pts
            .iter()
            .map(|&(r, y)| (y - i_inf - c * r.powf(-p)).powi(2))
            .sum();
        Some((err, i_inf, c))
    };

    let mut best: Option<(f64, f64, f64, f64)> = None; // (ssr, p, i_inf, c)
    let mut p = 0.2;
    while p <= 4.0 {
        if let Some((err, i_inf, c)) = ssr(p) {
            if best.map_or(true, |b| err < b.0) {
                best = Some((err, p, i_inf, c));
            }
        }
        p += 0.05;
    }
    let (_, mut p_best, _, _) = best.ok_or(SojournError::FitIllConditioned)?;

    // Golden-section refinement around the grid optimum.
    let (mut lo, mut hi) = ((p_best - 0.1).max(0.05), p_best + 0.1);
    for _ in 0..40 {
        let m1 = lo + 0.382 * (hi - lo);
        let m2 = lo + 0.618 * (hi - lo);
        let e1 = ssr(m1).map(|x| x.0).unwrap_or(f64::INFINITY);
        let e2 = ssr(m2).map(|x| x.0).unwrap_or(f64::INFINITY);
        if e1 < e2 {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    p_best = 0.5 * (lo + hi);
    let (_, i_inf, c) = ssr(p_best).ok_or(SojournError::FitIllConditioned)?;
    Ok((i_inf, p_best, c))
}
