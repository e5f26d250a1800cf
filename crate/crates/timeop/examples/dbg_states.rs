use num_complex::Complex64 as C64;
use timeop::linalg::{CMatrix, SpectralFilter};
use timeop::localisation::LocalisationProfile;
use timeop::models::*;
use timeop::spectral::*;
use timeop::time_operator::*;

fn main() {
    let n = 256;
    let pair = build_waveguide(std::f64::consts::PI, 2, n, 192.0).unwrap();
    let spectral = pair.spectral().unwrap();
    let hp_idx = hp_indices(&spectral, 1).unwrap();
    let delta = default_delta(spectral.eigenvalues(0));
    let threshold = default_threshold(&spectral, &hp_idx);
    let kappa = kappa_estimate(&spectral, 0, &hp_idx, delta, threshold);
    let filter = SpectralFilter::new(2.5, 0.7, 0.39);
    let profile = LocalisationProfile::radial_plateau(1, 1.0, 1.0);
    let tf = build_tf(&pair, &spectral, &profile, &filter, GradientRoute::Auto).unwrap();

    let hp_eig: Vec<f64> = spectral.eigenvalues(1).to_vec();
    let u = spectral.basis();
    let q_eig = u.adjoint() * pair.phi[0].matrix() * u;
    let nn = pair.dim();
    let mut direct = CMatrix::zeros(nn, nn);
    let kept = &tf.kept;
    for r in 0..nn {
        for c in 0..nn {
            if !kept[r] || !kept[c] { continue; }
            direct[(r, c)] = q_eig[(r, c)].scale(0.25 * (2.0 / hp_eig[c] + 2.0 / hp_eig[r]));
        }
    }
    let states = sample_dt_states(&pair, &spectral, 0, &kappa, &filter, 2, 31, 1e-12).unwrap();
    let s = &states[0].state;
    let via_tf = tf.apply(s);
    let c = spectral.to_basis(s);
    let via_direct = spectral.from_basis(&(&direct * c.clone()));
    let d = &via_tf - &via_direct;
    println!("total mismatch {:.3e}", d.norm());
    // localization in eigenbasis
    let dc = spectral.to_basis(&d);
    let h_vals = spectral.eigenvalues(0);
    let mut best: Vec<(f64, usize)> = (0..nn).map(|i| (dc[i].norm(), i)).collect();
    best.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (mag, i) in best.iter().take(8) {
        let mode = i / n;
        println!("  col {i} mode {mode} lambda {:.4} hp {:.4} |d| {mag:.3e} eta {:.3e} |c| {:.3e}",
            h_vals[*i], hp_eig[*i], filter.evaluate(h_vals[*i]), c[*i].norm());
    }
}
