//! Fixed-point spectral homogenization for linear plane-strain elasticity.
//!
//! Basic Lippmann-Schwinger iteration with a homogeneous reference medium
//! (arithmetic mean of the phase stiffnesses). The Green operator is built
//! from the central-difference symbol xi_j = sin(2 pi m_j / N_j), so the
//! converged field satisfies equilibrium under the same periodic stencil the
//! metrics use.

use rustfft::num_complex::Complex;
use std::f64::consts::PI;

use super::{ElasticSpec, Microstructure};
use crate::error::{Error, Result};
use crate::field::{dft2, divergence, idft2, ScalarField2D, StressField};

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub stress: StressField,
    pub iterations: usize,
    /// Final relative equilibrium residual RMS(div sigma)/RMS(sigma).
    pub residual: f64,
}

pub fn solve_elasticity(
    micro: &Microstructure,
    spec: &ElasticSpec,
    tolerance: f64,
    max_iters: usize,
) -> Result<StressField> {
    solve_elasticity_detailed(micro, spec, tolerance, max_iters).map(|o| o.stress)
}

pub fn solve_elasticity_detailed(
    micro: &Microstructure,
    spec: &ElasticSpec,
    tolerance: f64,
    max_iters: usize,
) -> Result<SolveOutcome> {
    spec.validate()?;
    if tolerance <= 0.0 {
        return Err(Error::Usage("solver tolerance must be positive".into()));
    }
    if max_iters == 0 {
        return Err(Error::Usage("solver max_iters must be positive".into()));
    }

    let (h, w) = micro.shape();
    let n = h * w;
    let phase = micro.phase().values();

    // Per-pixel Lame parameters.
    let (lam_soft, mu_soft) = spec.lame(0.0);
    let (lam_hard, mu_hard) = spec.lame(1.0);
    let lam: Vec<f64> = phase
        .iter()
        .map(|&p| if p == 1.0 { lam_hard } else { lam_soft })
        .collect();
    let mu: Vec<f64> = phase
        .iter()
        .map(|&p| if p == 1.0 { mu_hard } else { mu_soft })
        .collect();

    // Reference medium: arithmetic mean of the two phase stiffnesses. This
    // keeps the hard phase below twice the reference, the stability bound of
    // the basic scheme, for any contrast and volume fraction.
    let lam0 = 0.5 * (lam_soft + lam_hard);
    let mu0 = 0.5 * (mu_soft + mu_hard);
    let c2 = (lam0 + mu0) / (mu0 * (lam0 + 2.0 * mu0));

    let e = spec.applied_strain;
    // Strain components (e11, e22, e12); e12 is the tensor shear component.
    let mut e11 = vec![e[0]; n];
    let mut e22 = vec![e[1]; n];
    let mut e12 = vec![e[2]; n];

    // Central-difference symbols per frequency; x1 along columns.
    let xi1: Vec<f64> = (0..w).map(|j| (2.0 * PI * j as f64 / w as f64).sin()).collect();
    let xi2: Vec<f64> = (0..h).map(|i| (2.0 * PI * i as f64 / h as f64).sin()).collect();

    let stress_of = |e11: &[f64], e22: &[f64], e12: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut s11 = vec![0.0; n];
        let mut s22 = vec![0.0; n];
        let mut s12 = vec![0.0; n];
        for i in 0..n {
            let tr = e11[i] + e22[i];
            s11[i] = lam[i] * tr + 2.0 * mu[i] * e11[i];
            s22[i] = lam[i] * tr + 2.0 * mu[i] * e22[i];
            s12[i] = 2.0 * mu[i] * e12[i];
        }
        (s11, s22, s12)
    };

    let mut last_residual = f64::INFINITY;
    for iter in 0..max_iters {
        let (s11, s22, s12) = stress_of(&e11, &e22, &e12);
        let stress = StressField::new(
            ScalarField2D::new(h, w, s11.clone())?,
            ScalarField2D::new(h, w, s22.clone())?,
            ScalarField2D::new(h, w, s12.clone())?,
        )?;

        let div = divergence(&stress, 1.0)?;
        let div_ms: f64 = div
            .components()
            .iter()
            .flat_map(|c| c.values())
            .map(|v| v * v)
            .sum::<f64>()
            / (2 * n) as f64;
        let sig_ms: f64 = [&s11, &s22, &s12]
            .iter()
            .flat_map(|v| v.iter())
            .map(|v| v * v)
            .sum::<f64>()
            / (3 * n) as f64;
        if sig_ms == 0.0 {
            return Err(Error::Usage(
                "applied strain produces zero stress; nothing to solve".into(),
            ));
        }
        last_residual = (div_ms / sig_ms).sqrt();
        if !last_residual.is_finite() {
            return Err(Error::SolverDiverged {
                iters: iter,
                residual: last_residual,
                tolerance,
            });
        }
        if last_residual < tolerance {
            return Ok(SolveOutcome {
                stress,
                iterations: iter,
                residual: last_residual,
            });
        }

        // Fourier update: eps_hat <- eps_hat - Gamma0 : sigma_hat for xi != 0.
        let to_field = |v: &[f64]| ScalarField2D::new(h, w, v.to_vec()).unwrap();
        let mut eh11 = dft2(&to_field(&e11));
        let mut eh22 = dft2(&to_field(&e22));
        let mut eh12 = dft2(&to_field(&e12));
        let sh11 = dft2(&to_field(&s11));
        let sh22 = dft2(&to_field(&s22));
        let sh12 = dft2(&to_field(&s12));

        for i in 0..h {
            for j in 0..w {
                let x1 = xi1[j];
                let x2 = xi2[i];
                let norm2 = x1 * x1 + x2 * x2;
                let idx = i * w + j;
                if norm2 < 1e-24 {
                    continue;
                }
                let a1 = sh11[idx] * x1 + sh12[idx] * x2;
                let a2 = sh12[idx] * x1 + sh22[idx] * x2;
                let xsx = a1 * x1 + a2 * x2;
                let g11 = (a1 * x1 + a1 * x1) / (2.0 * mu0 * norm2)
                    - xsx * c2 * x1 * x1 / (norm2 * norm2);
                let g22 = (a2 * x2 + a2 * x2) / (2.0 * mu0 * norm2)
                    - xsx * c2 * x2 * x2 / (norm2 * norm2);
                let g12 = (a1 * x2 + a2 * x1) / (2.0 * mu0 * norm2)
                    - xsx * c2 * x1 * x2 / (norm2 * norm2);
                eh11[idx] -= g11;
                eh22[idx] -= g22;
                eh12[idx] -= g12;
            }
        }
        // Enforce the applied mean strain at the zero frequency.
        let scale = n as f64;
        eh11[0] = Complex::new(e[0] * scale, 0.0);
        eh22[0] = Complex::new(e[1] * scale, 0.0);
        eh12[0] = Complex::new(e[2] * scale, 0.0);

        e11 = idft2(&eh11, h, w).iter().map(|c| c.re).collect();
        e22 = idft2(&eh22, h, w).iter().map(|c| c.re).collect();
        e12 = idft2(&eh12, h, w).iter().map(|c| c.re).collect();
    }

    Err(Error::SolverDiverged {
        iters: max_iters,
        residual: last_residual,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_microstructure;

    fn banded_micro(size: usize, bands_along_x1: bool) -> Microstructure {
        // phase bands normal to x1: phase depends on the column index
        let phase = ScalarField2D::from_fn(size, size, |i, j| {
            let k = if bands_along_x1 { j } else { i };
            if k < size / 2 {
                1.0
            } else {
                0.0
            }
        });
        Microstructure::new(phase).unwrap()
    }

    #[test]
    fn homogeneous_microstructure_gives_uniform_closed_form_stress() {
        // A single-phase medium is not a valid Microstructure, so emulate it
        // with contrast 1 (both phases identical).
        let micro = banded_micro(16, true);
        let spec = ElasticSpec {
            contrast: 1.0,
            ..ElasticSpec::default()
        };
        let out = solve_elasticity_detailed(&micro, &spec, 1e-10, 100).unwrap();
        let (lam, mu) = spec.lame(0.0);
        let e = spec.applied_strain;
        let s11 = lam * (e[0] + e[1]) + 2.0 * mu * e[0];
        let s22 = lam * (e[0] + e[1]) + 2.0 * mu * e[1];
        let s12 = 2.0 * mu * e[2];
        for (c, expected) in out.stress.components().iter().zip([s11, s22, s12]) {
            for &v in c.values() {
                assert!((v - expected).abs() < 1e-10, "{v} vs {expected}");
            }
        }
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn laminate_matches_reuss_prediction() {
        let size = 32;
        let micro = banded_micro(size, true);
        let spec = ElasticSpec {
            contrast: 10.0,
            applied_strain: [0.01, 0.0, 0.0],
            ..ElasticSpec::default()
        };
        let out = solve_elasticity_detailed(&micro, &spec, 1e-8, 20_000).unwrap();
        let (lam_s, mu_s) = spec.lame(0.0);
        let (lam_h, mu_h) = spec.lame(1.0);
        let m_soft = lam_s + 2.0 * mu_s;
        let m_hard = lam_h + 2.0 * mu_h;
        // axial stress through layers in series: harmonic mean modulus
        let reuss = 0.01 / (0.5 / m_soft + 0.5 / m_hard);
        let mean_s11: f64 =
            out.stress.s11().values().iter().sum::<f64>() / (size * size) as f64;
        assert!(
            ((mean_s11 - reuss) / reuss).abs() < 0.01,
            "mean s11 {mean_s11} vs reuss {reuss}"
        );
    }

    #[test]
    fn contrast_10_composite_reaches_low_residual() {
        let micro = generate_microstructure(3, 32, 4.0, 0.4).unwrap();
        let spec = ElasticSpec::default();
        let out = solve_elasticity_detailed(&micro, &spec, 1e-4, 10_000).unwrap();
        assert!(out.residual < 1e-4);
        // normalized units: divide by the max stress magnitude
        let max_abs = out
            .stress
            .components()
            .iter()
            .flat_map(|c| c.values())
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        let normalized = out.stress.map(|v| v / max_abs);
        let rms = crate::field::rms_divergence(&normalized, 1.0).unwrap();
        assert!(rms <= 1e-3, "normalized rms divergence {rms}");
    }

    #[test]
    fn mean_stress_matches_applied_loading_symmetry() {
        // axial loading along x2: mean shear stress vanishes for a
        // band microstructure symmetric under x1 reflection
        let micro = banded_micro(16, false);
        let spec = ElasticSpec::default();
        let out = solve_elasticity_detailed(&micro, &spec, 1e-8, 20_000).unwrap();
        let n = 16.0 * 16.0;
        let mean_s12: f64 = out.stress.s12().values().iter().sum::<f64>() / n;
        let mean_s22: f64 = out.stress.s22().values().iter().sum::<f64>() / n;
        assert!(mean_s12.abs() < 1e-8, "mean shear {mean_s12}");
        assert!(mean_s22 > 0.0);
    }

    #[test]
    fn non_convergence_reports_residual() {
        let micro = generate_microstructure(3, 16, 3.0, 0.4).unwrap();
        let spec = ElasticSpec::default();
        let err = solve_elasticity_detailed(&micro, &spec, 1e-12, 3).unwrap_err();
        match err {
            Error::SolverDiverged { iters, residual, .. } => {
                assert_eq!(iters, 3);
                assert!(residual.is_finite());
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
