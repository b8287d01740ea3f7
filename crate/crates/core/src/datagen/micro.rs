//! Gaussian-random-field microstructure generation: white noise filtered by
//! an isotropic Gaussian kernel in Fourier space, thresholded at the quantile
//! giving the requested volume fraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use super::Microstructure;
use crate::error::{Error, Result};
use crate::field::{dft2, idft2, ScalarField2D};

pub fn generate_microstructure(
    seed: u64,
    size: usize,
    correlation_length: f64,
    target_vf: f64,
) -> Result<Microstructure> {
    if size < 8 {
        return Err(Error::Usage("microstructure size must be >= 8".into()));
    }
    if correlation_length <= 0.0 || correlation_length >= size as f64 / 2.0 {
        return Err(Error::Usage(
            "correlation_length must lie in (0, size/2)".into(),
        ));
    }
    if !(0.0..1.0).contains(&target_vf) || target_vf == 0.0 {
        return Err(Error::Usage("target_vf must lie in (0, 1)".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;
    let mut noise = Vec::with_capacity(n);
    // Box-Muller over the seeded uniform stream.
    while noise.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        noise.push(r * (2.0 * PI * u2).cos());
        if noise.len() < n {
            noise.push(r * (2.0 * PI * u2).sin());
        }
    }
    let white = ScalarField2D::new(size, size, noise)?;

    let mut spectrum = dft2(&white);
    let ell2 = correlation_length * correlation_length;
    for i in 0..size {
        for j in 0..size {
            let fy = signed_freq(i, size);
            let fx = signed_freq(j, size);
            let k2 = (2.0 * PI).powi(2) * (fx * fx + fy * fy);
            spectrum[i * size + j] *= (-0.5 * ell2 * k2).exp();
        }
    }
    let smooth = idft2(&spectrum, size, size);
    let field: Vec<f64> = smooth.iter().map(|c| c.re).collect();

    let spread = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - field.iter().cloned().fold(f64::INFINITY, f64::min);
    if !spread.is_finite() || spread < 1e-12 {
        return Err(Error::Generation("degenerate filtered field".into()));
    }

    // Quantile threshold: the top `round(vf * n)` pixels become phase 1.
    let ones_target = ((target_vf * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].partial_cmp(&field[a]).unwrap().then(a.cmp(&b)));
    let mut phase = vec![0.0; n];
    for &idx in order.iter().take(ones_target) {
        phase[idx] = 1.0;
    }
    Microstructure::new(ScalarField2D::new(size, size, phase)?)
}

fn signed_freq(index: usize, n: usize) -> f64 {
    let m = if index <= n / 2 {
        index as f64
    } else {
        index as f64 - n as f64
    };
    m / n as f64
}

/// Small deterministic microstructure for unit tests elsewhere in the crate.
#[cfg(test)]
pub fn test_microstructure(size: usize, seed: u64) -> Microstructure {
    generate_microstructure(seed, size, 2.0, 0.4).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_microstructure(123, 32, 4.0, 0.5).unwrap();
        let b = generate_microstructure(123, 32, 4.0, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_microstructure(1, 32, 4.0, 0.5).unwrap();
        let b = generate_microstructure(2, 32, 4.0, 0.5).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn volume_fraction_near_target() {
        for seed in 0..5 {
            let m = generate_microstructure(seed, 32, 4.0, 0.5).unwrap();
            let vf = m.volume_fraction();
            assert!((0.48..=0.52).contains(&vf), "vf = {vf}");
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_microstructure(0, 4, 1.0, 0.5).is_err());
        assert!(generate_microstructure(0, 32, 20.0, 0.5).is_err());
        assert!(generate_microstructure(0, 32, 4.0, 0.0).is_err());
    }

    /// Radially averaged autocorrelation via DFT; independent oracle for the
    /// correlation-length knob.
    fn first_zero_crossing(m: &Microstructure) -> f64 {
        let (h, w) = m.shape();
        let mean = m.volume_fraction();
        let centered =
            ScalarField2D::from_fn(h, w, |i, j| m.phase().get(i, j) - mean);
        let spec = dft2(&centered);
        let power: Vec<_> = spec
            .iter()
            .map(|c| rustfft::num_complex::Complex::new(c.norm_sqr(), 0.0))
            .collect();
        let auto = idft2(&power, h, w);
        // radial average over integer radii along the axes
        let mut radial = Vec::new();
        for r in 0..(w / 2) {
            let v = (auto[r].re + auto[r * w].re) / 2.0;
            radial.push(v);
        }
        for (r, v) in radial.iter().enumerate() {
            if *v <= 0.0 {
                return r as f64;
            }
        }
        radial.len() as f64
    }

    #[test]
    fn longer_correlation_length_decays_slower() {
        let coarse = generate_microstructure(5, 64, 8.0, 0.5).unwrap();
        let fine = generate_microstructure(5, 64, 2.0, 0.5).unwrap();
        assert!(first_zero_crossing(&coarse) > first_zero_crossing(&fine));
    }
}
