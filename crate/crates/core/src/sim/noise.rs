use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{forward_kspace, recon_sos, CoilMaps, KSpaceVolume, MagnitudeImage, Phantom};
use crate::error::{Error, Result};
use crate::estimators::snr_db;

const BISECTION_STEPS: usize = 20;

/// Unit-variance complex noise draw, one grid per coil.
fn unit_noise(k: &KSpaceVolume, seed: u64) -> Vec<Array2<Complex64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    k.coils
        .iter()
        .map(|c| {
            Array2::from_shape_fn(c.dim(), |_| {
                Complex64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng))
            })
        })
        .collect()
}

fn scaled(k: &KSpaceVolume, noise: &[Array2<Complex64>], sigma: f64) -> KSpaceVolume {
    let mut out = k.clone();
    for (coil, n) in out.coils.iter_mut().zip(noise) {
        coil.zip_mut_with(n, |v, e| *v += e * sigma);
    }
    out
}

/// Adds white Gaussian noise with standard deviation `sigma` to the real
/// and imaginary part of every sample of every coil.
pub fn add_wgn(k: &KSpaceVolume, sigma: f64, seed: u64) -> KSpaceVolume {
    scaled(k, &unit_noise(k, seed), sigma)
}

/// Noise level whose sum-of-squares reconstruction has the requested SNR
/// (dB, against the noise-free reconstruction of `k`).
///
/// The noise draw for `seed` is fixed and only its scale is searched, so the
/// SNR is monotone in `sigma` and a log-domain bisection converges.
pub fn calibrate_sigma(k: &KSpaceVolume, target_snr_db: f64, seed: u64) -> Result<f64> {
    if !target_snr_db.is_finite() {
        return Err(Error::invalid("target SNR must be finite"));
    }
    let clean = recon_sos(k);
    let signal: f64 = clean.pixels.iter().map(|v| v * v).sum();
    if signal == 0.0 {
        return Err(Error::degenerate("cannot set an SNR on an all-zero image"));
    }
    let noise = unit_noise(k, seed);
    let snr_at = |sigma: f64| -> Result<f64> {
        let noisy = recon_sos(&scaled(k, &noise, sigma));
        snr_db(&clean.pixels, &noisy.pixels)
    };

    // first-order guess: the SOS difference carries about σ² per pixel
    let guess = (signal / clean.pixels.len() as f64 / 10f64.powf(target_snr_db / 10.0)).sqrt();
    let (mut lo, mut hi) = (guess.ln() - 3.0, guess.ln() + 3.0);
    for _ in 0..8 {
        if snr_at(lo.exp())? >= target_snr_db {
            break;
        }
        lo -= 3.0;
    }
    for _ in 0..8 {
        if snr_at(hi.exp())? <= target_snr_db {
            break;
        }
        hi += 3.0;
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if snr_at(mid.exp())? > target_snr_db {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Adds k-space noise scaled so the reconstruction reaches `target_snr_db`.
/// `f64::INFINITY` means no noise and returns the input unchanged.
pub fn inject_noise(k: &KSpaceVolume, target_snr_db: f64, seed: u64) -> Result<KSpaceVolume> {
    if target_snr_db == f64::INFINITY {
        return Ok(k.clone());
    }
    let sigma = calibrate_sigma(k, target_snr_db, seed)?;
    Ok(add_wgn(k, sigma, seed))
}

/// SNR targets for the `m_t - 1` noisy versions of a set.
///
/// The grid `low + (v-1)·(high-low)/(m_t-1)` for `v = 1..=m_t` is laid out
/// and the noisy versions take its first `m_t - 1` points; the clean version
/// sits at the top of the grid.
pub fn version_targets(m: usize, snr_low_db: f64, snr_high_db: f64) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::invalid(format!("need at least 2 versions, got {m}")));
    }
    if !(snr_low_db < snr_high_db) || !snr_low_db.is_finite() || !snr_high_db.is_finite() {
        return Err(Error::invalid(format!(
            "SNR range [{snr_low_db}, {snr_high_db}] is empty"
        )));
    }
    let step = (snr_high_db - snr_low_db) / (m - 1) as f64;
    Ok((0..m - 1).map(|i| snr_low_db + i as f64 * step).collect())
}

/// Graded-noise versions `v = 1..=m_t` of one k-space; the last is clean.
pub fn make_version_set_from_kspace(
    k: &KSpaceVolume,
    m_t: usize,
    snr_low_db: f64,
    snr_high_db: f64,
    seed: u64,
) -> Result<Vec<MagnitudeImage>> {
    if m_t < 3 {
        return Err(Error::invalid(format!("m_t must be at least 3, got {m_t}")));
    }
    let targets = version_targets(m_t, snr_low_db, snr_high_db)?;
    let mut out = Vec::with_capacity(m_t);
    for (i, &target) in targets.iter().enumerate() {
        let noisy = inject_noise(k, target, seed.wrapping_add(i as u64))?;
        out.push(recon_sos(&noisy).with_id("", i + 1));
    }
    out.push(recon_sos(k).with_id("", m_t));
    Ok(out)
}

/// [`make_version_set_from_kspace`] on the phantom's k-space.
pub fn make_version_set(
    phantom: &Phantom,
    maps: &CoilMaps,
    m_t: usize,
    snr_low_db: f64,
    snr_high_db: f64,
    seed: u64,
) -> Result<Vec<MagnitudeImage>> {
    let k = forward_kspace(phantom, maps, phantom_etl(phantom.size()))?;
    make_version_set_from_kspace(&k, m_t, snr_low_db, snr_high_db, seed)
}

/// Largest echo train length up to the default that divides `lines`.
pub(crate) fn phantom_etl(lines: usize) -> usize {
    (1..=super::DEFAULT_ETL)
        .rev()
        .find(|e| lines % e == 0)
        .unwrap_or(1)
}
