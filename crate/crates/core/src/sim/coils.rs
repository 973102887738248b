use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use super::{CoilMaps, KSpaceVolume};
use crate::error::{Error, Result};
use crate::fft::{ifft2, signed_frequency};
#[cfg(test)]
use crate::fft::fft2;

pub const MAX_COILS: usize = 32;
/// Coil centers sit on a circle of this radius (fraction of the FOV).
const CENTER_RADIUS: f64 = 0.6;
/// Concentration of the wrapped-Gaussian lobes; the falloff across the FOV
/// is `exp(-4κ)` along the diagonal.
const LOBE_CONCENTRATION: f64 = 0.8;
/// Largest linear phase ramp, in cycles across the FOV.
const MAX_RAMP_CYCLES: f64 = 0.25;

/// Smooth synthetic sensitivities normalized to unit sum of squares.
///
/// Each coil is a complex lobe centred on a circle around the field of
/// view. Lobes are wrapped Gaussians (`exp(κ(cos θ − 1))` per axis) and the
/// phase is a periodic ramp, so the maps have no jump at the FOV border and
/// their spectra stay in the lowest frequencies. After normalization
/// `Σ_i |s_i|² = 1` at every pixel, the convention under which the
/// coil-combined image is the least-squares inverse of the forward model.
/// A single coil degenerates to the all-ones map.
pub fn synth_coil_maps(size: usize, n_coils: usize, seed: u64) -> Result<CoilMaps> {
    if n_coils == 0 || n_coils > MAX_COILS {
        return Err(Error::invalid(format!(
            "coil count must be in 1..={MAX_COILS}, got {n_coils}"
        )));
    }
    if size == 0 {
        return Err(Error::invalid("coil map size must be positive"));
    }
    if n_coils == 1 {
        return CoilMaps::new(vec![Array2::from_elem((size, size), Complex64::new(1.0, 0.0))]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let mid = (n - 1.0) / 2.0;
    let offset = rng.gen_range(0.0..2.0 * PI);
    let angle_of = |p: f64, centre: f64| 2.0 * PI * (p - centre) / n;

    let mut maps = Vec::with_capacity(n_coils);
    for i in 0..n_coils {
        let angle = offset + 2.0 * PI * i as f64 / n_coils as f64;
        let (cy, cx) = (
            mid + CENTER_RADIUS * n * angle.sin(),
            mid + CENTER_RADIUS * n * angle.cos(),
        );
        // a linear ramp of r cycles across the FOV, made periodic
        let ramp_x = rng.gen_range(-MAX_RAMP_CYCLES..MAX_RAMP_CYCLES) * PI;
        let ramp_y = rng.gen_range(-MAX_RAMP_CYCLES..MAX_RAMP_CYCLES) * PI;
        let phase0 = rng.gen_range(-PI..PI);
        maps.push(Array2::from_shape_fn((size, size), |(r, c)| {
            let (ty, tx) = (angle_of(r as f64, cy), angle_of(c as f64, cx));
            let mag = (LOBE_CONCENTRATION * (tx.cos() + ty.cos() - 2.0)).exp();
            let phase = phase0
                + ramp_x * angle_of(c as f64, mid).sin()
                + ramp_y * angle_of(r as f64, mid).sin();
            Complex64::from_polar(mag, phase)
        }));
    }

    normalize(&mut maps, 0.0);
    CoilMaps::new(maps)
}

fn normalize(maps: &mut [Array2<Complex64>], floor: f64) {
    let dim = maps[0].dim();
    let mut sos = Array2::<f64>::zeros(dim);
    for m in maps.iter() {
        sos.zip_mut_with(m, |a, s| *a += s.norm_sqr());
    }
    sos.mapv_inplace(|v| v.sqrt().max(floor));
    for m in maps.iter_mut() {
        m.zip_mut_with(&sos, |s, &d| {
            if d > 0.0 {
                *s /= d
            }
        });
    }
}

/// Sensitivity estimate for imported k-space without calibration data.
///
/// Coil images are reconstructed from the central `1/8` of k-space under a
/// Hann taper and normalized by their sum of squares. Pixels whose low-res
/// magnitude falls under 1% of the maximum are normalized against that
/// floor, so the estimate stays bounded in the background.
pub fn estimate_coil_maps(k: &KSpaceVolume) -> Result<CoilMaps> {
    let (rows, cols) = k.dim();
    let half_r = (rows / 16).max(1) as f64;
    let half_c = (cols / 16).max(1) as f64;
    let mut maps: Vec<Array2<Complex64>> = k
        .coils
        .iter()
        .map(|coil| {
            let mut low = coil.clone();
            for ((r, c), v) in low.indexed_iter_mut() {
                let fy = signed_frequency(r, rows) as f64 / half_r;
                let fx = signed_frequency(c, cols) as f64 / half_c;
                let w = |f: f64| {
                    if f.abs() >= 1.0 {
                        0.0
                    } else {
                        0.5 * (1.0 + (PI * f).cos())
                    }
                };
                *v *= w(fy) * w(fx);
            }
            ifft2(&low)
        })
        .collect();

    let peak = {
        let mut sos = Array2::<f64>::zeros((rows, cols));
        for m in &maps {
            sos.zip_mut_with(m, |a, s| *a += s.norm_sqr());
        }
        sos.iter().cloned().fold(0.0, f64::max).sqrt()
    };
    if peak == 0.0 {
        return Err(Error::degenerate("k-space is identically zero"));
    }
    normalize(&mut maps, 0.01 * peak);
    CoilMaps::new(maps)
}
