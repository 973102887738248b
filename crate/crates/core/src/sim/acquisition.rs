use ndarray::Array2;
use num_complex::Complex64;

use super::{CoilMaps, KSpaceVolume, MagnitudeImage, Phantom};
use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2};
use crate::scan::ScanType;

pub const DEFAULT_ETL: usize = 8;

/// Interleaved multi-shot order: shot `s` acquires lines `s, s + n_shots, ...`.
pub fn interleaved_order(lines: usize, etl: usize) -> Result<Vec<(usize, usize)>> {
    if etl == 0 || lines % etl != 0 {
        return Err(Error::invalid(format!(
            "echo train length {etl} must divide the {lines} phase-encode lines"
        )));
    }
    let n_shots = lines / etl;
    Ok((0..n_shots)
        .flat_map(|s| (0..etl).map(move |e| (s, s + e * n_shots)))
        .collect())
}

/// Encodes `image ⊙ s_i` for every coil.
pub(crate) fn encode(image: &Array2<Complex64>, maps: &CoilMaps) -> Vec<Array2<Complex64>> {
    maps.maps.iter().map(|s| fft2(&(image * s))).collect()
}

/// Fully sampled multi-coil k-space of a phantom.
pub fn forward_kspace(phantom: &Phantom, maps: &CoilMaps, etl: usize) -> Result<KSpaceVolume> {
    if phantom.pixels.dim() != maps.dim() {
        return Err(Error::invalid(format!(
            "phantom is {:?} but coil maps are {:?}",
            phantom.pixels.dim(),
            maps.dim()
        )));
    }
    let order = interleaved_order(phantom.size(), etl)?;
    KSpaceVolume::new(
        encode(&phantom.pixels, maps),
        order,
        etl,
        phantom.scan_type.clone(),
    )
}

fn coil_images(k: &KSpaceVolume) -> Vec<Array2<Complex64>> {
    k.coils.iter().map(ifft2).collect()
}

/// Root-sum-of-squares magnitude of the per-coil inverse transforms.
pub fn recon_sos(k: &KSpaceVolume) -> MagnitudeImage {
    let mut acc = Array2::<f64>::zeros(k.dim());
    for img in coil_images(k) {
        acc.zip_mut_with(&img, |a, v| *a += v.norm_sqr());
    }
    acc.mapv_inplace(f64::sqrt);
    sos_image(acc, &k.scan_type)
}

fn sos_image(pixels: Array2<f64>, scan_type: &ScanType) -> MagnitudeImage {
    MagnitudeImage::new(pixels, scan_type.clone()).expect("sqrt of sums of squares is valid")
}

/// Sensitivity-weighted coil combination `Σ I_i s_i* / sqrt(Σ |s_i|²)`.
///
/// Pixels where both the data and the sensitivities vanish come out as 0;
/// data at a pixel with zero total sensitivity is an error.
pub fn recon_coil_combined(k: &KSpaceVolume, maps: &CoilMaps) -> Result<Array2<Complex64>> {
    if k.n_coils() != maps.n_coils() {
        return Err(Error::invalid(format!(
            "{} coils of data but {} coil maps",
            k.n_coils(),
            maps.n_coils()
        )));
    }
    if k.dim() != maps.dim() {
        return Err(Error::invalid("k-space and coil maps differ in shape"));
    }
    let images = coil_images(k);
    let sos = maps.sum_of_squares();
    let mut out = Array2::<Complex64>::zeros(k.dim());
    for ((r, c), o) in out.indexed_iter_mut() {
        let mut num = Complex64::default();
        let mut data = 0.0;
        for (img, s) in images.iter().zip(&maps.maps) {
            num += img[[r, c]] * s[[r, c]].conj();
            data += img[[r, c]].norm_sqr();
        }
        let norm = sos[[r, c]];
        if norm > 0.0 {
            *o = num / norm.sqrt();
        } else if data > 0.0 {
            return Err(Error::NumericalDegeneracy(format!(
                "zero coil sensitivity at pixel ({r}, {c}) inside the signal support"
            )));
        }
    }
    Ok(out)
}
