//! Synthetic multi-coil MRI acquisition.
//!
//! A [`Phantom`] is encoded into per-coil k-space through smooth coil
//! sensitivities, then reconstructed by sum-of-squares. Noise is injected as
//! complex white Gaussian noise in k-space; rigid motion is injected by
//! re-encoding a moved image and filling k-space shot by shot in
//! acquisition order.

mod acquisition;
mod coils;
mod motion;
mod noise;
mod phantom;

pub use acquisition::{
    forward_kspace, interleaved_order, recon_coil_combined, recon_sos, DEFAULT_ETL,
};
pub use coils::{estimate_coil_maps, synth_coil_maps};
pub use motion::{inject_motion, sample_trajectory, transform_image, MotionTrajectory, Pose};
pub use noise::{
    add_wgn, calibrate_sigma, inject_noise, make_version_set, make_version_set_from_kspace,
    version_targets,
};
pub use phantom::generate_phantom;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan::ScanType;

/// Square grid of complex amplitudes standing in for one 2D slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub pixels: Array2<Complex64>,
    pub scan_type: ScanType,
}

impl Phantom {
    pub fn new(pixels: Array2<Complex64>, scan_type: ScanType) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h != w || h == 0 {
            return Err(Error::invalid(format!("phantom must be square, got {h}x{w}")));
        }
        if pixels.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::invalid("phantom has non-finite pixels"));
        }
        if pixels.iter().all(|v| v.norm_sqr() == 0.0) {
            return Err(Error::invalid("phantom is identically zero"));
        }
        Ok(Phantom { pixels, scan_type })
    }

    pub fn size(&self) -> usize {
        self.pixels.nrows()
    }
}

/// Per-coil complex sensitivity maps.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilMaps {
    pub maps: Vec<Array2<Complex64>>,
}

impl CoilMaps {
    pub fn new(maps: Vec<Array2<Complex64>>) -> Result<Self> {
        let Some(first) = maps.first() else {
            return Err(Error::invalid("at least one coil map is required"));
        };
        let dim = first.dim();
        if maps.iter().any(|m| m.dim() != dim) {
            return Err(Error::invalid("coil maps differ in shape"));
        }
        Ok(CoilMaps { maps })
    }

    pub fn n_coils(&self) -> usize {
        self.maps.len()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.maps[0].dim()
    }

    /// `Σ_i |s_i(p)|²` at every pixel.
    pub fn sum_of_squares(&self) -> Array2<f64> {
        let mut acc = Array2::<f64>::zeros(self.dim());
        for m in &self.maps {
            acc.zip_mut_with(m, |a, s| *a += s.norm_sqr());
        }
        acc
    }
}

/// Multi-coil k-space with its acquisition order.
///
/// Phase-encode lines are rows. `acquisition_order[i] = (shot, line)` lists
/// every row exactly once, in the order it was acquired.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceVolume {
    pub coils: Vec<Array2<Complex64>>,
    pub acquisition_order: Vec<(usize, usize)>,
    pub echo_train_length: usize,
    pub scan_type: ScanType,
}

impl KSpaceVolume {
    pub fn new(
        coils: Vec<Array2<Complex64>>,
        acquisition_order: Vec<(usize, usize)>,
        echo_train_length: usize,
        scan_type: ScanType,
    ) -> Result<Self> {
        let Some(first) = coils.first() else {
            return Err(Error::invalid("k-space needs at least one coil"));
        };
        let dim = first.dim();
        if coils.iter().any(|c| c.dim() != dim) {
            return Err(Error::invalid("coil grids differ in shape"));
        }
        if echo_train_length == 0 {
            return Err(Error::invalid("echo train length must be positive"));
        }
        let k = KSpaceVolume {
            coils,
            acquisition_order,
            echo_train_length,
            scan_type,
        };
        k.check_order()?;
        Ok(k)
    }

    pub fn n_coils(&self) -> usize {
        self.coils.len()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.coils[0].dim()
    }

    pub fn n_shots(&self) -> usize {
        self.acquisition_order
            .iter()
            .map(|&(s, _)| s + 1)
            .max()
            .unwrap_or(0)
    }

    fn check_order(&self) -> Result<()> {
        let rows = self.dim().0;
        let mut seen = vec![false; rows];
        for &(_, line) in &self.acquisition_order {
            if line >= rows || std::mem::replace(&mut seen[line], true) {
                return Err(Error::invalid(format!(
                    "acquisition order repeats or exceeds line {line}"
                )));
            }
        }
        if seen.iter().any(|s| !s) || self.acquisition_order.len() != rows {
            return Err(Error::invalid("acquisition order does not cover every line"));
        }
        Ok(())
    }
}

/// Non-negative reconstructed image with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeImage {
    #[serde(skip)]
    pub pixels: Array2<f64>,
    pub slice_id: String,
    pub scan_type: ScanType,
    pub version: usize,
}

impl MagnitudeImage {
    pub fn new(pixels: Array2<f64>, scan_type: ScanType) -> Result<Self> {
        if pixels.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::invalid("magnitude pixels must be finite and non-negative"));
        }
        Ok(MagnitudeImage {
            pixels,
            slice_id: String::new(),
            scan_type,
            version: 0,
        })
    }

    pub fn with_id(mut self, slice_id: impl Into<String>, version: usize) -> Self {
        self.slice_id = slice_id.into();
        self.version = version;
        self
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}
