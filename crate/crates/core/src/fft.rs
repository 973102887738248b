//! Orthonormal 2D Fourier transforms on complex grids.
//!
//! Both directions are scaled by `1/sqrt(rows * cols)`, so the transform is
//! unitary: energy is identical in image space and k-space, and white noise
//! of variance `σ²` per component keeps that variance after the transform.
//! The zero frequency sits at index `(0, 0)` (no shift).

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::cell::RefCell;
use std::sync::Arc;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
}

fn transform(grid: &Array2<Complex64>, direction: FftDirection) -> Array2<Complex64> {
    let (rows, cols) = grid.dim();
    let row_fft = plan(cols, direction);
    let col_fft = plan(rows, direction);

    let mut out = grid.as_standard_layout().into_owned();
    let flat = out.as_slice_mut().expect("standard layout");
    // rustfft treats the buffer as consecutive length-`cols` rows
    row_fft.process(flat);

    let mut column = vec![Complex64::default(); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = flat[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            flat[r * cols + c] = column[r];
        }
    }

    let scale = 1.0 / ((rows * cols) as f64).sqrt();
    out.mapv_inplace(|v| v * scale);
    out
}

/// Forward transform, image → k-space.
pub fn fft2(image: &Array2<Complex64>) -> Array2<Complex64> {
    transform(image, FftDirection::Forward)
}

/// Inverse transform, k-space → image.
pub fn ifft2(kspace: &Array2<Complex64>) -> Array2<Complex64> {
    transform(kspace, FftDirection::Inverse)
}

/// Signed frequency index of bin `i` in a length-`n` unshifted spectrum.
pub fn signed_frequency(i: usize, n: usize) -> isize {
    if i < n.div_ceil(2) {
        i as isize
    } else {
        i as isize - n as isize
    }
}

/// Sum of `|v|²` over all samples.
pub fn energy(grid: &Array2<Complex64>) -> f64 {
    grid.iter().map(|v| v.norm_sqr()).sum()
}
