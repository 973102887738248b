//! Heuristic noise-quality scores used as pre-calibration labels.
//!
//! Two baselines are provided: a reference-based SNR over a version set and
//! a no-reference noise estimate from high-frequency DCT coefficients of
//! smooth 8×8 blocks. Both are higher-is-cleaner, in dB-like units.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::sim::MagnitudeImage;

const BLOCK: usize = 8;
/// Gaussian consistency factor turning a median absolute value into σ.
const MAD_TO_SIGMA: f64 = 1.4826;
const SCORE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Snr,
    BlockDct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeuristicScore {
    pub value: f64,
    pub method: Method,
    pub slice_id: String,
    pub version: usize,
}

/// `10·log10(Σ ref² / Σ (ref − test)²)`.
pub fn snr_db(reference: &Array2<f64>, test: &Array2<f64>) -> Result<f64> {
    if reference.dim() != test.dim() {
        return Err(Error::invalid(format!(
            "shape mismatch {:?} vs {:?}",
            reference.dim(),
            test.dim()
        )));
    }
    let signal: f64 = reference.iter().map(|v| v * v).sum();
    let noise: f64 = reference
        .iter()
        .zip(test.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if noise == 0.0 {
        return Err(Error::degenerate("test image equals the reference"));
    }
    Ok(10.0 * (signal / noise).log10())
}

/// SNR scores for a version set ordered noisiest first, clean last.
///
/// Each noisy version is scored against the clean one; the clean version
/// gets a linear extrapolation from the two versions below it.
pub fn snr_heuristic(set: &[MagnitudeImage]) -> Result<Vec<HeuristicScore>> {
    let m = set.len();
    if m < 3 {
        return Err(Error::invalid(format!("need at least 3 versions, got {m}")));
    }
    let reference = &set[m - 1].pixels;
    let mut values = Vec::with_capacity(m);
    for img in &set[..m - 1] {
        values.push(snr_db(reference, &img.pixels)?);
    }
    values.push(values[m - 2] + (values[m - 2] - values[m - 3]));
    Ok(set
        .iter()
        .zip(values)
        .map(|(img, value)| HeuristicScore {
            value,
            method: Method::Snr,
            slice_id: img.slice_id.clone(),
            version: img.version,
        })
        .collect())
}

fn dct_basis() -> [[f64; BLOCK]; BLOCK] {
    let mut c = [[0.0; BLOCK]; BLOCK];
    for (u, row) in c.iter_mut().enumerate() {
        let alpha = if u == 0 {
            (1.0 / BLOCK as f64).sqrt()
        } else {
            (2.0 / BLOCK as f64).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * (((2 * x + 1) * u) as f64 * PI / (2 * BLOCK) as f64).cos();
        }
    }
    c
}

/// Orthonormal 2D DCT-II of one block.
fn dct8(block: &[[f64; BLOCK]; BLOCK], basis: &[[f64; BLOCK]; BLOCK]) -> [[f64; BLOCK]; BLOCK] {
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for u in 0..BLOCK {
        for x in 0..BLOCK {
            tmp[u][x] = (0..BLOCK).map(|y| basis[u][y] * block[y][x]).sum();
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            out[u][v] = (0..BLOCK).map(|x| tmp[u][x] * basis[v][x]).sum();
        }
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Noise standard deviation from the DCT statistics of smooth blocks.
///
/// Non-overlapping 8×8 blocks are transformed. Blocks are ranked by the
/// summed magnitude of their low frequencies (`1 ≤ u+v ≤ 4`); the half
/// with the least structure contribute their high frequencies
/// (`u+v ≥ 8`), and the estimate is the MAD-scaled median of those.
pub fn block_dct_sigma(pixels: &Array2<f64>) -> Result<f64> {
    let (rows, cols) = pixels.dim();
    if rows < 2 * BLOCK || cols < 2 * BLOCK {
        return Err(Error::invalid(format!(
            "image must be at least 16x16, got {rows}x{cols}"
        )));
    }
    let basis = dct_basis();
    let mut blocks: Vec<(f64, Vec<f64>)> = Vec::new();
    for by in 0..rows / BLOCK {
        for bx in 0..cols / BLOCK {
            let mut b = [[0.0; BLOCK]; BLOCK];
            for (y, row) in b.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    *v = pixels[[by * BLOCK + y, bx * BLOCK + x]];
                }
            }
            let coef = dct8(&b, &basis);
            let mut texture = 0.0;
            let mut high = Vec::with_capacity(28);
            for (u, row) in coef.iter().enumerate() {
                for (v, c) in row.iter().enumerate() {
                    match u + v {
                        1..=4 => texture += c.abs(),
                        s if s >= 8 => high.push(c.abs()),
                        _ => {}
                    }
                }
            }
            blocks.push((texture, high));
        }
    }
    // stable: equal textures keep raster order
    blocks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let keep = (blocks.len() / 2).max(1);
    let mut pooled: Vec<f64> = blocks
        .into_iter()
        .take(keep)
        .flat_map(|(_, high)| high)
        .collect();
    Ok(MAD_TO_SIGMA * median(&mut pooled))
}

/// Maps a noise estimate to a higher-is-better score.
pub fn sigma_to_score(sigma: f64) -> f64 {
    -10.0 * (sigma * sigma).max(SCORE_FLOOR).log10()
}

/// `−10·log10(max(σ̂², 1e-8))` of the block-DCT estimate.
pub fn block_dct_heuristic(img: &MagnitudeImage) -> Result<HeuristicScore> {
    let sigma = block_dct_sigma(&img.pixels)?;
    Ok(HeuristicScore {
        value: sigma_to_score(sigma),
        method: Method::BlockDct,
        slice_id: img.slice_id.clone(),
        version: img.version,
    })
}

/// Scores every image of a set with the chosen method.
pub fn score_set(set: &[MagnitudeImage], method: Method) -> Result<Vec<HeuristicScore>> {
    match method {
        Method::Snr => snr_heuristic(set),
        Method::BlockDct => set.iter().map(block_dct_heuristic).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn img(pixels: Array2<f64>, v: usize) -> MagnitudeImage {
        MagnitudeImage::new(pixels, "knee-fs".parse().unwrap())
            .unwrap()
            .with_id("s", v)
    }

    fn flat_plus_noise(size: usize, level: f64, sigma: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sigma).unwrap();
        Array2::from_shape_fn((size, size), |_| level + n.sample(&mut rng))
    }

    #[test]
    fn dct_basis_is_orthonormal() {
        let c = dct_basis();
        for i in 0..BLOCK {
            for j in 0..BLOCK {
                let dot: f64 = (0..BLOCK).map(|k| c[i][k] * c[j][k]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_image_has_zero_sigma() {
        assert_eq!(block_dct_sigma(&Array2::zeros((32, 32))).unwrap(), 0.0);
    }

    #[test]
    fn recovers_known_sigma() {
        let mean: f64 = (0..20)
            .map(|s| block_dct_sigma(&flat_plus_noise(128, 500.0, 10.0, s)).unwrap())
            .sum::<f64>()
            / 20.0;
        assert!((8.5..=11.5).contains(&mean), "mean {mean}");
    }

    #[test]
    fn scales_linearly() {
        let base = Array2::from_shape_fn((64, 64), |(r, c)| ((r / 8 + c / 16) % 3) as f64 * 30.0);
        let noise = flat_plus_noise(64, 0.0, 4.0, 3);
        let one = block_dct_sigma(&(&base + &noise)).unwrap();
        let two = block_dct_sigma(&(&base * 2.0 + &noise * 2.0)).unwrap();
        assert!(((two / one) - 2.0).abs() <= 0.2);
    }

    #[test]
    fn invariant_to_offset() {
        let x = flat_plus_noise(64, 10.0, 3.0, 5);
        let a = block_dct_sigma(&x).unwrap();
        let b = block_dct_sigma(&(&x + 1234.5)).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn too_small() {
        assert!(block_dct_sigma(&Array2::zeros((15, 40))).is_err());
    }

    #[test]
    fn score_mapping() {
        assert!((sigma_to_score(1.0) - 0.0).abs() < 1e-12);
        assert!((sigma_to_score(10.0) + 20.0).abs() < 1e-12);
        assert!((sigma_to_score(0.0) - 80.0).abs() < 1e-12);
    }

    #[test]
    fn snr_extrapolates_clean_version() {
        let clean = Array2::from_elem((4, 4), 10.0);
        // energies chosen so the noisy versions score 24, 27, 30 dB
        let scaled = |db: f64| {
            let e = 1600.0 / 10f64.powf(db / 10.0);
            let d = (e / 16.0).sqrt();
            &clean + d
        };
        let set = vec![
            img(scaled(24.0), 1),
            img(scaled(27.0), 2),
            img(scaled(30.0), 3),
            img(clean.clone(), 4),
        ];
        let q = snr_heuristic(&set).unwrap();
        assert!((q[2].value - 30.0).abs() < 1e-9);
        assert!((q[1].value - 27.0).abs() < 1e-9);
        assert!((q[3].value - 33.0).abs() < 1e-9);
        assert_eq!(q[3].value - q[2].value, q[2].value - q[1].value);
    }

    #[test]
    fn snr_degenerate_and_unit_ratio() {
        let clean = Array2::from_elem((4, 4), 3.0);
        let same = vec![img(clean.clone(), 1), img(clean.clone(), 2), img(clean.clone(), 3)];
        assert!(matches!(snr_heuristic(&same), Err(Error::DegenerateInput(_))));

        // error energy equal to signal energy → 0 dB
        let doubled = &clean * 2.0;
        assert!((snr_db(&clean, &doubled).unwrap()).abs() < 1e-12);
        assert!(snr_db(&clean, &Array2::zeros((3, 3))).is_err());
    }
}
