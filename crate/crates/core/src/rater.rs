//! A scripted rater that stands in for human labels.
//!
//! It judges noise purely by the injected SNR level. Calibration picks use
//! one perceptual standard for every scan type, with Gaussian jitter so
//! repeated decisions near the boundary disagree the way people do.
//! Pass/fail judgements of test images use per-scan-type standards:
//! fat-suppressed scans are noisier by nature and are held to a laxer one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan::ScanType;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedRater {
    /// Minimum acceptable SNR (dB) when picking calibration versions.
    pub calibration_threshold_db: f64,
    /// Minimum acceptable SNR (dB) for fat-suppressed scans.
    pub fs_threshold_db: f64,
    /// Minimum acceptable SNR (dB) for scans without fat suppression.
    pub nfs_threshold_db: f64,
    /// Standard deviation of the per-decision threshold jitter (dB).
    pub jitter_db: f64,
    pub seed: u64,
}

impl Default for SimulatedRater {
    fn default() -> Self {
        Self {
            calibration_threshold_db: 18.75,
            fs_threshold_db: 18.75,
            nfs_threshold_db: 23.25,
            jitter_db: 1.5,
            seed: 0,
        }
    }
}

impl SimulatedRater {
    pub fn threshold_db(&self, scan_type: &ScanType) -> f64 {
        if scan_type.fat_suppressed() {
            self.fs_threshold_db
        } else {
            self.nfs_threshold_db
        }
    }

    /// The noisiest acceptable version `h` of a set, given each version's
    /// SNR (noisiest first, `INFINITY` for noise-free). Returns `0` when even
    /// the first is acceptable and `m_t + 1` when none is.
    ///
    /// `item` keys the jitter draw so each set gets its own.
    pub fn pick(&self, levels_db: &[f64], item: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ item.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let jitter = Normal::new(0.0, self.jitter_db.max(0.0))
            .expect("finite standard deviation")
            .sample(&mut rng);
        let bar = self.calibration_threshold_db + jitter;
        if levels_db.first().is_some_and(|&l| l >= bar) {
            return 0;
        }
        levels_db
            .iter()
            .position(|&l| l >= bar)
            .map_or(levels_db.len() + 1, |i| i + 1)
    }

    /// Ruler threshold bracketing the acceptance SNR: `(v, v)` when a version
    /// sits exactly on it, otherwise the adjacent pair around it.
    pub fn ruler_threshold(&self, ruler_levels_db: &[f64], scan_type: &ScanType) -> Result<(usize, usize)> {
        let thr = self.threshold_db(scan_type);
        if ruler_levels_db.len() < 2 {
            return Err(Error::invalid("a ruler has at least two versions"));
        }
        if let Some(v) = ruler_levels_db.iter().position(|&l| l == thr) {
            return Ok((v, v));
        }
        let above = ruler_levels_db
            .iter()
            .position(|&l| l > thr)
            .unwrap_or(ruler_levels_db.len() - 1);
        Ok((above.saturating_sub(1), above.max(1)))
    }

    /// Ruler score and pass/fail for a test image of known SNR.
    ///
    /// The ruler score is the ruler version with the nearest SNR (ties go
    /// to the cleaner version); a noise-free image matches the noise-free
    /// ruler end.
    pub fn test_label(&self, level_db: f64, ruler_levels_db: &[f64], scan_type: &ScanType) -> (usize, bool) {
        let rs = if level_db.is_infinite() {
            ruler_levels_db.len() - 1
        } else {
            let mut best = 0;
            for (v, &l) in ruler_levels_db.iter().enumerate() {
                if (l - level_db).abs() <= (ruler_levels_db[best] - level_db).abs() {
                    best = v;
                }
            }
            best
        };
        (rs, level_db >= self.threshold_db(scan_type))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs() -> ScanType {
        "knee-fs".parse().unwrap()
    }

    fn nfs() -> ScanType {
        "brain-nfs".parse().unwrap()
    }

    const LEVELS: [f64; 5] = [12.0, 16.5, 21.0, 25.5, f64::INFINITY];
    const RULER: [f64; 8] = [3.0, 7.5, 12.0, 16.5, 21.0, 25.5, 30.0, f64::INFINITY];

    #[test]
    fn noiseless_rater_picks_by_threshold() {
        let r = SimulatedRater { jitter_db: 0.0, ..Default::default() };
        assert_eq!(r.pick(&LEVELS, 1), 3);
        let stricter = SimulatedRater { jitter_db: 0.0, calibration_threshold_db: 23.0, ..Default::default() };
        assert_eq!(stricter.pick(&LEVELS, 1), 4);
        let strict = SimulatedRater { jitter_db: 0.0, calibration_threshold_db: 1e9, ..Default::default() };
        assert_eq!(strict.pick(&[1.0, 2.0, 3.0], 0), 4);
        let lax = SimulatedRater { jitter_db: 0.0, calibration_threshold_db: 0.0, ..Default::default() };
        assert_eq!(lax.pick(&LEVELS, 0), 0);
    }

    #[test]
    fn jitter_varies_but_rarely() {
        let r = SimulatedRater::default();
        let picks: Vec<usize> = (0..400).map(|i| r.pick(&LEVELS, i)).collect();
        let modal = picks.iter().filter(|&&h| h == 3).count();
        assert!(modal > 300 && modal < 400, "{modal}");
        assert_eq!(picks, (0..400).map(|i| r.pick(&LEVELS, i)).collect::<Vec<_>>());
    }

    #[test]
    fn thresholds_bracket() {
        let r = SimulatedRater::default();
        assert_eq!(r.ruler_threshold(&RULER, &fs()).unwrap(), (3, 4));
        assert_eq!(r.ruler_threshold(&RULER, &nfs()).unwrap(), (4, 5));
        let exact = SimulatedRater { fs_threshold_db: 21.0, ..Default::default() };
        assert_eq!(exact.ruler_threshold(&RULER, &fs()).unwrap(), (4, 4));
    }

    #[test]
    fn test_labels() {
        let r = SimulatedRater::default();
        assert_eq!(r.test_label(12.0, &RULER, &fs()), (2, false));
        assert_eq!(r.test_label(21.0, &RULER, &fs()), (4, true));
        assert_eq!(r.test_label(21.0, &RULER, &nfs()), (4, false));
        assert_eq!(r.test_label(f64::INFINITY, &RULER, &nfs()), (7, true));
        assert_eq!(r.test_label(9.75, &RULER, &nfs()).0, 2);
    }
}
