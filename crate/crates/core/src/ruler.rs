//! Image rulers: graded versions of one reference slice per scan type.
//!
//! A raw network score means little on its own. Scoring the ruler's
//! versions with the same network gives `S_ruler`; a test image's ruler
//! score is the version whose raw score is nearest, and its pass/fail
//! decision compares against the raw scores at the ruler's threshold.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Provenance};
use crate::network::DualTaskNet;
use crate::scan::ScanType;
use crate::sim::{forward_kspace, inject_noise, recon_sos, version_targets, CoilMaps, KSpaceVolume, MagnitudeImage, Phantom, DEFAULT_ETL};

/// Default single-version threshold before anyone picks one.
pub const DEFAULT_THRESHOLD_VERSION: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRuler {
    pub scan_type: ScanType,
    /// Noisiest first; the last is noise-free.
    pub versions: Vec<MagnitudeImage>,
    /// Injected SNR per version, `INFINITY` for the noise-free one.
    pub levels_db: Vec<f64>,
    pub scores: Option<Vec<f64>>,
    pub threshold: Option<(usize, usize)>,
    /// Hash of the checkpoint that produced `scores`.
    pub checkpoint_hash: Option<String>,
}

fn check_containment(range: (f64, f64), training: (f64, f64)) -> Result<()> {
    if range.0 < training.0 && range.1 > training.1 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "ruler range [{}, {}] must strictly contain the training range [{}, {}]",
            range.0, range.1, training.0, training.1
        )))
    }
}

/// Builds a ruler from acquired k-space.
///
/// Versions `0..m_r-1` get noise at the SNR grid over `range`; the last is
/// the reconstruction of `k` itself. `range` has to reach past the training
/// range on both ends so every training-quality image has a neighbour.
pub fn build_ruler_from_kspace(
    k: &KSpaceVolume,
    m_r: usize,
    range: (f64, f64),
    training: (f64, f64),
    seed: u64,
    slice_id: &str,
) -> Result<ImageRuler> {
    if m_r < 2 {
        return Err(Error::invalid(format!("a ruler needs at least 2 versions, got {m_r}")));
    }
    check_containment(range, training)?;
    let targets = version_targets(m_r, range.0, range.1)?;
    let mut versions = Vec::with_capacity(m_r);
    for (v, &t) in targets.iter().enumerate() {
        let noisy = inject_noise(k, t, seed.wrapping_add(v as u64))?;
        versions.push(io::quantize(&recon_sos(&noisy).with_id(slice_id, v)));
    }
    versions.push(io::quantize(&recon_sos(k).with_id(slice_id, m_r - 1)));
    let mut levels_db = targets;
    levels_db.push(f64::INFINITY);
    Ok(ImageRuler {
        scan_type: k.scan_type.clone(),
        versions,
        levels_db,
        scores: None,
        threshold: Some((DEFAULT_THRESHOLD_VERSION.min(m_r - 1), DEFAULT_THRESHOLD_VERSION.min(m_r - 1))),
        checkpoint_hash: None,
    })
}

/// [`build_ruler_from_kspace`] on a phantom's noise-free k-space.
pub fn build_ruler(
    phantom: &Phantom,
    maps: &CoilMaps,
    m_r: usize,
    range: (f64, f64),
    training: (f64, f64),
    seed: u64,
) -> Result<ImageRuler> {
    let etl = (1..=DEFAULT_ETL).rev().find(|e| phantom.size() % e == 0).unwrap_or(1);
    let k = forward_kspace(phantom, maps, etl)?;
    build_ruler_from_kspace(&k, m_r, range, training, seed, "ruler")
}

impl ImageRuler {
    pub fn m_r(&self) -> usize {
        self.versions.len()
    }

    /// Scores every version with `score`.
    pub fn cache_scores_with(&mut self, mut score: impl FnMut(&Array2<f64>) -> Result<f64>) -> Result<()> {
        let s = self
            .versions
            .iter()
            .map(|v| score(&v.pixels))
            .collect::<Result<Vec<_>>>()?;
        self.scores = Some(s);
        Ok(())
    }

    pub fn cache_scores(&mut self, net: &DualTaskNet<f32>, checkpoint_hash: Option<String>) -> Result<()> {
        self.cache_scores_with(|img| net.noise_score(img))?;
        self.checkpoint_hash = checkpoint_hash;
        Ok(())
    }

    pub fn scores(&self) -> Result<&[f64]> {
        self.scores
            .as_deref()
            .ok_or_else(|| Error::State(format!("ruler {} has no cached scores", self.scan_type)))
    }

    pub fn set_threshold(&mut self, t_a: usize, t_b: usize) -> Result<()> {
        if t_a > t_b || t_b >= self.m_r() {
            return Err(Error::invalid(format!(
                "threshold ({t_a}, {t_b}) needs t_a <= t_b <= {}",
                self.m_r() - 1
            )));
        }
        self.threshold = Some((t_a, t_b));
        Ok(())
    }

    /// Nearest cached score; ties go to the cleaner version.
    pub fn ruler_score(&self, raw: f64) -> Result<usize> {
        let s = self.scores()?;
        let mut best = 0;
        for v in 1..s.len() {
            if (s[v] - raw).abs() <= (s[best] - raw).abs() {
                best = v;
            }
        }
        Ok(best)
    }

    /// Raw score at which images start to pass.
    pub fn pass_mark(&self) -> Result<f64> {
        let s = self.scores()?;
        let (a, b) = self
            .threshold
            .ok_or_else(|| Error::State(format!("ruler {} has no threshold", self.scan_type)))?;
        Ok((s[a] + s[b]) / 2.0)
    }

    pub fn pass_fail(&self, raw: f64) -> Result<bool> {
        Ok(raw >= self.pass_mark()?)
    }
}

/// Rulers by scan type.
pub type RulerRegistry = BTreeMap<ScanType, ImageRuler>;

/// Exact scan type first; otherwise, unless `strict`, the first ruler (in
/// scan-type order) with the same fat-suppression setting.
pub fn select_ruler<'a>(registry: &'a RulerRegistry, scan_type: &ScanType, strict: bool) -> Result<&'a ImageRuler> {
    if let Some(r) = registry.get(scan_type) {
        return Ok(r);
    }
    if !strict {
        if let Some(r) = registry
            .values()
            .find(|r| r.scan_type.fat_suppressed() == scan_type.fat_suppressed())
        {
            return Ok(r);
        }
    }
    Err(Error::MissingRuler(scan_type.to_string()))
}

#[derive(Serialize, Deserialize)]
struct RulerFile {
    scan_type: ScanType,
    m_r: usize,
    threshold: Option<(usize, usize)>,
    checkpoint_hash: Option<String>,
    scores: Option<Vec<f64>>,
    /// `None` marks the noise-free version.
    levels_db: Vec<Option<f64>>,
    files: Vec<String>,
}

const RULER_MANIFEST: &str = "ruler.json";

/// Writes `ruler.json` and one IMG per version into `dir`.
pub fn save_ruler(dir: &Path, ruler: &ImageRuler) -> Result<()> {
    let mut files = Vec::new();
    for (v, (img, &level)) in ruler.versions.iter().zip(&ruler.levels_db).enumerate() {
        let name = format!("v{v}.img");
        let prov = if level.is_finite() {
            Provenance::Noise { target_snr_db: level }
        } else {
            Provenance::Clean
        };
        io::write_image(&dir.join(&name), img, prov)?;
        files.push(name);
    }
    let manifest = RulerFile {
        scan_type: ruler.scan_type.clone(),
        m_r: ruler.m_r(),
        threshold: ruler.threshold,
        checkpoint_hash: ruler.checkpoint_hash.clone(),
        scores: ruler.scores.clone(),
        levels_db: ruler.levels_db.iter().map(|l| l.is_finite().then_some(*l)).collect(),
        files,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("ruler manifest serializes");
    io::write_atomic(&dir.join(RULER_MANIFEST), &json)
}

pub fn load_ruler(dir: &Path) -> Result<ImageRuler> {
    let path = dir.join(RULER_MANIFEST);
    let m: RulerFile = serde_json::from_slice(&io::read(&path)?)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    if m.files.len() != m.m_r || m.levels_db.len() != m.m_r {
        return Err(Error::format(&path, "file and level lists must have m_r entries"));
    }
    let versions = m
        .files
        .iter()
        .map(|f| io::read_image(&dir.join(f)).map(|(img, _)| img))
        .collect::<Result<Vec<_>>>()?;
    let mut ruler = ImageRuler {
        scan_type: m.scan_type,
        versions,
        levels_db: m.levels_db.iter().map(|l| l.unwrap_or(f64::INFINITY)).collect(),
        scores: m.scores,
        threshold: None,
        checkpoint_hash: m.checkpoint_hash,
    };
    if let Some((a, b)) = m.threshold {
        ruler.set_threshold(a, b).map_err(|e| Error::format(&path, e.to_string()))?;
    }
    Ok(ruler)
}

/// One sub-directory per scan type.
pub fn save_registry(dir: &Path, registry: &RulerRegistry) -> Result<()> {
    for (st, r) in registry {
        save_ruler(&dir.join(st.to_string()), r)?;
    }
    Ok(())
}

pub fn load_registry(dir: &Path) -> Result<RulerRegistry> {
    let mut out = RulerRegistry::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(RULER_MANIFEST).exists())
        .collect();
    dirs.sort();
    for d in dirs {
        let r = load_ruler(&d)?;
        out.insert(r.scan_type.clone(), r);
    }
    if out.is_empty() {
        return Err(Error::format(dir, "no rulers found"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_phantom, synth_coil_maps};
    use proptest::prelude::*;

    fn st(s: &str) -> ScanType {
        s.parse().unwrap()
    }

    fn bare(scan: &str, scores: Vec<f64>) -> ImageRuler {
        let m = scores.len();
        ImageRuler {
            scan_type: st(scan),
            versions: (0..m)
                .map(|v| MagnitudeImage::new(Array2::zeros((2, 2)), st(scan)).unwrap().with_id("r", v))
                .collect(),
            levels_db: (0..m).map(|v| v as f64).collect(),
            scores: Some(scores),
            threshold: Some((0, 0)),
            checkpoint_hash: None,
        }
    }

    #[test]
    fn build_counts_and_grades() {
        let p = generate_phantom(2, 32, &st("knee-fs")).unwrap();
        let maps = synth_coil_maps(32, 2, 1).unwrap();
        let r = build_ruler(&p, &maps, 8, (3.0, 34.5), (12.0, 30.0), 5).unwrap();
        assert_eq!(r.m_r(), 8);
        assert_eq!(r.levels_db[..7], [3.0, 7.5, 12.0, 16.5, 21.0, 25.5, 30.0]);
        let clean = &r.versions[7].pixels;
        let energy: Vec<f64> = r
            .versions
            .iter()
            .map(|v| (&v.pixels - clean).mapv(|d| d * d).sum())
            .collect();
        assert!(energy.windows(2).all(|w| w[0] > w[1]));
        let pair = build_ruler(&p, &maps, 2, (3.0, 34.5), (12.0, 30.0), 5).unwrap();
        assert_eq!(pair.m_r(), 2);
        assert_eq!(pair.levels_db, vec![3.0, f64::INFINITY]);
    }

    #[test]
    fn range_must_contain_training() {
        let p = generate_phantom(2, 32, &st("knee-fs")).unwrap();
        let maps = synth_coil_maps(32, 1, 1).unwrap();
        assert!(build_ruler(&p, &maps, 3, (8.0, 34.0), (12.0, 30.0), 0).is_ok());
        assert!(build_ruler(&p, &maps, 3, (14.0, 30.0), (12.0, 30.0), 0).is_err());
        assert!(build_ruler(&p, &maps, 3, (8.0, 30.0), (12.0, 30.0), 0).is_err());
        assert!(build_ruler(&p, &maps, 1, (8.0, 34.0), (12.0, 30.0), 0).is_err());
    }

    #[test]
    fn ruler_score_rules() {
        let r = bare("knee-fs", (1..=8).map(f64::from).collect());
        assert_eq!(r.ruler_score(5.0).unwrap(), 4);
        assert_eq!(r.ruler_score(-10.0).unwrap(), 0);
        assert_eq!(r.ruler_score(4.5).unwrap(), 4);
        assert_eq!(r.ruler_score(100.0).unwrap(), 7);
        let mut unscored = r.clone();
        unscored.scores = None;
        assert!(matches!(unscored.ruler_score(1.0), Err(Error::State(_))));
    }

    #[test]
    fn pass_fail_rules() {
        let mut r = bare("knee-fs", vec![1.0, 5.0, 10.0, 14.0, 20.0]);
        r.set_threshold(3, 3).unwrap();
        assert!(r.pass_fail(14.0).unwrap());
        r.set_threshold(2, 3).unwrap();
        assert!(!r.pass_fail(11.9).unwrap());
        assert!(r.pass_fail(12.0).unwrap());
        assert!(r.pass_fail(20.0).unwrap());
        assert!(r.set_threshold(3, 2).is_err());
        assert!(r.set_threshold(2, 5).is_err());
        r.threshold = None;
        assert!(matches!(r.pass_fail(1.0), Err(Error::State(_))));
    }

    #[test]
    fn selection() {
        let mut reg = RulerRegistry::new();
        reg.insert(st("knee-fs"), bare("knee-fs", vec![0.0, 1.0]));
        reg.insert(st("elbow-nfs"), bare("elbow-nfs", vec![0.0, 1.0]));
        assert_eq!(select_ruler(&reg, &st("knee-fs"), true).unwrap().scan_type, st("knee-fs"));
        assert_eq!(select_ruler(&reg, &st("hip-fs"), false).unwrap().scan_type, st("knee-fs"));
        assert!(matches!(select_ruler(&reg, &st("hip-fs"), true), Err(Error::MissingRuler(_))));
        let only = RulerRegistry::from([(st("elbow-nfs"), bare("elbow-nfs", vec![0.0, 1.0]))]);
        assert!(matches!(select_ruler(&only, &st("hip-fs"), false), Err(Error::MissingRuler(_))));
    }

    #[test]
    fn adding_a_ruler_keeps_existing_matches() {
        let mut reg = RulerRegistry::new();
        reg.insert(st("knee-fs"), bare("knee-fs", vec![0.0, 2.0, 4.0]));
        let before = select_ruler(&reg, &st("knee-fs"), false).unwrap().ruler_score(2.5).unwrap();
        reg.insert(st("ankle-fs"), bare("ankle-fs", vec![9.0, 10.0, 11.0]));
        let after = select_ruler(&reg, &st("knee-fs"), false).unwrap().ruler_score(2.5).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn file_round_trip() {
        let p = generate_phantom(3, 32, &st("brain-nfs")).unwrap();
        let maps = synth_coil_maps(32, 2, 1).unwrap();
        let mut r = build_ruler(&p, &maps, 4, (3.0, 34.5), (12.0, 30.0), 1).unwrap();
        r.scores = Some(vec![1.0, 2.0, 3.5, 4.0]);
        r.set_threshold(1, 2).unwrap();
        r.checkpoint_hash = Some("feed".into());
        let dir = tempfile::tempdir().unwrap();
        let reg = RulerRegistry::from([(r.scan_type.clone(), r.clone())]);
        save_registry(dir.path(), &reg).unwrap();
        let back = load_registry(dir.path()).unwrap();
        assert_eq!(back[&st("brain-nfs")], r);
    }

    proptest! {
        #[test]
        fn shift_cancels(mut s in prop::collection::vec(-50.0f64..50.0, 2..10), raw in -60.0f64..60.0,
                         c in -1000.0f64..1000.0, ta in 0usize..10, tb in 0usize..10) {
            s.iter_mut().for_each(|v| *v = v.round());
            let raw = raw.round();
            let c = c.round();
            let m = s.len();
            let (ta, tb) = (ta.min(tb) % m, ta.max(tb) % m);
            let (ta, tb) = (ta.min(tb), ta.max(tb));
            let mut r = bare("knee-fs", s.clone());
            r.set_threshold(ta, tb).unwrap();
            let mut shifted = r.clone();
            shifted.scores = Some(s.iter().map(|v| v + c).collect());
            prop_assert_eq!(r.ruler_score(raw).unwrap(), shifted.ruler_score(raw + c).unwrap());
            prop_assert_eq!(r.pass_fail(raw).unwrap(), shifted.pass_fail(raw + c).unwrap());
        }

        #[test]
        fn monotone_in_raw(mut s in prop::collection::vec(-50.0f64..50.0, 2..10), a in -60.0f64..60.0, b in -60.0f64..60.0) {
            s.sort_by(|x, y| x.total_cmp(y));
            s.dedup();
            prop_assume!(s.len() >= 2);
            let m = s.len();
            let mut r = bare("knee-fs", s);
            r.set_threshold(m / 2 - 1, m / 2).unwrap();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(r.ruler_score(lo).unwrap() <= r.ruler_score(hi).unwrap());
            if r.pass_fail(lo).unwrap() {
                prop_assert!(r.pass_fail(hi).unwrap());
            }
        }
    }
}
