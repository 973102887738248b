//! Synthetic benchmark assembly: slices, splits, rulers and the manifest.
//!
//! Every slice belongs to a subject and every subject to exactly one split.
//! Each slice is "acquired" with a small baseline noise, then graded-noise
//! versions and one motion-corrupted version are derived from that
//! acquisition. Heuristic scores for every version go into the manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{block_dct_heuristic, snr_heuristic, Method};
use crate::io::{self, Provenance};
use crate::ruler::{build_ruler_from_kspace, ImageRuler, RulerRegistry};
use crate::scan::ScanType;
use crate::sim::{
    forward_kspace, inject_motion, inject_noise, make_version_set_from_kspace, sample_trajectory, synth_coil_maps,
    version_targets, generate_phantom, KSpaceVolume, MagnitudeImage,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scan_types: Vec<ScanType>,
    /// Slice totals per split, spread evenly over the scan types.
    pub train_slices: usize,
    pub val_slices: usize,
    pub test_slices: usize,
    pub slices_per_subject: usize,
    pub size: usize,
    pub n_coils: usize,
    pub etl: usize,
    pub m_t: usize,
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    /// SNR of the acquisition every version starts from.
    pub baseline_snr_db: f64,
    pub m_r: usize,
    pub ruler_low_db: f64,
    pub ruler_high_db: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scan_types: ["knee-fs", "knee-nfs", "brain-fs", "brain-nfs"]
                .iter()
                .map(|s| s.parse().expect("valid scan type"))
                .collect(),
            train_slices: 200,
            val_slices: 40,
            test_slices: 60,
            slices_per_subject: 5,
            size: 128,
            n_coils: 4,
            etl: 8,
            m_t: 5,
            snr_low_db: 12.0,
            snr_high_db: 30.0,
            baseline_snr_db: 36.0,
            m_r: 8,
            ruler_low_db: 3.0,
            ruler_high_db: 34.5,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scan_types.is_empty() {
            return Err(Error::invalid("at least one scan type is required"));
        }
        let n = self.scan_types.len();
        for (name, count) in [("train", self.train_slices), ("val", self.val_slices), ("test", self.test_slices)] {
            if count < n {
                return Err(Error::invalid(format!(
                    "{name} needs at least one slice per scan type ({count} < {n})"
                )));
            }
        }
        if self.slices_per_subject == 0 {
            return Err(Error::invalid("slices per subject must be positive"));
        }
        if self.m_t < 3 {
            return Err(Error::invalid("m_t must be at least 3"));
        }
        if !(self.snr_low_db < self.snr_high_db) {
            return Err(Error::invalid("empty SNR range"));
        }
        if !(self.ruler_low_db < self.snr_low_db && self.ruler_high_db > self.snr_high_db) {
            return Err(Error::invalid("ruler range must strictly contain the training range"));
        }
        if self.size % self.etl != 0 {
            return Err(Error::invalid("echo train length must divide the image size"));
        }
        Ok(())
    }

    /// Training SNR per version; the clean version is `INFINITY`.
    pub fn version_levels(&self) -> Vec<f64> {
        let mut l = version_targets(self.m_t, self.snr_low_db, self.snr_high_db).expect("validated range");
        l.push(f64::INFINITY);
        l
    }

    pub fn ruler_levels(&self) -> Vec<f64> {
        let mut l = version_targets(self.m_r, self.ruler_low_db, self.ruler_high_db).expect("validated range");
        l.push(f64::INFINITY);
        l
    }
}

/// Deterministic per-item seed.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = base ^ 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub slice_id: String,
    pub subject_id: String,
    pub slice_index: usize,
    pub scan_type: ScanType,
    pub split: Split,
    /// Relative paths of versions `1..=m_t`.
    pub version_files: Vec<String>,
    /// Injected SNR per version; `None` for the clean one.
    pub levels_db: Vec<Option<f64>>,
    pub heuristic: BTreeMap<Method, Vec<f64>>,
    pub calibrated: Option<Vec<f64>>,
    pub label: Option<usize>,
    pub motion_file: String,
    pub motion_positions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RulerRecord {
    pub scan_type: ScanType,
    pub subject_id: String,
    /// Directory holding the ruler, relative to the manifest.
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub slices: Vec<SliceRecord>,
    pub rulers: Vec<RulerRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("manifest serializes");
        v.push(b'\n');
        v
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(bytes).map_err(|e| Error::format(origin, e.to_string()))?;
        m.check_splits().map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read(path)?, path)
    }

    pub fn hash(&self) -> String {
        io::sha256_hex(&self.to_bytes())
    }

    /// No subject may appear in two splits.
    pub fn check_splits(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for s in &self.slices {
            if let Some(&prev) = seen.get(s.subject_id.as_str()) {
                if prev != s.split {
                    return Err(Error::invalid(format!(
                        "subject {} is in both {prev} and {}",
                        s.subject_id, s.split
                    )));
                }
            }
            seen.insert(&s.subject_id, s.split);
        }
        let ruler_subjects: BTreeSet<&str> = self.rulers.iter().map(|r| r.subject_id.as_str()).collect();
        if let Some(s) = self.slices.iter().find(|s| ruler_subjects.contains(s.subject_id.as_str())) {
            return Err(Error::invalid(format!("ruler subject {} also has slices", s.subject_id)));
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SliceRecord> {
        self.slices.iter().filter(move |s| s.split == split)
    }
}

/// One generated slice with its images.
#[derive(Clone, Debug)]
pub struct SliceData {
    pub record: SliceRecord,
    pub versions: Vec<MagnitudeImage>,
    pub motion: MagnitudeImage,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub slices: Vec<SliceData>,
    pub rulers: RulerRegistry,
    pub ruler_subjects: BTreeMap<ScanType, String>,
}

struct SlicePlan {
    slice_id: String,
    subject_id: String,
    slice_index: usize,
    scan_type: ScanType,
    split: Split,
}

fn share(total: usize, parts: usize, i: usize) -> usize {
    total / parts + usize::from(i < total % parts)
}

fn plan(config: &DatasetConfig) -> Vec<SlicePlan> {
    let mut out = Vec::new();
    let mut subject = 0usize;
    let n = config.scan_types.len();
    for (split, total) in [
        (Split::Train, config.train_slices),
        (Split::Val, config.val_slices),
        (Split::Test, config.test_slices),
    ] {
        for (ti, st) in config.scan_types.iter().enumerate() {
            let count = share(total, n, ti);
            let mut made = 0;
            while made < count {
                let subject_id = format!("{st}-s{subject:03}");
                subject += 1;
                let here = config.slices_per_subject.min(count - made);
                for idx in 0..here {
                    out.push(SlicePlan {
                        slice_id: format!("{subject_id}-{idx}"),
                        subject_id: subject_id.clone(),
                        slice_index: idx,
                        scan_type: st.clone(),
                        split,
                    });
                }
                made += here;
            }
        }
    }
    out
}

/// Baseline acquisition of a fresh phantom.
fn acquire(config: &DatasetConfig, scan_type: &ScanType, phantom_seed: u64, coil_seed: u64) -> Result<(KSpaceVolume, crate::sim::CoilMaps)> {
    let phantom = generate_phantom(phantom_seed, config.size, scan_type)?;
    let maps = synth_coil_maps(config.size, config.n_coils, coil_seed)?;
    let k = forward_kspace(&phantom, &maps, config.etl)?;
    let k = inject_noise(&k, config.baseline_snr_db, derive_seed(phantom_seed, "baseline"))?;
    Ok((k, maps))
}

fn version_path(slice_id: &str, v: usize) -> String {
    format!("slices/{slice_id}/v{v}.img")
}

fn generate_slice(config: &DatasetConfig, p: &SlicePlan) -> Result<SliceData> {
    let seed = derive_seed(config.seed, &p.slice_id);
    let coil_seed = derive_seed(config.seed, &p.subject_id);
    let (k, maps) = acquire(config, &p.scan_type, seed, coil_seed)?;
    let versions: Vec<MagnitudeImage> = make_version_set_from_kspace(
        &k,
        config.m_t,
        config.snr_low_db,
        config.snr_high_db,
        derive_seed(seed, "noise"),
    )?
    .into_iter()
    .map(|v| {
        let version = v.version;
        io::quantize(&v.with_id(p.slice_id.as_str(), version))
    })
    .collect();
    let traj = sample_trajectory(derive_seed(seed, "motion"), k.n_shots())?;
    let motion = io::quantize(&inject_motion(&k, &maps, &traj)?.with_id(p.slice_id.as_str(), 0));

    let mut heuristic = BTreeMap::new();
    heuristic.insert(Method::Snr, snr_heuristic(&versions)?.into_iter().map(|h| h.value).collect());
    heuristic.insert(
        Method::BlockDct,
        versions
            .iter()
            .map(|v| block_dct_heuristic(v).map(|h| h.value))
            .collect::<Result<Vec<_>>>()?,
    );
    let record = SliceRecord {
        slice_id: p.slice_id.clone(),
        subject_id: p.subject_id.clone(),
        slice_index: p.slice_index,
        scan_type: p.scan_type.clone(),
        split: p.split,
        version_files: (1..=config.m_t).map(|v| version_path(&p.slice_id, v)).collect(),
        levels_db: config.version_levels().iter().map(|l| l.is_finite().then_some(*l)).collect(),
        heuristic,
        calibrated: None,
        label: None,
        motion_file: format!("slices/{}/motion.img", p.slice_id),
        motion_positions: traj.positions(),
    };
    Ok(SliceData { record, versions, motion })
}

/// One ruler for `scan_type` from its own held-out subject.
pub fn generate_ruler(config: &DatasetConfig, scan_type: &ScanType) -> Result<(String, ImageRuler)> {
    let subject_id = format!("{scan_type}-ruler");
    let seed = derive_seed(config.seed, &subject_id);
    let (k, _) = acquire(config, scan_type, seed, derive_seed(seed, "coils"))?;
    let ruler = build_ruler_from_kspace(
        &k,
        config.m_r,
        (config.ruler_low_db, config.ruler_high_db),
        (config.snr_low_db, config.snr_high_db),
        derive_seed(seed, "noise"),
        &subject_id,
    )?;
    Ok((subject_id, ruler))
}

/// Generates every slice and one ruler per scan type, in memory.
pub fn generate(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let plans = plan(config);
    let slices = plans
        .par_iter()
        .map(|p| generate_slice(config, p))
        .collect::<Result<Vec<_>>>()?;
    let mut rulers = RulerRegistry::new();
    let mut ruler_subjects = BTreeMap::new();
    for st in &config.scan_types {
        let (subject, r) = generate_ruler(config, st)?;
        rulers.insert(st.clone(), r);
        ruler_subjects.insert(st.clone(), subject);
    }
    Ok(Dataset { config: config.clone(), slices, rulers, ruler_subjects })
}

impl Dataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            config: self.config.clone(),
            slices: self.slices.iter().map(|s| s.record.clone()).collect(),
            rulers: self
                .ruler_subjects
                .iter()
                .map(|(st, subject)| RulerRecord {
                    scan_type: st.clone(),
                    subject_id: subject.clone(),
                    dir: format!("rulers/{st}"),
                })
                .collect(),
        }
    }

    /// Writes images, rulers and `manifest.json` under `root`.
    pub fn write(&self, root: &Path) -> Result<DatasetManifest> {
        let manifest = self.manifest();
        let levels = self.config.version_levels();
        for s in &self.slices {
            for ((img, file), &level) in s.versions.iter().zip(&s.record.version_files).zip(&levels) {
                let prov = if level.is_finite() {
                    Provenance::Noise { target_snr_db: level }
                } else {
                    Provenance::Clean
                };
                io::write_image(&root.join(file), img, prov)?;
            }
            io::write_image(
                &root.join(&s.record.motion_file),
                &s.motion,
                Provenance::Motion { positions: s.record.motion_positions },
            )?;
        }
        for r in &manifest.rulers {
            crate::ruler::save_ruler(&root.join(&r.dir), &self.rulers[&r.scan_type])?;
        }
        manifest.write(&root.join(MANIFEST_FILE))?;
        Ok(manifest)
    }

    /// Loads a dataset written by [`Dataset::write`].
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Self::from_manifest(manifest, &root)
    }

    pub fn from_manifest(manifest: DatasetManifest, root: &Path) -> Result<Self> {
        let slices = manifest
            .slices
            .iter()
            .map(|rec| {
                let versions = rec
                    .version_files
                    .iter()
                    .map(|f| io::read_image(&root.join(f)).map(|(img, _)| img))
                    .collect::<Result<Vec<_>>>()?;
                let (motion, _) = io::read_image(&root.join(&rec.motion_file))?;
                Ok(SliceData { record: rec.clone(), versions, motion })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rulers = RulerRegistry::new();
        let mut ruler_subjects = BTreeMap::new();
        for r in &manifest.rulers {
            rulers.insert(r.scan_type.clone(), crate::ruler::load_ruler(&root.join(&r.dir))?);
            ruler_subjects.insert(r.scan_type.clone(), r.subject_id.clone());
        }
        Ok(Dataset { config: manifest.config, slices, rulers, ruler_subjects })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SliceData> {
        self.slices.iter().filter(move |s| s.record.split == split)
    }
}

/// Generates and writes a dataset; returns its manifest.
pub fn build_dataset(config: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    generate(config)?.write(root)
}

/// Best single pass mark for all scan types, searched over 100 evenly spaced
/// values between the lowest and highest cached ruler score. Ties go to the
/// lower value.
pub fn single_best_threshold(raw: &[f64], labels: &[bool], rulers: &RulerRegistry) -> Result<f64> {
    if raw.is_empty() || raw.len() != labels.len() {
        return Err(Error::invalid("need equal non-empty score and label lists"));
    }
    let (lo, hi) = threshold_grid_bounds(rulers)?;
    let mut best: Option<(f64, usize)> = None;
    for i in 0..100 {
        let t = lo + (hi - lo) * i as f64 / 99.0;
        let correct = raw.iter().zip(labels).filter(|(&r, &l)| (r >= t) == l).count();
        if best.map_or(true, |(_, c)| correct > c) {
            best = Some((t, correct));
        }
    }
    let best = best.expect("grid is non-empty");
    Ok(best.0)
}

pub fn threshold_grid_bounds(rulers: &RulerRegistry) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in rulers.values() {
        for &s in r.scores()? {
            lo = lo.min(s);
            hi = hi.max(s);
        }
    }
    if !lo.is_finite() {
        return Err(Error::invalid("no ruler scores to search between"));
    }
    Ok((lo, hi))
}
