//! End-to-end synthetic benchmark.
//!
//! Generates the dataset, labels it with the [`SimulatedRater`], trains the
//! noise branch on calibrated and on uncalibrated heuristic labels, scores
//! the test split against per-scan-type rulers, compares with the single
//! best threshold, and finally checks the motion branch after dual-task
//! training.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, propagate_labels, VersionSet, DEFAULT_ETA};
use crate::dataset::{generate, single_best_threshold, Dataset, DatasetConfig, Split};
use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::metrics::{binary_metrics, evaluate, EvalReport, Prediction};
use crate::network::{
    train_with, AdamConfig, DualTaskNet, Mode, MotionPair, NetConfig, NoiseSet, TrainConfig, MOTION_THRESHOLD,
};
use crate::rater::SimulatedRater;
use crate::ruler::{select_ruler, RulerRegistry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub dataset: DatasetConfig,
    pub rater: SimulatedRater,
    pub method: Method,
    pub eta: f64,
    /// The rater labels slices whose index is a multiple of this; the rest
    /// get propagated picks.
    pub label_stride: usize,
    pub net: NetConfig,
    pub net_seed: u64,
    pub noise_train: TrainConfig,
    pub dual_train: TrainConfig,
    pub run_uncalibrated: bool,
    pub run_dual: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let adam = AdamConfig { lr: 1e-3, ..Default::default() };
        Self {
            dataset: DatasetConfig::default(),
            rater: SimulatedRater::default(),
            method: Method::BlockDct,
            eta: DEFAULT_ETA,
            label_stride: 2,
            net: NetConfig::default(),
            net_seed: 1,
            noise_train: TrainConfig { epochs: 30, adam, mode: Mode::NoiseOnly, seed: 11, ..Default::default() },
            dual_train: TrainConfig { epochs: 30, adam, mode: Mode::Dual, seed: 12, ..Default::default() },
            run_uncalibrated: true,
            run_dual: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdComparison {
    pub single_threshold: f64,
    pub single_accuracy: f64,
    pub ruler_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionReport {
    pub accuracy: f64,
    pub n: usize,
    /// Noise evaluation of the dual-task net.
    pub noise: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub calibrated: EvalReport,
    pub uncalibrated: Option<EvalReport>,
    pub thresholds: ThresholdComparison,
    pub motion: Option<MotionReport>,
    /// Validation Spearman after each epoch of the calibrated run.
    pub validation_spearman: Vec<f64>,
    pub seconds: f64,
}

/// Rater picks for one split, propagated to unlabeled slices.
pub fn label_sets(
    data: &Dataset,
    split: Split,
    rater: &SimulatedRater,
    method: Method,
    stride: usize,
) -> Result<Vec<VersionSet>> {
    if stride == 0 {
        return Err(Error::invalid("label stride must be positive"));
    }
    let levels = data.config.version_levels();
    let sets: Vec<VersionSet> = data
        .split(split)
        .map(|s| {
            let r = &s.record;
            let heuristic = r
                .heuristic
                .get(&method)
                .cloned()
                .ok_or_else(|| Error::MissingLabel(format!("{} has no {method:?} scores", r.slice_id)))?;
            let item = crate::dataset::derive_seed(rater.seed, &r.slice_id);
            Ok(VersionSet {
                slice_id: r.slice_id.clone(),
                subject_id: r.subject_id.clone(),
                slice_index: r.slice_index,
                scan_type: r.scan_type.clone(),
                heuristic,
                label: (r.slice_index % stride == 0).then(|| rater.pick(&levels, item)),
            })
        })
        .collect::<Result<_>>()?;
    propagate_labels(&sets)
}

/// Mean intensity of the clean training images; one global input scale.
pub fn input_scale(data: &Dataset) -> Result<f64> {
    let means: Vec<f64> = data
        .split(Split::Train)
        .filter_map(|s| s.versions.last()?.pixels.mean())
        .collect();
    let m = means.iter().sum::<f64>() / means.len() as f64;
    if !(m.is_finite() && m > 0.0) {
        return Err(Error::degenerate("training images have no intensity"));
    }
    Ok(m)
}

pub fn noise_sets(data: &Dataset, split: Split, targets: &[Vec<f64>]) -> Result<Vec<NoiseSet>> {
    let slices: Vec<_> = data.split(split).collect();
    if slices.len() != targets.len() {
        return Err(Error::invalid("one target list per slice is required"));
    }
    Ok(slices
        .iter()
        .zip(targets)
        .map(|(s, t)| NoiseSet {
            images: s.versions.iter().map(|v| v.pixels.clone()).collect(),
            targets: t.clone(),
        })
        .collect())
}

/// Motion-corrupted image with the noise-free version it came from.
pub fn motion_pairs(data: &Dataset, split: Split) -> Vec<MotionPair> {
    data.split(split)
        .filter_map(|s| {
            Some(MotionPair { corrupted: s.motion.pixels.clone(), original: s.versions.last()?.pixels.clone() })
        })
        .collect()
}

/// Caches ruler scores from `net` and applies the rater's thresholds.
pub fn prepare_rulers(rulers: &RulerRegistry, net: &DualTaskNet<f32>, rater: &SimulatedRater) -> Result<RulerRegistry> {
    let mut out = rulers.clone();
    for r in out.values_mut() {
        r.cache_scores(net, None)?;
        let (a, b) = rater.ruler_threshold(&r.levels_db, &r.scan_type)?;
        r.set_threshold(a, b)?;
    }
    Ok(out)
}

/// Scores every version of every slice in `split` against the rulers.
pub fn predictions(
    data: &Dataset,
    split: Split,
    net: &DualTaskNet<f32>,
    rulers: &RulerRegistry,
    rater: &SimulatedRater,
) -> Result<Vec<Prediction>> {
    let levels = data.config.version_levels();
    let mut out = Vec::new();
    for s in data.split(split) {
        let ruler = select_ruler(rulers, &s.record.scan_type, false)?;
        for (v, img) in s.versions.iter().enumerate() {
            let raw = net.noise_score(&img.pixels)?;
            let (label_rs, label_pf) = rater.test_label(levels[v], &ruler.levels_db, &s.record.scan_type);
            out.push(Prediction {
                raw,
                ruler_score: ruler.ruler_score(raw)?,
                pass: ruler.pass_fail(raw)?,
                label_ruler_score: label_rs,
                label_pass: label_pf,
                level: Some(v as f64),
            });
        }
    }
    Ok(out)
}

fn m_r(rulers: &RulerRegistry) -> usize {
    rulers.values().map(|r| r.m_r()).max().unwrap_or(0)
}

/// Trains a fresh net on the given targets; returns it with per-epoch
/// validation Spearman.
fn train_noise(
    cfg: &BenchmarkConfig,
    data: &Dataset,
    net_cfg: &NetConfig,
    train_targets: &[Vec<f64>],
    motion: &[MotionPair],
    train_cfg: &TrainConfig,
) -> Result<(DualTaskNet<f32>, Vec<f64>)> {
    let sets = noise_sets(data, Split::Train, train_targets)?;
    let val: Vec<(ndarray::Array2<f64>, f64)> = data
        .split(Split::Val)
        .flat_map(|s| s.versions.iter().enumerate().map(|(v, img)| (img.pixels.clone(), v as f64)))
        .collect();
    let mut net = DualTaskNet::<f32>::new(net_cfg.clone(), cfg.net_seed)?;
    let history = train_with(&mut net, &sets, motion, train_cfg, |_, net| {
        let raw: Vec<f64> = val.iter().map(|(img, _)| net.noise_score(img).unwrap_or(f64::NAN)).collect();
        let lv: Vec<f64> = val.iter().map(|(_, l)| *l).collect();
        crate::metrics::spearman(&raw, &lv).ok()
    })?;
    Ok((net, history.validation))
}

fn motion_accuracy(net: &DualTaskNet<f32>, pairs: &[MotionPair]) -> Result<(f64, usize)> {
    let mut correct = 0;
    for p in pairs {
        correct += usize::from(net.motion_probability(&p.corrupted)? < MOTION_THRESHOLD);
        correct += usize::from(net.motion_probability(&p.original)? >= MOTION_THRESHOLD);
    }
    let n = 2 * pairs.len();
    Ok((correct as f64 / n as f64, n))
}

/// Runs the whole benchmark; `log` receives progress lines.
pub fn run(cfg: &BenchmarkConfig, mut log: impl FnMut(&str)) -> Result<BenchmarkReport> {
    let start = Instant::now();
    let data = generate(&cfg.dataset)?;
    log(&format!("generated {} slices in {:.0?}", data.slices.len(), start.elapsed()));
    run_on(cfg, &data, start, log)
}

/// [`run`] on an already generated dataset.
pub fn run_on(cfg: &BenchmarkConfig, data: &Dataset, start: Instant, mut log: impl FnMut(&str)) -> Result<BenchmarkReport> {
    let sets = label_sets(data, Split::Train, &cfg.rater, cfg.method, cfg.label_stride)?;
    let calibrated = calibrate(&sets, cfg.eta)?;
    let raw_targets: Vec<Vec<f64>> = sets.iter().map(|s| s.heuristic.clone()).collect();
    let net_cfg = NetConfig { input_scale: input_scale(data)?, ..cfg.net.clone() };
    let seed = cfg.dataset.seed;

    let (net, validation_spearman) = train_noise(cfg, data, &net_cfg, &calibrated.scores, &[], &cfg.noise_train)?;
    let rulers = prepare_rulers(&data.rulers, &net, &cfg.rater)?;
    let preds = predictions(data, Split::Test, &net, &rulers, &cfg.rater)?;
    let calibrated_report = evaluate("calibrated labels", &preds, m_r(&rulers), seed)?;
    log(&format!("calibrated run done at {:.0?}", start.elapsed()));

    // single best threshold from validation, applied to test
    let val = predictions(data, Split::Val, &net, &rulers, &cfg.rater)?;
    let t = single_best_threshold(
        &val.iter().map(|p| p.raw).collect::<Vec<_>>(),
        &val.iter().map(|p| p.label_pass).collect::<Vec<_>>(),
        &rulers,
    )?;
    let labels: Vec<bool> = preds.iter().map(|p| p.label_pass).collect();
    let single = binary_metrics(&preds.iter().map(|p| p.raw >= t).collect::<Vec<_>>(), &labels)?.0;
    let thresholds = ThresholdComparison {
        single_threshold: t,
        single_accuracy: single,
        ruler_accuracy: calibrated_report.accuracy,
    };

    let uncalibrated = if cfg.run_uncalibrated {
        let (net, _) = train_noise(cfg, data, &net_cfg, &raw_targets, &[], &cfg.noise_train)?;
        let rulers = prepare_rulers(&data.rulers, &net, &cfg.rater)?;
        let preds = predictions(data, Split::Test, &net, &rulers, &cfg.rater)?;
        log(&format!("uncalibrated run done at {:.0?}", start.elapsed()));
        Some(evaluate("uncalibrated labels", &preds, m_r(&rulers), seed)?)
    } else {
        None
    };

    let motion = if cfg.run_dual {
        let train_pairs = motion_pairs(data, Split::Train);
        let (net, _) = train_noise(cfg, data, &net_cfg, &calibrated.scores, &train_pairs, &cfg.dual_train)?;
        let (accuracy, n) = motion_accuracy(&net, &motion_pairs(data, Split::Test))?;
        let rulers = prepare_rulers(&data.rulers, &net, &cfg.rater)?;
        let preds = predictions(data, Split::Test, &net, &rulers, &cfg.rater)?;
        log(&format!("dual-task run done at {:.0?}", start.elapsed()));
        Some(MotionReport { accuracy, n, noise: evaluate("dual-task", &preds, m_r(&rulers), seed)? })
    } else {
        None
    };

    Ok(BenchmarkReport {
        calibrated: calibrated_report,
        uncalibrated,
        thresholds,
        motion,
        validation_spearman,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::ScanType;

    fn tiny() -> BenchmarkConfig {
        let st: Vec<ScanType> = vec!["knee-fs".parse().unwrap(), "brain-nfs".parse().unwrap()];
        let mut cfg = BenchmarkConfig {
            dataset: DatasetConfig {
                scan_types: st,
                train_slices: 8,
                val_slices: 4,
                test_slices: 4,
                slices_per_subject: 2,
                size: 32,
                n_coils: 2,
                ..Default::default()
            },
            net: NetConfig { size: 32, trunk_widths: [4, 4, 8], branch_width: 8, ..Default::default() },
            ..Default::default()
        };
        cfg.noise_train.epochs = 2;
        cfg.dual_train.epochs = 1;
        cfg
    }

    #[test]
    fn every_train_set_gets_a_pick() {
        let cfg = tiny();
        let data = generate(&cfg.dataset).unwrap();
        let sets = label_sets(&data, Split::Train, &cfg.rater, cfg.method, 2).unwrap();
        assert_eq!(sets.len(), 8);
        assert!(sets.iter().all(|s| s.label.is_some()));
        assert!(label_sets(&data, Split::Train, &cfg.rater, cfg.method, 0).is_err());
    }

    #[test]
    fn tiny_run_reports_everything() {
        let cfg = tiny();
        let report = run(&cfg, |_| {}).unwrap();
        assert_eq!(report.calibrated.n, 4 * 5);
        assert!(report.uncalibrated.is_some());
        assert_eq!(report.motion.as_ref().unwrap().n, 8);
        assert_eq!(report.validation_spearman.len(), 2);
        assert!((0.0..=1.0).contains(&report.thresholds.single_accuracy));
    }
}
