//! Turning heuristic scores plus one human pick per set into training labels.
//!
//! A rater looks at the versions of a slice and picks `h`, the noisiest one
//! that is still acceptable (`0` if even the worst is fine, `m_t + 1` if even
//! the clean one is not). The heuristic score of that pick should mean the
//! same thing on every slice, so each set is shifted toward the mean of
//! those picked scores.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan::ScanType;

pub const DEFAULT_ETA: f64 = 0.85;

/// Heuristic scores and the human pick for one slice's version set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VersionSet {
    pub slice_id: String,
    pub subject_id: String,
    /// Position of the slice within its subject, used for label propagation.
    pub slice_index: usize,
    pub scan_type: ScanType,
    /// `y[v-1]` is the heuristic score of version `v`, noisiest first.
    pub heuristic: Vec<f64>,
    pub label: Option<usize>,
}

impl VersionSet {
    pub fn m_t(&self) -> usize {
        self.heuristic.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m_t();
        if m < 3 {
            return Err(Error::invalid(format!(
                "set {} has {m} versions, need at least 3",
                self.slice_id
            )));
        }
        if self.heuristic.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "set {} has a non-finite heuristic score",
                self.slice_id
            )));
        }
        if let Some(h) = self.label {
            if h > m + 1 {
                return Err(Error::invalid(format!(
                    "label {h} of set {} is outside 0..={}",
                    self.slice_id,
                    m + 1
                )));
            }
        }
        Ok(())
    }

    fn label_or_err(&self) -> Result<usize> {
        self.label
            .ok_or_else(|| Error::MissingLabel(format!("set {} is unlabeled", self.slice_id)))
    }

    /// The score the pick stands for: `y[h]` in range, otherwise a linear
    /// extrapolation one step past either end.
    pub fn anchor(&self) -> Result<f64> {
        self.validate()?;
        let y = &self.heuristic;
        let m = y.len();
        Ok(match self.label_or_err()? {
            0 => 2.0 * y[0] - y[1],
            h if h <= m => y[h - 1],
            _ => 2.0 * y[m - 1] - y[m - 2],
        })
    }

    fn in_range_pick(&self) -> Result<Option<f64>> {
        let h = self.label_or_err()?;
        Ok((1..=self.m_t()).contains(&h).then(|| self.heuristic[h - 1]))
    }
}

/// Fills missing picks from the nearest labeled slice of the same subject.
///
/// Distance is the difference in `slice_index`; ties go to the lower index.
pub fn propagate_labels(sets: &[VersionSet]) -> Result<Vec<VersionSet>> {
    let mut labeled: HashMap<&str, Vec<(usize, usize)>> = HashMap::new();
    for s in sets {
        s.validate()?;
        if let Some(h) = s.label {
            labeled
                .entry(s.subject_id.as_str())
                .or_default()
                .push((s.slice_index, h));
        }
    }
    sets.iter()
        .map(|s| {
            if s.label.is_some() {
                return Ok(s.clone());
            }
            let candidates = labeled.get(s.subject_id.as_str()).ok_or_else(|| {
                Error::MissingLabel(format!("subject {} has no labeled slice", s.subject_id))
            })?;
            let &(_, h) = candidates
                .iter()
                .min_by_key(|(idx, _)| (idx.abs_diff(s.slice_index), *idx))
                .expect("subjects in the map have at least one label");
            let mut out = s.clone();
            out.label = Some(h);
            Ok(out)
        })
        .collect()
}

/// Mean heuristic score of the picked versions, over in-range picks only.
pub fn calibration_mean(sets: &[VersionSet]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in sets {
        s.validate()?;
        if let Some(y) = s.in_range_pick()? {
            sum += y;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::degenerate("no set has an in-range pick"));
    }
    Ok(sum / n as f64)
}

/// Whether the anchor mean is shared by all sets or computed per scan type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    Global,
    /// Experimental: one mean per scan type.
    PerScanType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedLabels {
    /// Calibrated scores per set, in the order of the input sets.
    pub scores: Vec<Vec<f64>>,
    /// Anchor mean; under [`Scope::PerScanType`] one per scan type.
    pub mu_h: BTreeMap<String, f64>,
    pub eta: f64,
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("eta must be in (0, 1], got {eta}")))
    }
}

/// Every version of set `i` moves by `eta·(mu_h − anchor_i)`.
fn shift_all(sets: &[VersionSet], eta: f64, mu_for: impl Fn(&VersionSet) -> f64) -> Result<Vec<Vec<f64>>> {
    sets.iter()
        .map(|s| {
            let shift = eta * (mu_for(s) - s.anchor()?);
            Ok(s.heuristic.iter().map(|y| y + shift).collect())
        })
        .collect()
}

/// Global calibration with strength `eta`.
pub fn calibrate(sets: &[VersionSet], eta: f64) -> Result<CalibratedLabels> {
    calibrate_scoped(sets, eta, Scope::Global)
}

pub const GLOBAL_KEY: &str = "*";

pub fn calibrate_scoped(sets: &[VersionSet], eta: f64, scope: Scope) -> Result<CalibratedLabels> {
    check_eta(eta)?;
    match scope {
        Scope::Global => {
            let mu = calibration_mean(sets)?;
            Ok(CalibratedLabels {
                scores: shift_all(sets, eta, |_| mu)?,
                mu_h: BTreeMap::from([(GLOBAL_KEY.to_string(), mu)]),
                eta,
            })
        }
        Scope::PerScanType => {
            let mut groups: BTreeMap<String, Vec<VersionSet>> = BTreeMap::new();
            for s in sets {
                groups
                    .entry(s.scan_type.to_string())
                    .or_default()
                    .push(s.clone());
            }
            let mu_h = groups
                .iter()
                .map(|(k, g)| Ok((k.clone(), calibration_mean(g)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(CalibratedLabels {
                scores: shift_all(sets, eta, |s| mu_h[&s.scan_type.to_string()])?,
                mu_h,
                eta,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(subject: &str, idx: usize, y: Vec<f64>, label: Option<usize>) -> VersionSet {
        VersionSet {
            slice_id: format!("{subject}-{idx}"),
            subject_id: subject.into(),
            slice_index: idx,
            scan_type: "knee-fs".parse().unwrap(),
            heuristic: y,
            label,
        }
    }

    fn ramp(base: f64) -> Vec<f64> {
        (0..5).map(|i| base + 3.0 * i as f64).collect()
    }

    #[test]
    fn propagation_noop_when_all_labeled() {
        let sets = vec![set("a", 0, ramp(0.0), Some(2)), set("a", 1, ramp(1.0), Some(4))];
        assert_eq!(propagate_labels(&sets).unwrap(), sets);
    }

    #[test]
    fn propagation_nearest_and_tie() {
        let sets = vec![
            set("a", 0, ramp(0.0), Some(1)),
            set("a", 10, ramp(0.0), Some(5)),
            set("a", 3, ramp(0.0), None),
            set("b", 2, ramp(0.0), Some(2)),
            set("b", 6, ramp(0.0), Some(6)),
            set("b", 4, ramp(0.0), None),
        ];
        let out = propagate_labels(&sets).unwrap();
        assert_eq!(out[2].label, Some(1));
        assert_eq!(out[5].label, Some(2));
    }

    #[test]
    fn propagation_needs_a_label_per_subject() {
        let sets = vec![set("a", 0, ramp(0.0), Some(1)), set("b", 0, ramp(0.0), None)];
        assert!(matches!(propagate_labels(&sets), Err(Error::MissingLabel(_))));
    }

    #[test]
    fn mean_of_picks() {
        let a = set("a", 0, vec![12.0, 18.0, 25.0], Some(2));
        let b = set("b", 0, vec![22.0, 30.0, 31.0], Some(1));
        assert_eq!(calibration_mean(&[a.clone(), b]).unwrap(), 20.0);
        assert_eq!(calibration_mean(&[a]).unwrap(), 18.0);
        let out = set("c", 0, vec![1.0, 2.0, 3.0], Some(0));
        assert!(matches!(calibration_mean(&[out]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn eta_one_lands_on_mean() {
        let a = set("a", 0, vec![12.0, 18.0, 25.0, 30.0, 33.0], Some(2));
        let b = set("b", 0, vec![14.0, 22.0, 26.0, 30.0, 33.0], Some(2));
        let c = calibrate(&[a, b], 1.0).unwrap();
        assert_eq!(c.mu_h[GLOBAL_KEY], 20.0);
        assert_eq!(c.scores[0], vec![14.0, 20.0, 27.0, 32.0, 35.0]);
        assert_eq!(c.scores[1][1], 20.0);
    }

    #[test]
    fn out_of_range_picks_extrapolate() {
        let low = set("a", 0, vec![10.0, 14.0, 18.0, 22.0, 26.0], Some(0));
        let anchor = set("b", 0, vec![16.0, 20.0, 24.0, 28.0, 32.0], Some(2));
        let c = calibrate(&[low, anchor.clone()], 1.0).unwrap();
        assert_eq!(c.mu_h[GLOBAL_KEY], 20.0);
        assert_eq!(c.scores[0], vec![24.0, 28.0, 32.0, 36.0, 40.0]);

        let high = set("c", 0, vec![10.0, 14.0, 18.0, 22.0, 26.0], Some(6));
        let c = calibrate(&[high, anchor], 1.0).unwrap();
        // virtual anchor 2·26 − 22 = 30, shift −10
        assert_eq!(c.scores[0], vec![0.0, 4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn eta_validated() {
        let a = set("a", 0, ramp(0.0), Some(2));
        for eta in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(matches!(calibrate(&[a.clone()], eta), Err(Error::InvalidArgument(_))));
        }
        assert!(calibrate(&[a], 1.0).is_ok());
    }

    #[test]
    fn eta_zero_is_identity() {
        let sets = vec![set("a", 0, ramp(0.0), Some(2)), set("b", 0, ramp(5.0), Some(4))];
        let shifted = shift_all(&sets, 0.0, |_| 100.0).unwrap();
        for (s, y) in sets.iter().zip(shifted) {
            assert_eq!(s.heuristic, y);
        }
    }

    #[test]
    fn unlabeled_and_bad_labels_rejected() {
        assert!(matches!(
            calibrate(&[set("a", 0, ramp(0.0), None)], 0.5),
            Err(Error::MissingLabel(_))
        ));
        assert!(calibrate(&[set("a", 0, ramp(0.0), Some(7))], 0.5).is_err());
    }

    #[test]
    fn per_scan_type_scope() {
        let mut a = set("a", 0, vec![10.0, 20.0, 30.0], Some(1));
        a.scan_type = "brain-nfs".parse().unwrap();
        let b = set("b", 0, vec![0.0, 5.0, 10.0], Some(1));
        let c = calibrate_scoped(&[a, b], 1.0, Scope::PerScanType).unwrap();
        assert_eq!(c.mu_h["brain-nfs"], 10.0);
        assert_eq!(c.mu_h["knee-fs"], 0.0);
        assert_eq!(c.scores[0], vec![10.0, 20.0, 30.0]);
    }

    fn arb_sets() -> impl Strategy<Value = Vec<VersionSet>> {
        prop::collection::vec(
            (prop::collection::vec(-50.0f64..50.0, 5), 0usize..=6),
            2..12,
        )
        .prop_filter_map("need an in-range pick", |raw| {
            let sets: Vec<VersionSet> = raw
                .into_iter()
                .enumerate()
                .map(|(i, (mut y, h))| {
                    y.sort_by(|a, b| a.total_cmp(b));
                    set(&format!("s{i}"), 0, y, Some(h))
                })
                .collect();
            sets.iter()
                .any(|s| (1..=5).contains(&s.label.unwrap()))
                .then_some(sets)
        })
    }

    proptest! {
        #[test]
        fn shift_is_constant_per_set(sets in arb_sets(), eta in 0.01f64..=1.0) {
            let c = calibrate(&sets, eta).unwrap();
            for (s, y) in sets.iter().zip(&c.scores) {
                let d0 = y[0] - s.heuristic[0];
                for (a, b) in s.heuristic.iter().zip(y) {
                    prop_assert!(((b - a) - d0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn picked_scores_contract(sets in arb_sets(), eta in 0.01f64..=1.0) {
            let variance = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
            };
            let in_range: Vec<_> = sets.iter().enumerate()
                .filter(|(_, s)| (1..=5).contains(&s.label.unwrap()))
                .map(|(i, s)| (i, s.label.unwrap()))
                .collect();
            let c = calibrate(&sets, eta).unwrap();
            let before: Vec<f64> = in_range.iter().map(|&(i, h)| sets[i].heuristic[h - 1]).collect();
            let after: Vec<f64> = in_range.iter().map(|&(i, h)| c.scores[i][h - 1]).collect();
            let (vb, va) = (variance(&before), variance(&after));
            prop_assert!(va <= vb * (1.0 - eta).powi(2) + 1e-9);
        }
    }
}
