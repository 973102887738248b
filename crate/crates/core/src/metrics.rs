//! Evaluation: pass/fail accuracy, ruler-score error, agreement and rank
//! correlation.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2×2 confusion counts with "pass" as the positive class.
///
/// Rows are the label (fail, pass); columns the prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryConfusion {
    pub counts: [[usize; 2]; 2],
}

impl BinaryConfusion {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        (self.counts[0][0] + self.counts[1][1]) as f64 / self.total() as f64
    }

    pub fn true_positives(&self) -> usize {
        self.counts[1][1]
    }

    pub fn false_positives(&self) -> usize {
        self.counts[0][1]
    }

    pub fn true_negatives(&self) -> usize {
        self.counts[0][0]
    }

    pub fn false_negatives(&self) -> usize {
        self.counts[1][0]
    }
}

fn check_paired(a: usize, b: usize) -> Result<()> {
    if a == 0 || a != b {
        return Err(Error::invalid(format!(
            "need equal non-empty lists, got {a} and {b} items"
        )));
    }
    Ok(())
}

/// Accuracy and confusion counts of pass/fail predictions.
pub fn binary_metrics(predicted: &[bool], labels: &[bool]) -> Result<(f64, BinaryConfusion)> {
    check_paired(predicted.len(), labels.len())?;
    let mut c = BinaryConfusion::default();
    for (&p, &l) in predicted.iter().zip(labels) {
        c.counts[usize::from(l)][usize::from(p)] += 1;
    }
    Ok((c.accuracy(), c))
}

pub fn ruler_score_mae(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    check_paired(predicted.len(), labels.len())?;
    let total: usize = predicted.iter().zip(labels).map(|(&p, &l)| p.abs_diff(l)).sum();
    Ok(total as f64 / predicted.len() as f64)
}

/// `m × m` confusion of ruler scores; rows are labels.
pub fn ruler_confusion(predicted: &[usize], labels: &[usize], m_r: usize) -> Result<Vec<Vec<usize>>> {
    check_paired(predicted.len(), labels.len())?;
    let mut c = vec![vec![0; m_r]; m_r];
    for (&p, &l) in predicted.iter().zip(labels) {
        if p >= m_r || l >= m_r {
            return Err(Error::invalid(format!("ruler score outside 0..{m_r}")));
        }
        c[l][p] += 1;
    }
    Ok(c)
}

/// Fractional ranks, ties sharing their average.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(scores: &[f64], levels: &[f64]) -> Result<f64> {
    check_paired(scores.len(), levels.len())?;
    if scores.len() < 3 {
        return Err(Error::invalid("rank correlation needs at least 3 items"));
    }
    if scores.iter().chain(levels).any(|v| v.is_nan()) {
        return Err(Error::invalid("rank correlation input contains NaN"));
    }
    pearson(&average_ranks(scores), &average_ranks(levels))
        .ok_or_else(|| Error::degenerate("rank correlation of a constant list"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaEstimate {
    pub alpha: f64,
    /// 95% percentile bootstrap interval over items.
    pub ci_low: f64,
    pub ci_high: f64,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Krippendorff's alpha with the interval metric for two aligned raters.
///
/// Builds the coincidence matrix over categories `0..m`, where `m` is one
/// past the largest rating, and compares observed with expected
/// disagreement.
pub fn krippendorff_alpha_point(a: &[usize], b: &[usize]) -> Result<f64> {
    check_paired(a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::invalid("agreement needs at least 2 items"));
    }
    let m = a.iter().chain(b).max().map_or(0, |&x| x + 1);
    // Each item contributes both ordered pairs with weight 1/(2−1).
    let mut o = vec![vec![0.0f64; m]; m];
    for (&x, &y) in a.iter().zip(b) {
        o[x][y] += 1.0;
        o[y][x] += 1.0;
    }
    let n_c: Vec<f64> = o.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = n_c.iter().sum();
    let mut d_o = 0.0;
    let mut d_e = 0.0;
    for c in 0..m {
        for k in 0..m {
            let delta = (c as f64 - k as f64).powi(2);
            d_o += o[c][k] * delta;
            d_e += n_c[c] * n_c[k] * delta;
        }
    }
    d_o /= n;
    d_e /= n * (n - 1.0);
    if d_e == 0.0 {
        return Err(Error::degenerate("all ratings fall in one category"));
    }
    Ok(1.0 - d_o / d_e)
}

/// Point estimate plus a bootstrap interval from item resamples. Resamples
/// that land in a single category are skipped.
pub fn krippendorff_alpha(a: &[usize], b: &[usize], seed: u64) -> Result<AlphaEstimate> {
    let alpha = krippendorff_alpha_point(a, b)?;
    let n = a.len();
    let mut draws: Vec<f64> = (0..BOOTSTRAP_RESAMPLES as u64)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            let (ra, rb): (Vec<usize>, Vec<usize>) = (0..n)
                .map(|_| {
                    let i = rng.gen_range(0..n);
                    (a[i], b[i])
                })
                .unzip();
            krippendorff_alpha_point(&ra, &rb).ok()
        })
        .collect();
    if draws.is_empty() {
        return Ok(AlphaEstimate { alpha, ci_low: alpha, ci_high: alpha });
    }
    draws.sort_by(f64::total_cmp);
    let at = |q: f64| draws[((q * (draws.len() - 1) as f64).round() as usize).min(draws.len() - 1)];
    Ok(AlphaEstimate {
        alpha,
        ci_low: at(0.025).min(alpha),
        ci_high: at(0.975).max(alpha),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub n: usize,
    pub accuracy: f64,
    pub score_mae: f64,
    pub confusion_binary: BinaryConfusion,
    pub confusion_ruler: Vec<Vec<usize>>,
    /// Agreement between predicted and labeled ruler scores; `None` when
    /// degenerate.
    pub krippendorff_alpha: Option<AlphaEstimate>,
    pub spearman: Option<f64>,
}

/// Everything the evaluation needs about one test image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub raw: f64,
    pub ruler_score: usize,
    pub pass: bool,
    pub label_ruler_score: usize,
    pub label_pass: bool,
    /// Ground-truth ordinal level, if known.
    pub level: Option<f64>,
}

pub fn evaluate(name: &str, predictions: &[Prediction], m_r: usize, seed: u64) -> Result<EvalReport> {
    let pf: Vec<bool> = predictions.iter().map(|p| p.pass).collect();
    let pf_label: Vec<bool> = predictions.iter().map(|p| p.label_pass).collect();
    let rs: Vec<usize> = predictions.iter().map(|p| p.ruler_score).collect();
    let rs_label: Vec<usize> = predictions.iter().map(|p| p.label_ruler_score).collect();
    let (accuracy, confusion_binary) = binary_metrics(&pf, &pf_label)?;
    let levels: Option<Vec<f64>> = predictions.iter().map(|p| p.level).collect();
    let spearman = match levels {
        Some(l) => spearman(&predictions.iter().map(|p| p.raw).collect::<Vec<_>>(), &l).ok(),
        None => None,
    };
    Ok(EvalReport {
        name: name.to_string(),
        n: predictions.len(),
        accuracy,
        score_mae: ruler_score_mae(&rs, &rs_label)?,
        confusion_binary,
        confusion_ruler: ruler_confusion(&rs, &rs_label, m_r)?,
        krippendorff_alpha: krippendorff_alpha(&rs, &rs_label, seed).ok(),
        spearman,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} (n = {})", self.name, self.n)?;
        writeln!(f, "  pass/fail accuracy   {:.2}%", 100.0 * self.accuracy)?;
        writeln!(f, "  ruler score MAE      {:.3}", self.score_mae)?;
        match &self.krippendorff_alpha {
            Some(a) => writeln!(f, "  Krippendorff alpha   {:.3} [{:.3}, {:.3}]", a.alpha, a.ci_low, a.ci_high)?,
            None => writeln!(f, "  Krippendorff alpha   n/a")?,
        }
        match self.spearman {
            Some(s) => writeln!(f, "  Spearman             {s:.4}")?,
            None => writeln!(f, "  Spearman             n/a")?,
        }
        let c = &self.confusion_binary.counts;
        writeln!(f, "  confusion (rows = label fail/pass, cols = predicted)")?;
        writeln!(f, "    {:>6} {:>6}", c[0][0], c[0][1])?;
        writeln!(f, "    {:>6} {:>6}", c[1][0], c[1][1])?;
        writeln!(f, "  ruler score confusion")?;
        for row in &self.confusion_ruler {
            write!(f, "   ")?;
            for v in row {
                write!(f, " {v:>4}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
