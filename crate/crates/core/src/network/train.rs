use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::cast;
use super::{sigmoid, AdamConfig, DualTaskNet, Group, Real, TrunkCache, PROB_EPS};
use crate::error::{Error, Result};

/// Which branches train. Single-task modes leave the other branch alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dual,
    NoiseOnly,
    MotionOnly,
}

impl Mode {
    fn noise(self) -> bool {
        self != Mode::MotionOnly
    }

    fn motion(self) -> bool {
        self != Mode::NoiseOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mode: Mode,
    /// Version sets per noise batch.
    pub sets_per_batch: usize,
    /// (corrupted, original) pairs per motion batch.
    pub pairs_per_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            adam: AdamConfig::default(),
            seed: 0,
            mode: Mode::Dual,
            sets_per_batch: 2,
            pairs_per_batch: 5,
        }
    }
}

/// All versions of one slice with their calibrated targets.
#[derive(Clone, Debug)]
pub struct NoiseSet {
    pub images: Vec<Array2<f64>>,
    pub targets: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MotionPair {
    pub corrupted: Array2<f64>,
    pub original: Array2<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Mean batch loss per epoch.
    pub noise_loss: Vec<f64>,
    pub motion_loss: Vec<f64>,
    /// Whatever the epoch callback reported.
    pub validation: Vec<f64>,
}

fn check_data(noise: &[NoiseSet], motion: &[MotionPair], cfg: &TrainConfig) -> Result<()> {
    if cfg.sets_per_batch == 0 || cfg.pairs_per_batch == 0 {
        return Err(Error::invalid("batch sizes must be positive"));
    }
    if cfg.mode.noise() {
        if noise.is_empty() {
            return Err(Error::MissingLabel("no labeled noise sets to train on".into()));
        }
        for (i, s) in noise.iter().enumerate() {
            if s.images.is_empty() || s.images.len() != s.targets.len() {
                return Err(Error::MissingLabel(format!(
                    "noise set {i} has {} images but {} targets",
                    s.images.len(),
                    s.targets.len()
                )));
            }
            if s.targets.iter().any(|t| !t.is_finite()) {
                return Err(Error::MissingLabel(format!("noise set {i} has a non-finite target")));
            }
        }
    }
    if cfg.mode.motion() && motion.is_empty() {
        return Err(Error::MissingLabel("no motion pairs to train on".into()));
    }
    Ok(())
}

/// Sets the output standardization from the training targets.
fn fit_score_scale<F: Real>(net: &mut DualTaskNet<F>, noise: &[NoiseSet]) {
    let all: Vec<f64> = noise.iter().flat_map(|s| s.targets.iter().copied()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / all.len() as f64;
    net.score.offset = mean;
    net.score.scale = var.sqrt().max(1e-6);
}

fn apply<F: Real>(net: &mut DualTaskNet<F>, grad: &DualTaskNet<F>, cfg: &AdamConfig, groups: &[Group]) {
    let mut opt = std::mem::take(&mut net.optimizer);
    for &g in groups {
        opt.step(cfg, g, net.params_mut(g), grad.params(g));
    }
    net.optimizer = opt;
    net.project();
}

/// One RMSE step on the noise branch and trunk. Returns the batch loss.
pub(crate) fn noise_step<F: Real>(net: &mut DualTaskNet<F>, sets: &[&NoiseSet], cfg: &AdamConfig) -> Result<f64> {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let mut caches = Vec::new();
    for set in sets {
        for (img, &y) in set.images.iter().zip(&set.targets) {
            let x = net.input(img)?;
            let (t, tc) = net.trunk_forward(&x);
            let (out, nc) = net.noise_forward(&t);
            preds.push(net.destandardize(out));
            targets.push(y);
            caches.push((tc, nc));
        }
    }
    let loss = super::loss_noise(&preds, &targets)?;
    if loss == 0.0 {
        return Ok(0.0);
    }
    let n = preds.len() as f64;
    let mut grad = net.zeros_like();
    for ((p, y), (tc, nc)) in preds.iter().zip(&targets).zip(&caches) {
        let d = cast::<F>((p - y) / (n * loss) * net.score.scale);
        let dt = net.noise_backward(nc, d, &mut grad);
        net.trunk_backward(tc, dt, &mut grad);
    }
    apply(net, &grad, cfg, &[Group::Noise, Group::Trunk]);
    Ok(loss)
}

/// One cross-entropy step on the motion branch and trunk.
pub(crate) fn motion_step<F: Real>(net: &mut DualTaskNet<F>, pairs: &[&MotionPair], cfg: &AdamConfig) -> Result<f64> {
    let mut trunks: Vec<(Array3<F>, TrunkCache<F>)> = Vec::with_capacity(2 * pairs.len());
    let mut labels = Vec::with_capacity(2 * pairs.len());
    for pair in pairs {
        for (img, y) in [(&pair.corrupted, 0.0), (&pair.original, 1.0)] {
            let x = net.input(img)?;
            trunks.push(net.trunk_forward(&x));
            labels.push(y);
        }
    }
    let ts: Vec<Array3<F>> = trunks.iter().map(|(t, _)| t.clone()).collect();
    let (logits, mc) = net.motion_forward_train(&ts);
    let probs: Vec<f64> = logits.iter().map(|l| sigmoid(l.to_f64_lossy())).collect();
    let loss = super::loss_motion(&probs, &labels)?;
    let n = probs.len() as f64;
    let d_logits: Vec<F> = probs
        .iter()
        .zip(&labels)
        .map(|(&p, &y)| {
            // the clamp flattens the loss outside [ε, 1−ε]
            if p > PROB_EPS && p < 1.0 - PROB_EPS {
                cast::<F>((p - y) / n)
            } else {
                F::zero()
            }
        })
        .collect();
    let mut grad = net.zeros_like();
    let dts = net.motion_backward(&mc, &d_logits, &mut grad);
    for ((_, tc), dt) in trunks.iter().zip(dts) {
        net.trunk_backward(tc, dt, &mut grad);
    }
    apply(net, &grad, cfg, &[Group::Motion, Group::Trunk]);
    Ok(loss)
}

/// Cycles through shuffled pairs across epochs.
struct MotionStream<'a> {
    pairs: &'a [MotionPair],
    order: Vec<usize>,
    pos: usize,
}

impl<'a> MotionStream<'a> {
    fn next_batch(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<&'a MotionPair> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k.min(self.pairs.len()) {
            if self.pos == self.order.len() {
                self.order = (0..self.pairs.len()).collect();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(&self.pairs[self.order[self.pos]]);
            self.pos += 1;
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trains in place. See [`train_with`] for per-epoch hooks.
pub fn train<F: Real>(
    net: &mut DualTaskNet<F>,
    noise: &[NoiseSet],
    motion: &[MotionPair],
    cfg: &TrainConfig,
) -> Result<History> {
    train_with(net, noise, motion, cfg, |_, _| None)
}

/// Alternates noise and motion batches (dual mode) or runs one task.
///
/// An epoch is one pass over the noise sets; in dual mode every noise batch
/// is followed by one motion batch drawn from a stream that reshuffles when
/// it runs out. `on_epoch` sees the net after every epoch and may return a
/// validation value to record.
pub fn train_with<F: Real>(
    net: &mut DualTaskNet<F>,
    noise: &[NoiseSet],
    motion: &[MotionPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &DualTaskNet<F>) -> Option<f64>,
) -> Result<History> {
    check_data(noise, motion, cfg)?;
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if cfg.mode.noise() {
        fit_score_scale(net, noise);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stream = MotionStream { pairs: motion, order: Vec::new(), pos: 0 };

    for epoch in 0..cfg.epochs {
        let mut noise_losses = Vec::new();
        let mut motion_losses = Vec::new();
        match cfg.mode {
            Mode::MotionOnly => {
                let mut order: Vec<usize> = (0..motion.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.pairs_per_batch) {
                    let batch: Vec<&MotionPair> = chunk.iter().map(|&i| &motion[i]).collect();
                    motion_losses.push(motion_step(net, &batch, &cfg.adam)?);
                }
            }
            mode => {
                let mut order: Vec<usize> = (0..noise.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.sets_per_batch) {
                    let batch: Vec<&NoiseSet> = chunk.iter().map(|&i| &noise[i]).collect();
                    noise_losses.push(noise_step(net, &batch, &cfg.adam)?);
                    if mode == Mode::Dual {
                        let pairs = stream.next_batch(cfg.pairs_per_batch, &mut rng);
                        motion_losses.push(motion_step(net, &pairs, &cfg.adam)?);
                    }
                }
            }
        }
        history.noise_loss.push(mean(&noise_losses));
        history.motion_loss.push(mean(&motion_losses));
        if let Some(v) = on_epoch(epoch, net) {
            history.validation.push(v);
        }
    }
    Ok(history)
}
