//! Dual-task quality network: a shared convolutional trunk with a noise
//! regression branch and a motion classification branch.
//!
//! Everything is generic over the float type. Training runs in `f32`;
//! gradient checks run in `f64`.

mod adam;
mod checkpoint;
pub mod layers;
mod train;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, Array3, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use adam::{Adam, AdamConfig, Group};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{train, train_with, History, Mode, MotionPair, NoiseSet, TrainConfig};
use layers::{
    cast, global_average, global_average_backward, relu, relu_backward, Affine, BatchStd, BnCache,
    Conv2d, ConvCache, DivisiveNorm, DnCache,
};

pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Sum
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("floats convert to f64")
    }
}
impl Real for f32 {}
impl Real for f64 {}

pub const MOTION_THRESHOLD: f64 = 0.5;
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Input images are `size × size`.
    pub size: usize,
    /// Pixels are divided by this before entering the network. One constant
    /// for the whole dataset, so absolute intensity stays visible.
    pub input_scale: f64,
    /// Channel counts of the three trunk stages.
    pub trunk_widths: [usize; 3],
    pub branch_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            size: 128,
            input_scale: 1.0,
            trunk_widths: [16, 32, 64],
            branch_width: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::invalid(format!("input size {} below 16", self.size)));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::invalid("input scale must be positive"));
        }
        if self.trunk_widths.contains(&0) || self.branch_width == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trunk<F: Real> {
    pub conv: [Conv2d<F>; 3],
    pub dn: [DivisiveNorm<F>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBranch<F: Real> {
    pub conv: Conv2d<F>,
    pub dn: DivisiveNorm<F>,
    pub head: Affine<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionBranch<F: Real> {
    pub conv: Conv2d<F>,
    pub bn: BatchStd<F>,
    pub head: Affine<F>,
}

/// Output standardization of the noise head: `D_n = offset + scale·head`.
/// Set from the training targets so the head works on unit-scale values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreScale {
    pub offset: f64,
    pub scale: f64,
}

impl Default for ScoreScale {
    fn default() -> Self {
        Self { offset: 0.0, scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualTaskNet<F: Real> {
    pub config: NetConfig,
    pub trunk: Trunk<F>,
    pub noise: NoiseBranch<F>,
    pub motion: MotionBranch<F>,
    pub score: ScoreScale,
    pub optimizer: Adam<F>,
}

pub(crate) struct TrunkCache<F: Real> {
    conv: Vec<ConvCache<F>>,
    dn: Vec<DnCache<F>>,
}

pub(crate) struct NoiseCache<F: Real> {
    conv: ConvCache<F>,
    dn: DnCache<F>,
    dn_dim: (usize, usize, usize),
    pooled: Array1<F>,
}

pub(crate) struct MotionCache<F: Real> {
    conv: Vec<ConvCache<F>>,
    bn: BnCache<F>,
    bn_out: Vec<Array3<F>>,
    pooled: Vec<Array1<F>>,
}

impl<F: Real> DualTaskNet<F> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w1, w2, w3] = config.trunk_widths;
        let wb = config.branch_width;
        let trunk = Trunk {
            conv: [
                Conv2d::new(1, w1, 5, 2, 2).init(&mut rng),
                Conv2d::new(w1, w2, 3, 2, 1).init(&mut rng),
                Conv2d::new(w2, w3, 3, 2, 1).init(&mut rng),
            ],
            dn: [DivisiveNorm::new(w1), DivisiveNorm::new(w2), DivisiveNorm::new(w3)],
        };
        let noise = NoiseBranch {
            conv: Conv2d::new(w3, wb, 3, 2, 1).init(&mut rng),
            dn: DivisiveNorm::new(wb),
            head: Affine::new(wb).init(&mut rng),
        };
        let motion = MotionBranch {
            conv: Conv2d::new(w3, wb, 3, 2, 1).init(&mut rng),
            bn: BatchStd::new(wb),
            head: Affine::new(wb).init(&mut rng),
        };
        Ok(Self {
            config,
            trunk,
            noise,
            motion,
            score: ScoreScale::default(),
            optimizer: Adam::default(),
        })
    }

    /// Same architecture with every parameter zero; used as a gradient buffer.
    pub(crate) fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for g in [Group::Trunk, Group::Noise, Group::Motion] {
            for p in z.params_mut(g) {
                p.fill(F::zero());
            }
        }
        z.optimizer = Adam::default();
        z
    }

    pub fn params(&self, group: Group) -> Vec<&[F]> {
        fn s<F: Real, D: ndarray::Dimension>(a: &ndarray::Array<F, D>) -> &[F] {
            a.as_slice().expect("parameters are contiguous")
        }
        match group {
            Group::Trunk => self
                .trunk
                .conv
                .iter()
                .zip(&self.trunk.dn)
                .flat_map(|(c, d)| [s(&c.weight), s(&c.bias), s(&d.beta), s(&d.gamma)])
                .collect(),
            Group::Noise => {
                let n = &self.noise;
                vec![
                    s(&n.conv.weight),
                    s(&n.conv.bias),
                    s(&n.dn.beta),
                    s(&n.dn.gamma),
                    s(&n.head.weight),
                    s(&n.head.bias),
                ]
            }
            Group::Motion => {
                let m = &self.motion;
                vec![
                    s(&m.conv.weight),
                    s(&m.conv.bias),
                    s(&m.bn.scale),
                    s(&m.bn.shift),
                    s(&m.head.weight),
                    s(&m.head.bias),
                ]
            }
        }
    }

    pub fn params_mut(&mut self, group: Group) -> Vec<&mut [F]> {
        fn s<F: Real, D: ndarray::Dimension>(a: &mut ndarray::Array<F, D>) -> &mut [F] {
            a.as_slice_mut().expect("parameters are contiguous")
        }
        match group {
            Group::Trunk => self
                .trunk
                .conv
                .iter_mut()
                .zip(self.trunk.dn.iter_mut())
                .flat_map(|(c, d)| {
                    [s(&mut c.weight), s(&mut c.bias), s(&mut d.beta), s(&mut d.gamma)]
                })
                .collect(),
            Group::Noise => {
                let n = &mut self.noise;
                vec![
                    s(&mut n.conv.weight),
                    s(&mut n.conv.bias),
                    s(&mut n.dn.beta),
                    s(&mut n.dn.gamma),
                    s(&mut n.head.weight),
                    s(&mut n.head.bias),
                ]
            }
            Group::Motion => {
                let m = &mut self.motion;
                vec![
                    s(&mut m.conv.weight),
                    s(&mut m.conv.bias),
                    s(&mut m.bn.scale),
                    s(&mut m.bn.shift),
                    s(&mut m.head.weight),
                    s(&mut m.head.bias),
                ]
            }
        }
    }

    pub(crate) fn project(&mut self) {
        for d in &mut self.trunk.dn {
            d.project();
        }
        self.noise.dn.project();
    }

    pub fn dn_constraints_hold(&self) -> bool {
        self.trunk.dn.iter().all(|d| d.satisfies_constraints())
            && self.noise.dn.satisfies_constraints()
    }

    pub(crate) fn input(&self, image: &Array2<f64>) -> Result<Array3<F>> {
        let n = self.config.size;
        if image.dim() != (n, n) {
            return Err(Error::invalid(format!(
                "network expects {n}x{n} images, got {:?}",
                image.dim()
            )));
        }
        let inv = 1.0 / self.config.input_scale;
        Ok(image.mapv(|v| cast::<F>(v * inv)).insert_axis(ndarray::Axis(0)))
    }

    pub(crate) fn trunk_forward(&self, x: &Array3<F>) -> (Array3<F>, TrunkCache<F>) {
        let mut cache = TrunkCache { conv: Vec::with_capacity(3), dn: Vec::with_capacity(3) };
        let mut h = x.clone();
        for (conv, dn) in self.trunk.conv.iter().zip(&self.trunk.dn) {
            let (z, cc) = conv.forward(&h);
            let (a, dc) = dn.forward(&z);
            cache.conv.push(cc);
            cache.dn.push(dc);
            h = a;
        }
        (h, cache)
    }

    pub(crate) fn trunk_backward(&self, cache: &TrunkCache<F>, g: Array3<F>, grad: &mut Self) {
        let mut g = g;
        for i in (0..3).rev() {
            let dz = self.trunk.dn[i].backward(&cache.dn[i], &g, &mut grad.trunk.dn[i]);
            match self.trunk.conv[i].backward(&cache.conv[i], &dz, &mut grad.trunk.conv[i], i > 0) {
                Some(dx) => g = dx,
                None => break,
            }
        }
    }

    /// Standardized noise head output for a trunk feature map.
    pub(crate) fn noise_forward(&self, t: &Array3<F>) -> (F, NoiseCache<F>) {
        let (z, conv) = self.noise.conv.forward(t);
        let (a, dn) = self.noise.dn.forward(&z);
        let pooled = global_average(&a);
        let out = self.noise.head.forward(&pooled);
        (out, NoiseCache { conv, dn, dn_dim: a.dim(), pooled })
    }

    pub(crate) fn noise_backward(&self, cache: &NoiseCache<F>, d_out: F, grad: &mut Self) -> Array3<F> {
        let dp = self.noise.head.backward(&cache.pooled, d_out, &mut grad.noise.head);
        let da = global_average_backward(&dp, cache.dn_dim);
        let dz = self.noise.dn.backward(&cache.dn, &da, &mut grad.noise.dn);
        self.noise
            .conv
            .backward(&cache.conv, &dz, &mut grad.noise.conv, true)
            .expect("input gradient requested")
    }

    fn motion_logit_infer(&self, t: &Array3<F>) -> F {
        let (z, _) = self.motion.conv.forward(t);
        let a = relu(&self.motion.bn.infer(&z));
        self.motion.head.forward(&global_average(&a))
    }

    /// Batch-statistics pass of the motion branch; updates running stats.
    pub(crate) fn motion_forward_train(&mut self, ts: &[Array3<F>]) -> (Vec<F>, MotionCache<F>) {
        let mut conv = Vec::with_capacity(ts.len());
        let mut zs = Vec::with_capacity(ts.len());
        for t in ts {
            let (z, c) = self.motion.conv.forward(t);
            conv.push(c);
            zs.push(z);
        }
        let (bn_out, bn) = self.motion.bn.forward_train(&zs);
        let pooled: Vec<Array1<F>> = bn_out.iter().map(|b| global_average(&relu(b))).collect();
        let logits = pooled.iter().map(|p| self.motion.head.forward(p)).collect();
        (logits, MotionCache { conv, bn, bn_out, pooled })
    }

    pub(crate) fn motion_backward(
        &self,
        cache: &MotionCache<F>,
        d_logits: &[F],
        grad: &mut Self,
    ) -> Vec<Array3<F>> {
        let d_bn: Vec<Array3<F>> = cache
            .pooled
            .iter()
            .zip(d_logits)
            .zip(&cache.bn_out)
            .map(|((p, &d), b)| {
                let dp = self.motion.head.backward(p, d, &mut grad.motion.head);
                relu_backward(b, &global_average_backward(&dp, b.dim()))
            })
            .collect();
        let dz = self.motion.bn.backward(&cache.bn, &d_bn, &mut grad.motion.bn);
        cache
            .conv
            .iter()
            .zip(&dz)
            .map(|(c, d)| {
                self.motion
                    .conv
                    .backward(c, d, &mut grad.motion.conv, true)
                    .expect("input gradient requested")
            })
            .collect()
    }

    fn destandardize(&self, out: F) -> f64 {
        self.score.offset + self.score.scale * out.to_f64_lossy()
    }

    /// Raw noise score `D_n` (higher is cleaner) and motion-free probability.
    pub fn forward(&self, image: &Array2<f64>) -> Result<(f64, f64)> {
        let x = self.input(image)?;
        let (t, _) = self.trunk_forward(&x);
        let (out, _) = self.noise_forward(&t);
        let logit = self.motion_logit_infer(&t).to_f64_lossy();
        Ok((self.destandardize(out), sigmoid(logit)))
    }

    pub fn noise_score(&self, image: &Array2<f64>) -> Result<f64> {
        let x = self.input(image)?;
        let (t, _) = self.trunk_forward(&x);
        Ok(self.destandardize(self.noise_forward(&t).0))
    }

    /// Probability that the image is free of motion (1 = original).
    pub fn motion_probability(&self, image: &Array2<f64>) -> Result<f64> {
        let x = self.input(image)?;
        let (t, _) = self.trunk_forward(&x);
        Ok(sigmoid(self.motion_logit_infer(&t).to_f64_lossy()))
    }

    pub fn parameter_count(&self) -> usize {
        [Group::Trunk, Group::Noise, Group::Motion]
            .iter()
            .map(|&g| self.params(g).iter().map(|p| p.len()).sum::<usize>())
            .sum()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sqrt(mean((target − prediction)²))`.
pub fn loss_noise(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::invalid(format!(
            "need equal non-empty batches, got {} predictions and {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mse = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (t - p).powi(2))
        .sum::<f64>()
        / predictions.len() as f64;
    Ok(mse.sqrt())
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1−ε]`.
pub fn loss_motion(probabilities: &[f64], targets: &[f64]) -> Result<f64> {
    if probabilities.is_empty() || probabilities.len() != targets.len() {
        return Err(Error::invalid(format!(
            "need equal non-empty batches, got {} probabilities and {} targets",
            probabilities.len(),
            targets.len()
        )));
    }
    let total: f64 = probabilities
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probabilities.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small() -> NetConfig {
        NetConfig {
            size: 32,
            input_scale: 1.0,
            trunk_widths: [3, 4, 5],
            branch_width: 4,
        }
    }

    fn image(seed: u64) -> Array2<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((32, 32), |_| rng.gen_range(0.0..2.0))
    }

    #[test]
    fn fresh_net_outputs() {
        let net = DualTaskNet::<f32>::new(small(), 1).unwrap();
        let (s, p) = net.forward(&image(0)).unwrap();
        assert!(s.is_finite());
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(net.forward(&image(0)).unwrap(), (s, p));
        assert!(net.forward(&Array2::zeros((16, 16))).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.size = 8;
        assert!(DualTaskNet::<f32>::new(c, 0).is_err());
        let mut c = small();
        c.input_scale = 0.0;
        assert!(DualTaskNet::<f32>::new(c, 0).is_err());
    }

    #[test]
    fn noise_loss_examples() {
        assert_eq!(loss_noise(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(loss_noise(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss_noise(&[1.0, 2.0, 3.0], &[3.5, 4.5, 5.5]).unwrap(), 2.5, epsilon = 1e-12);
        assert!(loss_noise(&[], &[]).is_err());
    }

    #[test]
    fn motion_loss_examples() {
        assert!(loss_motion(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-6);
        for y in [0.0, 1.0] {
            assert_abs_diff_eq!(loss_motion(&[0.5], &[y]).unwrap(), 2f64.ln(), epsilon = 1e-12);
        }
        assert_abs_diff_eq!(loss_motion(&[0.9], &[1.0]).unwrap(), 0.10536051565782628, epsilon = 1e-12);
        assert!(loss_motion(&[], &[]).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    /// End-to-end gradient of the noise branch against finite differences.
    #[test]
    fn noise_path_gradient() {
        let mut net = DualTaskNet::<f64>::new(small(), 3).unwrap();
        // move off the symmetric initial point
        net.trunk.conv[0].bias.fill(0.3);
        let x = net.input(&image(4)).unwrap();
        let out = |n: &DualTaskNet<f64>| n.noise_forward(&n.trunk_forward(&x).0).0;
        let mut grad = net.zeros_like();
        let (t, tc) = net.trunk_forward(&x);
        let (_, nc) = net.noise_forward(&t);
        let dt = net.noise_backward(&nc, 1.0, &mut grad);
        net.trunk_backward(&tc, dt, &mut grad);

        let h = 1e-6;
        let probes: Vec<(Group, usize, usize)> =
            vec![(Group::Trunk, 0, 7), (Group::Trunk, 3, 1), (Group::Trunk, 8, 2), (Group::Noise, 0, 5), (Group::Noise, 3, 0)];
        for (group, tensor, idx) in probes {
            let mut p = net.clone();
            p.params_mut(group)[tensor][idx] += h;
            let mut m = net.clone();
            m.params_mut(group)[tensor][idx] -= h;
            let fd = (out(&p) - out(&m)) / (2.0 * h);
            let an = grad.params(group)[tensor][idx];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{group:?}[{tensor}][{idx}]: {fd} vs {an}");
        }
    }

    #[test]
    fn motion_path_gradient() {
        let mut net = DualTaskNet::<f64>::new(small(), 5).unwrap();
        net.trunk.conv[0].bias.fill(0.2);
        let xs: Vec<Array3<f64>> = (0..4).map(|s| net.input(&image(10 + s)).unwrap()).collect();
        let weights = [0.3, -0.7, 1.1, 0.5];
        let objective = |n: &DualTaskNet<f64>| {
            let ts: Vec<_> = xs.iter().map(|x| n.trunk_forward(x).0).collect();
            let (logits, _) = n.clone().motion_forward_train(&ts);
            logits.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>()
        };
        let mut grad = net.zeros_like();
        let trunks: Vec<_> = xs.iter().map(|x| net.trunk_forward(x)).collect();
        let ts: Vec<_> = trunks.iter().map(|t| t.0.clone()).collect();
        let mut fwd = net.clone();
        let (_, mc) = fwd.motion_forward_train(&ts);
        let dts = net.motion_backward(&mc, &weights, &mut grad);
        for ((_, tc), dt) in trunks.iter().zip(dts) {
            net.trunk_backward(tc, dt, &mut grad);
        }
        let h = 1e-6;
        for (group, tensor, idx) in [(Group::Trunk, 4, 3), (Group::Trunk, 10, 1), (Group::Motion, 0, 2), (Group::Motion, 2, 1), (Group::Motion, 4, 3)] {
            let mut p = net.clone();
            p.params_mut(group)[tensor][idx] += h;
            let mut m = net.clone();
            m.params_mut(group)[tensor][idx] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            let an = grad.params(group)[tensor][idx];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{group:?}[{tensor}][{idx}]: {fd} vs {an}");
        }
    }
}
