use serde::{Deserialize, Serialize};

use super::layers::cast;
use super::Real;

/// Parameter groups. Each has its own step counter and moment buffers, so
/// a step on one task never touches the other branch's optimizer state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Trunk,
    Noise,
    Motion,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct GroupState<F> {
    steps: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F> Default for GroupState<F> {
    fn default() -> Self {
        Self { steps: 0, m: Vec::new(), v: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    trunk: GroupState<F>,
    noise: GroupState<F>,
    motion: GroupState<F>,
}

impl<F> Default for Adam<F> {
    fn default() -> Self {
        Self { trunk: GroupState::default(), noise: GroupState::default(), motion: GroupState::default() }
    }
}

impl<F: Real> Adam<F> {
    fn state(&mut self, group: Group) -> &mut GroupState<F> {
        match group {
            Group::Trunk => &mut self.trunk,
            Group::Noise => &mut self.noise,
            Group::Motion => &mut self.motion,
        }
    }

    pub fn steps(&self, group: Group) -> u64 {
        match group {
            Group::Trunk => self.trunk.steps,
            Group::Noise => self.noise.steps,
            Group::Motion => self.motion.steps,
        }
    }

    pub fn step(&mut self, cfg: &AdamConfig, group: Group, params: Vec<&mut [F]>, grads: Vec<&[F]>) {
        let st = self.state(group);
        if st.m.is_empty() {
            st.m = grads.iter().map(|g| vec![F::zero(); g.len()]).collect();
            st.v = st.m.clone();
        }
        st.steps += 1;
        let t = st.steps as i32;
        let (b1, b2) = (cast::<F>(cfg.beta1), cast::<F>(cfg.beta2));
        let step = cast::<F>(cfg.lr * (1.0 - cfg.beta2.powi(t)).sqrt() / (1.0 - cfg.beta1.powi(t)));
        let eps = cast::<F>(cfg.eps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut st.m).zip(&mut st.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                p[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::<f64>::default();
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut p = vec![1.0, -2.0];
        adam.step(&cfg, Group::Noise, vec![&mut p], vec![&[3.0, -0.5]]);
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] + 1.99).abs() < 1e-6);
        assert_eq!(adam.steps(Group::Noise), 1);
        assert_eq!(adam.steps(Group::Motion), 0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::<f64>::default();
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut p = vec![3.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            adam.step(&cfg, Group::Trunk, vec![&mut p], vec![&g]);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }
}
