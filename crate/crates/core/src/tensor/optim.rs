use ndarray::{ArrayD, Zip};

use super::nn::{ParamId, ParamStore};
use super::Tensor;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one slot per parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| ArrayD::zeros(p.value.raw_dim()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::zeros(store),
        }
    }

    /// One update. Parameters absent from `grads` are left untouched and
    /// their moments are not decayed.
    pub fn step<'a, I>(&mut self, store: &mut ParamStore, grads: I, lr: f64)
    where
        I: IntoIterator<Item = (ParamId, &'a Tensor)>,
    {
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            let p = store.get_mut(id);
            Zip::from(p)
                .and(&mut self.state.m[i])
                .and(&mut self.state.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

/// Multi-step learning-rate schedule: `base · factor^(−m)` where `m` counts
/// the milestones `≤ epoch`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl Default for MultiStepLr {
    fn default() -> Self {
        Self {
            base: 1e-3,
            milestones: vec![5, 15, 25, 35],
            factor: 5.0,
        }
    }
}

impl MultiStepLr {
    pub fn lr(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base / self.factor.powi(passed as i32)
    }
}

/// Learning rate of the default schedule at `epoch`.
pub fn lr_schedule(epoch: usize) -> f64 {
    MultiStepLr::default().lr(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    /// Plain scalar Adam written out longhand.
    fn scalar_adam(p0: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    fn one_scalar(v: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new(0);
        let id = store.add("x", ArrayD::from_elem(IxDyn(&[1]), v)).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = one_scalar(0.7);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let g = ArrayD::zeros(IxDyn(&[1]));
        adam.step(&mut store, [(id, &g)], 1e-3);
        assert_eq!(store.get(id)[[0]], 0.7);
    }

    #[test]
    fn first_step_matches_scalar_oracle() {
        let (mut store, id) = one_scalar(0.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let g = ArrayD::from_elem(IxDyn(&[1]), 1.0);
        adam.step(&mut store, [(id, &g)], 1e-3);
        let got = store.get(id)[[0]];
        assert!((got - scalar_adam(0.0, &[1.0], 1e-3)).abs() < 1e-12);
        assert!((got + 1e-3 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        let (mut store, id) = one_scalar(0.25);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let g = ArrayD::from_elem(IxDyn(&[1]), 0.3);
        adam.step(&mut store, [(id, &g)], 1e-3);
        adam.step(&mut store, [(id, &g)], 1e-3);
        let want = scalar_adam(0.25, &[0.3, 0.3], 1e-3);
        assert!((store.get(id)[[0]] - want).abs() < 1e-12);
    }

    #[test]
    fn schedule_milestones() {
        assert_eq!(lr_schedule(0), 1e-3);
        assert_eq!(lr_schedule(4), 1e-3);
        assert!((lr_schedule(5) - 2e-4).abs() < 1e-18);
        assert!((lr_schedule(40) - 1e-3 / 625.0).abs() < 1e-18);
    }
}
