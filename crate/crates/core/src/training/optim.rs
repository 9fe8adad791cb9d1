use detr3d_autograd::{ParamStore, Real};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    /// Learning rate is multiplied by this factor after every epoch.
    pub decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            decay: 1.0,
        }
    }
}

/// Adam with bias correction. Moments are kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub lr: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

impl Adam {
    pub fn new<T: Real>(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Adam {
            cfg,
            lr: cfg.lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from gradients in store order. Returns the pre-clip norm.
    pub fn update<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &mut [Vec<f64>]) -> f64 {
        let norm = global_norm(grads);
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            let s = self.cfg.clip_norm / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if !store.get(id).trainable || self.lr == 0.0 {
                continue;
            }
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            let data = store.get_mut(id).value.data_mut();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let w = data[i].as_f64() - self.lr * mh / (vh.sqrt() + self.cfg.eps);
                data[i] = T::from_f64(w);
            }
        }
        norm
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.cfg.decay;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use detr3d_autograd::{Init, Tensor};
    use rand::SeedableRng;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let w = store.add("w", &[1], Init::Ones, &mut rng).unwrap();
        let mut adam = Adam::new(AdamConfig { clip_norm: 0.0, ..Default::default() }, &store);
        // f(w) = w², f'(1) = 2; m̂ = 2, v̂ = 4, step = lr·2/(2 + eps)
        let mut g = vec![vec![2.0]];
        adam.update(&mut store, &mut g);
        let expect = 1.0 - 1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((store.value(w).data()[0] - expect).abs() < 1e-15);
        assert!((store.value(w).data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        store.add("w", &[3, 2], Init::UniformFanIn, &mut rng).unwrap();
        store.buffer("b", Tensor::ones(&[2])).unwrap();
        let before = store.clone();
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &store);
        for _ in 0..5 {
            let mut g = vec![vec![0.3; 6], vec![0.0; 2]];
            adam.update(&mut store, &mut g);
        }
        assert!(store.bitwise_eq(&before));
    }

    #[test]
    fn clipping_scales_to_ceiling() {
        let mut g = vec![vec![3.0, 4.0]];
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        store.add("w", &[2], Init::Zeros, &mut rng).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        assert_eq!(adam.update(&mut store, &mut g), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }
}
