use serde::{Deserialize, Serialize};

use super::network::{Gradients, PolicyNetwork, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { learning_rate: f64, clip_norm: f64 },
    Adam { learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64, clip_norm: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(3e-4)
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig::Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 10.0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { learning_rate, .. } | OptimizerConfig::Adam { learning_rate, .. } => {
                learning_rate
            }
        }
    }

    fn clip_norm(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { clip_norm, .. } | OptimizerConfig::Adam { clip_norm, .. } => clip_norm,
        }
    }
}

/// Gradient-descent state. Gradients whose global norm exceeds the clip
/// norm are rescaled to it before the update.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn apply(&mut self, net: &mut PolicyNetwork, grads: &Gradients) {
        let norm = grads.norm();
        let clip = self.config.clip_norm();
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        let gbufs = grads.buffers();
        let mut params = net.param_buffers_mut();
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { learning_rate, .. } => {
                for (p, g) in params.iter_mut().zip(&gbufs) {
                    for (pv, gv) in p.iter_mut().zip(g.iter()) {
                        *pv -= learning_rate * scale * gv;
                    }
                }
            }
            OptimizerConfig::Adam { learning_rate, beta1, beta2, epsilon, .. } => {
                if self.m.is_empty() {
                    self.m = gbufs.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(&gbufs).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for k in 0..p.len() {
                        let gv = g[k] * scale;
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gv;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gv * gv;
                        p[k] -= learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + epsilon);
                    }
                }
            }
        }
    }
}

/// One update on `batch`; returns the loss before the update. Leaves the
/// network untouched if the loss or any gradient is not finite.
pub fn train_step(net: &mut PolicyNetwork, opt: &mut Optimizer, batch: &[Sample]) -> Result<f64> {
    let (loss, grads) = net.loss_and_gradient(batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { samples_seen: 0, loss });
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    opt.apply(net, &grads);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::tests_support::tiny_config;
    use crate::nn::network::RoiSample;
    use crate::nn::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || {
            Tensor::new([1, 61, 61], (0..61 * 61).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let (fixed, moving) = (img(), img());
        let mut target = [0.0; 12];
        for (i, t) in target.iter_mut().enumerate() {
            *t = (i as f64 - 5.5) / 6.0;
        }
        Sample::Roi(RoiSample { fixed, moving, target })
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut net = PolicyNetwork::new(tiny_config(), 1).unwrap();
        let before = net.clone();
        for cfg in [
            OptimizerConfig::Sgd { learning_rate: 0.0, clip_norm: 10.0 },
            OptimizerConfig::adam(0.0),
        ] {
            let mut opt = Optimizer::new(cfg);
            let loss = train_step(&mut net, &mut opt, &[sample(2)]).unwrap();
            assert!(loss.is_finite() && loss > 0.0);
            assert_eq!(net, before);
        }
    }

    #[test]
    fn non_finite_target_is_rejected_without_update() {
        let mut net = PolicyNetwork::new(tiny_config(), 1).unwrap();
        let before = net.clone();
        let Sample::Roi(mut s) = sample(3) else { unreachable!() };
        s.target[0] = f64::INFINITY;
        let mut opt = Optimizer::new(OptimizerConfig::default());
        assert!(train_step(&mut net, &mut opt, &[Sample::Roi(s)]).is_err());
        assert_eq!(net, before);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut net = PolicyNetwork::new(tiny_config(), 4).unwrap();
        let before: Vec<Vec<f64>> = net.param_buffers().iter().map(|b| b.to_vec()).collect();
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { learning_rate: 1.0, clip_norm: 1e-3 });
        train_step(&mut net, &mut opt, &[sample(5)]).unwrap();
        let moved: f64 = net
            .param_buffers()
            .iter()
            .zip(&before)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt();
        assert!(moved <= 1e-3 + 1e-12);
    }

    #[test]
    fn repeated_steps_overfit_one_sample() {
        let mut net = PolicyNetwork::new(tiny_config(), 6).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-2));
        let batch = [sample(7)];
        let mut loss = f64::INFINITY;
        for _ in 0..3000 {
            loss = train_step(&mut net, &mut opt, &batch).unwrap();
            if loss < 1e-7 {
                break;
            }
        }
        assert!(loss < 1e-6, "loss {loss}");
    }
}
