//! Adam over the parameters of a [`Module`].

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::nn::Module;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {:?}", self)))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `module` that has a gradient
    /// in `grads`. Returns the number of tensors updated.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, grads: &Gradients) -> usize {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr_t = (c.learning_rate * bc2.sqrt() / bc1) as f32;
        let eps_t = (c.eps * bc2.sqrt()) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let mut updated = 0;
        for layer in module.layers_mut() {
            let keys = [layer.weight_key(), layer.bias_key()];
            let targets = [&mut layer.weight, &mut layer.bias];
            for (key, param) in keys.into_iter().zip(targets) {
                let Some(g) = grads.param(&key) else { continue };
                let p = Arc::make_mut(param);
                assert_eq!(g.shape(), p.shape(), "gradient shape for {}", key);
                let (m, v) = self
                    .moments
                    .entry(key)
                    .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                for (((w, &gi), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    *w -= lr_t * *mi / (vi.sqrt() + eps_t);
                }
                updated += 1;
            }
        }
        updated
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Exec, Graph};
    use crate::nn::Conv2d;
    use crate::tensor::Tensor;

    struct One(Conv2d);
    impl Module for One {
        fn layers(&self) -> Vec<&Conv2d> {
            vec![&self.0]
        }
        fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * sign(g).
        let mut m = One(Conv2d::zeros("p/c", 1, 1, 1, 1));
        let mut g = Graph::new(&["p/"]);
        let x = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(&x, &m.0);
        let s = g.scalar(y, 0.0, Tensor::full(&[1, 1, 2, 2], 0.5));
        let grads = g.backward(s);
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.01,
            ..Default::default()
        });
        assert_eq!(adam.step(&mut m, &grads), 2);
        assert!((m.0.weight.data()[0] + 0.01).abs() < 1e-6);
        assert!((m.0.bias.data()[0] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(AdamConfig::default().validate().is_ok());
        let bad = AdamConfig {
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
