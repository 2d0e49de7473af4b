//! SGD with momentum and decoupled-from-nothing classic weight decay
//! (gradient += wd * w), matching the framework defaults the baselines
//! were trained with.

use serde::{Deserialize, Serialize};

use crate::models::ParamSet;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Update direction: descent for the target network, ascent for the
/// generator's maximization step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

/// SGD momentum state over one parameter set.
pub struct SgdMomentum<S> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> SgdMomentum<S> {
    pub fn new(momentum: f64, weight_decay: f64) -> SgdMomentum<S> {
        SgdMomentum {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// One step: `v = momentum*v + (g + wd*w)`, `w -= lr*v` (descent) or
    /// `w += lr*v` (ascent). `grads` is aligned with the entries of
    /// `params`; entries without a gradient are skipped.
    pub fn step(
        &mut self,
        params: &mut ParamSet<S>,
        grads: &[Option<Tensor<S>>],
        lr: f64,
        direction: Direction,
    ) {
        if self.velocity.len() < params.entries().len() {
            self.velocity.resize(params.entries().len(), None);
        }
        let mu = s::<S>(self.momentum);
        let wd = s::<S>(self.weight_decay);
        let lr_s = s::<S>(lr);
        for i in 0..params.entries().len() {
            if !params.entries()[i].trainable {
                continue;
            }
            let Some(grad) = grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let vel = self.velocity[i]
                .get_or_insert_with(|| vec![S::zero(); grad.len()]);
            let mut value = params.value(i).clone();
            for ((w, v), &g) in value.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad.data()) {
                let g_eff = g + wd * *w;
                *v = mu * *v + g_eff;
                match direction {
                    Direction::Descent => *w = *w - lr_s * *v,
                    Direction::Ascent => *w = *w + lr_s * *v,
                }
            }
            params.set_by_index(i, value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{TargetArch, TargetNet};

    #[test]
    fn plain_sgd_step_moves_against_gradient() {
        let mut net: TargetNet<f64> = TargetNet::new(TargetArch::Linear, [1, 1, 2], 2);
        net.params_mut()
            .set("fc.weight", Tensor::from_f64(vec![2, 2], &[5.0, -3.0, 1.0, 2.0]));
        let mut opt = SgdMomentum::new(0.0, 0.0);
        let n = net.params().entries().len();
        let mut grads: Vec<Option<Tensor<f64>>> = vec![None; n];
        grads[0] = Some(Tensor::from_f64(vec![2, 2], &[10.0, -6.0, 0.0, 0.0]));
        opt.step(net.params_mut(), &grads, 0.1, Direction::Descent);
        let w = net.params().get("fc.weight").unwrap();
        assert_eq!(w.data(), &[4.0, -2.4, 1.0, 2.0]);
    }

    #[test]
    fn ascent_reverses_the_step() {
        let mut net: TargetNet<f64> = TargetNet::new(TargetArch::Linear, [1, 1, 1], 2);
        net.params_mut()
            .set("fc.weight", Tensor::from_f64(vec![1, 2], &[1.0, 1.0]));
        let mut opt = SgdMomentum::new(0.0, 0.0);
        let n = net.params().entries().len();
        let mut grads: Vec<Option<Tensor<f64>>> = vec![None; n];
        grads[0] = Some(Tensor::from_f64(vec![1, 2], &[2.0, -2.0]));
        opt.step(net.params_mut(), &grads, 0.5, Direction::Ascent);
        assert_eq!(net.params().get("fc.weight").unwrap().data(), &[2.0, 0.0]);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut net: TargetNet<f64> = TargetNet::init(TargetArch::Linear, [1, 2, 2], 2, 3);
        let before = net.params().clone();
        let mut opt = SgdMomentum::new(0.9, 5e-4);
        let n = net.params().entries().len();
        let mut grads: Vec<Option<Tensor<f64>>> = vec![None; n];
        grads[0] = Some(Tensor::full(vec![4, 2], 1.0));
        opt.step(net.params_mut(), &grads, 0.0, Direction::Descent);
        assert!(net.params().bits_eq(&before));
    }
}
