//! Gradient-based L∞ perturbations: FGSM, FGSM with random start,
//! multi-step PGD, and robustness evaluation.
//!
//! Attacks are pure given (parameters, batch, rng state): they run the
//! target in eval mode and never mutate parameters or batch-norm running
//! statistics. Every input-gradient evaluation goes through
//! [`loss_input_grad`], which maintains a per-thread counter used by the
//! cost-accounting tests.

use std::cell::Cell;

use rand::Rng;

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::TargetNet;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

thread_local! {
    static INPUT_GRAD_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of input-gradient evaluations performed by this thread.
pub fn input_grad_count() -> u64 {
    INPUT_GRAD_EVALS.with(|c| c.get())
}

pub fn reset_input_grad_count() {
    INPUT_GRAD_EVALS.with(|c| c.set(0));
}

/// Parameters shared by every perturbation routine.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// L∞ radius in normalized pixel units.
    pub epsilon: f64,
    /// Step size, same units.
    pub alpha: f64,
    /// Iteration count for multi-step attacks.
    pub steps: usize,
    /// Clip `x + delta` to the valid pixel range `[0, 1]`.
    pub clip_to_valid: bool,
    /// Start from a uniform draw in the ε-ball instead of zero.
    pub random_start: bool,
}

impl AttackConfig {
    pub fn new(epsilon: f64, alpha: f64, steps: usize) -> AttackConfig {
        AttackConfig {
            epsilon,
            alpha,
            steps,
            clip_to_valid: true,
            random_start: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon must be in (0, 1], got {}",
                self.epsilon
            )));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// An L∞-bounded perturbation of an image batch.
#[derive(Debug, Clone)]
pub struct Perturbation<S> {
    pub delta: Tensor<S>,
}

/// Projection onto the L∞ ball of radius `epsilon` (elementwise clamp);
/// idempotent.
pub fn project_linf<S: Scalar>(delta: &Tensor<S>, epsilon: f64) -> Tensor<S> {
    let eps = s::<S>(epsilon);
    delta.clamp(-eps, eps).expect("-eps <= eps")
}

/// Mean loss and its gradient with respect to the input images, evaluated
/// at `x` in eval mode. Bumps the per-thread input-gradient counter.
pub fn loss_input_grad<S: Scalar>(
    net: &TargetNet<S>,
    x: &Tensor<S>,
    labels: &[usize],
) -> Result<(S, Tensor<S>)> {
    INPUT_GRAD_EVALS.with(|c| c.set(c.get() + 1));
    let mut graph = Graph::new();
    let xv = graph.leaf(x.clone(), true);
    let logits = net.forward_eval(&mut graph, xv)?;
    let loss = graph.softmax_cross_entropy(logits, labels)?;
    let value = graph.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            example: graph.first_nonfinite_example(loss),
            context: String::new(),
        });
    }
    graph.backward(loss)?;
    let grad = graph.grad(xv).expect("input requires grad");
    Ok((value, grad))
}

/// Mean eval-mode loss at `x` (no gradient, no counter).
pub fn loss_at<S: Scalar>(net: &TargetNet<S>, x: &Tensor<S>, labels: &[usize]) -> Result<S> {
    let mut graph = Graph::new();
    let xv = graph.constant(x.clone());
    let logits = net.forward_eval(&mut graph, xv)?;
    let loss = graph.softmax_cross_entropy(logits, labels)?;
    Ok(graph.scalar_value(loss))
}

/// Replaces `delta` by `clamp(x + delta, 0, 1) - x` so the adversarial
/// image stays a valid image. Never grows any coordinate.
fn clip_delta_to_valid<S: Scalar>(delta: Tensor<S>, images: &Tensor<S>) -> Tensor<S> {
    let adv = images.add(&delta).expect("shapes agree");
    let clipped = adv.clamp(S::zero(), S::one()).expect("0 <= 1");
    clipped.sub(images).expect("shapes agree")
}

fn finish<S: Scalar>(delta: Tensor<S>, batch: &Batch<S>, cfg: &AttackConfig) -> Perturbation<S> {
    let delta = if cfg.clip_to_valid {
        // `(x + δ) - x` can exceed |δ| by one ulp, so re-project to keep
        // the ball bound exact; shrinking |δ| keeps x + δ inside [0, 1].
        project_linf(&clip_delta_to_valid(delta, &batch.images), cfg.epsilon)
    } else {
        delta
    };
    Perturbation { delta }
}

/// Single-step perturbation from an explicit initialization:
/// `Π[-ε,ε][eta + alpha * sign(∇x L(x + eta))]`, then valid-range
/// clipping if configured. FGSM-RS and the learned-initialization path
/// both reduce to this.
pub fn single_step_from<S: Scalar>(
    net: &TargetNet<S>,
    batch: &Batch<S>,
    cfg: &AttackConfig,
    eta: &Tensor<S>,
) -> Result<Perturbation<S>> {
    cfg.validate()?;
    let x_pert = batch.images.add(eta)?;
    let (_, grad) = loss_input_grad(net, &x_pert, &batch.labels)?;
    let step = grad.sign().scale(s(cfg.alpha));
    let delta = project_linf(&eta.add(&step)?, cfg.epsilon);
    Ok(finish(delta, batch, cfg))
}

/// Fast gradient sign method: `delta = epsilon * sign(∇x L(x))`.
/// `cfg.steps` is ignored. Every entry is in `{-ε, 0, +ε}` before
/// valid-range clipping.
pub fn fgsm<S: Scalar>(
    net: &TargetNet<S>,
    batch: &Batch<S>,
    cfg: &AttackConfig,
) -> Result<Perturbation<S>> {
    cfg.validate()?;
    let (_, grad) = loss_input_grad(net, &batch.images, &batch.labels)?;
    let delta = grad.sign().scale(s(cfg.epsilon));
    Ok(finish(delta, batch, cfg))
}

/// FGSM from a uniform random initialization in the ε-ball.
pub fn fgsm_rs<S: Scalar, R: Rng>(
    net: &TargetNet<S>,
    batch: &Batch<S>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Perturbation<S>> {
    cfg.validate()?;
    let eta = Tensor::uniform(
        batch.images.shape().to_vec(),
        -cfg.epsilon,
        cfg.epsilon,
        rng,
    );
    single_step_from(net, batch, cfg, &eta)
}

/// Projected gradient descent: `steps` iterations of
/// `delta <- Π[-ε,ε][delta + alpha * sign(∇x L(x + delta))]` from `init`
/// (zero by default, uniform random when `cfg.random_start`), with
/// valid-range clipping applied to the final perturbation.
pub fn pgd<S: Scalar, R: Rng>(
    net: &TargetNet<S>,
    batch: &Batch<S>,
    cfg: &AttackConfig,
    init: Option<&Tensor<S>>,
    rng: &mut R,
) -> Result<Perturbation<S>> {
    cfg.validate()?;
    let mut delta = match init {
        Some(d) => project_linf(d, cfg.epsilon),
        None if cfg.random_start => Tensor::uniform(
            batch.images.shape().to_vec(),
            -cfg.epsilon,
            cfg.epsilon,
            rng,
        ),
        None => Tensor::zeros(batch.images.shape().to_vec()),
    };
    let alpha = s::<S>(cfg.alpha);
    for _ in 0..cfg.steps {
        let x_pert = batch.images.add(&delta)?;
        let (_, grad) = loss_input_grad(net, &x_pert, &batch.labels)?;
        let stepped = delta.add(&grad.sign().scale(alpha))?;
        delta = project_linf(&stepped, cfg.epsilon);
    }
    Ok(finish(delta, batch, cfg))
}

// ── Robust-accuracy evaluation ──────────────────────────────────────

/// Attack selection for evaluation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalAttack {
    Clean,
    Fgsm,
    Pgd { steps: usize },
}

impl EvalAttack {
    pub fn name(&self) -> String {
        match self {
            EvalAttack::Clean => "clean".into(),
            EvalAttack::Fgsm => "fgsm".into(),
            EvalAttack::Pgd { steps } => format!("pgd{steps}"),
        }
    }

    /// Parses names of the form `clean`, `fgsm`, `pgd10`, `pgd50`.
    pub fn parse(name: &str) -> Result<EvalAttack> {
        match name {
            "clean" => Ok(EvalAttack::Clean),
            "fgsm" => Ok(EvalAttack::Fgsm),
            _ => {
                if let Some(steps) = name.strip_prefix("pgd") {
                    let steps: usize = steps
                        .parse()
                        .map_err(|_| Error::Config(format!("unknown attack '{name}'")))?;
                    if steps == 0 {
                        return Err(Error::Config("pgd needs at least one step".into()));
                    }
                    Ok(EvalAttack::Pgd { steps })
                } else {
                    Err(Error::Config(format!("unknown attack '{name}'")))
                }
            }
        }
    }
}

/// Evaluation step size: 2/255 at the standard radius 8/255, otherwise
/// ε/4.
pub fn eval_alpha(epsilon: f64) -> f64 {
    if epsilon == 8.0 / 255.0 {
        2.0 / 255.0
    } else {
        epsilon / 4.0
    }
}

fn eval_attack_config(kind: EvalAttack, epsilon: f64) -> AttackConfig {
    match kind {
        EvalAttack::Clean => AttackConfig::new(epsilon.max(f64::MIN_POSITIVE), 1.0, 1),
        EvalAttack::Fgsm => AttackConfig::new(epsilon, epsilon, 1),
        EvalAttack::Pgd { steps } => AttackConfig {
            epsilon,
            alpha: eval_alpha(epsilon),
            steps,
            clip_to_valid: true,
            random_start: true,
        },
    }
}

/// Accuracy and mean loss of one attack over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub attack: String,
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Argmax with ties broken by the lowest class index.
pub fn predict<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

const EVAL_BATCH: usize = 100;

/// Clean and robust accuracy per attack. The net is used strictly in
/// eval mode; ε = 0 denotes the empty threat model (every attack equals
/// clean).
pub fn evaluate_robust_accuracy<S: Scalar, R: Rng>(
    net: &TargetNet<S>,
    dataset: &Dataset<S>,
    attacks: &[EvalAttack],
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<AttackOutcome>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("evaluation dataset is empty".into()));
    }
    let order: Vec<usize> = (0..dataset.len()).collect();
    let mut results = Vec::with_capacity(attacks.len());
    for &kind in attacks {
        let mut correct = 0usize;
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for batch in dataset.batches(&order, EVAL_BATCH) {
            let adv = if epsilon == 0.0 || matches!(kind, EvalAttack::Clean) {
                batch.images.clone()
            } else {
                let cfg = eval_attack_config(kind, epsilon);
                let pert = match kind {
                    EvalAttack::Clean => unreachable!(),
                    EvalAttack::Fgsm => fgsm(net, &batch, &cfg)?,
                    EvalAttack::Pgd { .. } => pgd(net, &batch, &cfg, None, rng)?,
                };
                batch.images.add(&pert.delta)?
            };
            let mut graph = Graph::new();
            let xv = graph.constant(adv);
            let logits = net.forward_eval(&mut graph, xv)?;
            let loss = graph.softmax_cross_entropy(logits, &batch.labels)?;
            loss_sum += graph.scalar_value(loss).to_f64_lossy();
            batches += 1;
            for (pred, &label) in predict(graph.value(logits)).iter().zip(&batch.labels) {
                if *pred == label {
                    correct += 1;
                }
            }
        }
        results.push(AttackOutcome {
            attack: kind.name(),
            accuracy: correct as f64 / dataset.len() as f64,
            mean_loss: loss_sum / batches as f64,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthSpec;
    use crate::models::{TargetArch, TargetNet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(seed: u64, n: usize) -> Batch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Batch {
            images: Tensor::uniform(vec![n, 1, 2, 2], 0.3, 0.7, &mut rng),
            labels: (0..n).map(|i| i % 2).collect(),
        }
    }

    fn linear_net(seed: u64) -> TargetNet<f64> {
        TargetNet::init(TargetArch::Linear, [1, 2, 2], 2, seed)
    }

    #[test]
    fn fgsm_zero_gradient_gives_zero_delta() {
        let net: TargetNet<f64> = TargetNet::new(TargetArch::Linear, [1, 2, 2], 2);
        let b = batch(0, 4);
        let cfg = AttackConfig::new(8.0 / 255.0, 8.0 / 255.0, 1);
        let p = fgsm(&net, &b, &cfg).unwrap();
        assert!(p.delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fgsm_entries_in_three_values() {
        let net = linear_net(3);
        let b = batch(1, 8);
        let mut cfg = AttackConfig::new(0.05, 0.05, 1);
        cfg.clip_to_valid = false;
        let p = fgsm(&net, &b, &cfg).unwrap();
        for &v in p.delta.iter() {
            assert!(v == 0.05 || v == -0.05 || v == 0.0, "entry {v}");
        }
    }

    #[test]
    fn fgsm_rs_ball_containment_over_seeds() {
        let net = linear_net(3);
        let b = batch(1, 4);
        let mut cfg = AttackConfig::new(0.03, 0.03 * 1.25, 1);
        cfg.random_start = true;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = fgsm_rs(&net, &b, &cfg, &mut rng).unwrap();
            assert!(p.delta.linf_norm() <= 0.03);
            let adv = b.images.add(&p.delta).unwrap();
            assert!(adv.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn fgsm_rs_with_zero_init_and_alpha_eps_equals_fgsm() {
        let net = linear_net(7);
        let b = batch(2, 6);
        let cfg = AttackConfig::new(0.04, 0.04, 1);
        let zero = Tensor::zeros(b.images.shape().to_vec());
        let a = single_step_from(&net, &b, &cfg, &zero).unwrap();
        let f = fgsm(&net, &b, &cfg).unwrap();
        for (x, y) in a.delta.iter().zip(f.delta.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn pgd_single_step_alpha_eps_is_fgsm() {
        let net = linear_net(11);
        let b = batch(3, 5);
        let cfg = AttackConfig::new(0.02, 0.02, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = pgd(&net, &b, &cfg, None, &mut rng).unwrap();
        let f = fgsm(&net, &b, &cfg).unwrap();
        for (x, y) in p.delta.iter().zip(f.delta.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let d = Tensor::<f64>::uniform(vec![2, 1, 3, 3], -0.5, 0.5, &mut rng);
            let once = project_linf(&d, 0.1);
            let twice = project_linf(&once, 0.1);
            assert_eq!(once.data(), twice.data());
            assert!(once.linf_norm() <= 0.1);
        }
        // Inside the ball: unchanged; far outside: saturates at ε.
        let inside = Tensor::<f64>::from_f64(vec![2], &[0.05, -0.02]);
        assert_eq!(project_linf(&inside, 0.1).data(), inside.data());
        let outside = Tensor::<f64>::full(vec![3], 0.2);
        assert!(project_linf(&outside, 0.1).iter().all(|&v| v == 0.1));
    }

    #[test]
    fn grad_counter_counts_every_backward() {
        let net = linear_net(5);
        let b = batch(9, 4);
        reset_input_grad_count();
        let cfg = AttackConfig::new(0.03, 0.01, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        pgd(&net, &b, &cfg, None, &mut rng).unwrap();
        assert_eq!(input_grad_count(), 7);
        fgsm(&net, &b, &cfg).unwrap();
        assert_eq!(input_grad_count(), 8);
        reset_input_grad_count();
        assert_eq!(input_grad_count(), 0);
    }

    #[test]
    fn epsilon_zero_evaluation_equals_clean() {
        let net: TargetNet<f64> = TargetNet::init(TargetArch::Linear, [3, 4, 4], 4, 2);
        let spec = SynthSpec {
            classes: 4,
            size: 40,
            dims: [3, 4, 4],
            noise: 0.15,
            seed: 6,
        };
        let data = crate::data::synth_dataset::<f64>(&spec, "test").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let res = evaluate_robust_accuracy(
            &net,
            &data,
            &[EvalAttack::Clean, EvalAttack::Fgsm, EvalAttack::Pgd { steps: 5 }],
            0.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(res[0].accuracy, res[1].accuracy);
        assert_eq!(res[0].accuracy, res[2].accuracy);
    }

    #[test]
    fn evaluation_rejects_empty_dataset() {
        let net: TargetNet<f64> = TargetNet::init(TargetArch::Linear, [1, 2, 2], 2, 2);
        let data = Dataset {
            images: Tensor::zeros(vec![0, 1, 2, 2]),
            labels: vec![],
            num_classes: 2,
            split: "test".into(),
            provenance: crate::data::Provenance::File { path: "x".into() },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(
            evaluate_robust_accuracy(&net, &data, &[EvalAttack::Clean], 0.1, &mut rng).is_err()
        );
    }

    #[test]
    fn eval_never_mutates_running_stats() {
        let mut net: TargetNet<f64> =
            TargetNet::init(TargetArch::SmallCnn { c1: 4, c2: 4 }, [1, 4, 4], 2, 2);
        // Refresh stats once so they carry non-default values.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Batch {
            images: Tensor::uniform(vec![4, 1, 4, 4], 0.3, 0.7, &mut rng),
            labels: vec![0, 1, 0, 1],
        };
        let mut g = Graph::new();
        let xv = g.constant(b.images.clone());
        net.forward_train(&mut g, xv).unwrap();
        let before = net.params().clone();

        let cfg = AttackConfig::new(0.05, 0.0125, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        pgd(&net, &b, &cfg, None, &mut rng).unwrap();
        fgsm(&net, &b, &cfg).unwrap();
        assert!(net.params().bits_eq(&before));
    }

    #[test]
    fn attack_config_validation() {
        assert!(AttackConfig::new(0.0, 0.1, 1).validate().is_err());
        assert!(AttackConfig::new(1.5, 0.1, 1).validate().is_err());
        assert!(AttackConfig::new(0.1, 0.0, 1).validate().is_err());
        assert!(AttackConfig::new(0.1, 0.1, 0).validate().is_err());
        assert!(AttackConfig::new(0.1, 0.1, 1).validate().is_ok());
    }

    #[test]
    fn eval_attack_names_roundtrip() {
        for name in ["clean", "fgsm", "pgd10", "pgd50"] {
            assert_eq!(EvalAttack::parse(name).unwrap().name(), name);
        }
        assert!(EvalAttack::parse("cw").is_err());
        assert!(EvalAttack::parse("pgd0").is_err());
    }
}
