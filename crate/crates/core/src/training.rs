//! The training algorithms: multi-step PGD training, single-step FGSM
//! variants (plain, random start, learned initialization), learning-rate
//! schedules, the catastrophic-overfitting monitor, and per-epoch
//! evaluation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{evaluate_robust_accuracy, fgsm, fgsm_rs, pgd, EvalAttack, Perturbation};
use crate::config::{Method, Schedule, TrainConfig};
use crate::data::{epoch_order, Batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::initializer::{generator_ascent_step, sdi_perturbation, signed_gradient};
use crate::metrics::{MetricsRecord, Split};
use crate::models::{GeneratorArch, GeneratorNet, ParamSet, TargetNet};
use crate::optim::{Direction, SgdMomentum};
use crate::scalar::Scalar;

// ── Learning-rate schedules ─────────────────────────────────────────

/// Multistep decay: the base rate times `factor` for every milestone
/// epoch (1-based) that has been reached.
pub fn multistep_lr(base: f64, factor: f64, milestones: &[usize], epoch: usize) -> f64 {
    let hits = milestones.iter().filter(|&&m| m <= epoch).count();
    base * factor.powi(hits as i32)
}

/// Triangular ramp 0 → `max_lr` → 0 over `total_steps`; the apex sits at
/// exactly half of the total.
pub fn cyclic_lr(max_lr: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let t = step as f64 / total_steps as f64;
    max_lr * (1.0 - (2.0 * t - 1.0).abs())
}

fn lr_for(cfg: &TrainConfig, epoch: usize, step: usize, total_steps: usize) -> f64 {
    match &cfg.schedule {
        Schedule::Multistep { milestones, factor } => {
            multistep_lr(cfg.optim.lr, *factor, milestones, epoch)
        }
        Schedule::Cyclic { max_lr } => cyclic_lr(*max_lr, step, total_steps),
    }
}

// ── Catastrophic-overfitting monitor ────────────────────────────────

/// Watches the train-set PGD-10 accuracy and triggers (once) on the
/// first epoch whose accuracy drops at least `drop` below the best
/// earlier value while also falling below `floor`.
#[derive(Debug, Clone)]
pub struct OverfitMonitor {
    pub drop: f64,
    pub floor: f64,
    best_prior: f64,
    epochs_seen: usize,
    triggered: Option<usize>,
}

impl Default for OverfitMonitor {
    fn default() -> Self {
        OverfitMonitor::new(0.30, 0.05)
    }
}

impl OverfitMonitor {
    pub fn new(drop: f64, floor: f64) -> OverfitMonitor {
        OverfitMonitor {
            drop,
            floor,
            best_prior: f64::NEG_INFINITY,
            epochs_seen: 0,
            triggered: None,
        }
    }

    /// Feeds one epoch's accuracy; returns the trigger epoch if this
    /// observation fired the monitor.
    pub fn observe(&mut self, accuracy: f64) -> Option<usize> {
        self.epochs_seen += 1;
        let fired = self.triggered.is_none()
            && accuracy < self.best_prior - self.drop
            && accuracy < self.floor;
        if fired {
            self.triggered = Some(self.epochs_seen);
        }
        self.best_prior = self.best_prior.max(accuracy);
        if fired {
            self.triggered
        } else {
            None
        }
    }

    pub fn triggered_epoch(&self) -> Option<usize> {
        self.triggered
    }
}

/// Runs the monitor over a full accuracy history (1-based epoch result).
pub fn monitor_overfit(history: &[f64]) -> Option<usize> {
    let mut monitor = OverfitMonitor::default();
    for &acc in history {
        monitor.observe(acc);
    }
    monitor.triggered_epoch()
}

/// Best (highest test PGD-10 accuracy, ties to the earlier epoch) and
/// last checkpoint, as 1-based epochs.
pub fn select_best_checkpoint(pgd10_by_epoch: &[f64]) -> Option<(usize, usize)> {
    if pgd10_by_epoch.is_empty() {
        return None;
    }
    let mut best = 1;
    for (i, &acc) in pgd10_by_epoch.iter().enumerate() {
        if acc > pgd10_by_epoch[best - 1] {
            best = i + 1;
        }
    }
    Some((best, pgd10_by_epoch.len()))
}

// ── Training ────────────────────────────────────────────────────────

pub struct TrainOutput<S> {
    pub net: TargetNet<S>,
    pub generator: Option<GeneratorNet<S>>,
    pub metrics: Vec<MetricsRecord>,
    pub best_epoch: usize,
    pub last_epoch: usize,
    pub overfit_epoch: Option<usize>,
    pub best_target_params: ParamSet<S>,
    pub best_gen_params: Option<ParamSet<S>>,
    pub weight_updates: u64,
    /// Wall-clock milliseconds spent in the batch loop, per epoch
    /// (measured even when `record_timing` is off).
    pub epoch_wall_ms: Vec<u64>,
}

fn derive_seed(base: u64, tag: u64, n: u64) -> u64 {
    base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ n.wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Trains per the configured method and returns the trained players
/// plus the metric stream. Fully deterministic in the config.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    train_set: &Dataset<S>,
    test_set: &Dataset<S>,
) -> Result<TrainOutput<S>> {
    cfg.validate()?;
    let in_shape = train_set.image_shape();
    let classes = train_set.num_classes;
    let mut net: TargetNet<S> = TargetNet::init(cfg.arch.clone(), in_shape, classes, cfg.seed);
    let mut generator: Option<GeneratorNet<S>> = match cfg.method {
        Method::FgsmSdi => Some(GeneratorNet::init(
            GeneratorArch::for_channels(in_shape[0]),
            derive_seed(cfg.seed, 0x67e, 1),
        )?),
        _ => None,
    };

    let mut opt_w: SgdMomentum<S> = SgdMomentum::new(cfg.optim.momentum, cfg.optim.weight_decay);
    let mut opt_g: SgdMomentum<S> =
        SgdMomentum::new(cfg.gen_optim.momentum, cfg.gen_optim.weight_decay);
    let mut attack_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xa77ac4, 0));

    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let attack_cfg = cfg.attack_config();

    let train_eval = train_set.head(cfg.eval_subset);
    let test_eval = test_set.head(cfg.eval_subset);
    let epoch_attacks = [EvalAttack::Clean, EvalAttack::Pgd { steps: 10 }];

    let mut metrics: Vec<MetricsRecord> = Vec::new();
    let mut monitor = OverfitMonitor::default();
    let mut test_pgd10_history: Vec<f64> = Vec::new();
    let mut best_epoch = 1usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_target_params = net.params().clone();
    let mut best_gen_params = generator.as_ref().map(|g| g.params().clone());
    let mut weight_updates = 0u64;
    let mut step_index = 0usize;
    let mut epoch_wall_ms = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut gen_updates = 0u64;
        let started = Instant::now();

        for (bi, batch) in train_set.batches(&order, cfg.batch_size).enumerate() {
            let batch_index = bi + 1; // Algorithm indices are 1-based.
            let lr = lr_for(cfg, epoch, step_index, total_steps);
            let delta = build_perturbation(
                cfg,
                &mut net,
                generator.as_mut(),
                &batch,
                batch_index,
                &attack_cfg,
                &mut attack_rng,
                &mut opt_g,
                &mut gen_updates,
            )
            .map_err(|e| e.with_train_context(epoch, batch_index))?;
            weight_update(&mut net, &batch, &delta, lr, &mut opt_w)
                .map_err(|e| e.with_train_context(epoch, batch_index))?;
            weight_updates += 1;
            step_index += 1;
        }

        let wall = started.elapsed().as_millis() as u64;
        epoch_wall_ms.push(wall);
        let wall_recorded = if cfg.record_timing { wall } else { 0 };

        // Per-epoch evaluation on the fixed subsets.
        let mut train_pgd10 = 0.0;
        let mut test_pgd10 = 0.0;
        for (split, eval_set) in [(Split::Train, &train_eval), (Split::Test, &test_eval)] {
            let mut eval_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                if split == Split::Train { 0x7e57 } else { 0x7e58 },
                epoch as u64,
            ));
            let outcomes =
                evaluate_robust_accuracy(&net, eval_set, &epoch_attacks, cfg.epsilon, &mut eval_rng)?;
            for outcome in outcomes {
                if outcome.attack == "pgd10" {
                    match split {
                        Split::Train => train_pgd10 = outcome.accuracy,
                        Split::Test => test_pgd10 = outcome.accuracy,
                    }
                }
                metrics.push(MetricsRecord {
                    epoch,
                    split,
                    attack: outcome.attack,
                    accuracy: outcome.accuracy,
                    loss: outcome.mean_loss,
                    wall_ms: wall_recorded,
                    gen_updates,
                });
            }
        }

        monitor.observe(train_pgd10);
        test_pgd10_history.push(test_pgd10);
        if test_pgd10 > best_acc {
            best_acc = test_pgd10;
            best_epoch = epoch;
            best_target_params = net.params().clone();
            best_gen_params = generator.as_ref().map(|g| g.params().clone());
        }
    }

    // Full-test evaluation of the best and last checkpoints.
    let final_attacks: Vec<EvalAttack> = cfg
        .final_attacks
        .iter()
        .map(|name| EvalAttack::parse(name))
        .collect::<Result<_>>()?;
    if !final_attacks.is_empty() {
        for (tag, epoch_no, params) in [
            (0x0be5u64, best_epoch, &best_target_params),
            (0x1a57u64, cfg.epochs, net.params()),
        ] {
            let mut snapshot: TargetNet<S> = TargetNet::new(cfg.arch.clone(), in_shape, classes);
            *snapshot.params_mut() = params.clone();
            let started = Instant::now();
            let mut eval_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tag, 0));
            let outcomes =
                evaluate_robust_accuracy(&snapshot, test_set, &final_attacks, cfg.epsilon, &mut eval_rng)?;
            let wall = if cfg.record_timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            };
            for outcome in outcomes {
                metrics.push(MetricsRecord {
                    epoch: epoch_no,
                    split: Split::Test,
                    attack: outcome.attack,
                    accuracy: outcome.accuracy,
                    loss: outcome.mean_loss,
                    wall_ms: wall,
                    gen_updates: 0,
                });
            }
        }
    }

    let overfit_epoch = monitor.triggered_epoch();
    let (best_epoch, last_epoch) =
        select_best_checkpoint(&test_pgd10_history).unwrap_or((best_epoch, cfg.epochs));

    Ok(TrainOutput {
        net,
        generator,
        metrics,
        best_epoch,
        last_epoch,
        overfit_epoch,
        best_target_params,
        best_gen_params,
        weight_updates,
        epoch_wall_ms,
    })
}

/// Builds the training perturbation for one batch according to the
/// method, performing the generator's ascent step on interval batches.
#[allow(clippy::too_many_arguments)]
fn build_perturbation<S: Scalar>(
    cfg: &TrainConfig,
    net: &mut TargetNet<S>,
    generator: Option<&mut GeneratorNet<S>>,
    batch: &Batch<S>,
    batch_index: usize,
    attack_cfg: &crate::attacks::AttackConfig,
    rng: &mut ChaCha8Rng,
    opt_g: &mut SgdMomentum<S>,
    gen_updates: &mut u64,
) -> Result<Perturbation<S>> {
    match cfg.method {
        Method::FgsmAt => fgsm(net, batch, attack_cfg),
        Method::FgsmRs => fgsm_rs(net, batch, attack_cfg, rng),
        Method::PgdAt | Method::Pgd2At | Method::Pgd4At => {
            // Zero initialization per the multi-step training algorithm.
            let mut zero_init = attack_cfg.clone();
            zero_init.random_start = false;
            pgd(net, batch, &zero_init, None, rng)
        }
        Method::FgsmSdi => {
            let generator = generator.expect("fgsm-sdi trains a generator");
            let s_x = signed_gradient(net, batch)?;
            if batch_index % cfg.interval_k == 0 {
                generator_ascent_step(
                    generator,
                    net,
                    batch,
                    &s_x,
                    attack_cfg,
                    opt_g,
                    cfg.gen_optim.lr,
                )?;
                *gen_updates += 1;
            }
            // The weight update always uses a perturbation from the
            // current θ, regenerated after the ascent step.
            sdi_perturbation(net, generator, batch, &s_x, attack_cfg)
        }
    }
}

fn weight_update<S: Scalar>(
    net: &mut TargetNet<S>,
    batch: &Batch<S>,
    delta: &Perturbation<S>,
    lr: f64,
    opt: &mut SgdMomentum<S>,
) -> Result<f64> {
    let x_adv = batch.images.add(&delta.delta)?;
    let mut graph = Graph::new();
    let xv = graph.constant(x_adv);
    let (logits, binding) = net.forward_train(&mut graph, xv)?;
    let loss = graph.softmax_cross_entropy(logits, &batch.labels)?;
    let value = graph.scalar_value(loss).to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            example: graph.first_nonfinite_example(loss),
            context: String::new(),
        });
    }
    graph.backward(loss)?;
    let grads = binding.grads(&graph);
    opt.step(net.params_mut(), &grads, lr, Direction::Descent);
    Ok(value)
}
