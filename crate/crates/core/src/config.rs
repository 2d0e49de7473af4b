//! Experiment configuration: training methods, schedules, defaults
//! resolution, and the JSON run manifest.
//!
//! A [`TrainConfig`] is always fully resolved — every default has been
//! applied — so the manifest written at the start of a run is enough to
//! re-execute it bit-identically.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::models::TargetArch;
use crate::optim::OptimConfig;

pub const FORMAT_VERSION: u32 = 1;

/// Default L∞ radius: 8/255.
pub const DEFAULT_EPSILON: f64 = 8.0 / 255.0;
/// Default generator-update interval.
pub const DEFAULT_K: usize = 20;
/// Default learning-rate decay factor for the multistep schedule.
pub const DEFAULT_LR_FACTOR: f64 = 0.1;
/// Default maximal learning rate for the cyclic schedule.
pub const DEFAULT_CYCLIC_MAX_LR: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    PgdAt,
    FgsmAt,
    FgsmRs,
    FgsmSdi,
    Pgd2At,
    Pgd4At,
}

impl Method {
    pub fn parse(name: &str) -> Result<Method> {
        match name {
            "pgd-at" => Ok(Method::PgdAt),
            "fgsm-at" => Ok(Method::FgsmAt),
            "fgsm-rs" => Ok(Method::FgsmRs),
            "fgsm-sdi" => Ok(Method::FgsmSdi),
            "pgd2-at" => Ok(Method::Pgd2At),
            "pgd4-at" => Ok(Method::Pgd4At),
            _ => Err(Error::Config(format!(
                "unknown method '{name}' (expected pgd-at, fgsm-at, fgsm-rs, fgsm-sdi, pgd2-at, pgd4-at)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::PgdAt => "pgd-at",
            Method::FgsmAt => "fgsm-at",
            Method::FgsmRs => "fgsm-rs",
            Method::FgsmSdi => "fgsm-sdi",
            Method::Pgd2At => "pgd2-at",
            Method::Pgd4At => "pgd4-at",
        }
    }

    /// Training attack steps for this method.
    fn default_steps(&self) -> usize {
        match self {
            Method::PgdAt => 10,
            Method::Pgd2At => 2,
            Method::Pgd4At => 4,
            Method::FgsmAt | Method::FgsmRs | Method::FgsmSdi => 1,
        }
    }

    /// Training step size: 1.25ε for the single-step random/learned
    /// initializations, ε/2 and ε/4 for the two- and four-step variants,
    /// 2/255 at the standard radius (ε/4 otherwise) for PGD-AT, and ε
    /// itself for plain FGSM.
    fn default_alpha(&self, epsilon: f64) -> f64 {
        match self {
            Method::FgsmAt => epsilon,
            Method::FgsmRs | Method::FgsmSdi => 1.25 * epsilon,
            Method::Pgd2At => epsilon / 2.0,
            Method::Pgd4At => epsilon / 4.0,
            Method::PgdAt => crate::attacks::eval_alpha(epsilon),
        }
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    /// Multiply the base learning rate by `factor` at each milestone
    /// epoch (1-based).
    Multistep { milestones: Vec<usize>, factor: f64 },
    /// Triangular ramp 0 → `max_lr` → 0 across all optimizer steps.
    Cyclic { max_lr: f64 },
}

/// Default multistep milestones: the 100/105-of-110 shape scaled to the
/// epoch budget.
pub fn default_milestones(epochs: usize) -> Vec<usize> {
    let m1 = epochs * 100 / 110;
    let m2 = epochs * 105 / 110;
    if m1 == 0 || m2 <= m1 || m2 >= epochs {
        // Tiny runs: fall back to a single late milestone when possible.
        if epochs >= 3 {
            return vec![epochs - 1];
        }
        return vec![];
    }
    vec![m1, m2]
}

/// Dataset selection recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    /// Deterministic synthetic classes; test split uses `seed + 1`.
    Synth {
        classes: usize,
        train_size: usize,
        test_size: usize,
        dims: [usize; 3],
        noise: f64,
        seed: u64,
    },
    /// Directory with CIFAR-10 binary batches (`data_batch_1.bin`...,
    /// `test_batch.bin`).
    Cifar10 {
        dir: String,
        train_records: Option<usize>,
        test_records: Option<usize>,
    },
    /// Tensor-container dataset files written by `synth-data`.
    Files { train: String, test: String },
}

impl DatasetConfig {
    pub fn desk_synth(seed: u64) -> DatasetConfig {
        DatasetConfig::Synth {
            classes: 10,
            train_size: 2000,
            test_size: 500,
            dims: [3, 16, 16],
            noise: 0.2,
            seed,
        }
    }

    pub fn train_synth_spec(&self) -> Option<SynthSpec> {
        match self {
            DatasetConfig::Synth {
                classes,
                train_size,
                dims,
                noise,
                seed,
                ..
            } => Some(SynthSpec {
                classes: *classes,
                size: *train_size,
                dims: *dims,
                noise: *noise,
                seed: *seed,
            }),
            _ => None,
        }
    }

    pub fn test_synth_spec(&self) -> Option<SynthSpec> {
        match self {
            DatasetConfig::Synth {
                classes,
                test_size,
                dims,
                noise,
                seed,
                ..
            } => Some(SynthSpec {
                classes: *classes,
                size: *test_size,
                dims: *dims,
                noise: *noise,
                seed: seed.wrapping_add(1),
            }),
            _ => None,
        }
    }
}

/// Fully resolved experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    /// Generator-update interval: update θ every k-th batch (1-based).
    pub interval_k: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub clip_to_valid: bool,
    pub optim: OptimConfig,
    pub gen_optim: OptimConfig,
    pub schedule: Schedule,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub batch_size: usize,
    pub arch: TargetArch,
    /// Per-epoch evaluation subset size (per split).
    pub eval_subset: usize,
    /// Attacks run on the best and last checkpoints at the end.
    pub final_attacks: Vec<String>,
    /// When false, wall-clock columns are written as 0 so two identical
    /// manifests produce bit-identical metrics files.
    pub record_timing: bool,
}

impl TrainConfig {
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            alpha: self.alpha,
            steps: self.steps,
            clip_to_valid: self.clip_to_valid,
            random_start: matches!(self.method, Method::FgsmRs),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.interval_k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.attack_config().validate()?;
        if self.optim.lr < 0.0 || self.gen_optim.lr < 0.0 {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        match &self.schedule {
            Schedule::Multistep { milestones, factor } => {
                if *factor <= 0.0 {
                    return Err(Error::Config("schedule factor must be positive".into()));
                }
                for pair in milestones.windows(2) {
                    if pair[1] <= pair[0] {
                        return Err(Error::Config(
                            "milestones must be strictly increasing".into(),
                        ));
                    }
                }
                if let Some(&last) = milestones.last() {
                    if last >= self.epochs {
                        return Err(Error::Config(format!(
                            "milestone {last} must be < epochs {}",
                            self.epochs
                        )));
                    }
                }
                if milestones.first() == Some(&0) {
                    return Err(Error::Config("milestone 0 is meaningless".into()));
                }
            }
            Schedule::Cyclic { max_lr } => {
                if *max_lr <= 0.0 {
                    return Err(Error::Config("cyclic max_lr must be positive".into()));
                }
            }
        }
        for name in &self.final_attacks {
            crate::attacks::EvalAttack::parse(name)?;
        }
        match &self.dataset {
            DatasetConfig::Synth {
                classes,
                train_size,
                test_size,
                ..
            } => {
                if *classes == 0 || *train_size == 0 || *test_size == 0 {
                    return Err(Error::Config("synthetic dataset sizes must be > 0".into()));
                }
                if train_size % classes != 0 || test_size % classes != 0 {
                    return Err(Error::Config(
                        "synthetic sizes must be divisible by the class count".into(),
                    ));
                }
            }
            DatasetConfig::Cifar10 { .. } | DatasetConfig::Files { .. } => {}
        }
        Ok(())
    }
}

/// Unresolved knobs as they arrive from the CLI; `None` means "use the
/// default".
#[derive(Debug, Clone, Default)]
pub struct TrainSpec {
    pub method: Method,
    pub epochs: Option<usize>,
    pub interval_k: Option<usize>,
    pub epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub schedule: Option<Schedule>,
    pub seed: Option<u64>,
    pub dataset: Option<DatasetConfig>,
    pub batch_size: Option<usize>,
    pub arch: Option<TargetArch>,
    pub eval_subset: Option<usize>,
    pub final_attacks: Option<Vec<String>>,
    pub record_timing: Option<bool>,
}

impl Default for Method {
    fn default() -> Self {
        Method::FgsmSdi
    }
}

impl TrainSpec {
    pub fn new(method: Method) -> TrainSpec {
        TrainSpec {
            method,
            ..Default::default()
        }
    }

    /// Applies every documented default and validates the result.
    pub fn resolve(self) -> Result<TrainConfig> {
        let epochs = self.epochs.unwrap_or(20);
        let epsilon = self.epsilon.unwrap_or(DEFAULT_EPSILON);
        let seed = self.seed.unwrap_or(0);
        let config = TrainConfig {
            method: self.method,
            epochs,
            interval_k: self.interval_k.unwrap_or(DEFAULT_K),
            epsilon,
            alpha: self.alpha.unwrap_or_else(|| self.method.default_alpha(epsilon)),
            steps: self.steps.unwrap_or_else(|| self.method.default_steps()),
            clip_to_valid: true,
            optim: OptimConfig {
                lr: self.lr.unwrap_or(0.1),
                ..OptimConfig::default()
            },
            gen_optim: OptimConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            schedule: self.schedule.unwrap_or_else(|| Schedule::Multistep {
                milestones: default_milestones(epochs),
                factor: DEFAULT_LR_FACTOR,
            }),
            seed,
            dataset: self.dataset.unwrap_or_else(|| DatasetConfig::desk_synth(seed)),
            batch_size: self.batch_size.unwrap_or(50),
            arch: self.arch.unwrap_or_default(),
            eval_subset: self.eval_subset.unwrap_or(100),
            final_attacks: self.final_attacks.unwrap_or_else(|| {
                ["clean", "fgsm", "pgd10", "pgd20", "pgd50"]
                    .iter()
                    .map(|v| v.to_string())
                    .collect()
            }),
            record_timing: self.record_timing.unwrap_or(true),
        };
        config.validate()?;
        Ok(config)
    }
}

/// The JSON manifest written at the start of every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn new(config: TrainConfig) -> RunManifest {
        RunManifest {
            format_version: FORMAT_VERSION,
            config,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!(
                    "manifest format version {} unsupported (expected {FORMAT_VERSION})",
                    manifest.format_version
                ),
            });
        }
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_trace_to_the_stated_values() {
        let cfg = TrainSpec::new(Method::FgsmRs).resolve().unwrap();
        assert_eq!(cfg.epsilon, 8.0 / 255.0);
        assert_eq!(cfg.alpha, 1.25 * 8.0 / 255.0);
        assert_eq!(cfg.optim.lr, 0.1);
        assert_eq!(cfg.optim.weight_decay, 5e-4);
        assert_eq!(cfg.optim.momentum, 0.9);

        let sdi = TrainSpec::new(Method::FgsmSdi).resolve().unwrap();
        assert_eq!(sdi.interval_k, 20);
        assert_eq!(sdi.alpha, 1.25 * 8.0 / 255.0);

        match sdi.schedule {
            Schedule::Multistep { factor, .. } => assert_eq!(factor, 0.1),
            _ => panic!("default schedule is multistep"),
        }
    }

    #[test]
    fn pgd_at_defaults() {
        let cfg = TrainSpec::new(Method::PgdAt).resolve().unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.alpha, 2.0 / 255.0);
        let cfg2 = TrainSpec::new(Method::Pgd2At).resolve().unwrap();
        assert_eq!(cfg2.steps, 2);
        assert_eq!(cfg2.alpha, cfg2.epsilon / 2.0);
        let cfg4 = TrainSpec::new(Method::Pgd4At).resolve().unwrap();
        assert_eq!(cfg4.steps, 4);
        assert_eq!(cfg4.alpha, cfg4.epsilon / 4.0);
    }

    #[test]
    fn milestones_match_the_reference_schedule_at_110_epochs() {
        assert_eq!(default_milestones(110), vec![100, 105]);
        assert_eq!(default_milestones(20), vec![18, 19]);
        // Always strictly below the epoch count.
        for n in 1..200 {
            let ms = default_milestones(n);
            for pair in ms.windows(2) {
                assert!(pair[0] < pair[1]);
            }
            if let Some(&last) = ms.last() {
                assert!(last < n);
            }
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut spec = TrainSpec::new(Method::FgsmRs);
        spec.epochs = Some(0);
        assert!(spec.resolve().is_err());

        let mut spec = TrainSpec::new(Method::FgsmSdi);
        spec.interval_k = Some(0);
        assert!(spec.resolve().is_err());

        let mut spec = TrainSpec::new(Method::FgsmRs);
        spec.epsilon = Some(2.0);
        assert!(spec.resolve().is_err());

        let mut spec = TrainSpec::new(Method::FgsmRs);
        spec.epochs = Some(10);
        spec.schedule = Some(Schedule::Multistep {
            milestones: vec![5, 5],
            factor: 0.1,
        });
        assert!(spec.resolve().is_err());

        let mut spec = TrainSpec::new(Method::FgsmRs);
        spec.epochs = Some(10);
        spec.schedule = Some(Schedule::Multistep {
            milestones: vec![10],
            factor: 0.1,
        });
        assert!(spec.resolve().is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let cfg = TrainSpec::new(Method::FgsmSdi).resolve().unwrap();
        let manifest = RunManifest::new(cfg);
        let dir = std::env::temp_dir().join(format!("advt-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.json");
        manifest.save(&path).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(manifest, loaded);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn method_names_roundtrip() {
        for name in ["pgd-at", "fgsm-at", "fgsm-rs", "fgsm-sdi", "pgd2-at", "pgd4-at"] {
            assert_eq!(Method::parse(name).unwrap().name(), name);
        }
        assert!(Method::parse("free-at").is_err());
    }
}
