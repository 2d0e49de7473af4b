//! Run orchestration: builds datasets from a config, executes training,
//! and persists the manifest, metrics CSV, and checkpoints into a run
//! directory. The CLI is a thin wrapper over these entry points.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{evaluate_robust_accuracy, AttackOutcome, EvalAttack};
use crate::checkpoint::{load_params, params_to_tensors, read_checkpoint, write_checkpoint};
use crate::config::{DatasetConfig, Method, RunManifest, TrainConfig};
use crate::data::{load_cifar_binary, synth_dataset, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::landscape::{export_landscape, write_grid, LandscapeGrid};
use crate::metrics::{write_csv, MetricsRecord};
use crate::models::{GeneratorArch, GeneratorNet, TargetNet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{train, TrainOutput};

/// Environment variable selecting the default data directory for
/// CIFAR-style datasets.
pub const DATA_DIR_ENV: &str = "ADVT_DATA_DIR";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.advt";
pub const LAST_CHECKPOINT: &str = "last.advt";

/// Builds the train/test datasets described by a config.
pub fn load_datasets<S: Scalar>(dataset: &DatasetConfig) -> Result<(Dataset<S>, Dataset<S>)> {
    match dataset {
        DatasetConfig::Synth { .. } => {
            let train_spec = dataset.train_synth_spec().expect("synth config");
            let test_spec = dataset.test_synth_spec().expect("synth config");
            Ok((
                synth_dataset(&train_spec, "train")?,
                synth_dataset(&test_spec, "test")?,
            ))
        }
        DatasetConfig::Cifar10 {
            dir,
            train_records,
            test_records,
        } => {
            let dir = PathBuf::from(dir);
            let mut remaining = *train_records;
            let mut train: Option<Dataset<S>> = None;
            for name in [
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ] {
                if remaining == Some(0) {
                    break;
                }
                let path = dir.join(name);
                if !path.exists() && train.is_some() && train_records.is_none() {
                    break;
                }
                let part = load_cifar_binary::<S>(&path, compute_part(&path, remaining)?)?;
                if let Some(r) = remaining.as_mut() {
                    *r -= part.len();
                }
                train = Some(match train {
                    None => part,
                    Some(acc) => concat_datasets(acc, part)?,
                });
            }
            let train = train.ok_or_else(|| Error::Dataset("no CIFAR train batches found".into()))?;
            let mut test = load_cifar_binary::<S>(&dir.join("test_batch.bin"), *test_records)?;
            test.split = "test".into();
            Ok((train, test))
        }
        DatasetConfig::Files { train, test } => Ok((
            read_dataset_file(Path::new(train))?,
            read_dataset_file(Path::new(test))?,
        )),
    }
}

/// Caps a per-file record request at the records left to read.
fn compute_part(path: &Path, remaining: Option<usize>) -> Result<Option<usize>> {
    match remaining {
        None => Ok(None),
        Some(want) => {
            let meta = std::fs::metadata(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let available = meta.len() as usize / 3073;
            Ok(Some(want.min(available)))
        }
    }
}

fn concat_datasets<S: Scalar>(a: Dataset<S>, b: Dataset<S>) -> Result<Dataset<S>> {
    if a.image_shape() != b.image_shape() {
        return Err(Error::Dataset("cannot concatenate mismatched datasets".into()));
    }
    let [c, h, w] = a.image_shape();
    let mut data = a.images.into_data();
    data.extend_from_slice(b.images.data());
    let mut labels = a.labels;
    labels.extend_from_slice(&b.labels);
    let total = labels.len();
    Ok(Dataset {
        images: Tensor::new(vec![total, c, h, w], data),
        labels,
        num_classes: a.num_classes,
        split: a.split,
        provenance: a.provenance,
    })
}

/// Summary of a finished training run.
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub best_epoch: usize,
    pub last_epoch: usize,
    pub overfit_epoch: Option<usize>,
    pub metrics: Vec<MetricsRecord>,
}

/// Executes a training run: writes `manifest.json` up front, then
/// `metrics.csv`, `best.advt`, and `last.advt` into `out_dir`.
pub fn run_train<S: Scalar>(cfg: &TrainConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    RunManifest::new(cfg.clone()).save(&out_dir.join(MANIFEST_FILE))?;

    let (train_set, test_set) = load_datasets::<S>(&cfg.dataset)?;
    let output = train(cfg, &train_set, &test_set)?;
    persist_run(cfg, out_dir, &output)?;
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        best_epoch: output.best_epoch,
        last_epoch: output.last_epoch,
        overfit_epoch: output.overfit_epoch,
        metrics: output.metrics,
    })
}

fn persist_run<S: Scalar>(cfg: &TrainConfig, out_dir: &Path, output: &TrainOutput<S>) -> Result<()> {
    write_csv(&out_dir.join(METRICS_FILE), &output.metrics)?;

    let mut best = params_to_tensors("target", &output.best_target_params);
    if let Some(gen_params) = &output.best_gen_params {
        best.extend(params_to_tensors("gen", gen_params));
    }
    write_checkpoint(&out_dir.join(BEST_CHECKPOINT), &best)?;

    let mut last = params_to_tensors("target", output.net.params());
    if let Some(generator) = &output.generator {
        last.extend(params_to_tensors("gen", generator.params()));
    }
    write_checkpoint(&out_dir.join(LAST_CHECKPOINT), &last)?;
    let _ = cfg;
    Ok(())
}

/// Loads the target network stored in a checkpoint, using the run
/// manifest in the same directory for the architecture.
pub fn load_target_checkpoint<S: Scalar>(
    checkpoint: &Path,
) -> Result<(TargetNet<S>, TrainConfig)> {
    let dir = checkpoint.parent().ok_or_else(|| Error::Config(format!(
        "checkpoint {} has no parent directory",
        checkpoint.display()
    )))?;
    let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    let cfg = manifest.config;
    let (_, test_set) = load_datasets::<S>(&cfg.dataset)?;
    let in_shape = test_set.image_shape();
    let classes = test_set.num_classes;
    let mut net: TargetNet<S> = TargetNet::new(cfg.arch.clone(), in_shape, classes);
    let tensors = read_checkpoint::<S>(checkpoint)?;
    load_params(
        "target",
        &tensors,
        net.params_mut(),
        &checkpoint.display().to_string(),
    )?;
    Ok((net, cfg))
}

/// Loads the generator stored alongside a target checkpoint, if present.
pub fn load_generator_checkpoint<S: Scalar>(
    checkpoint: &Path,
    image_channels: usize,
) -> Result<Option<GeneratorNet<S>>> {
    let tensors = read_checkpoint::<S>(checkpoint)?;
    if !tensors.iter().any(|(name, _)| name.starts_with("gen.")) {
        return Ok(None);
    }
    let mut generator: GeneratorNet<S> =
        GeneratorNet::new(GeneratorArch::for_channels(image_channels))?;
    load_params(
        "gen",
        &tensors,
        generator.params_mut(),
        &checkpoint.display().to_string(),
    )?;
    Ok(Some(generator))
}

/// Evaluates a checkpoint under the named attacks on the run's test set.
pub fn run_eval<S: Scalar>(checkpoint: &Path, attacks: &[String]) -> Result<Vec<AttackOutcome>> {
    let (net, cfg) = load_target_checkpoint::<S>(checkpoint)?;
    let (_, test_set) = load_datasets::<S>(&cfg.dataset)?;
    let parsed: Vec<EvalAttack> = attacks
        .iter()
        .map(|name| EvalAttack::parse(name))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1);
    evaluate_robust_accuracy(&net, &test_set, &parsed, cfg.epsilon, &mut rng)
}

/// Exports a loss-landscape grid around the first test batch of a
/// checkpoint's dataset.
pub fn run_landscape<S: Scalar>(
    checkpoint: &Path,
    resolution: usize,
    batch_size: usize,
    out_file: &Path,
) -> Result<LandscapeGrid> {
    let (net, cfg) = load_target_checkpoint::<S>(checkpoint)?;
    let (_, test_set) = load_datasets::<S>(&cfg.dataset)?;
    let subset = test_set.head(batch_size.min(test_set.len()));
    let order: Vec<usize> = (0..subset.len()).collect();
    let batch = subset.gather(&order);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a9d);
    let grid = export_landscape(&net, &batch, cfg.epsilon, resolution, &mut rng)?;
    write_grid(out_file, &grid)?;
    Ok(grid)
}

// ── Dataset container files ─────────────────────────────────────────

/// Writes a dataset as a tensor container: `images` as `[M,C,H,W]` and
/// `labels` as an `[M]` tensor of class indices.
pub fn write_dataset_file<S: Scalar>(path: &Path, dataset: &Dataset<S>) -> Result<()> {
    let labels = Tensor::<S>::from_f64(
        vec![dataset.len()],
        &dataset.labels.iter().map(|&l| l as f64).collect::<Vec<_>>(),
    );
    write_checkpoint(
        path,
        &[
            ("images".to_string(), dataset.images.clone()),
            ("labels".to_string(), labels),
        ],
    )
}

pub fn read_dataset_file<S: Scalar>(path: &Path) -> Result<Dataset<S>> {
    let tensors = read_checkpoint::<S>(path)?;
    let images = tensors
        .iter()
        .find(|(n, _)| n == "images")
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            detail: "missing 'images' tensor".into(),
        })?;
    let labels_t = tensors
        .iter()
        .find(|(n, _)| n == "labels")
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            detail: "missing 'labels' tensor".into(),
        })?;
    if images.shape().len() != 4 || labels_t.shape() != [images.shape()[0]] {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!(
                "bad dataset shapes: images {:?}, labels {:?}",
                images.shape(),
                labels_t.shape()
            ),
        });
    }
    let labels: Vec<usize> = labels_t.iter().map(|v| v.to_f64_lossy() as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        images,
        labels,
        num_classes,
        split: "file".into(),
        provenance: crate::data::Provenance::File {
            path: path.display().to_string(),
        },
    })
}

/// Synthesizes a dataset and writes it as a container file.
pub fn run_synth_data<S: Scalar>(spec: &SynthSpec, out: &Path) -> Result<Dataset<S>> {
    let dataset = synth_dataset::<S>(spec, "train")?;
    write_dataset_file(out, &dataset)?;
    Ok(dataset)
}

/// True when this training method uses a generator.
pub fn method_uses_generator(method: Method) -> bool {
    matches!(method, Method::FgsmSdi)
}
