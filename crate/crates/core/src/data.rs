//! Datasets: deterministic synthetic image classes, the CIFAR-10 binary
//! record format, and batching.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::{clamp_value, Tensor};

/// Where a dataset came from; recorded in run manifests so a run can be
/// reproduced from the manifest alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum Provenance {
    Synthetic { spec: SynthSpec },
    CifarBinary { path: String, records: Option<usize> },
    File { path: String },
}

/// A labelled image set: `[M, C, H, W]` pixels in `[0, 1]` plus integer
/// labels.
#[derive(Debug, Clone)]
pub struct Dataset<S> {
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
    pub provenance: Provenance,
}

/// One training/attack unit: paired images and labels.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let shape = self.images.shape();
        [shape[1], shape[2], shape[3]]
    }

    fn example_len(&self) -> usize {
        let [c, h, w] = self.image_shape();
        c * h * w
    }

    /// Copies the examples at `indices` into a batch.
    pub fn gather(&self, indices: &[usize]) -> Batch<S> {
        let n = self.example_len();
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        Batch {
            images: Tensor::new(vec![indices.len(), c, h, w], data),
            labels,
        }
    }

    /// First `count` examples as a sub-dataset (fixed evaluation subsets).
    pub fn head(&self, count: usize) -> Dataset<S> {
        let count = count.min(self.len());
        let batch = self.gather(&(0..count).collect::<Vec<_>>());
        Dataset {
            images: batch.images,
            labels: batch.labels,
            num_classes: self.num_classes,
            split: self.split.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Sequential batches over `order`.
    pub fn batches<'a>(&'a self, order: &'a [usize], batch_size: usize) -> BatchIter<'a, S> {
        assert!(batch_size > 0);
        BatchIter {
            dataset: self,
            order,
            batch_size,
            next: 0,
        }
    }

    fn validate(self) -> Result<Dataset<S>> {
        if self.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        if self
            .images
            .iter()
            .any(|&v| !(v >= S::zero() && v <= S::one()))
        {
            return Err(Error::Dataset("pixel outside [0, 1]".into()));
        }
        Ok(self)
    }
}

pub struct BatchIter<'a, S> {
    dataset: &'a Dataset<S>,
    order: &'a [usize],
    batch_size: usize,
    next: usize,
}

impl<'a, S: Scalar> Iterator for BatchIter<'a, S> {
    type Item = Batch<S>;

    fn next(&mut self) -> Option<Batch<S>> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let batch = self.dataset.gather(&self.order[self.next..end]);
        self.next = end;
        Some(batch)
    }
}

/// Deterministic shuffle of `0..len` for one epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..len).collect();
    // Fisher-Yates.
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

// ── Synthetic data ──────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub size: usize,
    /// `[C, H, W]`.
    pub dims: [usize; 3],
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn desk(split_size: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            classes: 10,
            size: split_size,
            dims: [3, 16, 16],
            noise: 0.2,
            seed,
        }
    }
}

/// Builds a balanced synthetic dataset: one random template per class in
/// `[0,1]`, each sample the template plus clamped uniform noise. Fully
/// determined by the spec.
pub fn synth_dataset<S: Scalar>(spec: &SynthSpec, split: &str) -> Result<Dataset<S>> {
    let [c, h, w] = spec.dims;
    let example = c * h * w;
    if spec.classes == 0 || example == 0 {
        return Err(Error::Config("synthetic spec needs classes and dims".into()));
    }
    if spec.size == 0 || spec.size % spec.classes != 0 {
        return Err(Error::Config(format!(
            "synthetic size {} not divisible by {} classes",
            spec.size, spec.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates: Vec<Vec<S>> = (0..spec.classes)
        .map(|_| (0..example).map(|_| s(rng.gen_range(0.0..=1.0))).collect())
        .collect();

    let mut data = Vec::with_capacity(spec.size * example);
    let mut labels = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let class = i % spec.classes;
        labels.push(class);
        for &t in &templates[class] {
            let noisy = if spec.noise > 0.0 {
                t + s(rng.gen_range(-spec.noise..=spec.noise))
            } else {
                t
            };
            data.push(clamp_value(noisy, S::zero(), S::one()));
        }
    }
    Dataset {
        images: Tensor::new(vec![spec.size, c, h, w], data),
        labels,
        num_classes: spec.classes,
        split: split.to_string(),
        provenance: Provenance::Synthetic { spec: spec.clone() },
    }
    .validate()
}

// ── CIFAR-10 binary format ──────────────────────────────────────────

const CIFAR_DIMS: [usize; 3] = [3, 32, 32];
const CIFAR_RECORD: usize = 1 + 3072;

/// Parses CIFAR-10 binary records: per record one label byte then 3072
/// pixel bytes (1024 per channel, row-major), scaled to `[0,1]` by 1/255.
/// `records` limits how many records to read; requesting more than the
/// file holds is an error.
pub fn load_cifar_binary<S: Scalar>(path: &Path, records: Option<usize>) -> Result<Dataset<S>> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_cifar_records(&bytes, records, &path.display().to_string())
}

/// Record parser split out so tests can feed synthesized bytes.
pub fn parse_cifar_records<S: Scalar>(
    bytes: &[u8],
    records: Option<usize>,
    path: &str,
) -> Result<Dataset<S>> {
    let available = bytes.len() / CIFAR_RECORD;
    let wanted = records.unwrap_or(available);
    if wanted == 0 {
        return Err(Error::Dataset(format!("{path}: no records requested")));
    }
    if wanted * CIFAR_RECORD > bytes.len() {
        return Err(Error::Format {
            path: path.into(),
            detail: format!(
                "requested {wanted} records but data truncates at byte offset {}",
                bytes.len()
            ),
        });
    }
    if records.is_none() && bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            path: path.into(),
            detail: format!(
                "trailing partial record at byte offset {}",
                available * CIFAR_RECORD
            ),
        });
    }
    let [c, h, w] = CIFAR_DIMS;
    let scale = s::<S>(1.0 / 255.0);
    let mut labels = Vec::with_capacity(wanted);
    let mut data = Vec::with_capacity(wanted * 3072);
    for r in 0..wanted {
        let base = r * CIFAR_RECORD;
        let label = bytes[base] as usize;
        if label > 9 {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("label byte {label} > 9 at byte offset {base}"),
            });
        }
        labels.push(label);
        for &b in &bytes[base + 1..base + CIFAR_RECORD] {
            data.push(s::<S>(b as f64) * scale);
        }
    }
    Dataset {
        images: Tensor::new(vec![wanted, c, h, w], data),
        labels,
        num_classes: 10,
        split: "train".into(),
        provenance: Provenance::CifarBinary {
            path: path.into(),
            records,
        },
    }
    .validate()
}

/// Serializes a dataset into CIFAR-10 binary records (images must be
/// 3x32x32); the inverse of [`parse_cifar_records`] up to the 1/255
/// quantization.
pub fn to_cifar_bytes<S: Scalar>(dataset: &Dataset<S>) -> Result<Vec<u8>> {
    if dataset.image_shape() != CIFAR_DIMS {
        return Err(Error::Dataset(format!(
            "CIFAR binary needs 3x32x32 images, got {:?}",
            dataset.image_shape()
        )));
    }
    let mut bytes = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for i in 0..dataset.len() {
        bytes.push(dataset.labels[i] as u8);
        let ex = &dataset.images.data()[i * 3072..(i + 1) * 3072];
        for &v in ex {
            let q = (v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0);
            bytes.push(q as u8);
        }
    }
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let spec = SynthSpec {
            classes: 4,
            size: 40,
            dims: [3, 4, 4],
            noise: 0.1,
            seed: 5,
        };
        let a: Dataset<f32> = synth_dataset(&spec, "train").unwrap();
        let b: Dataset<f32> = synth_dataset(&spec, "train").unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        for class in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 10);
        }
        assert!(a.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synth_zero_noise_repeats_template() {
        let spec = SynthSpec {
            classes: 2,
            size: 6,
            dims: [1, 2, 2],
            noise: 0.0,
            seed: 1,
        };
        let d: Dataset<f64> = synth_dataset(&spec, "train").unwrap();
        // Samples 0, 2, 4 share class 0 and must be identical.
        let ex = |i: usize| &d.images.data()[i * 4..(i + 1) * 4];
        assert_eq!(ex(0), ex(2));
        assert_eq!(ex(0), ex(4));
        assert_eq!(ex(1), ex(3));
    }

    #[test]
    fn synth_rejects_unbalanced_size() {
        let spec = SynthSpec {
            classes: 3,
            size: 10,
            dims: [1, 2, 2],
            noise: 0.0,
            seed: 1,
        };
        assert!(synth_dataset::<f32>(&spec, "train").is_err());
    }

    #[test]
    fn cifar_roundtrip_and_scaling() {
        // Record with label 3 and all pixel bytes 255 -> pixels 1.0.
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat(255u8).take(3072));
        // Second record, label 9, zeros.
        bytes.push(9);
        bytes.extend(std::iter::repeat(0u8).take(3072));

        let d: Dataset<f32> = parse_cifar_records(&bytes, None, "mem").unwrap();
        assert_eq!(d.labels, vec![3, 9]);
        assert!(d.images.data()[..3072].iter().all(|&v| v == 1.0));
        assert!(d.images.data()[3072..].iter().all(|&v| v == 0.0));

        let back = to_cifar_bytes(&d).unwrap();
        assert_eq!(back, bytes);
    }

    #[test]
    fn cifar_request_beyond_file_fails() {
        let bytes = vec![0u8; 2 * CIFAR_RECORD];
        assert!(parse_cifar_records::<f32>(&bytes, Some(5), "mem").is_err());
        assert!(parse_cifar_records::<f32>(&bytes, Some(2), "mem").is_ok());
    }

    #[test]
    fn cifar_truncation_names_offset() {
        let bytes = vec![0u8; CIFAR_RECORD + 100];
        let err = parse_cifar_records::<f32>(&bytes, None, "mem").unwrap_err();
        assert!(err.to_string().contains(&CIFAR_RECORD.to_string()), "{err}");
    }

    #[test]
    fn cifar_bad_label_rejected() {
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 10;
        assert!(parse_cifar_records::<f32>(&bytes, None, "mem").is_err());
    }

    #[test]
    fn epoch_order_is_permutation_and_seeded() {
        let a = epoch_order(100, 7, 3);
        let b = epoch_order(100, 7, 3);
        let c = epoch_order(100, 7, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }
}
