//! Loss-landscape slices along an adversarial direction `r1` and a
//! Rademacher direction `r2`, exported as a diff-friendly text grid.

use std::path::Path;

use rand::Rng;

use crate::attacks::{loss_at, loss_input_grad};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::TargetNet;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Loss values over `x + a*r1 + b*r2` for `a, b` evenly spaced in
/// `[-1, 1]`; `values[i * resolution + j]` holds the loss at
/// `(a_i, b_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub resolution: usize,
    pub epsilon: f64,
    pub values: Vec<f64>,
}

impl LandscapeGrid {
    pub fn origin_value(&self) -> f64 {
        let mid = (self.resolution - 1) / 2;
        self.values[mid * self.resolution + mid]
    }
}

/// Grid coordinate `(2i - (res-1)) / (res-1)`; exactly 0 at the center.
fn coeff(i: usize, resolution: usize) -> f64 {
    (2.0 * i as f64 - (resolution - 1) as f64) / (resolution - 1) as f64
}

/// Evaluates the eval-mode mean loss over the grid. `r1` is the signed
/// input gradient scaled by ε; `r2` has entries ±ε equiprobably.
/// `resolution` must be odd so the clean input is a grid point.
pub fn export_landscape<S: Scalar, R: Rng>(
    net: &TargetNet<S>,
    batch: &Batch<S>,
    epsilon: f64,
    resolution: usize,
    rng: &mut R,
) -> Result<LandscapeGrid> {
    if resolution % 2 == 0 || resolution < 3 {
        return Err(Error::Config(format!(
            "landscape resolution must be odd and >= 3, got {resolution}"
        )));
    }
    let (_, grad) = loss_input_grad(net, &batch.images, &batch.labels)?;
    let r1 = grad.sign().scale(s(epsilon));
    let eps = s::<S>(epsilon);
    let r2_data: Vec<S> = (0..batch.images.len())
        .map(|_| if rng.gen::<bool>() { eps } else { -eps })
        .collect();
    let r2 = Tensor::new(batch.images.shape().to_vec(), r2_data);

    let mut values = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        let a = s::<S>(coeff(i, resolution));
        let shifted = batch.images.add(&r1.scale(a))?;
        for j in 0..resolution {
            let b = s::<S>(coeff(j, resolution));
            let point = shifted.add(&r2.scale(b))?;
            let loss = loss_at(net, &point, &batch.labels)?;
            values.push(loss.to_f64_lossy());
        }
    }
    Ok(LandscapeGrid {
        resolution,
        epsilon,
        values,
    })
}

/// Text format: header line `resolution epsilon`, then `resolution` rows
/// of `resolution` space-separated loss values.
pub fn grid_to_text(grid: &LandscapeGrid) -> String {
    let mut text = format!("{} {}\n", grid.resolution, grid.epsilon);
    for row in grid.values.chunks(grid.resolution) {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&fields.join(" "));
        text.push('\n');
    }
    text
}

pub fn write_grid(path: &Path, grid: &LandscapeGrid) -> Result<()> {
    std::fs::write(path, grid_to_text(grid)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn parse_grid(text: &str) -> Result<LandscapeGrid> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Dataset("empty landscape file".into()))?;
    let mut parts = header.split_whitespace();
    let resolution: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Dataset("bad landscape header".into()))?;
    let epsilon: f64 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Dataset("bad landscape header".into()))?;
    let mut values = Vec::with_capacity(resolution * resolution);
    for line in lines {
        for field in line.split_whitespace() {
            values.push(
                field
                    .parse()
                    .map_err(|_| Error::Dataset(format!("bad landscape value '{field}'")))?,
            );
        }
    }
    if values.len() != resolution * resolution {
        return Err(Error::Dataset(format!(
            "landscape grid has {} values, expected {}",
            values.len(),
            resolution * resolution
        )));
    }
    Ok(LandscapeGrid {
        resolution,
        epsilon,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{TargetArch, TargetNet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (TargetNet<f64>, Batch<f64>) {
        let net = TargetNet::init(TargetArch::Linear, [1, 3, 3], 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = Batch {
            images: Tensor::uniform(vec![4, 1, 3, 3], 0.2, 0.8, &mut rng),
            labels: vec![0, 1, 0, 1],
        };
        (net, batch)
    }

    #[test]
    fn origin_equals_clean_loss() {
        let (net, batch) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grid = export_landscape(&net, &batch, 8.0 / 255.0, 5, &mut rng).unwrap();
        let clean = loss_at(&net, &batch.images, &batch.labels).unwrap();
        assert!((grid.origin_value() - clean).abs() < 1e-12);
        assert_eq!(grid.values.len(), 25);
        assert!(grid.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn even_resolution_rejected() {
        let (net, batch) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(export_landscape(&net, &batch, 0.03, 4, &mut rng).is_err());
        assert!(export_landscape(&net, &batch, 0.03, 1, &mut rng).is_err());
    }

    #[test]
    fn text_roundtrip() {
        let (net, batch) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grid = export_landscape(&net, &batch, 0.05, 5, &mut rng).unwrap();
        let parsed = parse_grid(&grid_to_text(&grid)).unwrap();
        assert_eq!(grid, parsed);
    }

    #[test]
    fn coeff_center_is_exactly_zero() {
        for res in [3usize, 5, 21, 41] {
            assert_eq!(coeff((res - 1) / 2, res), 0.0);
            assert_eq!(coeff(0, res), -1.0);
            assert_eq!(coeff(res - 1, res), 1.0);
        }
    }
}
