//! Desk-scale data: CIFAR-10-shaped manifests and isotropic Gaussian class
//! clusters.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{InputShape, Loader, Manifest, ManifestRecord, SplitTag};
use crate::error::{Error, Result};
use crate::rng::{stable_hash, RngStreams, SYNTHETIC};

/// CIFAR-10 class names in dataset index order.
pub const CIFAR10_CLASSES: [&str; 10] =
    ["airplane", "car", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];

/// Index-only manifest with CIFAR-10's layout: 5,000 training and 1,000 test
/// samples for each of the ten classes.
pub fn cifar10_shaped_manifest() -> Manifest {
    let mut records = Vec::with_capacity(60_000);
    for (class, name) in CIFAR10_CLASSES.iter().enumerate() {
        for (split, count) in [(SplitTag::Train, 5000), (SplitTag::Test, 1000)] {
            records.extend((0..count).map(|i| ManifestRecord { path: format!("{split}/{name}/{i:04}.png"), class, split }));
        }
    }
    Manifest { records }
}

/// Isotropic Gaussian clusters, one per class, in `dim` dimensions.
///
/// Class centers are independent random directions scaled so that the
/// expected distance between two centers is `separation`; each sample adds
/// unit-variance noise per coordinate. Samples are regenerated from their
/// manifest path, so the manifest alone pins the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl GaussianMixture {
    pub fn manifest(&self) -> Manifest {
        let mut records = Vec::new();
        for class in 0..self.classes {
            for (split, count) in [(SplitTag::Train, self.train_per_class), (SplitTag::Test, self.test_per_class)] {
                records.extend((0..count).map(|i| ManifestRecord { path: format!("gauss/{class}/{split}/{i}"), class, split }));
            }
        }
        Manifest { records }
    }

    pub fn center(&self, class: usize) -> Vec<f64> {
        let mut rng = RngStreams::new(self.seed).stream(SYNTHETIC, &[0, class as u64]);
        let raw: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let radius = self.separation / std::f64::consts::SQRT_2;
        raw.into_iter().map(|v| v / norm * radius).collect()
    }
}

impl Loader for GaussianMixture {
    fn shape(&self) -> InputShape {
        InputShape::Vector { dim: self.dim }
    }

    fn load(&self, record: &ManifestRecord) -> Result<Vec<f64>> {
        if record.class >= self.classes {
            return Err(Error::data(format!("class {} outside the {}-class mixture", record.class, self.classes)));
        }
        let mut rng = RngStreams::new(self.seed).stream(SYNTHETIC, &[1, stable_hash(record.path.as_bytes())]);
        Ok(self
            .center(record.class)
            .into_iter()
            .map(|c| c + self.noise * rng.sample::<f64, _>(StandardNormal))
            .collect())
    }
}
