//! Dataset manifests, mismatch-split construction, synthetic data, and the
//! two-view augmentation pipeline.

mod augment;
mod manifest;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::vector::ClassLabel;

pub use augment::{augment, augment_pair, bilinear_resize, resize_inputs, AugmentationPolicy, PolicyName};
#[cfg(feature = "images")]
pub use manifest::ImageDirLoader;
pub use manifest::{Loader, Manifest, ManifestRecord, SplitTag};
pub use split::{
    build_cross_dataset_split, build_mismatch_split, CrossDatasetCounts, DatasetSplit, LoadedSplit, MismatchParams,
    Pool, SplitRecord,
};
pub use synthetic::{cifar10_shaped_manifest, GaussianMixture, CIFAR10_CLASSES};

/// Shape of one input sample. Images are stored channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InputShape {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn len(&self) -> usize {
        match *self {
            InputShape::Vector { dim } => dim,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One sample with the label visible to the training path.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub input: Vec<f64>,
    pub label: ClassLabel,
    pub source_id: String,
}
