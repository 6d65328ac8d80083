//! Labeled / unlabeled / validation / test pools under class-distribution
//! mismatch.
//!
//! Labels inside a split live in one compact space: in-distribution classes
//! are `0..C` in `id_classes` order, and out-of-distribution classes follow at
//! `C..C+O`. Only the evaluation side may read the true labels of the
//! unlabeled pool; the training path sees them as [`ClassLabel::UNLABELED`].

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{InputShape, LabeledExample, Loader, Manifest, ManifestRecord, SplitTag};
use crate::error::{Error, Result};
use crate::rng::{RngStreams, SPLIT};
use crate::vector::ClassLabel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub source_id: String,
    /// Which manifest the record came from (0 = primary, 1 = unlabeled source in cross-dataset mode).
    pub manifest: u8,
    pub path: String,
    /// Class index in the originating manifest.
    pub manifest_class: usize,
    /// Label in the split's compact label space.
    pub label: ClassLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Labeled,
    Unlabeled,
    Validation,
    Test,
}

impl std::str::FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Pool::Labeled),
            "unlabeled" => Ok(Pool::Unlabeled),
            "validation" => Ok(Pool::Validation),
            "test" => Ok(Pool::Test),
            other => Err(Error::Misuse(format!(
                "unknown pool {other:?}; expected labeled, unlabeled, validation or test"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    labeled: Vec<SplitRecord>,
    unlabeled: Vec<SplitRecord>,
    validation: Vec<SplitRecord>,
    test: Vec<SplitRecord>,
    /// Manifest class indices of the in-distribution classes, in label order.
    id_classes: Vec<usize>,
    /// Manifest class indices of the out-of-distribution classes.
    ood_classes: Vec<usize>,
    /// Manifest classes occupying the unlabeled pool, in slot order.
    unlabeled_classes: Vec<usize>,
    mismatch_ratio: f64,
}

/// Parameters of the single-dataset, slot-based builder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchParams {
    pub id_classes: Vec<usize>,
    pub ood_classes: Vec<usize>,
    pub mismatch_ratio: f64,
    pub labeled_per_class: usize,
    pub val_per_class: usize,
    pub unlabeled_slots: usize,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn labeled(&self) -> &[SplitRecord] {
        &self.labeled
    }

    pub fn validation(&self) -> &[SplitRecord] {
        &self.validation
    }

    pub fn test(&self) -> &[SplitRecord] {
        &self.test
    }

    /// Unlabeled records with their true labels; for evaluation and reporting only.
    pub fn unlabeled_audit(&self) -> &[SplitRecord] {
        &self.unlabeled
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn pool_audit(&self, pool: Pool) -> &[SplitRecord] {
        match pool {
            Pool::Labeled => &self.labeled,
            Pool::Unlabeled => &self.unlabeled,
            Pool::Validation => &self.validation,
            Pool::Test => &self.test,
        }
    }

    pub fn id_classes(&self) -> &[usize] {
        &self.id_classes
    }

    pub fn ood_classes(&self) -> &[usize] {
        &self.ood_classes
    }

    pub fn unlabeled_classes(&self) -> &[usize] {
        &self.unlabeled_classes
    }

    pub fn num_classes(&self) -> usize {
        self.id_classes.len()
    }

    pub fn mismatch_ratio(&self) -> f64 {
        self.mismatch_ratio
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let split: DatasetSplit = serde_json::from_str(text)?;
        split.check_disjoint()?;
        Ok(split)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in self.labeled.iter().chain(&self.unlabeled).chain(&self.validation).chain(&self.test) {
            if !seen.insert(r.source_id.as_str()) {
                return Err(Error::data(format!("source id {:?} appears in more than one pool slot", r.source_id)));
            }
        }
        Ok(())
    }

    /// Loads every pool through `loaders[record.manifest]`.
    pub fn load(&self, loaders: &[&dyn Loader]) -> Result<LoadedSplit> {
        let shape = loaders.first().ok_or_else(|| Error::data("no loader supplied"))?.shape();
        if loaders.iter().any(|l| l.shape() != shape) {
            return Err(Error::data("loaders disagree on input shape"));
        }
        let load = |records: &[SplitRecord], expose: bool| -> Result<Vec<LabeledExample>> {
            records
                .iter()
                .map(|r| {
                    let loader = loaders
                        .get(usize::from(r.manifest))
                        .ok_or_else(|| Error::data(format!("no loader for manifest {}", r.manifest)))?;
                    let record = ManifestRecord { path: r.path.clone(), class: r.manifest_class, split: SplitTag::Train };
                    let input = loader.load(&record)?;
                    if input.len() != shape.len() {
                        return Err(Error::data(format!("{} loaded {} values, expected {}", r.path, input.len(), shape.len())));
                    }
                    let label = if expose { r.label } else { ClassLabel::UNLABELED };
                    Ok(LabeledExample { input, label, source_id: r.source_id.clone() })
                })
                .collect()
        };
        Ok(LoadedSplit {
            shape,
            labeled: load(&self.labeled, true)?,
            unlabeled: load(&self.unlabeled, false)?,
            unlabeled_audit: self.unlabeled.iter().map(|r| r.label).collect(),
            validation: load(&self.validation, true)?,
            test: load(&self.test, true)?,
            num_classes: self.num_classes(),
        })
    }
}

/// Deterministically shuffled train records of each class.
fn records_by_class(manifest: &Manifest, seed: u64) -> BTreeMap<usize, Vec<&ManifestRecord>> {
    let mut by_class: BTreeMap<usize, Vec<&ManifestRecord>> = BTreeMap::new();
    for r in manifest.records.iter().filter(|r| r.split == SplitTag::Train) {
        by_class.entry(r.class).or_default().push(r);
    }
    let streams = RngStreams::new(seed);
    for (class, records) in by_class.iter_mut() {
        records.shuffle(&mut streams.stream(SPLIT, &[*class as u64]));
    }
    by_class
}

fn check_unique_paths(manifest: &Manifest) -> Result<()> {
    let mut seen = HashSet::new();
    for r in &manifest.records {
        if !seen.insert(r.path.as_str()) {
            return Err(Error::data(format!("duplicate manifest path {:?}", r.path)));
        }
    }
    Ok(())
}

fn record(r: &ManifestRecord, manifest: u8, prefix: &str, label: ClassLabel) -> SplitRecord {
    SplitRecord {
        source_id: format!("{prefix}{}", r.path),
        manifest,
        path: r.path.clone(),
        manifest_class: r.class,
        label,
    }
}

/// Builds a split whose unlabeled pool spans `unlabeled_slots` whole classes,
/// `ratio · slots` of them out-of-distribution.
///
/// In-distribution slots come from the end of `id_classes`, out-of-distribution
/// slots from the front of `ood_classes`. Every class first gives up
/// `labeled_per_class + val_per_class` samples (kept for ID classes, dropped
/// for OOD classes); whatever remains fills the class's unlabeled slot.
pub fn build_mismatch_split(manifest: &Manifest, params: &MismatchParams) -> Result<DatasetSplit> {
    let MismatchParams { id_classes, ood_classes, mismatch_ratio, labeled_per_class, val_per_class, unlabeled_slots, seed } =
        params;
    if id_classes.iter().any(|c| ood_classes.contains(c)) {
        return Err(Error::config("in- and out-of-distribution class sets overlap"));
    }
    let mut uniq = id_classes.clone();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() != id_classes.len() || id_classes.is_empty() {
        return Err(Error::config("in-distribution classes must be a nonempty set"));
    }
    if !(0.0..=1.0).contains(mismatch_ratio) {
        return Err(Error::config(format!("mismatch ratio {mismatch_ratio} outside [0, 1]")));
    }
    let ood_slots_f = mismatch_ratio * *unlabeled_slots as f64;
    if (ood_slots_f - ood_slots_f.round()).abs() > 1e-9 {
        return Err(Error::config(format!(
            "mismatch ratio {mismatch_ratio} × {unlabeled_slots} slots = {ood_slots_f} is not a whole number of class slots"
        )));
    }
    let ood_slots = ood_slots_f.round() as usize;
    let id_slots = unlabeled_slots - ood_slots;
    if id_slots > id_classes.len() || ood_slots > ood_classes.len() {
        return Err(Error::config(format!(
            "{id_slots} ID and {ood_slots} OOD slots requested from {} ID and {} OOD classes",
            id_classes.len(),
            ood_classes.len()
        )));
    }
    check_unique_paths(manifest)?;

    let num_id = id_classes.len();
    let label_of = |class: usize| -> ClassLabel {
        match id_classes.iter().position(|&c| c == class) {
            Some(i) => ClassLabel::class(i),
            None => ClassLabel::class(num_id + ood_classes.iter().position(|&c| c == class).expect("known class")),
        }
    };
    let unlabeled_classes: Vec<usize> =
        id_classes[num_id - id_slots..].iter().chain(&ood_classes[..ood_slots]).copied().collect();

    let by_class = records_by_class(manifest, *seed);
    let carve = labeled_per_class + val_per_class;
    let (mut labeled, mut validation, mut unlabeled) = (Vec::new(), Vec::new(), Vec::new());
    for &class in id_classes.iter().chain(ood_classes) {
        let records = by_class.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        let in_slot = unlabeled_classes.contains(&class);
        let is_id = id_classes.contains(&class);
        if !is_id && !in_slot {
            continue;
        }
        let needed = carve + usize::from(in_slot);
        if records.len() < needed {
            return Err(Error::data(format!(
                "class {class} has {} training samples, {needed} needed",
                records.len()
            )));
        }
        let label = label_of(class);
        if is_id {
            labeled.extend(records[..*labeled_per_class].iter().map(|r| record(r, 0, "", label)));
            validation.extend(records[*labeled_per_class..carve].iter().map(|r| record(r, 0, "", label)));
        }
        if in_slot {
            unlabeled.extend(records[carve..].iter().map(|r| record(r, 0, "", label)));
        }
    }
    // Unlabeled pool ordered by slot so the descriptor reads like the slot table.
    unlabeled.sort_by_key(|r| unlabeled_classes.iter().position(|&c| c == r.manifest_class));

    let test = manifest
        .records
        .iter()
        .filter(|r| r.split == SplitTag::Test && id_classes.contains(&r.class))
        .map(|r| record(r, 0, "", label_of(r.class)))
        .collect();

    let split = DatasetSplit {
        labeled,
        unlabeled,
        validation,
        test,
        id_classes: id_classes.clone(),
        ood_classes: ood_classes.clone(),
        unlabeled_classes,
        mismatch_ratio: if *unlabeled_slots == 0 { 0.0 } else { ood_slots as f64 / *unlabeled_slots as f64 },
    };
    split.check_disjoint()?;
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossDatasetCounts {
    pub labeled_per_class: usize,
    pub val_per_class: usize,
}

/// Labeled, validation and test pools from one manifest; the whole training
/// portion of a second manifest becomes the unlabeled pool.
///
/// Source ids are prefixed `L:` and `U:` so the two manifests never collide.
/// Unlabeled audit labels sit after the `C` labeled classes, offset by the
/// second manifest's class index. The mismatch ratio is recorded as declared.
pub fn build_cross_dataset_split(
    labeled_manifest: &Manifest,
    unlabeled_manifest: &Manifest,
    declared_mismatch_ratio: f64,
    counts: CrossDatasetCounts,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&declared_mismatch_ratio) {
        return Err(Error::config(format!("mismatch ratio {declared_mismatch_ratio} outside [0, 1]")));
    }
    check_unique_paths(labeled_manifest)?;
    check_unique_paths(unlabeled_manifest)?;
    let id_classes = labeled_manifest.classes();
    let num_id = id_classes.len();
    let by_class = records_by_class(labeled_manifest, seed);
    let carve = counts.labeled_per_class + counts.val_per_class;
    let (mut labeled, mut validation) = (Vec::new(), Vec::new());
    for (i, &class) in id_classes.iter().enumerate() {
        let records = by_class.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        if records.len() < carve {
            return Err(Error::data(format!("class {class} has {} training samples, {carve} needed", records.len())));
        }
        let label = ClassLabel::class(i);
        labeled.extend(records[..counts.labeled_per_class].iter().map(|r| record(r, 0, "L:", label)));
        validation.extend(records[counts.labeled_per_class..carve].iter().map(|r| record(r, 0, "L:", label)));
    }
    let test = labeled_manifest
        .records
        .iter()
        .filter(|r| r.split == SplitTag::Test)
        .map(|r| record(r, 0, "L:", ClassLabel::class(id_classes.binary_search(&r.class).expect("known class"))))
        .collect();
    let unlabeled = unlabeled_manifest
        .records
        .iter()
        .filter(|r| r.split == SplitTag::Train)
        .map(|r| record(r, 1, "U:", ClassLabel::class(num_id + r.class)))
        .collect();
    let split = DatasetSplit {
        labeled,
        unlabeled,
        validation,
        test,
        id_classes,
        ood_classes: Vec::new(),
        unlabeled_classes: unlabeled_manifest.classes(),
        mismatch_ratio: declared_mismatch_ratio,
    };
    split.check_disjoint()?;
    Ok(split)
}

/// A split with inputs in memory.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub shape: InputShape,
    pub labeled: Vec<LabeledExample>,
    /// Inputs of the unlabeled pool; every label is `UNLABELED`.
    pub unlabeled: Vec<LabeledExample>,
    unlabeled_audit: Vec<ClassLabel>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub num_classes: usize,
}

impl LoadedSplit {
    /// The training stream `D_L ∪ D_U` with exposed labels.
    pub fn training_pool(&self) -> Vec<&LabeledExample> {
        self.labeled.iter().chain(&self.unlabeled).collect()
    }

    /// True labels of the unlabeled pool, index-aligned with `unlabeled`.
    pub fn unlabeled_audit(&self) -> &[ClassLabel] {
        &self.unlabeled_audit
    }

    /// Examples of a pool with true labels (unlabeled pool uses the audit labels).
    pub fn pool_with_audit_labels(&self, pool: Pool) -> Vec<LabeledExample> {
        match pool {
            Pool::Labeled => self.labeled.clone(),
            Pool::Validation => self.validation.clone(),
            Pool::Test => self.test.clone(),
            Pool::Unlabeled => self
                .unlabeled
                .iter()
                .zip(&self.unlabeled_audit)
                .map(|(e, l)| LabeledExample { label: *l, ..e.clone() })
                .collect(),
        }
    }
}
