//! Experiment description files.
//!
//! An experiment is a TOML document:
//!
//! ```toml
//! name = "desk"
//! architecture = "tiny-mlp"
//! hidden = 64
//! seeds = [0, 1, 2, 3, 4]
//!
//! [train]
//! preset = "desk"
//! alpha = 2.0
//!
//! [data]
//! kind = "gaussian"
//! classes = 8
//! # ...
//!
//! [split]
//! kind = "mismatch"
//! # ...
//! ```
//!
//! Keys of `[train]` not given in the file come from the named preset.
//! Command-line overrides are `key=value` pairs applied before parsing; a bare
//! key naming a training field means `train.key`, anything else is a dotted
//! path from the document root.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ScheduleEnd, TrainConfig};
use crate::data::{
    build_cross_dataset_split, build_mismatch_split, CrossDatasetCounts, DatasetSplit, GaussianMixture, LoadedSplit,
    Loader, Manifest, MismatchParams, Pool,
};
use crate::encoder::{ArchitectureSpec, SMALL_CONV, TINY_MLP};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "IDCONTRAST_OUTPUT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

const TRAIN_KEYS: [&str; 13] = [
    "temperature",
    "momentum",
    "queue_size",
    "batch_size",
    "alpha",
    "t_end",
    "total_epochs",
    "base_lr",
    "optimizer_momentum",
    "embedding_dim",
    "ghost_subbatches",
    "seed",
    "monitor_every",
];

/// Where inputs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// Samples regenerated on demand from a seeded mixture.
    Gaussian(GaussianMixture),
    /// Image files listed in tab-separated manifests. The unlabeled manifest is
    /// only read by cross-dataset splits.
    Images {
        manifest: PathBuf,
        root: PathBuf,
        height: usize,
        width: usize,
        #[serde(default)]
        unlabeled_manifest: Option<PathBuf>,
        #[serde(default)]
        unlabeled_root: Option<PathBuf>,
    },
}

/// How the four pools are carved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitSource {
    Mismatch(MismatchParams),
    CrossDataset {
        mismatch_ratio: f64,
        labeled_per_class: usize,
        val_per_class: usize,
        seed: u64,
    },
    /// A descriptor written earlier by `prepare-data`.
    File { path: PathBuf },
}

/// Which accuracy a sweep cell reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    Knn5,
    Knn200,
    LinearProbe,
    FineTune,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Knn5 => "knn5",
            Metric::Knn200 => "knn200",
            Metric::LinearProbe => "linear_probe",
            Metric::FineTune => "fine_tune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalPlan {
    pub knn: Vec<usize>,
    /// Pool whose items are classified; the labeled pool is the reference.
    pub query_pool: Pool,
    pub linear_probe: bool,
    pub fine_tune: bool,
    pub probe_epochs: u32,
    pub probe_lr: f64,
    pub finetune_epochs: u32,
    pub finetune_lr: f64,
    pub probe_batch_size: usize,
}

impl Default for EvalPlan {
    fn default() -> Self {
        let probe = ProbeConfig::linear_probe();
        let ft = ProbeConfig::fine_tune();
        Self {
            knn: vec![5, 200],
            query_pool: Pool::Test,
            linear_probe: false,
            fine_tune: false,
            probe_epochs: probe.epochs,
            probe_lr: probe.base_lr,
            finetune_epochs: ft.epochs,
            finetune_lr: ft.base_lr,
            probe_batch_size: probe.batch_size,
        }
    }
}

impl EvalPlan {
    pub fn probe_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe_epochs,
            base_lr: self.probe_lr,
            batch_size: self.probe_batch_size,
            seed,
            ..ProbeConfig::linear_probe()
        }
    }

    pub fn finetune_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            epochs: self.finetune_epochs,
            base_lr: self.finetune_lr,
            batch_size: self.probe_batch_size,
            seed,
            ..ProbeConfig::fine_tune()
        }
    }
}

/// The α × t_end grid. A MoCo (α = 0) row is always added.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub t_ends: Vec<ScheduleEnd>,
    pub metric: Metric,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            alphas: vec![0.25, 0.5, 1.0, 2.0, 3.0],
            t_ends: vec![ScheduleEnd::NONE, ScheduleEnd::at(100), ScheduleEnd::at(200), ScheduleEnd::at(300)],
            metric: Metric::Knn5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    name: String,
    #[serde(default = "default_architecture")]
    architecture: String,
    #[serde(default = "default_hidden")]
    hidden: usize,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    train: TrainConfig,
    data: DataSource,
    split: SplitSource,
    #[serde(default)]
    eval: EvalPlan,
    #[serde(default)]
    sweep: SweepGrid,
}

fn default_architecture() -> String {
    TINY_MLP.to_string()
}

fn default_hidden() -> usize {
    64
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub architecture: String,
    pub hidden: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub data: DataSource,
    pub split: SplitSource,
    pub eval: EvalPlan,
    pub sweep: SweepGrid,
    /// Directory relative paths in the file are resolved against.
    pub base_dir: PathBuf,
}

fn parse_value(text: &str) -> toml::Value {
    match format!("v = {text}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

/// Sets `path` (dot-separated) in `table`, creating intermediate tables.
fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(format!("empty key in {path:?}")))?;
    let mut cur = table;
    for part in parts {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::config(format!("{part:?} in {path:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Splits `key=value` into a document path and value.
pub fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let text = text.trim_start_matches("--");
    let (key, value) = text.split_once('=').ok_or_else(|| Error::config(format!("override {text:?} is not key=value")))?;
    let key = key.trim();
    let path = if TRAIN_KEYS.contains(&key) { format!("train.{key}") } else { key.to_string() };
    Ok((path, parse_value(value.trim())))
}

impl ExperimentSpec {
    /// Parses a document and applies `overrides` on top of it.
    pub fn parse(text: &str, overrides: &[(String, toml::Value)], base_dir: &Path) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        for (path, value) in overrides {
            set_path(&mut doc, path, value.clone())?;
        }
        let train = doc
            .entry("train")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config("train must be a table"))?;
        let preset = match train.remove("preset") {
            Some(toml::Value::String(s)) => s,
            Some(other) => return Err(Error::config(format!("preset must be a string, got {other}"))),
            None => "desk".to_string(),
        };
        let base = toml::Table::try_from(TrainConfig::preset(&preset)?).map_err(|e| Error::Parse(e.to_string()))?;
        for (k, v) in base {
            train.entry(k).or_insert(v);
        }
        let doc: Document = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        doc.train.validate()?;
        if doc.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if ![TINY_MLP, SMALL_CONV].contains(&doc.architecture.as_str()) {
            return Err(Error::config(format!("unknown architecture {:?}", doc.architecture)));
        }
        let output_dir = match doc.output_dir {
            Some(dir) => base_dir.join(dir),
            None => std::env::var_os(OUTPUT_ENV)
                .map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from)
                .join(&doc.name),
        };
        Ok(Self {
            name: doc.name,
            architecture: doc.architecture,
            hidden: doc.hidden,
            seeds: doc.seeds,
            output_dir,
            train: doc.train,
            data: doc.data,
            split: doc.split,
            eval: doc.eval,
            sweep: doc.sweep,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn read(path: &Path, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// One loader per manifest index referenced by split records.
    pub fn loaders(&self) -> Result<Vec<Box<dyn Loader>>> {
        match &self.data {
            DataSource::Gaussian(g) => Ok(vec![Box::new(g.clone())]),
            #[cfg(feature = "images")]
            DataSource::Images { root, height, width, unlabeled_root, .. } => {
                let make = |root: &Path| -> Box<dyn Loader> {
                    Box::new(crate::data::ImageDirLoader { root: self.resolve(root), height: *height, width: *width })
                };
                let second = unlabeled_root.as_deref().unwrap_or(root);
                Ok(vec![make(root), make(second)])
            }
            #[cfg(not(feature = "images"))]
            DataSource::Images { .. } => Err(Error::config("image data needs the images feature")),
        }
    }

    fn manifests(&self) -> Result<(Manifest, Option<Manifest>)> {
        match &self.data {
            DataSource::Gaussian(g) => Ok((g.manifest(), None)),
            DataSource::Images { manifest, unlabeled_manifest, .. } => {
                let first = Manifest::read(&self.resolve(manifest))?;
                let second = unlabeled_manifest.as_ref().map(|m| Manifest::read(&self.resolve(m))).transpose()?;
                Ok((first, second))
            }
        }
    }

    /// Builds the split descriptor.
    pub fn build_split(&self) -> Result<DatasetSplit> {
        match &self.split {
            SplitSource::Mismatch(params) => build_mismatch_split(&self.manifests()?.0, params),
            SplitSource::CrossDataset { mismatch_ratio, labeled_per_class, val_per_class, seed } => {
                let (labeled, unlabeled) = self.manifests()?;
                let unlabeled =
                    unlabeled.ok_or_else(|| Error::config("cross-dataset split needs data.unlabeled_manifest"))?;
                let counts = CrossDatasetCounts { labeled_per_class: *labeled_per_class, val_per_class: *val_per_class };
                build_cross_dataset_split(&labeled, &unlabeled, *mismatch_ratio, counts, *seed)
            }
            SplitSource::File { path } => DatasetSplit::from_json(&std::fs::read_to_string(self.resolve(path))?),
        }
    }

    pub fn load_split(&self, split: &DatasetSplit) -> Result<LoadedSplit> {
        let loaders = self.loaders()?;
        let refs: Vec<&dyn Loader> = loaders.iter().map(|l| l.as_ref()).collect();
        split.load(&refs)
    }

    pub fn architecture_spec(&self, split: &LoadedSplit) -> ArchitectureSpec {
        ArchitectureSpec {
            id: self.architecture.clone(),
            input: split.shape,
            hidden: self.hidden,
            embedding_dim: self.train.embedding_dim,
        }
    }

    pub fn split_path(&self) -> PathBuf {
        self.output_dir.join("split.json")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed-{seed}"))
    }
}
