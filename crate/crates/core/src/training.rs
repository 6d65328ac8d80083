//! The contrastive pre-training loop.
//!
//! The training stream is the concatenation of per-epoch shuffles of
//! `D_L ∪ D_U`. Batch `t` covers stream positions `t·B .. (t+1)·B`, so a batch
//! may straddle two passes; the epoch of a batch is `⌊t·B / N⌋` and the run
//! lasts `⌊T·N / B⌋` iterations. Every random draw comes from a named stream
//! keyed by the root seed and stream coordinates, which makes the full state
//! of a run its parameters, optimizer velocity, queue and iteration counter.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{augment_pair, AugmentationPolicy, InputShape, LabeledExample, LoadedSplit};
use crate::encoder::{ArchitectureSpec, EncoderPair, NormMode};
use crate::error::{Error, Result};
use crate::eval::{knn_accuracy, EmbeddingBank, VoteWeighting};
use crate::losses::{combined_loss, moco_loss, schedule_w, CombinedOutput, ContrastiveBatch};
use crate::queue::MemoryQueue;
use crate::rng::{RngStreams, SHUFFLE};
use crate::vector::{ClassLabel, Embedding};

pub const CHECKPOINT_FORMAT: &str = "idcontrast-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which loss drives the query update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Instance discrimination plus the scheduled in-distribution term.
    #[default]
    Combined,
    /// Plain instance discrimination; never consults queue labels.
    MocoBaseline,
}

/// One row of the per-epoch metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: u64,
    pub loss_total: f64,
    pub loss_moco: f64,
    pub loss_id: f64,
    pub w: f64,
    pub lr: f64,
    pub knn5_val: Option<f64>,
    pub knn200_val: Option<f64>,
}

/// Running sums for the epoch currently being trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochAccumulator {
    pub epoch: u64,
    pub batches: u64,
    pub total: f64,
    pub moco: f64,
    pub id: f64,
    pub w: f64,
    pub lr: f64,
}

impl EpochAccumulator {
    fn empty(epoch: u64) -> Self {
        Self { epoch, batches: 0, total: 0.0, moco: 0.0, id: 0.0, w: 0.0, lr: 0.0 }
    }

    fn row(&self) -> MetricRow {
        let n = self.batches as f64;
        MetricRow {
            epoch: self.epoch,
            loss_total: self.total / n,
            loss_moco: self.moco / n,
            loss_id: self.id / n,
            w: self.w,
            lr: self.lr,
            knn5_val: None,
            knn200_val: None,
        }
    }
}

/// What one iteration did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub epoch: u64,
    pub loss: CombinedOutput,
    pub w: f64,
    pub lr: f64,
    /// Labels attached to the keys enqueued at the end of the step.
    pub enqueued_labels: Vec<ClassLabel>,
}

/// Everything that evolves during pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub objective: Objective,
    pub augmentation: AugmentationPolicy,
    pub pair: EncoderPair,
    pub queue: MemoryQueue,
    pub velocity: Vec<f64>,
    pub iteration: u64,
    pub dataset_len: usize,
    pub accumulator: EpochAccumulator,
    pub metrics: Vec<MetricRow>,
}

impl TrainState {
    pub fn new(config: TrainConfig, spec: ArchitectureSpec, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        if spec.embedding_dim != config.embedding_dim {
            return Err(Error::config(format!(
                "architecture embeds into {} dimensions, config says {}",
                spec.embedding_dim, config.embedding_dim
            )));
        }
        if dataset_len == 0 {
            return Err(Error::data("training pool is empty"));
        }
        let pair = EncoderPair::new(spec, config.seed)?;
        let queue = MemoryQueue::new(config.queue_size, config.embedding_dim, config.seed)?;
        Ok(Self {
            velocity: vec![0.0; pair.query.len()],
            objective: Objective::Combined,
            augmentation: AugmentationPolicy::contrastive_pretrain(),
            pair,
            queue,
            iteration: 0,
            dataset_len,
            accumulator: EpochAccumulator::empty(0),
            metrics: Vec::new(),
            config,
        })
    }

    pub fn streams(&self) -> RngStreams {
        RngStreams::new(self.config.seed)
    }

    /// Epoch of the batch at `iteration`.
    pub fn epoch_of(&self, iteration: u64) -> u64 {
        iteration * self.config.batch_size as u64 / self.dataset_len as u64
    }

    pub fn epoch(&self) -> u64 {
        self.epoch_of(self.iteration)
    }

    pub fn total_iterations(&self) -> u64 {
        u64::from(self.config.total_epochs) * self.dataset_len as u64 / self.config.batch_size as u64
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.total_iterations()
    }

    fn input_shape(&self) -> InputShape {
        self.pair.spec().input
    }

    fn learning_rate(&self, epoch: u64) -> f64 {
        self.config.learning_rate(u32::try_from(epoch).unwrap_or(u32::MAX))
    }

    fn schedule(&self, epoch: u64) -> Result<f64> {
        schedule_w(i64::try_from(epoch).unwrap_or(i64::MAX), self.config.t_end)
    }

    /// Two augmented views of every item, stacked as `B × input` matrices.
    /// The augmentation epoch of an item is the pass its stream position
    /// belongs to.
    fn views(&self, batch: &[&LabeledExample]) -> Result<(Array2<f64>, Array2<f64>)> {
        let width = self.input_shape().len();
        let streams = self.streams();
        let first = self.iteration * self.config.batch_size as u64;
        let mut anchors = Vec::with_capacity(batch.len() * width);
        let mut positives = Vec::with_capacity(batch.len() * width);
        for (j, item) in batch.iter().enumerate() {
            if item.input.len() != width {
                return Err(Error::shape(format!("{} has {} inputs, expected {width}", item.source_id, item.input.len())));
            }
            let pass = (first + j as u64) / self.dataset_len as u64;
            let (a, p) = augment_pair(&item.input, self.input_shape(), &self.augmentation, &streams, &item.source_id, pass)?;
            anchors.extend(a);
            positives.extend(p);
        }
        let rows = batch.len();
        Ok((
            Array2::from_shape_vec((rows, width), anchors).expect("rows of equal width"),
            Array2::from_shape_vec((rows, width), positives).expect("rows of equal width"),
        ))
    }

    fn loss(&self, q: &Array2<f64>, k: &Array2<f64>, labels: &[ClassLabel], w: f64) -> Result<CombinedOutput> {
        let snapshot = self.queue.snapshot();
        let input = ContrastiveBatch {
            anchors: q.view(),
            positives: k.view(),
            negatives: snapshot.keys.view(),
            negative_labels: &snapshot.labels,
            anchor_labels: labels,
            temperature: self.config.temperature,
        };
        match self.objective {
            Objective::MocoBaseline => {
                let out = moco_loss(&input)?;
                Ok(CombinedOutput { total: out.loss, moco: out.loss, id: 0.0, id_weight: 0.0, grad: out.grad })
            }
            Objective::Combined => {
                let sets: Vec<Vec<usize>> = labels.iter().map(|l| snapshot.positives_of(*l)).collect();
                combined_loss(&input, &sets, self.config.alpha, w)
            }
        }
    }

    /// Loss the next step would see on `batch`, without changing anything.
    pub fn batch_loss(&self, batch: &[&LabeledExample]) -> Result<CombinedOutput> {
        let mut scratch = self.pair.clone();
        let (a, p) = self.views(batch)?;
        let mode = NormMode::Train { ghost: self.config.ghost_subbatches };
        let q = scratch.forward_query(a.view(), mode)?;
        let k = scratch.forward_key(p.view(), mode)?;
        let labels: Vec<ClassLabel> = batch.iter().map(|e| e.label).collect();
        self.loss(&q.embeddings, &k, &labels, self.schedule(self.epoch())?)
    }

    /// One iteration: augment, encode both views, score against the queue,
    /// update the query by SGD with momentum, move the key by EMA, and enqueue
    /// the keys under the batch's exposed labels.
    pub fn pretrain_step(&mut self, batch: &[&LabeledExample]) -> Result<StepReport> {
        if batch.len() != self.config.batch_size {
            return Err(Error::shape(format!("batch of {} items, configured for {}", batch.len(), self.config.batch_size)));
        }
        let epoch = self.epoch();
        let (w, lr) = (self.schedule(epoch)?, self.learning_rate(epoch));
        let (a, p) = self.views(batch)?;
        let mode = NormMode::Train { ghost: self.config.ghost_subbatches };
        let pass = self.pair.forward_query(a.view(), mode)?;
        let keys = self.pair.forward_key(p.view(), mode)?;
        let labels: Vec<ClassLabel> = batch.iter().map(|e| e.label).collect();
        let loss = self.loss(&pass.embeddings, &keys, &labels, w)?;
        if !(loss.total.is_finite() && loss.moco.is_finite() && loss.id.is_finite()) {
            return Err(Error::Degenerate(format!("non-finite loss at iteration {}", self.iteration)));
        }

        let grads = self.pair.query_gradient(&pass, &loss.grad);
        let mu = self.config.optimizer_momentum;
        for ((theta, v), g) in self.pair.query.iter_mut().zip(&mut self.velocity).zip(&grads.query) {
            *v = mu * *v + g;
            *theta -= lr * *v;
        }
        self.pair.momentum_update(self.config.momentum)?;
        let entries = keys
            .rows()
            .into_iter()
            .zip(&labels)
            .map(|(row, l)| Embedding::from_unit(row.to_vec()).map(|e| (e, *l)))
            .collect::<Result<Vec<_>>>()?;
        self.queue.enqueue_batch(entries)?;

        let acc = &mut self.accumulator;
        if acc.epoch != epoch {
            *acc = EpochAccumulator::empty(epoch);
        }
        acc.batches += 1;
        acc.total += loss.total;
        acc.moco += loss.moco;
        acc.id += loss.id;
        acc.w = w;
        acc.lr = lr;
        let report = StepReport { iteration: self.iteration, epoch, loss, w, lr, enqueued_labels: labels };
        self.iteration += 1;
        Ok(report)
    }

    /// Closes the accumulator into a metric row once its epoch is over.
    fn close_epoch_if_done(&mut self) -> Option<MetricRow> {
        let acc = &self.accumulator;
        if acc.batches == 0 || (!self.is_finished() && self.epoch() == acc.epoch) {
            return None;
        }
        let row = acc.row();
        self.accumulator = EpochAccumulator::empty(self.epoch());
        Some(row)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            architecture: self.pair.spec().clone(),
            config: self.config.clone(),
            objective: self.objective,
            augmentation: self.augmentation.clone(),
            rng_root: self.config.seed,
            dataset_len: self.dataset_len,
            iteration: self.iteration,
            epoch: self.epoch(),
            query: self.pair.query.clone(),
            key: self.pair.key.clone(),
            query_stats: self.pair.query_stats.clone(),
            key_stats: self.pair.key_stats.clone(),
            velocity: self.velocity.clone(),
            queue: self.queue.clone(),
            accumulator: self.accumulator.clone(),
            metrics: self.metrics.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        if ck.rng_root != ck.config.seed {
            return Err(Error::Parse("checkpoint seed does not match its config".into()));
        }
        ck.config.validate()?;
        let pair = EncoderPair::from_parts(ck.architecture, ck.query, ck.key, ck.query_stats, ck.key_stats)?;
        if ck.velocity.len() != pair.query.len() {
            return Err(Error::shape("optimizer velocity does not match the parameters"));
        }
        if ck.queue.capacity() != ck.config.queue_size || ck.queue.dim() != pair.embedding_dim() {
            return Err(Error::shape("queue does not match the config"));
        }
        let state = Self {
            config: ck.config,
            objective: ck.objective,
            augmentation: ck.augmentation,
            pair,
            queue: ck.queue,
            velocity: ck.velocity,
            iteration: ck.iteration,
            dataset_len: ck.dataset_len,
            accumulator: ck.accumulator,
            metrics: ck.metrics,
        };
        if state.epoch() != ck.epoch {
            return Err(Error::Parse("checkpoint epoch disagrees with its iteration".into()));
        }
        Ok(state)
    }
}

/// Serialized [`TrainState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: ArchitectureSpec,
    pub config: TrainConfig,
    pub objective: Objective,
    pub augmentation: AugmentationPolicy,
    pub rng_root: u64,
    pub dataset_len: usize,
    pub iteration: u64,
    pub epoch: u64,
    pub query: Vec<f64>,
    pub key: Vec<f64>,
    pub query_stats: Vec<f64>,
    pub key_stats: Vec<f64>,
    pub velocity: Vec<f64>,
    pub queue: MemoryQueue,
    pub accumulator: EpochAccumulator,
    pub metrics: Vec<MetricRow>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn pair(&self) -> Result<EncoderPair> {
        EncoderPair::from_parts(
            self.architecture.clone(),
            self.query.clone(),
            self.key.clone(),
            self.query_stats.clone(),
            self.key_stats.clone(),
        )
    }
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        writer.write_record(["epoch", "loss_total", "loss_moco", "loss_id", "w", "lr", "knn5_val", "knn200_val"])?;
    }
    for row in rows {
        writer.serialize(row)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    Ok(reader.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?)
}

/// Labeled bank and validation queries for k-NN monitoring.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    pub bank: &'a [LabeledExample],
    pub queries: &'a [LabeledExample],
}

impl Monitor<'_> {
    /// Weighted k-NN accuracy for each `k`; `None` where `k` exceeds the bank
    /// or either side is empty.
    pub fn knn(&self, pair: &EncoderPair, ks: &[usize]) -> Result<Vec<Option<f64>>> {
        if self.bank.is_empty() || self.queries.is_empty() {
            return Ok(vec![None; ks.len()]);
        }
        let bank = EmbeddingBank::from_encoder(pair, self.bank)?;
        let queries = EmbeddingBank::from_encoder(pair, self.queries)?;
        ks.iter()
            .map(|&k| {
                if k > bank.len() {
                    Ok(None)
                } else {
                    knn_accuracy(&bank, &queries, k, VoteWeighting::default()).map(Some)
                }
            })
            .collect()
    }
}

/// Drives a [`TrainState`] over the training pool of a split.
#[derive(Debug, Clone)]
pub struct Pretrainer<'a> {
    pub state: TrainState,
    pool: Vec<&'a LabeledExample>,
    monitor: Option<Monitor<'a>>,
    order: Option<(u64, Vec<usize>)>,
}

impl<'a> Pretrainer<'a> {
    pub fn new(config: TrainConfig, spec: ArchitectureSpec, split: &'a LoadedSplit) -> Result<Self> {
        if spec.input != split.shape {
            return Err(Error::shape(format!("architecture expects {:?}, split holds {:?}", spec.input, split.shape)));
        }
        let pool = split.training_pool();
        let state = TrainState::new(config, spec, pool.len())?;
        Ok(Self::from_state(state, pool, split))
    }

    pub fn resume(checkpoint: Checkpoint, split: &'a LoadedSplit) -> Result<Self> {
        let pool = split.training_pool();
        if checkpoint.dataset_len != pool.len() {
            return Err(Error::data(format!(
                "checkpoint was trained on {} items, split holds {}",
                checkpoint.dataset_len,
                pool.len()
            )));
        }
        let state = TrainState::from_checkpoint(checkpoint)?;
        Ok(Self::from_state(state, pool, split))
    }

    fn from_state(state: TrainState, pool: Vec<&'a LabeledExample>, split: &'a LoadedSplit) -> Self {
        let monitor = Monitor { bank: &split.labeled, queries: &split.validation };
        Self { state, pool, monitor: Some(monitor), order: None }
    }

    /// Replaces or disables k-NN monitoring.
    pub fn set_monitor(&mut self, monitor: Option<Monitor<'a>>) {
        self.monitor = monitor;
    }

    fn pass_order(&mut self, pass: u64) -> &[usize] {
        if self.order.as_ref().map(|(p, _)| *p) != Some(pass) {
            let mut order: Vec<usize> = (0..self.pool.len()).collect();
            order.shuffle(&mut self.state.streams().stream(SHUFFLE, &[pass]));
            self.order = Some((pass, order));
        }
        &self.order.as_ref().unwrap().1
    }

    /// Pool indices of the batch at the current iteration.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let b = self.state.config.batch_size as u64;
        let n = self.pool.len() as u64;
        let first = self.state.iteration * b;
        (first..first + b).map(|pos| self.pass_order(pos / n)[(pos % n) as usize]).collect()
    }

    pub fn step(&mut self) -> Result<StepReport> {
        if self.state.is_finished() {
            return Err(Error::Misuse("training already finished".into()));
        }
        let idx = self.next_batch();
        let batch: Vec<&LabeledExample> = idx.iter().map(|&i| self.pool[i]).collect();
        let report = self.state.pretrain_step(&batch)?;
        if let Some(mut row) = self.state.close_epoch_if_done() {
            let every = u64::from(self.state.config.monitor_every);
            let due = every > 0 && ((row.epoch + 1) % every == 0 || self.state.is_finished());
            if let (true, Some(monitor)) = (due, self.monitor) {
                let accs = monitor.knn(&self.state.pair, &[5, 200])?;
                row.knn5_val = accs[0];
                row.knn200_val = accs[1];
            }
            self.state.metrics.push(row);
        }
        Ok(report)
    }

    /// Steps until `iteration` (or the end of the run).
    pub fn run_until(&mut self, iteration: u64) -> Result<()> {
        while self.state.iteration < iteration.min(self.state.total_iterations()) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(u64::MAX)
    }

    pub fn pool(&self) -> &[&'a LabeledExample] {
        &self.pool
    }
}

/// Result of a full pre-training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub pair: EncoderPair,
    pub metrics: Vec<MetricRow>,
    pub checkpoint: Checkpoint,
}

/// Trains `spec` on the training pool of `split` for `config.total_epochs`.
pub fn pretrain(config: TrainConfig, split: &LoadedSplit, spec: ArchitectureSpec) -> Result<TrainOutcome> {
    let mut trainer = Pretrainer::new(config, spec, split)?;
    trainer.run()?;
    let checkpoint = trainer.state.checkpoint();
    Ok(TrainOutcome { pair: trainer.state.pair, metrics: trainer.state.metrics, checkpoint })
}
