//! Single runs, evaluation, sweeps and exports on top of an [`ExperimentSpec`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::report::format_mean_std;
use super::spec::{ExperimentSpec, Metric};
use crate::config::{ScheduleEnd, TrainConfig};
use crate::data::{DatasetSplit, LoadedSplit, Pool};
use crate::encoder::EncoderPair;
use crate::error::{Error, Result};
use crate::eval::{
    class_cohesion, evaluate_classifier, fine_tune, knn_accuracy, train_linear_probe, EmbeddingBank, FrozenEncoder,
    VoteWeighting,
};
use crate::training::{metrics_to_csv, Checkpoint, Objective, Pretrainer, TrainOutcome};

pub const RESULT_FILE: &str = "result.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";

/// Scores of one trained encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub seed: u64,
    pub alpha: f64,
    pub t_end: ScheduleEnd,
    pub objective: Objective,
    /// Accuracy by metric name (`knn5`, `knn200`, `linear_probe`, `fine_tune`).
    pub scores: BTreeMap<String, f64>,
    pub intra: Option<f64>,
    pub inter: Option<f64>,
}

impl RunResult {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(std::fs::write(path, text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Writes the split descriptor to the experiment directory.
pub fn prepare_data(spec: &ExperimentSpec) -> Result<DatasetSplit> {
    let split = spec.build_split()?;
    std::fs::create_dir_all(&spec.output_dir)?;
    std::fs::write(spec.split_path(), split.to_json()?)?;
    Ok(split)
}

/// The materialized descriptor when present, otherwise a freshly built one.
pub fn descriptor(spec: &ExperimentSpec) -> Result<DatasetSplit> {
    let path = spec.split_path();
    if path.exists() {
        DatasetSplit::from_json(&std::fs::read_to_string(path)?)
    } else {
        spec.build_split()
    }
}

/// Options of one pre-training run.
#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    pub resume: Option<Checkpoint>,
    /// Write `checkpoint-epoch-E.json` after every `E`-th epoch.
    pub checkpoint_every: Option<u64>,
    pub objective: Objective,
}

/// Trains one seed into `dir`, writing the final checkpoint and metric log.
pub fn pretrain_into(
    config: TrainConfig,
    spec: &ExperimentSpec,
    split: &LoadedSplit,
    dir: &Path,
    options: PretrainOptions,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(dir)?;
    let mut trainer = match options.resume {
        Some(ck) => Pretrainer::resume(ck, split)?,
        None => {
            let mut t = Pretrainer::new(config, spec.architecture_spec(split), split)?;
            t.state.objective = options.objective;
            t
        }
    };
    while !trainer.state.is_finished() {
        let before = trainer.state.epoch();
        trainer.step()?;
        let after = trainer.state.epoch();
        if let Some(every) = options.checkpoint_every.filter(|e| *e > 0) {
            if after != before && after % every == 0 && !trainer.state.is_finished() {
                trainer.state.checkpoint().write(&dir.join(format!("checkpoint-epoch-{after}.json")))?;
            }
        }
    }
    let checkpoint = trainer.state.checkpoint();
    checkpoint.write(&dir.join(CHECKPOINT_FILE))?;
    std::fs::write(dir.join(METRICS_FILE), metrics_to_csv(&trainer.state.metrics)?)?;
    Ok(TrainOutcome { pair: trainer.state.pair, metrics: trainer.state.metrics, checkpoint })
}

fn query_examples(split: &LoadedSplit, pool: Pool) -> Vec<crate::data::LabeledExample> {
    split.pool_with_audit_labels(pool)
}

/// k-NN accuracies of `pair` for each `k`, labeled pool as reference.
pub fn knn_scores(pair: &EncoderPair, split: &LoadedSplit, pool: Pool, ks: &[usize]) -> Result<BTreeMap<String, f64>> {
    let bank = EmbeddingBank::from_encoder(pair, &split.labeled)?;
    let queries = EmbeddingBank::from_encoder(pair, &query_examples(split, pool))?;
    let mut out = BTreeMap::new();
    for &k in ks {
        if k > bank.len() {
            return Err(Error::config(format!("k = {k} exceeds the {} labeled items", bank.len())));
        }
        out.insert(format!("knn{k}"), knn_accuracy(&bank, &queries, k, VoteWeighting::default())?);
    }
    Ok(out)
}

pub fn linear_probe_score(spec: &ExperimentSpec, pair: &EncoderPair, split: &LoadedSplit, seed: u64) -> Result<f64> {
    let cfg = spec.eval.probe_config(seed);
    let clf = train_linear_probe(&FrozenEncoder(pair), split.shape, &split.labeled, split.num_classes, &cfg)?;
    evaluate_classifier(&FrozenEncoder(pair), &clf, &query_examples(split, spec.eval.query_pool))
}

pub fn fine_tune_score(spec: &ExperimentSpec, pair: &EncoderPair, split: &LoadedSplit, seed: u64) -> Result<f64> {
    let cfg = spec.eval.finetune_config(seed);
    let mut tuned = pair.clone();
    let clf = fine_tune(&mut tuned, split.shape, &split.labeled, split.num_classes, &cfg)?;
    evaluate_classifier(&FrozenEncoder(&tuned), &clf, &query_examples(split, spec.eval.query_pool))
}

/// Every evaluation the plan enables.
pub fn evaluate(spec: &ExperimentSpec, ck: &Checkpoint, split: &LoadedSplit) -> Result<RunResult> {
    let pair = ck.pair()?;
    let seed = ck.config.seed;
    let ks: Vec<usize> = spec.eval.knn.iter().copied().filter(|&k| k <= split.labeled.len()).collect();
    let mut scores = knn_scores(&pair, split, spec.eval.query_pool, &ks)?;
    if spec.eval.linear_probe {
        scores.insert(Metric::LinearProbe.name().into(), linear_probe_score(spec, &pair, split, seed)?);
    }
    if spec.eval.fine_tune {
        scores.insert(Metric::FineTune.name().into(), fine_tune_score(spec, &pair, split, seed)?);
    }
    let cohesion = class_cohesion(&EmbeddingBank::from_encoder(&pair, &split.labeled)?).ok();
    Ok(RunResult {
        name: spec.name.clone(),
        seed,
        alpha: ck.config.alpha,
        t_end: ck.config.t_end,
        objective: ck.objective,
        scores,
        intra: cohesion.map(|c| c.0),
        inter: cohesion.map(|c| c.1),
    })
}

/// Writes the embeddings of `pool` with audit labels.
pub fn export_embeddings(ck: &Checkpoint, split: &LoadedSplit, pool: Pool, path: &Path) -> Result<EmbeddingBank> {
    let pair = ck.pair()?;
    let bank = EmbeddingBank::from_encoder(&pair, &split.pool_with_audit_labels(pool))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    bank.write(path)?;
    Ok(bank)
}

/// One cell of the α × t_end grid; `alpha = None` is the MoCo row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub alpha: Option<f64>,
    pub t_end: ScheduleEnd,
}

impl SweepCell {
    pub fn dir_name(&self) -> String {
        match self.alpha {
            None => "moco".into(),
            Some(a) => format!("alpha-{a}-tend-{}", self.t_end),
        }
    }

    pub fn config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig { alpha: self.alpha.unwrap_or(0.0), t_end: self.t_end, seed, ..base.clone() }
    }

    pub fn objective(&self) -> Objective {
        if self.alpha.is_some() {
            Objective::Combined
        } else {
            Objective::MocoBaseline
        }
    }
}

pub fn sweep_cells(spec: &ExperimentSpec) -> Vec<SweepCell> {
    let mut cells = vec![SweepCell { alpha: None, t_end: ScheduleEnd::NONE }];
    for &alpha in &spec.sweep.alphas {
        for &t_end in &spec.sweep.t_ends {
            cells.push(SweepCell { alpha: Some(alpha), t_end });
        }
    }
    cells
}

pub fn sweep_dir(spec: &ExperimentSpec) -> PathBuf {
    spec.output_dir.join("sweep")
}

/// Trains and scores every seed of `cell`. Finished seeds (with a result file)
/// are read back instead of retrained.
pub fn run_cell(spec: &ExperimentSpec, split: &LoadedSplit, cell: SweepCell) -> Result<Vec<RunResult>> {
    let dir = sweep_dir(spec).join(cell.dir_name());
    spec.seeds
        .iter()
        .map(|&seed| {
            let seed_dir = dir.join(format!("seed-{seed}"));
            let result_path = seed_dir.join(RESULT_FILE);
            if result_path.exists() {
                return RunResult::read(&result_path);
            }
            let config = cell.config(&spec.train, seed);
            config.validate()?;
            let options = PretrainOptions { objective: cell.objective(), ..Default::default() };
            let outcome = pretrain_into(config, spec, split, &seed_dir, options)?;
            let result = evaluate(spec, &outcome.checkpoint, split)?;
            result.write(&result_path)?;
            Ok(result)
        })
        .collect()
}

/// The accuracy matrix: one row per α, one column per t_end, plus a MoCo row.
pub fn sweep_matrix(spec: &ExperimentSpec, results: &[(SweepCell, Vec<RunResult>)]) -> Result<String> {
    let metric = spec.sweep.metric.name();
    let cell_text = |runs: &[RunResult]| -> Result<String> {
        let values = runs
            .iter()
            .map(|r| {
                r.scores.get(metric).copied().ok_or_else(|| {
                    Error::config(format!("sweep metric {metric} was not evaluated; enable it under [eval]"))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(format_mean_std(&values))
    };
    let find = |cell: SweepCell| results.iter().find(|(c, _)| *c == cell).map(|(_, r)| r.as_slice());
    let mut out = String::from("alpha");
    for t in &spec.sweep.t_ends {
        write!(out, ",t_end={t}").unwrap();
    }
    out.push('\n');
    for &alpha in &spec.sweep.alphas {
        write!(out, "{alpha}").unwrap();
        for &t_end in &spec.sweep.t_ends {
            let text = match find(SweepCell { alpha: Some(alpha), t_end }) {
                Some(runs) => cell_text(runs)?,
                None => String::new(),
            };
            write!(out, ",{text}").unwrap();
        }
        out.push('\n');
    }
    let moco = match find(SweepCell { alpha: None, t_end: ScheduleEnd::NONE }) {
        Some(runs) => cell_text(runs)?,
        None => String::new(),
    };
    write!(out, "moco,{moco}").unwrap();
    out.push_str(&",".repeat(spec.sweep.t_ends.len().saturating_sub(1)));
    out.push('\n');
    Ok(out)
}

/// Runs `cells` (all of them when `None`) and writes `matrix.csv`.
pub fn run_sweep(spec: &ExperimentSpec, split: &LoadedSplit, cells: Option<&[SweepCell]>) -> Result<String> {
    let all = sweep_cells(spec);
    let chosen = cells.unwrap_or(&all);
    let mut results = Vec::new();
    for &cell in chosen {
        results.push((cell, run_cell(spec, split, cell)?));
    }
    // Cells run earlier (possibly by another process) are folded in too.
    for &cell in &all {
        if results.iter().all(|(c, _)| *c != cell) {
            let dir = sweep_dir(spec).join(cell.dir_name());
            let done: Option<Vec<RunResult>> =
                spec.seeds.iter().map(|s| RunResult::read(&dir.join(format!("seed-{s}")).join(RESULT_FILE)).ok()).collect();
            if let Some(runs) = done {
                results.push((cell, runs));
            }
        }
    }
    let matrix = sweep_matrix(spec, &results)?;
    std::fs::create_dir_all(sweep_dir(spec))?;
    std::fs::write(sweep_dir(spec).join("matrix.csv"), &matrix)?;
    Ok(matrix)
}
