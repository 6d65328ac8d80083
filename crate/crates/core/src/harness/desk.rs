//! The desk-scale comparison: a synthetic 8-class mixture with half of the
//! unlabeled pool drawn from unseen classes, trained with and without the
//! in-distribution term.

use serde::{Deserialize, Serialize};

use crate::config::{ScheduleEnd, TrainConfig};
use crate::data::{build_mismatch_split, GaussianMixture, LoadedSplit, Loader, MismatchParams};
use crate::encoder::ArchitectureSpec;
use crate::error::Result;
use crate::eval::{class_cohesion, knn_accuracy, EmbeddingBank, VoteWeighting};
use crate::training::{Pretrainer, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskSetup {
    pub mixture: GaussianMixture,
    pub split: MismatchParams,
    pub hidden: usize,
    pub train: TrainConfig,
}

/// Scores of one desk run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeskScores {
    pub knn5_val: f64,
    pub intra: f64,
    pub inter: f64,
}

impl DeskSetup {
    /// 4 ID and 4 OOD classes in 32 dimensions, 50 labeled per ID class and
    /// 2,000 unlabeled samples at 50% mismatch.
    pub fn standard() -> Self {
        let labeled = 50;
        let val = 100;
        Self {
            mixture: GaussianMixture {
                classes: 8,
                dim: 32,
                train_per_class: labeled + val + 500,
                test_per_class: 100,
                separation: 3.0,
                noise: 1.0,
                seed: 0,
            },
            split: MismatchParams {
                id_classes: vec![0, 1, 2, 3],
                ood_classes: vec![4, 5, 6, 7],
                mismatch_ratio: 0.5,
                labeled_per_class: labeled,
                val_per_class: val,
                unlabeled_slots: 4,
                seed: 0,
            },
            hidden: 64,
            train: TrainConfig::preset("desk").expect("desk preset exists"),
        }
    }

    pub fn spec(&self) -> ArchitectureSpec {
        ArchitectureSpec::tiny_mlp(self.mixture.dim, self.hidden, self.train.embedding_dim)
    }

    /// Data and split for one seed; the mixture and the partition both follow it.
    pub fn load(&self, seed: u64) -> Result<LoadedSplit> {
        let mixture = GaussianMixture { seed, ..self.mixture.clone() };
        let params = MismatchParams { seed, ..self.split.clone() };
        let loaders: [&dyn Loader; 1] = [&mixture];
        build_mismatch_split(&mixture.manifest(), &params)?.load(&loaders)
    }

    pub fn train(&self, split: &LoadedSplit, alpha: f64, t_end: ScheduleEnd, seed: u64) -> Result<TrainOutcome> {
        let config = TrainConfig { alpha, t_end, seed, ..self.train.clone() };
        let mut trainer = Pretrainer::new(config, self.spec(), split)?;
        trainer.set_monitor(None);
        trainer.run()?;
        let checkpoint = trainer.state.checkpoint();
        Ok(TrainOutcome { pair: trainer.state.pair, metrics: trainer.state.metrics, checkpoint })
    }

    /// 5-NN validation accuracy against the labeled bank, and cohesion of the
    /// labeled bank.
    pub fn score(&self, split: &LoadedSplit, outcome: &TrainOutcome) -> Result<DeskScores> {
        let bank = EmbeddingBank::from_encoder(&outcome.pair, &split.labeled)?;
        let queries = EmbeddingBank::from_encoder(&outcome.pair, &split.validation)?;
        let knn5_val = knn_accuracy(&bank, &queries, 5, VoteWeighting::default())?;
        let (intra, inter) = class_cohesion(&bank)?;
        Ok(DeskScores { knn5_val, intra, inter })
    }

    pub fn run(&self, alpha: f64, t_end: ScheduleEnd, seed: u64) -> Result<DeskScores> {
        let split = self.load(seed)?;
        let outcome = self.train(&split, alpha, t_end, seed)?;
        self.score(&split, &outcome)
    }
}
