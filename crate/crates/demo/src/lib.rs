//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations: the two losses as a queue key rotates around the anchor,
//! the coefficient and learning-rate schedules, and an epoch-by-epoch toy run
//! whose 2-D embeddings the page draws on the unit circle.
//!
//! Every binding wraps a plain Rust function so the logic is testable natively.

use idcontrast::config::{cosine_lr, ScheduleEnd, TrainConfig};
use idcontrast::data::{build_mismatch_split, GaussianMixture, LoadedSplit, Loader, MismatchParams};
use idcontrast::encoder::ArchitectureSpec;
use idcontrast::eval::{knn_accuracy, EmbeddingBank, VoteWeighting};
use idcontrast::losses::{combined_loss, id_loss, moco_loss, schedule_w, ContrastiveBatch};
use idcontrast::training::{Checkpoint, Pretrainer};
use idcontrast::vector::ClassLabel;
use ndarray::Array2;
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn t_end_of(value: i32) -> ScheduleEnd {
    u32::try_from(value).map_or(ScheduleEnd::NONE, ScheduleEnd::at)
}

fn unit(deg: f64) -> [f64; 2] {
    let r = deg.to_radians();
    [r.cos(), r.sin()]
}

/// Rows of `[angle, moco, id, total]` as one labeled key group sweeps from
/// 0° to 180° away from the anchor. The anchor sits at 0°, its positive view
/// at `view_deg`, and `others` unlabeled keys are spread evenly on the circle.
pub fn loss_sweep(
    tau: f64,
    alpha: f64,
    w: f64,
    view_deg: f64,
    same_class: usize,
    others: usize,
    steps: usize,
) -> idcontrast::Result<Vec<f64>> {
    let anchor = Array2::from_shape_vec((1, 2), unit(0.0).to_vec()).expect("1x2");
    let positive = Array2::from_shape_vec((1, 2), unit(view_deg).to_vec()).expect("1x2");
    let k = same_class + others;
    let class = ClassLabel::class(0);
    let mut labels = vec![class; same_class];
    labels.extend(std::iter::repeat_n(ClassLabel::UNLABELED, others));
    let sets = vec![(0..same_class).collect::<Vec<_>>()];
    let steps = steps.max(2);
    let mut out = Vec::with_capacity(steps * 4);
    for s in 0..steps {
        let angle = 180.0 * s as f64 / (steps - 1) as f64;
        let mut keys = Array2::zeros((k, 2));
        for j in 0..k {
            let deg = if j < same_class { angle } else { 360.0 * (j - same_class) as f64 / others as f64 + 7.0 };
            let [x, y] = unit(deg);
            keys[[j, 0]] = x;
            keys[[j, 1]] = y;
        }
        let batch = ContrastiveBatch {
            anchors: anchor.view(),
            positives: positive.view(),
            negatives: keys.view(),
            negative_labels: &labels,
            anchor_labels: &[class],
            temperature: tau,
        };
        let moco = moco_loss(&batch)?.loss;
        let id = id_loss(&batch, &sets)?.loss;
        let total = combined_loss(&batch, &sets, alpha, w)?.total;
        out.extend([angle, moco, id, total]);
    }
    Ok(out)
}

/// Rows of `[epoch, alpha·w(epoch), lr(epoch)]` for `0..=total_epochs`.
/// A negative `t_end` means no schedule end.
pub fn schedule_curves(alpha: f64, t_end: i32, total_epochs: u32, base_lr: f64) -> idcontrast::Result<Vec<f64>> {
    let end = t_end_of(t_end);
    let mut out = Vec::with_capacity((total_epochs as usize + 1) * 3);
    for epoch in 0..=total_epochs {
        let w = schedule_w(i64::from(epoch), end)?;
        out.extend([f64::from(epoch), alpha * w, cosine_lr(base_lr, epoch, total_epochs)]);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = lossSweep)]
pub fn loss_sweep_js(
    tau: f64,
    alpha: f64,
    w: f64,
    view_deg: f64,
    same_class: usize,
    others: usize,
    steps: usize,
) -> Result<Vec<f64>, JsError> {
    loss_sweep(tau, alpha, w, view_deg, same_class, others, steps).map_err(js)
}

#[wasm_bindgen(js_name = scheduleCurves)]
pub fn schedule_curves_js(alpha: f64, t_end: i32, total_epochs: u32, base_lr: f64) -> Result<Vec<f64>, JsError> {
    schedule_curves(alpha, t_end, total_epochs, base_lr).map_err(js)
}

/// Three seen and three unseen Gaussian classes in eight dimensions, encoded
/// onto the unit circle. The unlabeled pool is half seen, half unseen.
#[wasm_bindgen]
pub struct ToyRun {
    split: LoadedSplit,
    checkpoint: Checkpoint,
    knn5: Vec<f64>,
}

impl ToyRun {
    pub fn create(alpha: f64, t_end: i32, epochs: u32, seed: u64) -> idcontrast::Result<Self> {
        let mixture =
            GaussianMixture { classes: 6, dim: 8, train_per_class: 100, test_per_class: 10, separation: 3.0, noise: 1.0, seed };
        let params = MismatchParams {
            id_classes: vec![0, 1, 2],
            ood_classes: vec![3, 4, 5],
            mismatch_ratio: 0.5,
            labeled_per_class: 20,
            val_per_class: 20,
            unlabeled_slots: 4,
            seed,
        };
        let loaders: [&dyn Loader; 1] = [&mixture];
        let split = build_mismatch_split(&mixture.manifest(), &params)?.load(&loaders)?;
        let config = TrainConfig {
            queue_size: 64,
            batch_size: 16,
            embedding_dim: 2,
            ghost_subbatches: 2,
            total_epochs: epochs,
            alpha,
            t_end: t_end_of(t_end),
            seed,
            ..TrainConfig::preset("desk")?
        };
        let spec = ArchitectureSpec::tiny_mlp(8, 32, 2);
        let checkpoint = Pretrainer::new(config, spec, &split)?.state.checkpoint();
        let mut run = Self { split, checkpoint, knn5: Vec::new() };
        run.knn5.push(run.score()?);
        Ok(run)
    }

    /// Trains one more epoch; false once the run is finished.
    pub fn advance(&mut self) -> idcontrast::Result<bool> {
        let mut trainer = Pretrainer::resume(self.checkpoint.clone(), &self.split)?;
        trainer.set_monitor(None);
        if trainer.state.is_finished() {
            return Ok(false);
        }
        let next = trainer.state.epoch() + 1;
        let stop = (trainer.state.iteration..).find(|&i| trainer.state.epoch_of(i) >= next).expect("unbounded");
        trainer.run_until(stop)?;
        self.checkpoint = trainer.state.checkpoint();
        self.knn5.push(self.score()?);
        Ok(true)
    }

    fn score(&self) -> idcontrast::Result<f64> {
        let pair = self.checkpoint.pair()?;
        let bank = EmbeddingBank::from_encoder(&pair, &self.split.labeled)?;
        let queries = EmbeddingBank::from_encoder(&pair, &self.split.validation)?;
        knn_accuracy(&bank, &queries, 5, VoteWeighting::default())
    }

    /// Rows of `[x, y, class, labeled]` for the labeled and unlabeled pools;
    /// unlabeled points carry their hidden class for colouring only.
    pub fn point_rows(&self) -> idcontrast::Result<Vec<f64>> {
        let pair = self.checkpoint.pair()?;
        let mut out = Vec::new();
        for (examples, labeled) in [
            (self.split.labeled.clone(), 1.0),
            (self.split.pool_with_audit_labels(idcontrast::data::Pool::Unlabeled), 0.0),
        ] {
            let bank = EmbeddingBank::from_encoder(&pair, &examples)?;
            for i in 0..bank.len() {
                let class = bank.labels()[i].raw() as f64;
                out.extend([bank.row(i)[0], bank.row(i)[1], class, labeled]);
            }
        }
        Ok(out)
    }

    /// Rows of `[epoch, loss_total, loss_moco, loss_id, w, knn5]`; the k-NN
    /// column holds the score after that epoch.
    pub fn history_rows(&self) -> Vec<f64> {
        self.checkpoint
            .metrics
            .iter()
            .zip(self.knn5.iter().skip(1))
            .flat_map(|(r, k)| [r.epoch as f64, r.loss_total, r.loss_moco, r.loss_id, r.w, *k])
            .collect()
    }

    /// Completed epochs, i.e. logged metric rows.
    pub fn epoch_count(&self) -> u64 {
        self.checkpoint.metrics.len() as u64
    }

    pub fn latest_knn5(&self) -> f64 {
        *self.knn5.last().expect("scored at creation")
    }
}

#[wasm_bindgen]
impl ToyRun {
    #[wasm_bindgen(constructor)]
    pub fn new(alpha: f64, t_end: i32, epochs: u32, seed: u32) -> Result<ToyRun, JsError> {
        Self::create(alpha, t_end, epochs, u64::from(seed)).map_err(js)
    }

    /// Trains one epoch and reports whether anything was left to train.
    pub fn step(&mut self) -> Result<bool, JsError> {
        self.advance().map_err(js)
    }

    pub fn points(&self) -> Result<Vec<f64>, JsError> {
        self.point_rows().map_err(js)
    }

    pub fn history(&self) -> Vec<f64> {
        self.history_rows()
    }

    pub fn epoch(&self) -> u32 {
        u32::try_from(self.epoch_count()).unwrap_or(u32::MAX)
    }

    pub fn knn5(&self) -> f64 {
        self.latest_knn5()
    }
}
