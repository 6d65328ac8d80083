//! Softmax classifiers on top of an encoder backbone: linear probing with the
//! backbone frozen, and fine-tuning with it trainable.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::cosine_lr;
use crate::data::{augment, AugmentationPolicy, InputShape, LabeledExample};
use crate::encoder::{EncoderPair, NormMode, Side};
use crate::error::{Error, Result};
use crate::rng::{stable_hash, RngStreams, PROBE};
use crate::vector::ClassLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: u32,
    pub base_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub freeze_backbone: bool,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
}

impl ProbeConfig {
    /// 100 epochs at learning rate 30 on a frozen backbone.
    pub fn linear_probe() -> Self {
        Self {
            epochs: 100,
            base_lr: 30.0,
            momentum: 0.9,
            batch_size: 256,
            freeze_backbone: true,
            seed: 0,
            augmentation: AugmentationPolicy::probe_finetune(),
        }
    }

    /// Same recipe with a trainable backbone and learning rate 0.03.
    pub fn fine_tune() -> Self {
        Self { base_lr: 0.03, freeze_backbone: false, ..Self::linear_probe() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || self.batch_size == 0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("probe needs positive lr and batch size, momentum in [0, 1)"));
        }
        self.augmentation.validate()
    }
}

/// Produces features for a batch of inputs.
pub trait Backbone {
    fn feature_dim(&self) -> usize;
    fn features(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

/// Evaluation-mode backbone of the query encoder.
#[derive(Debug, Clone, Copy)]
pub struct FrozenEncoder<'a>(pub &'a EncoderPair);

impl Backbone for FrozenEncoder<'_> {
    fn feature_dim(&self) -> usize {
        self.0.network().feature_dim()
    }

    fn features(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.0.features(Side::Query, inputs)
    }
}

/// `C × F` weights and `C` biases of a single softmax layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearClassifier {
    /// Weights drawn from N(0, 0.01²), zero bias.
    pub fn init(classes: usize, features: usize, rng: &mut impl Rng) -> Self {
        let weights = Array2::from_shape_fn((classes, features), |_| 0.01 * rng.sample::<f64, _>(StandardNormal));
        Self { weights, bias: Array1::zeros(classes) }
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn logits(&self, features: &Array2<f64>) -> Array2<f64> {
        features.dot(&self.weights.t()) + &self.bias
    }

    pub fn predict(&self, features: &Array2<f64>) -> Vec<ClassLabel> {
        self.logits(features)
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                ClassLabel::class(best)
            })
            .collect()
    }

    /// Mean cross-entropy and its gradients w.r.t. weights, bias and features.
    fn loss_and_grads(&self, features: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>, Array1<f64>, Array2<f64>) {
        let n = features.nrows() as f64;
        let mut probs = self.logits(features);
        let mut loss = 0.0;
        for (mut row, &y) in probs.rows_mut().into_iter().zip(labels) {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
            loss -= row[y].max(1e-300).ln();
            row[y] -= 1.0;
        }
        probs.mapv_inplace(|v| v / n);
        let gw = probs.t().dot(features);
        let gb = probs.sum_axis(Axis(0));
        let gf = probs.dot(&self.weights);
        (loss / n, gw, gb, gf)
    }
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Array2<f64> {
    let data: Vec<f64> = rows.flatten().collect();
    Array2::from_shape_vec((data.len() / width.max(1), width), data).expect("uniform row width")
}

fn class_indices(examples: &[LabeledExample], classes: usize) -> Result<Vec<usize>> {
    examples
        .iter()
        .map(|e| match e.label.index() {
            Some(c) if c < classes => Ok(c),
            _ => Err(Error::data(format!("{} has label {:?} outside 0..{classes}", e.source_id, e.label))),
        })
        .collect()
}

/// Minibatches of one epoch; a trailing batch of one sample is folded into
/// the previous batch so batch statistics stay defined.
fn epoch_batches(len: usize, batch: usize, streams: &RngStreams, epoch: u32) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut streams.stream(PROBE, &[0, u64::from(epoch)]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

fn augmented_inputs(
    examples: &[LabeledExample],
    idx: &[usize],
    shape: InputShape,
    cfg: &ProbeConfig,
    streams: &RngStreams,
    epoch: u32,
) -> Result<Array2<f64>> {
    let rows = idx
        .iter()
        .map(|&i| {
            let e = &examples[i];
            let mut rng = streams.stream(PROBE, &[1, stable_hash(e.source_id.as_bytes()), u64::from(epoch)]);
            augment(&e.input, shape, &cfg.augmentation, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stack(rows.into_iter(), shape.len()))
}

struct Sgd {
    momentum: f64,
    vw: Array2<f64>,
    vb: Array1<f64>,
}

impl Sgd {
    fn step(&mut self, clf: &mut LinearClassifier, gw: &Array2<f64>, gb: &Array1<f64>, lr: f64) {
        self.vw.mapv_inplace(|v| v * self.momentum);
        self.vw += gw;
        self.vb.mapv_inplace(|v| v * self.momentum);
        self.vb += gb;
        clf.weights.scaled_add(-lr, &self.vw);
        clf.bias.scaled_add(-lr, &self.vb);
    }
}

fn check_inputs(examples: &[LabeledExample], classes: usize, cfg: &ProbeConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::data("classifier training needs a nonempty labeled set"));
    }
    if classes == 0 {
        return Err(Error::config("classifier needs at least one class"));
    }
    class_indices(examples, classes)
}

/// Trains a softmax layer on frozen backbone features of `examples`.
///
/// Inputs are re-augmented every epoch with `cfg.augmentation`; the backbone
/// is only read.
pub fn train_linear_probe(
    backbone: &dyn Backbone,
    shape: InputShape,
    examples: &[LabeledExample],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearClassifier> {
    if !cfg.freeze_backbone {
        return Err(Error::config("linear probe requires freeze_backbone = true"));
    }
    let labels = check_inputs(examples, classes, cfg)?;
    let streams = RngStreams::new(cfg.seed);
    let mut clf = LinearClassifier::init(classes, backbone.feature_dim(), &mut streams.stream(PROBE, &[2]));
    let mut opt = Sgd { momentum: cfg.momentum, vw: Array2::zeros(clf.weights.raw_dim()), vb: Array1::zeros(classes) };
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.base_lr, epoch, cfg.epochs);
        for idx in epoch_batches(examples.len(), cfg.batch_size, &streams, epoch) {
            let inputs = augmented_inputs(examples, &idx, shape, cfg, &streams, epoch)?;
            let feats = backbone.features(inputs.view())?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (_, gw, gb, _) = clf.loss_and_grads(&feats, &y);
            opt.step(&mut clf, &gw, &gb, lr);
        }
    }
    Ok(clf)
}

/// Trains the query backbone and a softmax layer jointly on `examples`.
///
/// Only the backbone part of the query parameters receives gradients; the
/// projection head and key side are left as they are. Batch statistics are
/// computed over each whole minibatch.
pub fn fine_tune(
    pair: &mut EncoderPair,
    shape: InputShape,
    examples: &[LabeledExample],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearClassifier> {
    if cfg.freeze_backbone {
        return Err(Error::config("fine-tuning requires freeze_backbone = false"));
    }
    let labels = check_inputs(examples, classes, cfg)?;
    let streams = RngStreams::new(cfg.seed);
    let feature_dim = pair.network().feature_dim();
    let mut clf = LinearClassifier::init(classes, feature_dim, &mut streams.stream(PROBE, &[2]));
    let mut opt = Sgd { momentum: cfg.momentum, vw: Array2::zeros(clf.weights.raw_dim()), vb: Array1::zeros(classes) };
    let mut velocity = vec![0.0; pair.query.len()];
    let backbone_layers = pair.network().backbone_layers();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.base_lr, epoch, cfg.epochs);
        for idx in epoch_batches(examples.len(), cfg.batch_size, &streams, epoch) {
            let inputs = augmented_inputs(examples, &idx, shape, cfg, &streams, epoch)?;
            let trace = pair.network().forward(
                &pair.query,
                &pair.query_stats,
                inputs.view(),
                NormMode::Train { ghost: 1 },
                backbone_layers,
            )?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (_, gw, gb, gf) = clf.loss_and_grads(trace.output(), &y);
            let (gp, _) = pair.network().backward(&pair.query, &trace, gf);
            opt.step(&mut clf, &gw, &gb, lr);
            for ((p, v), g) in pair.query.iter_mut().zip(&mut velocity).zip(&gp) {
                *v = cfg.momentum * *v + g;
                *p -= lr * *v;
            }
            if let Some(stats) = trace.stats {
                pair.query_stats = stats;
            }
        }
    }
    Ok(clf)
}

/// Top-1 accuracy of `classifier` on un-augmented `examples`.
pub fn evaluate_classifier(
    backbone: &dyn Backbone,
    classifier: &LinearClassifier,
    examples: &[LabeledExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::domain("accuracy over an empty example set"));
    }
    let width = examples[0].input.len();
    let inputs = stack(examples.iter().map(|e| e.input.clone()), width);
    let predicted = classifier.predict(&backbone.features(inputs.view())?);
    let correct = predicted.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
    Ok(correct as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{checksum, ArchitectureSpec};

    struct Identity(usize);

    impl Backbone for Identity {
        fn feature_dim(&self) -> usize {
            self.0
        }

        fn features(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
            Ok(inputs.to_owned())
        }
    }

    fn clusters(n: usize, seed: u64) -> Vec<LabeledExample> {
        let mut rng = RngStreams::new(seed).stream("test", &[]);
        (0..n)
            .map(|i| {
                let c = i % 2;
                let center = if c == 0 { 3.0 } else { -3.0 };
                let input = vec![center + rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
                LabeledExample { input, label: ClassLabel::class(c), source_id: format!("s{seed}-{i}") }
            })
            .collect()
    }

    fn small_cfg(epochs: u32) -> ProbeConfig {
        ProbeConfig { epochs, base_lr: 0.5, batch_size: 16, augmentation: AugmentationPolicy::none(), ..ProbeConfig::linear_probe() }
    }

    #[test]
    fn probe_separates_two_clusters() {
        let shape = InputShape::Vector { dim: 2 };
        let clf = train_linear_probe(&Identity(2), shape, &clusters(200, 1), 2, &small_cfg(20)).unwrap();
        assert!(evaluate_classifier(&Identity(2), &clf, &clusters(200, 2)).unwrap() >= 0.95);
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let shape = InputShape::Vector { dim: 2 };
        let cfg = small_cfg(0);
        let clf = train_linear_probe(&Identity(2), shape, &clusters(10, 1), 2, &cfg).unwrap();
        let init = LinearClassifier::init(2, 2, &mut RngStreams::new(cfg.seed).stream(PROBE, &[2]));
        assert_eq!(clf, init);
    }

    #[test]
    fn contract_errors() {
        let shape = InputShape::Vector { dim: 2 };
        assert!(matches!(train_linear_probe(&Identity(2), shape, &[], 2, &small_cfg(1)), Err(Error::Data(_))));
        let unfrozen = ProbeConfig { freeze_backbone: false, ..small_cfg(1) };
        assert!(matches!(train_linear_probe(&Identity(2), shape, &clusters(4, 0), 2, &unfrozen), Err(Error::Config(_))));
        let mut pair = EncoderPair::new(ArchitectureSpec::tiny_mlp(2, 4, 2), 0).unwrap();
        assert!(matches!(fine_tune(&mut pair, shape, &clusters(4, 0), 2, &small_cfg(1)), Err(Error::Config(_))));
    }

    #[test]
    fn probe_never_touches_backbone_and_fine_tune_does() {
        let shape = InputShape::Vector { dim: 2 };
        let data = clusters(40, 3);
        let mut pair = EncoderPair::new(ArchitectureSpec::tiny_mlp(2, 8, 4), 0).unwrap();
        let before = (checksum(&pair.query), checksum(&pair.query_stats));
        train_linear_probe(&FrozenEncoder(&pair), shape, &data, 2, &small_cfg(3)).unwrap();
        assert_eq!(before, (checksum(&pair.query), checksum(&pair.query_stats)));

        let ft = ProbeConfig { freeze_backbone: false, ..small_cfg(0) };
        fine_tune(&mut pair, shape, &data, 2, &ft).unwrap();
        assert_eq!(before.0, checksum(&pair.query));
        let ft = ProbeConfig { freeze_backbone: false, ..small_cfg(1) };
        fine_tune(&mut pair, shape, &data, 2, &ft).unwrap();
        assert_ne!(before.0, checksum(&pair.query));
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let mut rng = RngStreams::new(4).stream("test", &[]);
        let clf = LinearClassifier {
            weights: Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)),
            bias: Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)),
        };
        let x = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let y = [0, 2, 1, 1, 0];
        let (_, gw, gb, gf) = clf.loss_and_grads(&x, &y);
        let h = 1e-6;
        for c in 0..3 {
            for f in 0..4 {
                let (mut a, mut b) = (clf.clone(), clf.clone());
                a.weights[[c, f]] += h;
                b.weights[[c, f]] -= h;
                let fd = (a.loss_and_grads(&x, &y).0 - b.loss_and_grads(&x, &y).0) / (2.0 * h);
                assert!((fd - gw[[c, f]]).abs() < 1e-8);
            }
            let (mut a, mut b) = (clf.clone(), clf.clone());
            a.bias[c] += h;
            b.bias[c] -= h;
            assert!(((a.loss_and_grads(&x, &y).0 - b.loss_and_grads(&x, &y).0) / (2.0 * h) - gb[c]).abs() < 1e-8);
        }
        let (mut xa, mut xb) = (x.clone(), x.clone());
        xa[[2, 1]] += h;
        xb[[2, 1]] -= h;
        let fd = (clf.loss_and_grads(&xa, &y).0 - clf.loss_and_grads(&xb, &y).0) / (2.0 * h);
        assert!((fd - gf[[2, 1]]).abs() < 1e-8);
    }
}
