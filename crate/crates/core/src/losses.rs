//! Instance-discrimination loss, the in-distribution positive-aggregation
//! loss over labeled queue keys, their scheduled combination, and analytic
//! gradients with respect to the anchor embeddings.
//!
//! Positives and queue keys are constants: no gradient is ever produced for
//! them. Every per-anchor log-partition is computed with max-subtraction, so
//! logits up to `|sim|/τ = 1e3` evaluate without overflow.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::config::ScheduleEnd;
use crate::error::{Error, Result};
use crate::vector::ClassLabel;

/// Floor applied to every log argument.
const LOG_FLOOR: f64 = 1e-300;

/// One batch of anchors with their positives and the queue negatives.
///
/// Rows of `anchors`, `positives` and `negatives` are expected to be unit
/// norm; the loss functions only check shapes and the temperature.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch<'a> {
    pub anchors: ArrayView2<'a, f64>,
    pub positives: ArrayView2<'a, f64>,
    pub negatives: ArrayView2<'a, f64>,
    pub negative_labels: &'a [ClassLabel],
    pub anchor_labels: &'a [ClassLabel],
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient of `loss` with respect to `anchors`, same shape.
    pub grad: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedOutput {
    pub total: f64,
    pub moco: f64,
    /// Zero when the in-distribution branch was skipped.
    pub id: f64,
    /// `alpha * w` as applied.
    pub id_weight: f64,
    pub grad: Array2<f64>,
}

impl ContrastiveBatch<'_> {
    pub fn batch_size(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn queue_size(&self) -> usize {
        self.negatives.nrows()
    }

    fn check(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        let (b, d) = self.anchors.dim();
        if self.positives.dim() != (b, d) {
            return Err(Error::shape(format!(
                "anchors are {b}x{d} but positives are {:?}",
                self.positives.dim()
            )));
        }
        if self.negatives.nrows() > 0 && self.negatives.ncols() != d {
            return Err(Error::shape(format!(
                "negatives have dimension {}, anchors {d}",
                self.negatives.ncols()
            )));
        }
        if self.negative_labels.len() != self.negatives.nrows() {
            return Err(Error::shape(format!(
                "{} negative labels for {} negatives",
                self.negative_labels.len(),
                self.negatives.nrows()
            )));
        }
        if self.anchor_labels.len() != b {
            return Err(Error::shape(format!("{} anchor labels for {b} anchors", self.anchor_labels.len())));
        }
        Ok(())
    }

    /// Scaled logits: column 0 is the positive, columns `1..=K` the negatives.
    fn logits(&self) -> Array2<f64> {
        let b = self.batch_size();
        let k = self.queue_size();
        let mut logits = Array2::zeros((b, k + 1));
        let pos = (&self.anchors * &self.positives).sum_axis(Axis(1));
        logits.column_mut(0).assign(&pos);
        if k > 0 {
            logits.slice_mut(ndarray::s![.., 1..]).assign(&self.anchors.dot(&self.negatives.t()));
        }
        logits.mapv_inplace(|v| v / self.temperature);
        logits
    }

    /// Row `i` is `positives[i]` when `j == 0`, else `negatives[j-1]`.
    fn candidate(&self, i: usize, j: usize) -> ndarray::ArrayView1<'_, f64> {
        if j == 0 {
            self.positives.row(i)
        } else {
            self.negatives.row(j - 1)
        }
    }
}

/// Stable `ln Σ exp(x)` and the normalized weights `exp(x − lse)`.
fn log_softmax_weights(xs: impl Iterator<Item = f64> + Clone) -> (f64, Vec<f64>) {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.max(LOG_FLOOR).ln();
    let weights = exps.into_iter().map(|e| e / sum).collect();
    (lse, weights)
}

struct PerAnchor {
    lse_all: f64,
    weights_all: Vec<f64>,
}

fn per_anchor(logits: &Array2<f64>) -> Vec<PerAnchor> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let (lse_all, weights_all) = log_softmax_weights(row.iter().copied());
            PerAnchor { lse_all, weights_all }
        })
        .collect()
}

fn moco_from(inp: &ContrastiveBatch<'_>, logits: &Array2<f64>, rows: &[PerAnchor]) -> LossOutput {
    let (b, d) = inp.anchors.dim();
    let scale = 1.0 / (b as f64 * inp.temperature);
    let mut loss = 0.0;
    let mut grad = Array2::zeros((b, d));
    for (i, pa) in rows.iter().enumerate() {
        loss += pa.lse_all - logits[[i, 0]];
        let mut g = grad.row_mut(i);
        for (j, &w) in pa.weights_all.iter().enumerate() {
            let coeff = if j == 0 { w - 1.0 } else { w };
            g.scaled_add(coeff * scale, &inp.candidate(i, j));
        }
    }
    LossOutput { loss: loss / b as f64, grad }
}

fn check_positive_sets(inp: &ContrastiveBatch<'_>, sets: &[Vec<usize>]) -> Result<()> {
    if sets.len() != inp.batch_size() {
        return Err(Error::shape(format!(
            "{} positive sets for {} anchors",
            sets.len(),
            inp.batch_size()
        )));
    }
    for (i, set) in sets.iter().enumerate() {
        let anchor = inp.anchor_labels[i];
        for &k in set {
            let stored = *inp.negative_labels.get(k).ok_or_else(|| {
                Error::shape(format!("positive index {k} outside queue of {}", inp.queue_size()))
            })?;
            if stored != anchor || !stored.is_labeled() {
                return Err(Error::Consistency(format!(
                    "anchor {i} labeled {anchor:?} lists queue key {k} labeled {stored:?} as positive"
                )));
            }
        }
    }
    Ok(())
}

fn id_from(
    inp: &ContrastiveBatch<'_>,
    sets: &[Vec<usize>],
    logits: &Array2<f64>,
    rows: &[PerAnchor],
) -> LossOutput {
    let (b, d) = inp.anchors.dim();
    let scale = 1.0 / (b as f64 * inp.temperature);
    let mut loss = 0.0;
    let mut grad = Array2::zeros((b, d));
    for (i, pa) in rows.iter().enumerate() {
        let set = &sets[i];
        if !inp.anchor_labels[i].is_labeled() || set.is_empty() {
            continue;
        }
        let inv_p = 1.0 / set.len() as f64;
        let (lse_p, weights_p) = log_softmax_weights(set.iter().map(|&k| logits[[i, k + 1]]));
        loss += -inv_p * (lse_p - pa.lse_all);
        let mut g = grad.row_mut(i);
        for (&k, &w) in set.iter().zip(&weights_p) {
            g.scaled_add(-inv_p * scale * w, &inp.negatives.row(k));
        }
        for (j, &w) in pa.weights_all.iter().enumerate() {
            g.scaled_add(inv_p * scale * w, &inp.candidate(i, j));
        }
    }
    LossOutput { loss: loss / b as f64, grad }
}

/// Batch-mean instance-discrimination loss.
pub fn moco_loss(inp: &ContrastiveBatch<'_>) -> Result<LossOutput> {
    inp.check()?;
    let logits = inp.logits();
    Ok(moco_from(inp, &logits, &per_anchor(&logits)))
}

/// Batch-mean in-distribution loss.
///
/// For a labeled anchor `i` with non-empty positive set `P(i)` the term is
/// `−(1/|P|)·log Σ_{p∈P} exp(s_p/τ) / Z_i`, where `Z_i` is the full
/// positive-plus-queue partition function. Unlabeled anchors and anchors with
/// an empty `P(i)` contribute zero but still count in the mean.
pub fn id_loss(inp: &ContrastiveBatch<'_>, positive_sets: &[Vec<usize>]) -> Result<LossOutput> {
    inp.check()?;
    check_positive_sets(inp, positive_sets)?;
    let logits = inp.logits();
    Ok(id_from(inp, positive_sets, &logits, &per_anchor(&logits)))
}

/// `moco + alpha·w·id`. When `alpha·w == 0` the in-distribution branch is not
/// evaluated at all and the result is the plain instance-discrimination loss.
pub fn combined_loss(
    inp: &ContrastiveBatch<'_>,
    positive_sets: &[Vec<usize>],
    alpha: f64,
    w: f64,
) -> Result<CombinedOutput> {
    inp.check()?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be nonnegative, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::domain(format!("schedule weight {w} outside [0, 1]")));
    }
    let id_weight = alpha * w;
    if id_weight != 0.0 {
        check_positive_sets(inp, positive_sets)?;
    }
    let logits = inp.logits();
    let rows = per_anchor(&logits);
    let moco = moco_from(inp, &logits, &rows);
    if id_weight == 0.0 {
        return Ok(CombinedOutput { total: moco.loss, moco: moco.loss, id: 0.0, id_weight, grad: moco.grad });
    }
    let id = id_from(inp, positive_sets, &logits, &rows);
    let mut grad = moco.grad;
    grad.scaled_add(id_weight, &id.grad);
    Ok(CombinedOutput {
        total: moco.loss + id_weight * id.loss,
        moco: moco.loss,
        id: id.loss,
        id_weight,
        grad,
    })
}

/// Coefficient on the in-distribution loss at `epoch`: `1 − t/t_end` before
/// `t_end`, zero from `t_end` on, and a constant one when no end is set.
pub fn schedule_w(epoch: i64, t_end: ScheduleEnd) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::domain(format!("negative epoch {epoch}")));
    }
    Ok(match t_end.0 {
        None => 1.0,
        Some(end) if epoch >= i64::from(end) => 0.0,
        Some(end) => 1.0 - epoch as f64 / f64::from(end),
    })
}

/// Per-positive ratio `exp(s_p/τ)/Z` for every queue index of one anchor.
pub fn positive_ratios(inp: &ContrastiveBatch<'_>, anchor: usize) -> Result<Array1<f64>> {
    inp.check()?;
    let logits = inp.logits();
    let row = logits.row(anchor);
    let (_, weights) = log_softmax_weights(row.iter().copied());
    Ok(Array1::from(weights[1..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn batch<'a>(
        a: &'a Array2<f64>,
        p: &'a Array2<f64>,
        n: &'a Array2<f64>,
        nl: &'a [ClassLabel],
        al: &'a [ClassLabel],
        tau: f64,
    ) -> ContrastiveBatch<'a> {
        ContrastiveBatch {
            anchors: a.view(),
            positives: p.view(),
            negatives: n.view(),
            negative_labels: nl,
            anchor_labels: al,
            temperature: tau,
        }
    }

    const U: ClassLabel = ClassLabel::UNLABELED;

    #[test]
    fn moco_worked_values() {
        let a = array![[1.0, 0.0]];
        let n = array![[0.0, 1.0], [0.0, -1.0]];
        let out = moco_loss(&batch(&a, &a, &n, &[U, U], &[U], 1.0)).unwrap();
        let e = std::f64::consts::E;
        assert!((out.loss - (-(e / (e + 2.0)).ln())).abs() < 1e-12);
        assert!((out.loss - 0.55144).abs() < 5e-6);

        let n = array![[-1.0, 0.0]];
        let out = moco_loss(&batch(&a, &a, &n, &[U], &[U], 0.2)).unwrap();
        assert!((out.loss - (1.0 + (-10.0f64).exp()).ln()).abs() < 1e-15);
        assert!((out.loss - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn moco_without_negatives_is_exactly_zero() {
        let a = array![[0.6, 0.8]];
        let p = array![[0.8, 0.6]];
        let n = Array2::zeros((0, 2));
        let out = moco_loss(&batch(&a, &p, &n, &[], &[U], 0.3)).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn id_worked_value() {
        // Single queue key in P with similarity 1, positive with similarity 0:
        // −log(e / (e + 1)).
        let c = ClassLabel::class(0);
        let a = array![[1.0, 0.0]];
        let p = array![[0.0, 1.0]];
        let n = array![[1.0, 0.0]];
        let out = id_loss(&batch(&a, &p, &n, &[c], &[c], 1.0), &[vec![0]]).unwrap();
        let e = std::f64::consts::E;
        assert!((out.loss - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((out.loss - 0.31326).abs() < 5e-6);
    }

    #[test]
    fn id_zero_cases() {
        let c = ClassLabel::class(1);
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        let n = array![[1.0, 0.0], [0.0, 1.0]];
        let unl = id_loss(&batch(&a, &a, &n, &[c, c], &[U, U], 0.5), &[vec![], vec![]]).unwrap();
        assert_eq!(unl.loss, 0.0);
        let empty = id_loss(&batch(&a, &a, &n, &[U, U], &[c, c], 0.5), &[vec![], vec![]]).unwrap();
        assert_eq!(empty.loss, 0.0);
        assert!(empty.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn id_rejects_desynchronized_sets() {
        let a = array![[1.0, 0.0]];
        let n = array![[1.0, 0.0], [0.0, 1.0]];
        let labels = [ClassLabel::class(0), ClassLabel::class(1)];
        let anchor = [ClassLabel::class(0)];
        let b = batch(&a, &a, &n, &labels, &anchor, 1.0);
        assert!(matches!(id_loss(&b, &[vec![1]]), Err(Error::Consistency(_))));
        assert!(matches!(id_loss(&b, &[vec![5]]), Err(Error::Shape(_))));
        let b = batch(&a, &a, &n, &labels, &[U], 1.0);
        assert!(matches!(id_loss(&b, &[vec![0]]), Err(Error::Consistency(_))));
    }

    #[test]
    fn input_errors() {
        let a = array![[1.0, 0.0]];
        let n = array![[1.0, 0.0, 0.0]];
        assert!(matches!(moco_loss(&batch(&a, &a, &n, &[U], &[U], 1.0)), Err(Error::Shape(_))));
        let n = array![[0.0, 1.0]];
        assert!(matches!(moco_loss(&batch(&a, &a, &n, &[U], &[U], 0.0)), Err(Error::Config(_))));
        assert!(matches!(moco_loss(&batch(&a, &a, &n, &[U], &[U], -1.0)), Err(Error::Config(_))));
    }

    #[test]
    fn combined_skips_branch_when_weight_is_zero() {
        let c = ClassLabel::class(0);
        let a = array![[0.6, 0.8], [1.0, 0.0]];
        let p = array![[0.8, 0.6], [0.0, 1.0]];
        let n = array![[1.0, 0.0], [0.0, -1.0], [-0.6, 0.8]];
        let nl = [c, U, c];
        let al = [c, U];
        let b = batch(&a, &p, &n, &nl, &al, 0.2);
        let sets = vec![vec![0, 2], vec![]];
        let moco = moco_loss(&b).unwrap();
        for (alpha, w) in [(0.0, 1.0), (2.0, 0.0), (0.0, 0.0)] {
            let out = combined_loss(&b, &sets, alpha, w).unwrap();
            assert_eq!(out.total.to_bits(), moco.loss.to_bits());
            assert_eq!(out.grad, moco.grad);
        }
        let id = id_loss(&b, &sets).unwrap();
        let out = combined_loss(&b, &sets, 2.0, 0.5).unwrap();
        assert!((out.total - (moco.loss + id.loss)).abs() < 1e-15);
    }

    #[test]
    fn combined_worked_value() {
        // The two component worked values above, weighted by alpha=2, w=1.
        // 1.17796 is the combination of the five-decimal components; the
        // unrounded combination is 1.1779681.
        let rounded: f64 = 0.55144 + 2.0 * 0.31326;
        assert!((rounded - 1.17796).abs() < 1e-12);
        let exact: f64 = (2.0 + 1.0f64.exp()).ln() - 1.0 + 2.0 * ((1.0 + 1.0f64.exp()).ln() - 1.0);
        assert!((exact - 1.17796).abs() < 1e-5);
    }

    #[test]
    fn schedule_examples() {
        let end = ScheduleEnd::at(200);
        assert_eq!(schedule_w(0, end).unwrap(), 1.0);
        assert_eq!(schedule_w(100, end).unwrap(), 0.5);
        assert_eq!(schedule_w(200, end).unwrap(), 0.0);
        assert_eq!(schedule_w(999, end).unwrap(), 0.0);
        assert_eq!(schedule_w(0, ScheduleEnd::at(0)).unwrap(), 0.0);
        assert_eq!(schedule_w(5000, ScheduleEnd::NONE).unwrap(), 1.0);
        assert!(matches!(schedule_w(-1, end), Err(Error::Domain(_))));
    }

    #[test]
    fn large_logits_stay_finite() {
        let a = array![[1.0, 0.0]];
        let p = array![[-1.0, 0.0]];
        let n = array![[1.0, 0.0], [1.0, 0.0]];
        let c = ClassLabel::class(0);
        let (nl, al) = ([c, c], [c]);
        let b = batch(&a, &p, &n, &nl, &al, 1e-3);
        let out = combined_loss(&b, &[vec![0, 1]], 2.0, 1.0).unwrap();
        assert!(out.total.is_finite() && out.grad.iter().all(|g| g.is_finite()));
        assert!((out.moco - (2000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
