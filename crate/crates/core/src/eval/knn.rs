//! Weighted k-nearest-neighbour classification over an [`EmbeddingBank`].
//!
//! Neighbours are the `k` rows with the highest dot-product similarity;
//! equal similarities are ordered by ascending label, which makes the result
//! independent of row order. Votes are accumulated in that neighbour order and
//! the heaviest class wins, with ties going to the smallest class index.

use std::cmp::Ordering;

use super::EmbeddingBank;
use crate::error::{Error, Result};
use crate::vector::{dot, ClassLabel};

/// Vote temperature of the exponential weighting.
pub const DEFAULT_KNN_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VoteWeighting {
    /// Each neighbour votes `exp(similarity / temperature)`.
    Exponential { temperature: f64 },
    /// Every neighbour votes 1 (the infinite-temperature limit).
    Uniform,
}

impl Default for VoteWeighting {
    fn default() -> Self {
        VoteWeighting::Exponential { temperature: DEFAULT_KNN_TEMPERATURE }
    }
}

impl VoteWeighting {
    fn weight(self, similarity: f64) -> f64 {
        match self {
            VoteWeighting::Exponential { temperature } => (similarity / temperature).exp(),
            VoteWeighting::Uniform => 1.0,
        }
    }
}

fn neighbour_order(a: &(f64, ClassLabel), b: &(f64, ClassLabel)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn check_reference(bank: &EmbeddingBank, k: usize, weighting: VoteWeighting) -> Result<()> {
    if k == 0 || k > bank.len() {
        return Err(Error::config(format!("k = {k} needs 1 ≤ k ≤ {} reference rows", bank.len())));
    }
    if let VoteWeighting::Exponential { temperature } = weighting {
        if !(temperature > 0.0) {
            return Err(Error::config(format!("vote temperature must be positive, got {temperature}")));
        }
    }
    if bank.labels().iter().any(|l| !l.is_labeled()) {
        return Err(Error::domain("reference bank contains unlabeled rows"));
    }
    Ok(())
}

fn classify_unchecked(bank: &EmbeddingBank, query: &[f64], k: usize, weighting: VoteWeighting) -> ClassLabel {
    let mut scored: Vec<(f64, ClassLabel)> =
        (0..bank.len()).map(|i| (dot(bank.row(i), query), bank.labels()[i])).collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, neighbour_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(neighbour_order);
    let classes = scored.iter().filter_map(|(_, l)| l.index()).max().unwrap_or(0) + 1;
    let mut votes = vec![0.0; classes];
    for (sim, label) in &scored {
        votes[label.index().expect("checked labeled")] += weighting.weight(*sim);
    }
    let mut best = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = c;
        }
    }
    ClassLabel::class(best)
}

pub fn knn_classify(bank: &EmbeddingBank, query: &[f64], k: usize, weighting: VoteWeighting) -> Result<ClassLabel> {
    check_reference(bank, k, weighting)?;
    if query.len() != bank.dim() {
        return Err(Error::shape(format!("query of dimension {} against bank of {}", query.len(), bank.dim())));
    }
    Ok(classify_unchecked(bank, query, k, weighting))
}

/// Fraction of `queries` whose predicted label equals their stored label.
pub fn knn_accuracy(bank: &EmbeddingBank, queries: &EmbeddingBank, k: usize, weighting: VoteWeighting) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::domain("k-NN accuracy over an empty query set"));
    }
    check_reference(bank, k, weighting)?;
    if queries.dim() != bank.dim() {
        return Err(Error::shape(format!("queries of dimension {} against bank of {}", queries.dim(), bank.dim())));
    }
    let correct = (0..queries.len())
        .filter(|&i| classify_unchecked(bank, queries.row(i), k, weighting) == queries.labels()[i])
        .count();
    Ok(correct as f64 / queries.len() as f64)
}

/// Mean pairwise similarity within classes and across classes.
pub fn class_cohesion(bank: &EmbeddingBank) -> Result<(f64, f64)> {
    let labels = bank.labels();
    if labels.iter().any(|l| !l.is_labeled()) {
        return Err(Error::domain("cohesion needs every row labeled"));
    }
    let classes = labels.iter().filter_map(|l| l.index()).max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|l| counts[l.index().unwrap()] += 1);
    let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    if present.len() < 2 || present.iter().any(|&c| c < 2) {
        return Err(Error::domain("cohesion needs at least two classes with two members each"));
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..bank.len() {
        for j in i + 1..bank.len() {
            let s = dot(bank.row(i), bank.row(j));
            if labels[i] == labels[j] {
                intra += s;
                n_intra += 1;
            } else {
                inter += s;
                n_inter += 1;
            }
        }
    }
    Ok((intra / n_intra as f64, inter / n_inter as f64))
}
