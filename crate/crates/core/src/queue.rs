//! Fixed-capacity FIFO of key embeddings paired with the class label each key
//! was enqueued with.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RngStreams, QUEUE_INIT};
use crate::vector::{l2_normalize, norm, ClassLabel, Embedding, UNIT_NORM_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<(Embedding, ClassLabel)>,
    /// Total number of keys admitted since initialization.
    write_cursor: u64,
}

/// Dense, owned copy of the queue at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueSnapshot {
    pub keys: Array2<f64>,
    pub labels: Vec<ClassLabel>,
}

impl MemoryQueue {
    /// Fills the queue with `capacity` random unit vectors, all unlabeled.
    pub fn new(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::config(format!(
                "queue needs positive capacity and dimension, got K={capacity}, d'={dim}"
            )));
        }
        let mut rng = RngStreams::new(seed).stream(QUEUE_INIT, &[]);
        let mut entries = VecDeque::with_capacity(capacity);
        while entries.len() < capacity {
            let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            // A zero draw has probability zero; resample rather than special-case.
            if let Ok(e) = l2_normalize(&raw) {
                entries.push_back((e, ClassLabel::UNLABELED));
            }
        }
        Ok(Self { capacity, dim, entries, write_cursor: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_cursor(&self) -> u64 {
        self.write_cursor
    }

    pub fn entries(&self) -> impl Iterator<Item = &(Embedding, ClassLabel)> {
        self.entries.iter()
    }

    /// Evicts the `keys.len()` oldest entries and appends `keys`, newest last.
    ///
    /// Validation happens before any mutation, so a rejected batch leaves the
    /// queue untouched.
    pub fn enqueue_batch(&mut self, keys: Vec<(Embedding, ClassLabel)>) -> Result<()> {
        if keys.len() > self.capacity {
            return Err(Error::Capacity { batch: keys.len(), capacity: self.capacity });
        }
        for (index, (e, _)) in keys.iter().enumerate() {
            if e.dim() != self.dim {
                return Err(Error::shape(format!("key {index} has dimension {}, queue holds {}", e.dim(), self.dim)));
            }
            let n = norm(e.as_slice());
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Normalization { index, norm: n });
            }
        }
        self.entries.drain(..keys.len());
        self.write_cursor += keys.len() as u64;
        self.entries.extend(keys);
        Ok(())
    }

    /// Queue indices whose stored label equals `label`; empty for unlabeled.
    pub fn positives_of(&self, label: ClassLabel) -> Vec<usize> {
        if !label.is_labeled() {
            return Vec::new();
        }
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, (_, l))| *l == label)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        let mut keys = Array2::zeros((self.entries.len(), self.dim));
        for (mut row, (e, _)) in keys.rows_mut().into_iter().zip(&self.entries) {
            row.assign(&ndarray::ArrayView1::from(e.as_slice()));
        }
        QueueSnapshot { keys, labels: self.entries.iter().map(|(_, l)| *l).collect() }
    }
}

impl QueueSnapshot {
    /// Same contract as [`MemoryQueue::positives_of`], against the frozen labels.
    pub fn positives_of(&self, label: ClassLabel) -> Vec<usize> {
        if !label.is_labeled() {
            return Vec::new();
        }
        self.labels.iter().enumerate().filter(|(_, l)| **l == label).map(|(k, _)| k).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(x: f64, y: f64) -> Embedding {
        l2_normalize(&[x, y]).unwrap()
    }

    fn queue_of(items: &[(Embedding, ClassLabel)]) -> MemoryQueue {
        let mut q = MemoryQueue::new(items.len(), 2, 0).unwrap();
        q.enqueue_batch(items.to_vec()).unwrap();
        q
    }

    #[test]
    fn init_examples() {
        let q = MemoryQueue::new(4, 2, 0).unwrap();
        assert_eq!(q.len(), 4);
        for (emb, label) in q.entries() {
            assert!((norm(emb.as_slice()) - 1.0).abs() <= 1e-6);
            assert_eq!(*label, ClassLabel::UNLABELED);
        }
        let q = MemoryQueue::new(1, 128, 3).unwrap();
        assert!((norm(q.entries().next().unwrap().0.as_slice()) - 1.0).abs() <= 1e-6);
        assert!(matches!(MemoryQueue::new(0, 2, 0), Err(Error::Config(_))));
        assert!(matches!(MemoryQueue::new(2, 0, 0), Err(Error::Config(_))));
        assert_eq!(MemoryQueue::new(8, 3, 11).unwrap(), MemoryQueue::new(8, 3, 11).unwrap());
    }

    #[test]
    fn fifo_eviction() {
        let (a, b, c, d, e2, f) = (e(1., 0.), e(0., 1.), e(-1., 0.), e(0., -1.), e(1., 1.), e(-1., 1.));
        let l = ClassLabel::class;
        let mut q = queue_of(&[(a, l(0)), (b.clone(), l(1)), (c.clone(), l(2)), (d.clone(), l(3))]);
        q.enqueue_batch(vec![(e2.clone(), l(4)), (f.clone(), l(5))]).unwrap();
        let got: Vec<_> = q.entries().cloned().collect();
        assert_eq!(got, vec![(c, l(2)), (d, l(3)), (e2, l(4)), (f, l(5))]);
        assert_eq!(q.write_cursor(), 6);
    }

    #[test]
    fn full_replacement_and_capacity_error() {
        let mut q = MemoryQueue::new(3, 2, 1).unwrap();
        let items: Vec<_> = (0..3).map(|i| (e(1.0, i as f64), ClassLabel::class(i))).collect();
        q.enqueue_batch(items.clone()).unwrap();
        assert_eq!(q.entries().cloned().collect::<Vec<_>>(), items);
        let too_many: Vec<_> = (0..4).map(|_| (e(1.0, 0.0), ClassLabel::UNLABELED)).collect();
        assert!(matches!(q.enqueue_batch(too_many), Err(Error::Capacity { batch: 4, capacity: 3 })));
        assert_eq!(q.entries().cloned().collect::<Vec<_>>(), items);
    }

    #[test]
    fn rejects_non_unit_keys() {
        let mut q = MemoryQueue::new(2, 2, 1).unwrap();
        let bad: Embedding = serde_json::from_str("[1.0, 0.0]").unwrap();
        q.enqueue_batch(vec![(bad, ClassLabel::UNLABELED)]).unwrap();
        // Deserialization enforces the invariant, so a non-unit key cannot be built.
        assert!(serde_json::from_str::<Embedding>("[2.0, 0.0]").is_err());
    }

    #[test]
    fn positives_examples() {
        let l = ClassLabel::class;
        let u = ClassLabel::UNLABELED;
        let q = queue_of(&[(e(1., 0.), l(0)), (e(0., 1.), u), (e(1., 1.), l(1)), (e(1., 2.), l(0))]);
        assert_eq!(q.positives_of(l(0)), vec![0, 3]);
        assert!(q.positives_of(u).is_empty());
        let all_u = MemoryQueue::new(5, 2, 0).unwrap();
        assert!(all_u.positives_of(l(2)).is_empty());
    }

    #[test]
    fn snapshot_examples() {
        let (e0, e1) = (e(1., 0.), e(0., 1.));
        let mut q = queue_of(&[(e0.clone(), ClassLabel::class(1)), (e1.clone(), ClassLabel::UNLABELED)]);
        let snap = q.snapshot();
        assert_eq!(snap.keys.row(0).to_vec(), e0.as_slice());
        assert_eq!(snap.keys.row(1).to_vec(), e1.as_slice());
        assert_eq!(snap.labels.iter().map(|l| l.raw()).collect::<Vec<_>>(), vec![1, -1]);
        assert_eq!(q.snapshot(), snap);
        q.enqueue_batch(vec![(e(1., 1.), ClassLabel::class(0))]).unwrap();
        assert_eq!(snap.keys.row(0).to_vec(), e0.as_slice());
        assert_ne!(q.snapshot(), snap);
    }

    proptest! {
        #[test]
        fn positives_partition_the_queue(labels in prop::collection::vec(-1i64..4, 1..40)) {
            let items: Vec<_> = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| (e(1.0, i as f64), ClassLabel::from_raw(l).unwrap()))
                .collect();
            let q = queue_of(&items);
            let snap = q.snapshot();
            let mut seen = vec![false; q.len()];
            for c in 0..4 {
                for k in q.positives_of(ClassLabel::class(c)) {
                    prop_assert_eq!(snap.labels[k], ClassLabel::class(c));
                    prop_assert!(!seen[k]);
                    seen[k] = true;
                }
            }
            for (k, s) in seen.iter().enumerate() {
                prop_assert_eq!(*s, snap.labels[k] != ClassLabel::UNLABELED);
            }
        }
    }
}
