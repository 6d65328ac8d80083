//! Unit-norm embeddings, class labels, and the similarity kernel.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit-norm invariant.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A class index in `0..C`, or the reserved [`ClassLabel::UNLABELED`] sentinel.
///
/// Serialized as a plain integer with `-1` for unlabeled.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(i32);

impl ClassLabel {
    pub const UNLABELED: ClassLabel = ClassLabel(-1);

    pub fn class(index: usize) -> Self {
        ClassLabel(i32::try_from(index).expect("class index fits in i32"))
    }

    pub fn from_raw(raw: i64) -> Result<Self> {
        match raw {
            -1 => Ok(Self::UNLABELED),
            r if r >= 0 && r <= i64::from(i32::MAX) => Ok(ClassLabel(r as i32)),
            r => Err(Error::Parse(format!("invalid class label {r}"))),
        }
    }

    pub fn raw(self) -> i64 {
        i64::from(self.0)
    }

    pub fn is_labeled(self) -> bool {
        self.0 >= 0
    }

    pub fn index(self) -> Option<usize> {
        if self.is_labeled() {
            Some(self.0 as usize)
        } else {
            None
        }
    }
}

impl fmt::Debug for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index() {
            Some(c) => write!(f, "Class({c})"),
            None => f.write_str("Unlabeled"),
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A unit-norm representation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps a vector that is already unit-norm, rejecting anything that is not.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = norm(&values);
        if values.is_empty() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Normalization { index: 0, norm });
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Embedding::from_unit(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Divides `v` by its Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Embedding> {
    let n = norm(v);
    if v.is_empty() || n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector of length {} with norm {n}",
            v.len()
        )));
    }
    Ok(Embedding(v.iter().map(|x| x / n).collect()))
}

/// Dot product of two embeddings; equals cosine similarity for unit vectors.
pub fn similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "similarity between dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(dot(&a.0, &b.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Embedding {
        l2_normalize(v).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let e = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((e.as_slice()[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn similarity_examples() {
        let a = unit(&[1.0, 0.0]);
        assert_eq!(similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(similarity(&a, &unit(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(similarity(&a, &unit(&[-1.0, 0.0])).unwrap(), -1.0);
        assert!(matches!(similarity(&a, &unit(&[1.0, 0.0, 0.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn unlabeled_is_distinct_and_serializes_as_minus_one() {
        assert_eq!(ClassLabel::UNLABELED.raw(), -1);
        for c in 0..100 {
            assert_ne!(ClassLabel::class(c), ClassLabel::UNLABELED);
        }
        assert_eq!(serde_json::to_string(&ClassLabel::UNLABELED).unwrap(), "-1");
        assert!(ClassLabel::from_raw(-2).is_err());
    }

    #[test]
    fn from_unit_rejects_non_unit() {
        assert!(Embedding::from_unit(vec![1.0, 1.0]).is_err());
        assert!(Embedding::from_unit(vec![]).is_err());
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 1..16)
            .prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(v in nonzero_vec()) {
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(once.as_slice()).unwrap();
            prop_assert!((norm(once.as_slice()) - 1.0).abs() <= UNIT_NORM_TOL);
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn similarity_bounded_and_symmetric(
            (a, b) in (1usize..12).prop_flat_map(|d| (
                prop::collection::vec(-5.0f64..5.0, d),
                prop::collection::vec(-5.0f64..5.0, d),
            )).prop_filter("nonzero", |(a, b)| norm(a) > 1e-3 && norm(b) > 1e-3)
        ) {
            let (a, b) = (unit(&a), unit(&b));
            let ab = similarity(&a, &b).unwrap();
            prop_assert!(ab.abs() <= 1.0 + 1e-6);
            prop_assert_eq!(ab.to_bits(), similarity(&b, &a).unwrap().to_bits());
        }
    }
}
