//! Representation-quality evaluation: weighted k-NN over embedding banks,
//! class cohesion, linear probing and fine-tuning.

mod bank;
mod knn;
mod probe;

pub use bank::EmbeddingBank;
pub use knn::{class_cohesion, knn_accuracy, knn_classify, VoteWeighting, DEFAULT_KNN_TEMPERATURE};
pub use probe::{
    evaluate_classifier, fine_tune, train_linear_probe, Backbone, FrozenEncoder, LinearClassifier, ProbeConfig,
};
