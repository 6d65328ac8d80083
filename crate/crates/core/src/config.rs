//! Training hyperparameters and the named paper-scale presets.

use std::fmt;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Epoch at which the in-distribution loss coefficient reaches zero.
///
/// `None` disables the schedule: the coefficient stays at one for the whole
/// run. Serialized as an integer or the string `"none"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScheduleEnd(pub Option<u32>);

impl ScheduleEnd {
    pub const NONE: ScheduleEnd = ScheduleEnd(None);

    pub fn at(epoch: u32) -> Self {
        ScheduleEnd(Some(epoch))
    }
}

impl fmt::Display for ScheduleEnd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(t) => write!(f, "{t}"),
            None => f.write_str("none"),
        }
    }
}

impl std::str::FromStr for ScheduleEnd {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_matches('"');
        if s.eq_ignore_ascii_case("none") {
            return Ok(ScheduleEnd::NONE);
        }
        s.parse::<u32>()
            .map(ScheduleEnd::at)
            .map_err(|_| Error::config(format!("t_end must be a nonnegative integer or \"none\", got {s:?}")))
    }
}

impl Serialize for ScheduleEnd {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(t) => s.serialize_u32(t),
            None => s.serialize_str("none"),
        }
    }
}

impl<'de> Deserialize<'de> for ScheduleEnd {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(i) => u32::try_from(i)
                .map(ScheduleEnd::at)
                .map_err(|_| de::Error::custom(format!("t_end out of range: {i}"))),
            Raw::Str(s) => s.parse().map_err(de::Error::custom),
        }
    }
}

/// Scalar hyperparameters of contrastive pre-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    /// Key-encoder EMA coefficient.
    pub momentum: f64,
    pub queue_size: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub t_end: ScheduleEnd,
    pub total_epochs: u32,
    pub base_lr: f64,
    pub optimizer_momentum: f64,
    pub embedding_dim: usize,
    pub ghost_subbatches: usize,
    pub seed: u64,
    /// Run k-NN validation every this many epochs (0 disables it).
    #[serde(default)]
    pub monitor_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset("cifar10").expect("built-in preset")
    }
}

impl TrainConfig {
    pub const PRESETS: [&'static str; 4] = ["cifar10", "cifar100", "tiny-imagenet", "desk"];

    /// Named hyperparameter sets. The three dataset presets carry the published
    /// pre-training recipe; `desk` is a small configuration for synthetic data.
    pub fn preset(name: &str) -> Result<Self> {
        let paper = |momentum: f64, queue_size: usize| TrainConfig {
            temperature: 0.2,
            momentum,
            queue_size,
            batch_size: 256,
            alpha: 2.0,
            t_end: ScheduleEnd::at(200),
            total_epochs: 1000,
            base_lr: 0.03,
            optimizer_momentum: 0.9,
            embedding_dim: 128,
            ghost_subbatches: 8,
            seed: 0,
            monitor_every: 0,
        };
        match name {
            "cifar10" | "cifar100" => Ok(paper(0.95, 4096)),
            "tiny-imagenet" => Ok(paper(0.999, 8192)),
            "desk" => Ok(TrainConfig {
                temperature: 0.2,
                momentum: 0.95,
                queue_size: 128,
                batch_size: 64,
                alpha: 2.0,
                t_end: ScheduleEnd::at(100),
                total_epochs: 200,
                base_lr: 0.1,
                optimizer_momentum: 0.9,
                embedding_dim: 32,
                ghost_subbatches: 4,
                seed: 0,
                monitor_every: 0,
            }),
            other => Err(Error::config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.optimizer_momentum) {
            return fail(format!(
                "optimizer_momentum must lie in [0, 1), got {}",
                self.optimizer_momentum
            ));
        }
        if self.batch_size == 0 || self.queue_size == 0 || self.embedding_dim == 0 {
            return fail("batch_size, queue_size and embedding_dim must be positive".into());
        }
        if !self.queue_size.is_multiple_of(self.batch_size) {
            return fail(format!(
                "queue_size {} is not a multiple of batch_size {}",
                self.queue_size, self.batch_size
            ));
        }
        if self.ghost_subbatches == 0 || !self.batch_size.is_multiple_of(self.ghost_subbatches) {
            return fail(format!(
                "batch_size {} is not divisible by ghost_subbatches {}",
                self.batch_size, self.ghost_subbatches
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if let Some(t_end) = self.t_end.0 {
            if t_end > self.total_epochs && self.total_epochs > 0 {
                return fail(format!("t_end {t_end} exceeds total_epochs {}", self.total_epochs));
            }
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        Ok(())
    }

    /// Half-period cosine learning rate at epoch granularity.
    pub fn learning_rate(&self, epoch: u32) -> f64 {
        cosine_lr(self.base_lr, epoch, self.total_epochs)
    }
}

/// `base · ½(1 + cos(π·t/T))`, clamped to zero once `t ≥ T`.
pub fn cosine_lr(base_lr: f64, epoch: u32, total_epochs: u32) -> f64 {
    if total_epochs == 0 || epoch >= total_epochs {
        return if total_epochs == 0 { base_lr } else { 0.0 };
    }
    let progress = f64::from(epoch) / f64::from(total_epochs);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
