//! Base-session adaptation: a residual bottleneck head trained with
//! cross-entropy plus mixture-prototype losses, and the statistics extracted
//! from the frozen head afterward.

pub mod bank;
pub mod checkpoint;
pub mod head;
pub mod losses;
pub mod objective;
pub mod stats;
pub mod train;

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypersphere::SphereError;
use crate::store::LabeledEmbedding;

pub use bank::{prune_prototypes, update_prototypes_ema, EmaStep, PrototypeBank};
pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use head::{Activation, BottleneckHead, ForwardCache, HeadGradient};
pub use losses::{balance_weights, loss_ce, loss_compact, loss_proto_contrastive, LossError};
pub use objective::{batch_assignments, evaluate_batch, BatchObjective, ObjectiveSettings};
pub use stats::{extract_base_covariances, extract_base_prototypes, mean_vector, unbiased_covariance, BasePrototype};
pub use train::{train_base_session, EpochLoss, FrozenHead, TrainReport, TrainedBase};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Sphere(#[from] SphereError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("class {0} has no samples")]
    EmptyClass(u32),
    #[error("record with class {0} is not part of the class set")]
    UnknownClass(u32),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
}

/// Step-size schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// `lr₀·½(1 + cos(π·e/E))`.
    Cosine,
    Constant,
    /// Full-set loss is evaluated after each epoch; an epoch that raises it is
    /// rolled back and the step size halved.
    HalveOnPlateau,
}

impl fmt::Display for StepSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Constant => "constant",
            Self::HalveOnPlateau => "halve_on_plateau",
        })
    }
}

impl FromStr for StepSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cosine" => Ok(Self::Cosine),
            "constant" => Ok(Self::Constant),
            "halve_on_plateau" | "plateau" => Ok(Self::HalveOnPlateau),
            other => Err(format!("unknown step schedule '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub schedule: StepSchedule,
    /// Compactness weight; `None` takes the base-class-count schedule.
    pub alpha: Option<f64>,
    /// Contrastive weight; `None` takes the base-class-count schedule.
    pub lambda: Option<f64>,
    pub tau: f64,
    pub tau_assign: f64,
    /// Prototypes per class.
    pub k: usize,
    pub ema_momentum: f64,
    pub prune_threshold: f64,
    pub init_sigma: f64,
    /// Bottleneck width; `None` means `d/4`.
    pub bottleneck: Option<usize>,
    pub activation: Activation,
    pub residual: bool,
    pub seed: u64,
    /// Train with the compactness and contrastive terms and maintain banks.
    pub mixture_losses: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.01,
            sgd_momentum: 0.9,
            schedule: StepSchedule::Cosine,
            alpha: None,
            lambda: None,
            tau: 0.1,
            tau_assign: 0.1,
            k: 4,
            ema_momentum: 0.99,
            prune_threshold: 0.0,
            init_sigma: 0.05,
            bottleneck: None,
            activation: Activation::Gelu,
            residual: true,
            seed: 0,
            mixture_losses: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad("sgd_momentum must lie in [0, 1)");
        }
        for (name, w) in [("alpha", self.alpha), ("lambda", self.lambda)] {
            if let Some(w) = w {
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(TrainError::Config(format!("{name} must be nonnegative")));
                }
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) || !(self.tau_assign > 0.0 && self.tau_assign.is_finite()) {
            return bad("temperatures must be positive");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad("ema_momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return bad("prune_threshold must lie in [0, 1)");
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return bad("init_sigma must be nonnegative");
        }
        if self.bottleneck == Some(0) {
            return bad("bottleneck must be at least 1");
        }
        Ok(())
    }

    /// Bottleneck width for input dimension `dim`.
    pub fn bottleneck_for(&self, dim: usize) -> usize {
        self.bottleneck.unwrap_or((dim / 4).max(1))
    }

    /// `(α, λ)` for a base session of `nbase` classes.
    pub fn loss_weights(&self, nbase: usize) -> (f64, f64) {
        let (a, l) = balance_weights(nbase);
        (self.alpha.unwrap_or(a), self.lambda.unwrap_or(l))
    }
}

/// Embeddings with labels indexed into an ordered list of class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSet {
    pub class_ids: Vec<u32>,
    pub xs: Vec<DVector<f64>>,
    pub labels: Vec<usize>,
}

impl ClassSet {
    pub fn from_records(records: &[&LabeledEmbedding], class_ids: &[u32]) -> Result<Self, TrainError> {
        let mut xs = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            let label = class_ids.iter().position(|&c| c == r.class_id).ok_or(TrainError::UnknownClass(r.class_id))?;
            xs.push(DVector::from_vec(r.to_f64()));
            labels.push(label);
        }
        Ok(Self { class_ids: class_ids.to_vec(), xs, labels })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.xs.first().map_or(0, DVector::len)
    }

    /// Samples of class index `c`.
    pub fn class_samples(&self, c: usize) -> Vec<&DVector<f64>> {
        self.xs.iter().zip(&self.labels).filter(|(_, &y)| y == c).map(|(x, _)| x).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Split;

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range_values() {
        let cases = [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { alpha: Some(-1.0), ..Default::default() },
            TrainConfig { tau: 0.0, ..Default::default() },
            TrainConfig { ema_momentum: 1.0, ..Default::default() },
            TrainConfig { k: 0, ..Default::default() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn weight_overrides() {
        let c = TrainConfig { alpha: Some(0.5), ..Default::default() };
        let (a, l) = c.loss_weights(10);
        assert_eq!(a, 0.5);
        assert_eq!(l, balance_weights(10).1);
    }

    #[test]
    fn schedule_parse_round_trip() {
        for s in [StepSchedule::Cosine, StepSchedule::Constant, StepSchedule::HalveOnPlateau] {
            assert_eq!(s.to_string().parse::<StepSchedule>().unwrap(), s);
        }
    }

    #[test]
    fn class_set_indexes_labels() {
        let a = LabeledEmbedding::new(vec![1.0, 0.0], 7, Split::Train);
        let b = LabeledEmbedding::new(vec![0.0, 1.0], 3, Split::Train);
        let set = ClassSet::from_records(&[&a, &b], &[3, 7]).unwrap();
        assert_eq!(set.labels, vec![1, 0]);
        assert!(matches!(ClassSet::from_records(&[&a], &[3]), Err(TrainError::UnknownClass(7))));
    }
}
