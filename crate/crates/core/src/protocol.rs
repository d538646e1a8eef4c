//! The incremental evaluation protocol: adapt on the base session, freeze,
//! then per session build and calibrate class statistics and score the
//! cumulative test set.

use std::collections::BTreeMap;

use nalgebra::DVector;
use thiserror::Error;

use crate::adaptation::stats::{class_features, covariances_from_features, prototypes_from_features};
use crate::adaptation::{train_base_session, ClassSet, FrozenHead, TrainConfig, TrainError};
use crate::analogy::{
    build_new_class_prototypes, calibrate_new_class, sa_score_vector, uncalibrated_new_class, AnalogyConfig,
    AnalogyError, BaseReference, ClassStatistics,
};
use crate::ensemble::{predict, soft_vote, ClassCalibration, EnsembleError, OtsScorer, RandomProjectionScorer};
use crate::store::{sample_session_data, session_test_data, LabeledEmbedding, SessionPlan, StoreError};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analogy(#[from] AnalogyError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("{0}")]
    Invalid(String),
}

/// Which pipeline components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    /// Compactness and prototype-contrastive terms during adaptation.
    pub mixture_losses: bool,
    /// Analogy calibration of new-class statistics.
    pub calibration: bool,
    /// Soft voting with the random-projection scorer.
    pub voting: bool,
}

impl Toggles {
    pub const ALL: Self = Self { mixture_losses: true, calibration: true, voting: true };

    /// `B1` plain mean prototypes, `B2` adds the mixture losses, `B3` adds
    /// calibration, `B4` adds voting.
    pub fn preset(name: &str) -> Option<Self> {
        let t = |m, c, v| Some(Self { mixture_losses: m, calibration: c, voting: v });
        match name.to_ascii_uppercase().as_str() {
            "B1" => t(false, false, false),
            "B2" => t(true, false, false),
            "B3" => t(true, true, false),
            "B4" => t(true, true, true),
            _ => None,
        }
    }

    pub fn preset_name(&self) -> Option<&'static str> {
        ["B1", "B2", "B3", "B4"].into_iter().find(|n| Self::preset(n) == Some(*self))
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub train: TrainConfig,
    pub analogy: AnalogyConfig,
    pub toggles: Toggles,
    pub projection_dim: usize,
    pub ridge: f64,
    pub vote_weight: f64,
    /// Seeds few-shot sampling and the random projection.
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            analogy: AnalogyConfig::default(),
            toggles: Toggles::default(),
            projection_dim: 2048,
            ridge: 1.0,
            vote_weight: 1.0,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        self.train.validate()?;
        self.analogy.validate()?;
        if self.projection_dim == 0 {
            return Err(ProtocolError::Invalid("projection_dim must be positive".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(ProtocolError::Invalid("ridge must be nonnegative".into()));
        }
        if !(self.vote_weight >= 0.0 && self.vote_weight.is_finite()) {
            return Err(ProtocolError::Invalid("vote_weight must be nonnegative".into()));
        }
        Ok(())
    }

    /// Training configuration with the mixture-loss toggle applied.
    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig { mixture_losses: self.toggles.mixture_losses, ..self.train.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub truth: u32,
    pub predicted: u32,
}

/// Evaluation of one session on the cumulative test set.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub session: usize,
    pub seen_classes: usize,
    pub correct: usize,
    /// Percentage in [0, 100].
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
}

impl SessionRecord {
    fn from_predictions(session: usize, seen_classes: usize, predictions: Vec<Prediction>) -> Self {
        let correct = predictions.iter().filter(|p| p.truth == p.predicted).count();
        Self { session, seen_classes, correct, accuracy: accuracy_percent(correct, predictions.len()), predictions }
    }

    /// Counts per (true class, predicted class).
    pub fn confusion(&self) -> BTreeMap<(u32, u32), usize> {
        let mut m = BTreeMap::new();
        for p in &self.predictions {
            *m.entry((p.truth, p.predicted)).or_insert(0) += 1;
        }
        m
    }
}

fn accuracy_percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub sessions: Vec<SessionRecord>,
    pub a_last: f64,
    pub a_inc: f64,
}

impl SessionResult {
    pub fn from_sessions(sessions: Vec<SessionRecord>) -> Self {
        let accs: Vec<f64> = sessions.iter().map(|s| s.accuracy).collect();
        let (a_last, a_inc) = session_metrics(&accs).unwrap_or((0.0, 0.0));
        Self { sessions, a_last, a_inc }
    }
}

/// `(A_last, A_inc)`: last session accuracy and the mean over sessions.
pub fn session_metrics(accuracies: &[f64]) -> Option<(f64, f64)> {
    let last = *accuracies.last()?;
    Some((last, accuracies.iter().sum::<f64>() / accuracies.len() as f64))
}

/// Arithmetic means of `(A_last, A_inc)` pairs across datasets.
pub fn macro_metrics(results: &[(f64, f64)]) -> Option<(f64, f64)> {
    if results.is_empty() {
        return None;
    }
    let n = results.len() as f64;
    Some((results.iter().map(|r| r.0).sum::<f64>() / n, results.iter().map(|r| r.1).sum::<f64>() / n))
}

/// Runs the protocol, training the head on the base session.
pub fn run_protocol(
    records: &[LabeledEmbedding],
    plan: &SessionPlan,
    config: &ProtocolConfig,
) -> Result<SessionResult, ProtocolError> {
    run_protocol_with(records, plan, config, None, &mut |_| {})
}

/// Runs the protocol. A `pretrained` head skips adaptation; `observer` sees
/// each session record as soon as it is complete.
pub fn run_protocol_with(
    records: &[LabeledEmbedding],
    plan: &SessionPlan,
    config: &ProtocolConfig,
    pretrained: Option<FrozenHead>,
    observer: &mut dyn FnMut(&SessionRecord),
) -> Result<SessionResult, ProtocolError> {
    config.validate()?;
    if plan.session_count() < 1 {
        return Err(ProtocolError::Invalid("plan has no sessions".into()));
    }
    let base_ids = plan.base_classes().to_vec();
    let base_records = sample_session_data(plan, 0, records, config.seed)?;
    let base_set = ClassSet::from_records(&base_records, &base_ids)?;

    let head = match pretrained {
        Some(h) => {
            if h.dim() != base_set.dim() || h.classes() != base_ids.len() {
                return Err(ProtocolError::Invalid(format!(
                    "pretrained head ({} inputs, {} classes) does not fit the base session ({} inputs, {} classes)",
                    h.dim(),
                    h.classes(),
                    base_set.dim(),
                    base_ids.len()
                )));
            }
            h
        }
        None => {
            let trained = train_base_session(&base_set, &config.effective_train())?;
            log::info!("base session trained, head accuracy {:.4}", trained.report.final_accuracy);
            trained.head
        }
    };

    let features = class_features(&head, &base_set);
    let base = BaseReference::new(
        &prototypes_from_features(&base_ids, &features)?,
        covariances_from_features(&base_ids, &features)?,
    );
    let mut stats: Vec<ClassStatistics> = base.base_statistics(config.analogy.gamma)?;
    let mut seen = base_ids.clone();

    let mut scorer = if config.toggles.voting {
        let mut s = RandomProjectionScorer::new(head.dim(), config.projection_dim, config.ridge, config.seed)?;
        let (xs, ys): (Vec<DVector<f64>>, Vec<u32>) =
            features.iter().zip(&base_ids).flat_map(|(fs, &c)| fs.iter().map(move |f| (f.clone(), c))).unzip();
        s.fit_base(&xs, &ys)?;
        Some(s)
    } else {
        None
    };

    let mut test: Vec<(u32, DVector<f64>)> = Vec::new();
    let mut sessions = Vec::with_capacity(plan.session_count());
    for t in 0..plan.session_count() {
        if t > 0 {
            let shots = sample_session_data(plan, t, records, config.seed)?;
            let mut xs = Vec::with_capacity(shots.len());
            let mut ys = Vec::with_capacity(shots.len());
            let mut calibrations = Vec::new();
            for &c in &plan.sessions[t] {
                let fs: Vec<DVector<f64>> =
                    shots.iter().filter(|r| r.class_id == c).map(|r| head.features(&DVector::from_vec(r.to_f64()))).collect();
                let protos = build_new_class_prototypes(c, &fs)?;
                let class = if config.toggles.calibration {
                    let s = calibrate_new_class(&protos, &base, &config.analogy)?;
                    if let Some(w) = &s.analogy_weights {
                        calibrations.push(ClassCalibration {
                            class_id: c,
                            base_weights: base.class_ids.iter().copied().zip(w.iter().copied()).collect(),
                            beta: config.analogy.beta,
                        });
                    }
                    s
                } else {
                    uncalibrated_new_class(&protos, config.analogy.gamma)?
                };
                stats.push(class);
                seen.push(c);
                ys.extend(std::iter::repeat_n(c, fs.len()));
                xs.extend(fs);
            }
            if let Some(s) = scorer.as_mut() {
                s.fit_increment(&xs, &ys, &calibrations)?;
            }
        }

        for r in session_test_data(plan, t, records) {
            test.push((r.class_id, head.features(&DVector::from_vec(r.to_f64()))));
        }
        let mut predictions = Vec::with_capacity(test.len());
        for (truth, f) in &test {
            let sa = sa_score_vector(f, &stats);
            let scores = match scorer.as_ref() {
                Some(s) => soft_vote(&sa.scores, &s.score_vector(f, &seen)?.scores, config.vote_weight)?,
                None => sa.scores,
            };
            predictions.push(Prediction { truth: *truth, predicted: seen[predict(&scores)?] });
        }
        let record = SessionRecord::from_predictions(t, seen.len(), predictions);
        log::info!("session {t}: {} classes, accuracy {:.2}", record.seen_classes, record.accuracy);
        observer(&record);
        sessions.push(record);
    }
    Ok(SessionResult::from_sessions(sessions))
}
