use std::f64::consts::PI;
use std::ops::Deref;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bank::PrototypeBank;
use super::head::{BottleneckHead, HeadGradient};
use super::objective::{evaluate_batch, BatchObjective, ObjectiveSettings};
use super::stats::mean_vector;
use super::{ClassSet, StepSchedule, TrainConfig, TrainError};
use crate::hypersphere::UnitVector;

/// A trained head that can no longer be modified.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenHead(BottleneckHead);

impl FrozenHead {
    pub fn new(head: BottleneckHead) -> Self {
        Self(head)
    }

    pub fn head(&self) -> &BottleneckHead {
        &self.0
    }

    /// Consumes the wrapper, e.g. to serialize the parameters.
    pub fn into_inner(self) -> BottleneckHead {
        self.0
    }
}

impl Deref for FrozenHead {
    type Target = BottleneckHead;

    fn deref(&self) -> &BottleneckHead {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub ce: f64,
    pub compact: f64,
    pub proto_contra: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub alpha: f64,
    pub lambda: f64,
    pub epochs: Vec<EpochLoss>,
    /// Linear-head accuracy on the training set, in [0, 1].
    pub final_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedBase {
    pub head: FrozenHead,
    /// `None` when trained without the mixture-prototype terms.
    pub bank: Option<PrototypeBank>,
    pub report: TrainReport,
}

fn check_finite(obj: &BatchObjective, epoch: usize, batch: usize, lr: f64) -> Result<(), TrainError> {
    if obj.total.is_finite() {
        return Ok(());
    }
    Err(TrainError::Diverged {
        epoch,
        batch,
        detail: format!(
            "loss {} (ce {}, compact {}, proto-contra {}) at step size {lr}",
            obj.total, obj.ce, obj.compact, obj.proto_contra
        ),
    })
}

fn sgd_step(head: &mut BottleneckHead, velocity: &mut HeadGradient, grad: &HeadGradient, lr: f64, momentum: f64) {
    velocity.scale(momentum);
    velocity.add_scaled(grad, 1.0);
    head.w_down -= &velocity.w_down * lr;
    head.w_up -= &velocity.w_up * lr;
    head.w_cls -= &velocity.w_cls * lr;
}

fn full_set_objective(
    head: &BottleneckHead,
    bank: Option<&PrototypeBank>,
    set: &ClassSet,
    config: &TrainConfig,
    settings: &ObjectiveSettings,
) -> Result<BatchObjective, TrainError> {
    evaluate_batch(head, bank, &set.xs, &set.labels, None, config.tau_assign, settings)
}

/// Trains the head (and, with mixture losses on, the prototype banks) on the
/// base-session data.
pub fn train_base_session(set: &ClassSet, config: &TrainConfig) -> Result<TrainedBase, TrainError> {
    config.validate()?;
    if set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let d = set.dim();
    let r = config.bottleneck_for(d);
    if d > 1 && r >= d {
        return Err(TrainError::Config(format!("bottleneck {r} must be smaller than the input dimension {d}")));
    }
    let classes = set.class_count();
    for c in 0..classes {
        if !set.labels.contains(&c) {
            return Err(TrainError::EmptyClass(set.class_ids[c]));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = BottleneckHead::init(d, r, classes, config.activation, config.residual, &mut rng);
    let (alpha, lambda) = config.loss_weights(classes);
    let settings = ObjectiveSettings { tau: config.tau, ema_momentum: config.ema_momentum, alpha, lambda };

    let mut bank = if config.mixture_losses {
        let zs: Vec<UnitVector> = set.xs.iter().map(|x| head.forward_embed(x)).collect::<Result<_, _>>()?;
        let means: Vec<DVector<f64>> = (0..classes)
            .map(|c| {
                let members: Vec<&DVector<f64>> =
                    zs.iter().zip(&set.labels).filter(|(_, &y)| y == c).map(|(z, _)| z.as_vector()).collect();
                mean_vector(&members).expect("every class has samples")
            })
            .collect();
        Some(PrototypeBank::init_around_means(set.class_ids.clone(), &means, config.k, config.init_sigma, &mut rng)?)
    } else {
        None
    };

    let mut velocity = HeadGradient::zeros_like(&head);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut lr = config.learning_rate;
    let mut best = match config.schedule {
        StepSchedule::HalveOnPlateau => Some(full_set_objective(&head, bank.as_ref(), set, config, &settings)?.total),
        _ => None,
    };

    for epoch in 0..config.epochs {
        lr = match config.schedule {
            StepSchedule::Cosine => config.learning_rate * 0.5 * (1.0 + (PI * epoch as f64 / config.epochs as f64).cos()),
            StepSchedule::Constant => config.learning_rate,
            StepSchedule::HalveOnPlateau => lr,
        };
        let snapshot = best.map(|_| (head.clone(), bank.clone()));
        order.shuffle(&mut rng);

        let mut sums = [0.0; 4];
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let xs: Vec<DVector<f64>> = chunk.iter().map(|&i| set.xs[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
            let obj = evaluate_batch(&head, bank.as_ref(), &xs, &labels, None, config.tau_assign, &settings).map_err(|e| match e {
                TrainError::Sphere(s) => TrainError::Diverged { epoch, batch: b, detail: format!("{s} at step size {lr}") },
                e => e,
            })?;
            check_finite(&obj, epoch, b, lr)?;
            let w = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([obj.total, obj.ce, obj.compact, obj.proto_contra]) {
                *s += w * v;
            }
            sgd_step(&mut head, &mut velocity, &obj.grad_total, lr, config.sgd_momentum);
            if !head.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b, detail: format!("non-finite parameters at step size {lr}") });
            }
            if let (Some(bank), Some(step)) = (bank.as_mut(), obj.ema) {
                bank.commit(step);
            }
        }
        if let Some(bank) = bank.as_mut() {
            bank.prune(config.prune_threshold);
        }

        let n = set.len() as f64;
        let mut record =
            EpochLoss { epoch, learning_rate: lr, total: sums[0] / n, ce: sums[1] / n, compact: sums[2] / n, proto_contra: sums[3] / n };
        if let (Some(prev), Some((head0, bank0))) = (best, snapshot) {
            let full = full_set_objective(&head, bank.as_ref(), set, config, &settings)?;
            check_finite(&full, epoch, usize::MAX, lr)?;
            if full.total > prev {
                head = head0;
                bank = bank0;
                velocity = HeadGradient::zeros_like(&head);
                lr *= 0.5;
                log::debug!("epoch {epoch}: loss rose to {}, rolled back, step size now {lr}", full.total);
                let kept = full_set_objective(&head, bank.as_ref(), set, config, &settings)?;
                record = EpochLoss { epoch, learning_rate: lr, total: kept.total, ce: kept.ce, compact: kept.compact, proto_contra: kept.proto_contra };
            } else {
                best = Some(full.total);
                record = EpochLoss { epoch, learning_rate: lr, total: full.total, ce: full.ce, compact: full.compact, proto_contra: full.proto_contra };
            }
        }
        log::debug!("epoch {epoch}: loss {:.6} (ce {:.6}) step size {lr:.6}", record.total, record.ce);
        epochs.push(record);
    }

    let correct = set
        .xs
        .iter()
        .zip(&set.labels)
        .map(|(x, &y)| Ok::<_, TrainError>(head.logits(&head.forward_embed(x)?).imax() == y))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|&ok| ok)
        .count();
    let report = TrainReport { alpha, lambda, epochs, final_accuracy: correct as f64 / set.len() as f64 };
    Ok(TrainedBase { head: FrozenHead::new(head), bank, report })
}
