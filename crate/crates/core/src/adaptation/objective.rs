//! Full training objective on a batch, `L_CE + α·L_com + λ·L_proto-contra`,
//! with gradients carried back through the normalized embedding into the
//! adapter and classifier parameters.

use nalgebra::DVector;

use super::bank::{EmaStep, PrototypeBank};
use super::head::{BottleneckHead, ForwardCache, HeadGradient};
use super::losses::{loss_ce, loss_compact, loss_proto_contrastive};
use super::TrainError;
use crate::hypersphere::UnitVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    /// Temperature of the compact and contrastive losses.
    pub tau: f64,
    pub ema_momentum: f64,
    pub alpha: f64,
    pub lambda: f64,
}

/// Values and per-component head gradients of one batch evaluation.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub ce: f64,
    pub compact: f64,
    pub proto_contra: f64,
    pub total: f64,
    pub grad_ce: HeadGradient,
    pub grad_compact: HeadGradient,
    pub grad_proto_contra: HeadGradient,
    pub grad_total: HeadGradient,
    /// EMA-updated prototypes the contrastive term was evaluated on.
    pub ema: Option<EmaStep>,
    pub correct: usize,
}

/// Assignment weights `[sample][class][k]` of a batch against `bank`.
pub fn batch_assignments(bank: &PrototypeBank, zs: &[UnitVector], tau_assign: f64) -> Result<Vec<Vec<Vec<f64>>>, TrainError> {
    zs.iter().map(|z| bank.assignments(z, tau_assign).map_err(TrainError::from)).collect()
}

/// Evaluates the objective on a batch.
///
/// Without a bank only the cross-entropy term is active. When `assignments`
/// is `None` they are computed from the batch at `tau_assign`; either way
/// they are treated as constants for differentiation.
pub fn evaluate_batch(
    head: &BottleneckHead,
    bank: Option<&PrototypeBank>,
    xs: &[DVector<f64>],
    labels: &[usize],
    assignments: Option<&[Vec<Vec<f64>>]>,
    tau_assign: f64,
    settings: &ObjectiveSettings,
) -> Result<BatchObjective, TrainError> {
    let caches: Vec<ForwardCache> = xs.iter().map(|x| head.forward_cached(x)).collect::<Result<_, _>>()?;
    let zs: Vec<UnitVector> = caches.iter().map(|c| c.z.clone()).collect();

    let logits: Vec<DVector<f64>> = zs.iter().map(|z| head.logits(z)).collect();
    let ce = loss_ce(&logits, labels)?;
    let correct = logits.iter().zip(labels).filter(|(l, &y)| l.imax() == y).count();
    let mut grad_ce = HeadGradient::zeros_like(head);
    for ((cache, g_logits), z) in caches.iter().zip(&ce.grad_logits).zip(&zs) {
        grad_ce.w_cls.ger(1.0, z.as_vector(), g_logits, 1.0);
        let g_z = &head.w_cls * g_logits;
        head.backward_embed(cache, &g_z, &mut grad_ce);
    }

    let mut grad_compact = HeadGradient::zeros_like(head);
    let mut grad_proto_contra = HeadGradient::zeros_like(head);
    let (mut compact, mut proto_contra, mut ema) = (0.0, 0.0, None);
    if let Some(bank) = bank {
        let owned;
        let assignments = match assignments {
            Some(a) => a,
            None => {
                owned = batch_assignments(bank, &zs, tau_assign)?;
                &owned
            }
        };

        let com = loss_compact(&zs, labels, &bank.prototypes, assignments, settings.tau)?;
        compact = com.value;
        for (cache, g) in caches.iter().zip(&com.grad_z) {
            head.backward_embed(cache, g, &mut grad_compact);
        }

        let step = bank.ema_step(&zs, labels, assignments, settings.ema_momentum);
        let pc = loss_proto_contrastive(&step.prototypes, settings.tau)?;
        proto_contra = pc.value;
        let g_zs = step.backward(zs.len(), labels, assignments, &pc.grad);
        for (cache, g) in caches.iter().zip(&g_zs) {
            head.backward_embed(cache, g, &mut grad_proto_contra);
        }
        ema = Some(step);
    }

    let total = ce.value + settings.alpha * compact + settings.lambda * proto_contra;
    let mut grad_total = grad_ce.clone();
    grad_total.add_scaled(&grad_compact, settings.alpha);
    grad_total.add_scaled(&grad_proto_contra, settings.lambda);
    Ok(BatchObjective {
        ce: ce.value,
        compact,
        proto_contra,
        total,
        grad_ce,
        grad_compact,
        grad_proto_contra,
        grad_total,
        ema,
        correct,
    })
}
