//! The three training losses and their analytic gradients.
//!
//! Prototype arguments are generic over [`VectorRef`] so the same
//! code serves unit-norm prototypes during training and free vectors in
//! finite-difference checks.

use nalgebra::DVector;

use crate::hypersphere::{log_sum_exp, VectorRef};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
}

/// Weight given to both auxiliary losses for a base session of `nbase`
/// classes: `min(1, exp(-(20/nbase - 1)))`.
pub fn balance_weights(nbase: usize) -> (f64, f64) {
    assert!(nbase >= 1, "base session needs at least one class");
    let w = (-(20.0 / nbase as f64 - 1.0)).exp().min(1.0);
    (w, w)
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau.is_nan() || tau <= 0.0 {
        Err(LossError::BadTemperature(tau))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub value: f64,
    /// Gradient of the batch mean with respect to each sample's logits.
    pub grad_logits: Vec<DVector<f64>>,
}

/// Batch-mean softmax cross-entropy.
pub fn loss_ce(logits: &[DVector<f64>], labels: &[usize]) -> Result<CrossEntropy, LossError> {
    if logits.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if logits.len() != labels.len() {
        return Err(LossError::ShapeMismatch { what: "labels", expected: logits.len(), got: labels.len() });
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    let mut grad_logits = Vec::with_capacity(logits.len());
    for (l, &y) in logits.iter().zip(labels) {
        if y >= l.len() {
            return Err(LossError::BadLabel { label: y, classes: l.len() });
        }
        let lse = log_sum_exp(l.iter().copied());
        value += lse - l[y];
        let mut g = l.map(|v| (v - lse).exp());
        g[y] -= 1.0;
        grad_logits.push(g / n);
    }
    Ok(CrossEntropy { value: value / n, grad_logits })
}

#[derive(Debug, Clone)]
pub struct CompactLoss {
    pub value: f64,
    /// Gradient with respect to each embedding, assignment weights held fixed.
    pub grad_z: Vec<DVector<f64>>,
}

/// Negative log-likelihood of each sample's own class under the vMF
/// mixture classifier, averaged over the batch.
///
/// `assignments[i][c]` are sample `i`'s weights over class `c`'s prototypes.
pub fn loss_compact<Z, P>(
    zs: &[Z],
    labels: &[usize],
    prototypes: &[Vec<P>],
    assignments: &[Vec<Vec<f64>>],
    tau: f64,
) -> Result<CompactLoss, LossError>
where
    Z: VectorRef,
    P: VectorRef,
{
    check_tau(tau)?;
    if zs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if zs.len() != labels.len() || zs.len() != assignments.len() {
        return Err(LossError::ShapeMismatch { what: "batch", expected: zs.len(), got: labels.len().min(assignments.len()) });
    }
    let n = zs.len() as f64;
    let classes = prototypes.len();
    let mut value = 0.0;
    let mut grad_z = Vec::with_capacity(zs.len());
    for ((z, &y), w) in zs.iter().zip(labels).zip(assignments) {
        let z = z.vector();
        if y >= classes {
            return Err(LossError::BadLabel { label: y, classes });
        }
        if w.len() != classes {
            return Err(LossError::ShapeMismatch { what: "assignment classes", expected: classes, got: w.len() });
        }
        // log(w) + <p, z>/tau for every (class, prototype)
        let mut terms: Vec<Vec<f64>> = Vec::with_capacity(classes);
        for (c, protos) in prototypes.iter().enumerate() {
            if w[c].len() != protos.len() {
                return Err(LossError::ShapeMismatch { what: "assignment prototypes", expected: protos.len(), got: w[c].len() });
            }
            terms.push(
                protos
                    .iter()
                    .zip(&w[c])
                    .map(|(p, &wk)| if wk > 0.0 { wk.ln() + p.vector().dot(z) / tau } else { f64::NEG_INFINITY })
                    .collect(),
            );
        }
        let lse_num = log_sum_exp(terms[y].iter().copied());
        let lse_den = log_sum_exp(terms.iter().flatten().copied());
        value += lse_den - lse_num;

        let mut g = DVector::zeros(z.len());
        for (c, protos) in prototypes.iter().enumerate() {
            for (p, &t) in protos.iter().zip(&terms[c]) {
                let mut coef = (t - lse_den).exp();
                if c == y {
                    coef -= (t - lse_num).exp();
                }
                if coef != 0.0 {
                    g.axpy(coef / (tau * n), p.vector(), 1.0);
                }
            }
        }
        grad_z.push(g);
    }
    Ok(CompactLoss { value: value / n, grad_z })
}

#[derive(Debug, Clone)]
pub struct ProtoContrastive {
    pub value: f64,
    /// Gradient with respect to every prototype, `[class][k]`.
    pub grad: Vec<Vec<DVector<f64>>>,
    /// Anchors whose ratio is undefined (no same-class partner or no
    /// other-class prototype); they contribute zero.
    pub skipped_anchors: usize,
}

/// Prototype-level contrastive loss.
///
/// For anchor `p_k^c` the numerator sums `exp(⟨p_k^c, p_k'^c⟩/τ)` over the
/// other prototypes of class `c`; the denominator sums over all prototypes
/// of the other classes. The batch value is the mean over all anchors.
pub fn loss_proto_contrastive<P: VectorRef>(prototypes: &[Vec<P>], tau: f64) -> Result<ProtoContrastive, LossError> {
    check_tau(tau)?;
    let total: usize = prototypes.iter().map(Vec::len).sum();
    let mut grad: Vec<Vec<DVector<f64>>> = prototypes
        .iter()
        .map(|ps| ps.iter().map(|p| DVector::zeros(p.vector().len())).collect())
        .collect();
    if total == 0 {
        return Ok(ProtoContrastive { value: 0.0, grad, skipped_anchors: 0 });
    }
    let norm = total as f64;
    let mut value = 0.0;
    let mut skipped = 0;
    for (c, ps) in prototypes.iter().enumerate() {
        for (k, anchor) in ps.iter().enumerate() {
            let a = anchor.vector();
            let num: Vec<(usize, usize, f64)> = ps
                .iter()
                .enumerate()
                .filter(|(k2, _)| *k2 != k)
                .map(|(k2, p)| (c, k2, a.dot(p.vector()) / tau))
                .collect();
            let den: Vec<(usize, usize, f64)> = prototypes
                .iter()
                .enumerate()
                .filter(|(c2, _)| *c2 != c)
                .flat_map(|(c2, qs)| qs.iter().enumerate().map(move |(k2, q)| (c2, k2, a.dot(q.vector()) / tau)))
                .collect();
            if num.is_empty() || den.is_empty() {
                skipped += 1;
                continue;
            }
            let lse_num = log_sum_exp(num.iter().map(|t| t.2));
            let lse_den = log_sum_exp(den.iter().map(|t| t.2));
            value += lse_den - lse_num;

            for &(c2, k2, s) in &num {
                let pi = (s - lse_num).exp() / (tau * norm);
                let other = prototypes[c2][k2].vector();
                grad[c][k].axpy(-pi, other, 1.0);
                grad[c2][k2].axpy(-pi, a, 1.0);
            }
            for &(c2, k2, s) in &den {
                let pi = (s - lse_den).exp() / (tau * norm);
                let other = prototypes[c2][k2].vector();
                grad[c][k].axpy(pi, other, 1.0);
                grad[c2][k2].axpy(pi, a, 1.0);
            }
        }
    }
    if skipped > 0 {
        log::warn!("prototype contrastive loss: {skipped} anchor(s) without a defined ratio contribute 0");
    }
    Ok(ProtoContrastive { value: value / norm, grad, skipped_anchors: skipped })
}
