use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::hypersphere::{assignment_weights, normalize, SphereError, UnitVector, VectorRef};

/// Per-class sets of unit-norm prototypes (the means of a class's vMF
/// mixture) with their cumulative assignment mass.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub class_ids: Vec<u32>,
    pub prototypes: Vec<Vec<UnitVector>>,
    pub mass: Vec<Vec<f64>>,
}

/// Result of one EMA step, kept so gradients can flow from the updated
/// prototypes back to the batch embeddings.
#[derive(Debug, Clone)]
pub struct EmaStep {
    pub momentum: f64,
    pub prototypes: Vec<Vec<UnitVector>>,
    /// Norm of `μ·p + (1-μ)·m` before renormalization; `None` where the
    /// prototype received no batch mass and was left unchanged.
    pre_norm: Vec<Vec<Option<f64>>>,
    /// Assignment mass each prototype received from this batch.
    pub batch_mass: Vec<Vec<f64>>,
}

impl PrototypeBank {
    /// `k` prototypes per class: the normalized class mean plus Gaussian
    /// noise of scale `sigma`, renormalized.
    pub fn init_around_means<R: Rng>(
        class_ids: Vec<u32>,
        class_means: &[DVector<f64>],
        k: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self, SphereError> {
        assert_eq!(class_ids.len(), class_means.len());
        let mut prototypes = Vec::with_capacity(class_means.len());
        for m in class_means {
            let centre = normalize(m)?;
            let mut ps = Vec::with_capacity(k);
            for _ in 0..k {
                let noise = DVector::from_fn(m.len(), |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
                ps.push(normalize(&(centre.as_vector() + noise))?);
            }
            prototypes.push(ps);
        }
        let mass = prototypes.iter().map(|ps| vec![0.0; ps.len()]).collect();
        Ok(Self { class_ids, prototypes, mass })
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().and_then(|p| p.first()).map_or(0, UnitVector::dim)
    }

    /// Assignment weights of `z` over every class's prototypes, `[class][k]`.
    pub fn assignments(&self, z: &UnitVector, tau_assign: f64) -> Result<Vec<Vec<f64>>, SphereError> {
        self.prototypes.iter().map(|ps| assignment_weights(z, ps, tau_assign)).collect()
    }

    /// Computes the EMA-updated prototypes without committing them.
    ///
    /// `p ← normalize(μ·p + (1-μ)·m)` where `m` is the assignment-weighted
    /// mean of the batch embeddings of the prototype's class. Only the
    /// own-class weights `assignments[i][labels[i]]` are used.
    pub fn ema_step<Z: VectorRef>(&self, zs: &[Z], labels: &[usize], assignments: &[Vec<Vec<f64>>], momentum: f64) -> EmaStep {
        assert!((0.0..1.0).contains(&momentum), "EMA momentum must lie in [0, 1)");
        let d = self.dim();
        let mut sums: Vec<Vec<DVector<f64>>> =
            self.prototypes.iter().map(|ps| vec![DVector::zeros(d); ps.len()]).collect();
        let mut batch_mass: Vec<Vec<f64>> = self.prototypes.iter().map(|ps| vec![0.0; ps.len()]).collect();
        for ((z, &y), a) in zs.iter().zip(labels).zip(assignments) {
            for (k, &w) in a[y].iter().enumerate() {
                sums[y][k].axpy(w, z.vector(), 1.0);
                batch_mass[y][k] += w;
            }
        }
        let mut prototypes = self.prototypes.clone();
        let mut pre_norm: Vec<Vec<Option<f64>>> = self.prototypes.iter().map(|ps| vec![None; ps.len()]).collect();
        for c in 0..self.prototypes.len() {
            for k in 0..self.prototypes[c].len() {
                let mass = batch_mass[c][k];
                if mass <= 0.0 {
                    continue;
                }
                let m = &sums[c][k] / mass;
                let v = self.prototypes[c][k].as_vector() * momentum + m * (1.0 - momentum);
                let n = v.norm();
                if n > 0.0 && n.is_finite() {
                    prototypes[c][k] = UnitVector::new_unchecked(v / n);
                    pre_norm[c][k] = Some(n);
                }
            }
        }
        EmaStep { momentum, prototypes, pre_norm, batch_mass }
    }

    /// Applies an EMA step: replaces the prototypes and accumulates mass.
    pub fn commit(&mut self, step: EmaStep) {
        for (acc, add) in self.mass.iter_mut().zip(&step.batch_mass) {
            for (a, b) in acc.iter_mut().zip(add) {
                *a += b;
            }
        }
        self.prototypes = step.prototypes;
    }

    /// Removes prototypes whose share of their class's cumulative mass is
    /// below `threshold`. The highest-mass prototype of a class always stays.
    pub fn prune(&mut self, threshold: f64) {
        if threshold <= 0.0 {
            return;
        }
        for (ps, mass) in self.prototypes.iter_mut().zip(self.mass.iter_mut()) {
            let total: f64 = mass.iter().sum();
            if total <= 0.0 || ps.len() <= 1 {
                continue;
            }
            let keep: Vec<bool> = mass.iter().map(|m| m / total >= threshold).collect();
            let keep = if keep.iter().any(|&k| k) {
                keep
            } else {
                let best = mass
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, m)| if *m > mass[b] { i } else { b });
                (0..mass.len()).map(|i| i == best).collect()
            };
            let mut i = 0;
            ps.retain(|_| {
                i += 1;
                keep[i - 1]
            });
            let mut i = 0;
            mass.retain(|_| {
                i += 1;
                keep[i - 1]
            });
        }
    }
}

impl EmaStep {
    /// Backpropagates a gradient on the updated prototypes to the batch
    /// embeddings, with assignment weights held constant.
    pub fn backward(
        &self,
        zs_len: usize,
        labels: &[usize],
        assignments: &[Vec<Vec<f64>>],
        grad_prototypes: &[Vec<DVector<f64>>],
    ) -> Vec<DVector<f64>> {
        let d = self.prototypes.first().and_then(|p| p.first()).map_or(0, UnitVector::dim);
        // gradient on each prototype's batch mean m
        let mut g_mean: Vec<Vec<Option<DVector<f64>>>> =
            self.prototypes.iter().map(|ps| vec![None; ps.len()]).collect();
        for (c, ps) in self.prototypes.iter().enumerate() {
            for (k, p) in ps.iter().enumerate() {
                let Some(n) = self.pre_norm[c][k] else { continue };
                let g = &grad_prototypes[c][k];
                let pv = p.as_vector();
                let g_v = (g - pv * pv.dot(g)) / n;
                g_mean[c][k] = Some(g_v * ((1.0 - self.momentum) / self.batch_mass[c][k]));
            }
        }
        let mut out = vec![DVector::zeros(d); zs_len];
        for (i, (&y, a)) in labels.iter().zip(assignments).enumerate() {
            for (k, &w) in a[y].iter().enumerate() {
                if let Some(g) = &g_mean[y][k] {
                    out[i].axpy(w, g, 1.0);
                }
            }
        }
        out
    }
}

/// EMA update of `bank` from a batch; see [`PrototypeBank::ema_step`].
pub fn update_prototypes_ema(
    mut bank: PrototypeBank,
    zs: &[UnitVector],
    labels: &[usize],
    assignments: &[Vec<Vec<f64>>],
    momentum: f64,
) -> PrototypeBank {
    let step = bank.ema_step(zs, labels, assignments, momentum);
    bank.commit(step);
    bank
}

pub fn prune_prototypes(mut bank: PrototypeBank, threshold: f64) -> PrototypeBank {
    bank.prune(threshold);
    bank
}
