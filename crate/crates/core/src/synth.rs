//! Seeded synthetic embeddings: Gaussian clusters around centres placed on
//! a sphere. Every class shares a within-class covariance made of isotropic
//! noise plus a few strongly stretched random directions, so class
//! statistics transfer between classes.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::store::{LabeledEmbedding, Split};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Radius of the sphere the class centres lie on.
    pub radius: f64,
    /// Standard deviation of the isotropic within-class noise.
    pub noise: f64,
    /// Number of random directions along which every class is additionally
    /// stretched (a within-class covariance shared by all classes).
    pub shared_rank: usize,
    /// Standard deviation along the shared directions.
    pub shared_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { classes: 20, dim: 16, train_per_class: 50, test_per_class: 20, radius: 40.0, noise: 1.0, shared_rank: 3, shared_scale: 30.0, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.classes < 2 {
            return Err("at least two classes are required".into());
        }
        if self.dim == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err("dim and per-class counts must be positive".into());
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err("radius must be positive and noise nonnegative".into());
        }
        if self.shared_rank > self.dim || !(self.shared_scale >= 0.0 && self.shared_scale.is_finite()) {
            return Err("shared_rank must not exceed dim and shared_scale must be nonnegative".into());
        }
        Ok(())
    }
}

/// Records ordered by class, train before test within a class.
pub fn generate(config: &SynthConfig) -> Vec<LabeledEmbedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shared = orthonormal_directions(&mut rng, config.dim, config.shared_rank);
    let mut out = Vec::with_capacity(config.classes * (config.train_per_class + config.test_per_class));
    for c in 0..config.classes {
        let dir = loop {
            let v = DVector::from_fn(config.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = v.norm();
            if n > 1e-12 {
                break v / n;
            }
        };
        let centre = dir * config.radius;
        for i in 0..config.train_per_class + config.test_per_class {
            let split = if i < config.train_per_class { Split::Train } else { Split::Test };
            let mut x = centre.map(|m| m + config.noise * rng.sample::<f64, _>(StandardNormal));
            for q in &shared {
                x.axpy(config.shared_scale * rng.sample::<f64, _>(StandardNormal), q, 1.0);
            }
            let v: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            out.push(LabeledEmbedding::new(v, c as u32, split));
        }
    }
    out
}

fn orthonormal_directions(rng: &mut ChaCha8Rng, dim: usize, rank: usize) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        for q in &basis {
            let proj = q.dot(&v);
            v.axpy(-proj, q, 1.0);
        }
        let n = v.norm();
        if n > 1e-6 {
            basis.push(v / n);
        }
    }
    basis
}

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("class_{c:03}")).collect()
}
