use nalgebra::{DMatrix, DVector};

use super::train::FrozenHead;
use super::{ClassSet, TrainError};
use crate::hypersphere::{normalize, UnitVector};

/// Mean of the frozen features of one base class, kept raw and on the sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct BasePrototype {
    pub class_id: u32,
    pub raw: DVector<f64>,
    pub unit: UnitVector,
}

pub fn mean_vector<V: std::borrow::Borrow<DVector<f64>>>(vs: &[V]) -> Option<DVector<f64>> {
    let first = vs.first()?.borrow();
    let mut sum = DVector::zeros(first.len());
    for v in vs {
        sum += v.borrow();
    }
    Some(sum / vs.len() as f64)
}

/// Unbiased sample covariance. A single sample yields the zero matrix.
pub fn unbiased_covariance<V: std::borrow::Borrow<DVector<f64>>>(vs: &[V]) -> Option<DMatrix<f64>> {
    let mean = mean_vector(vs)?;
    let d = mean.len();
    let mut s = DMatrix::zeros(d, d);
    if vs.len() < 2 {
        return Some(s);
    }
    for v in vs {
        let c = v.borrow() - &mean;
        s.ger(1.0, &c, &c, 1.0);
    }
    s /= (vs.len() - 1) as f64;
    Some(symmetrize(s))
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Frozen features of `set`, grouped by class index.
pub fn class_features(head: &FrozenHead, set: &ClassSet) -> Vec<Vec<DVector<f64>>> {
    let mut per_class = vec![Vec::new(); set.class_count()];
    for (x, &y) in set.xs.iter().zip(&set.labels) {
        per_class[y].push(head.features(x));
    }
    per_class
}

pub fn prototypes_from_features(class_ids: &[u32], features: &[Vec<DVector<f64>>]) -> Result<Vec<BasePrototype>, TrainError> {
    features
        .iter()
        .zip(class_ids)
        .map(|(fs, &class_id)| {
            let raw = mean_vector(fs).ok_or(TrainError::EmptyClass(class_id))?;
            let unit = normalize(&raw)?;
            Ok(BasePrototype { class_id, raw, unit })
        })
        .collect()
}

pub fn covariances_from_features(class_ids: &[u32], features: &[Vec<DVector<f64>>]) -> Result<Vec<DMatrix<f64>>, TrainError> {
    features
        .iter()
        .zip(class_ids)
        .map(|(fs, &class_id)| {
            if fs.len() == 1 {
                log::warn!("class {class_id} has a single sample; using a zero covariance");
            }
            unbiased_covariance(fs).ok_or(TrainError::EmptyClass(class_id))
        })
        .collect()
}

/// Per-class mean of the frozen features, in class-set order.
pub fn extract_base_prototypes(head: &FrozenHead, set: &ClassSet) -> Result<Vec<BasePrototype>, TrainError> {
    prototypes_from_features(&set.class_ids, &class_features(head, set))
}

/// Per-class unbiased covariance of the frozen features. Singleton classes
/// get a zero matrix.
pub fn extract_base_covariances(head: &FrozenHead, set: &ClassSet) -> Result<Vec<DMatrix<f64>>, TrainError> {
    covariances_from_features(&set.class_ids, &class_features(head, set))
}
