//! Unit-sphere embedding math: normalization, von Mises-Fisher log-densities,
//! the mixture class posterior and soft prototype assignment.
//!
//! The vMF normalizer `Z_d(κ)` is never evaluated. Everything here works with
//! ratios in which it cancels, so log-densities are exposed unnormalized.

use nalgebra::DVector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SphereError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("vector has non-finite entries")]
    NonFinite,
    #[error("concentration must be nonnegative, got {0}")]
    NegativeConcentration(f64),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("class {0} has no prototypes")]
    EmptyPrototypes(usize),
    #[error("class {class} has {weights} weights for {prototypes} prototypes")]
    WeightMismatch { class: usize, weights: usize, prototypes: usize },
}

/// A vector with unit Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(DVector<f64>);

impl UnitVector {
    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        self.0.dot(&other.0)
    }

    /// Wraps a vector already known to be unit-norm (up to round-off).
    pub(crate) fn new_unchecked(v: DVector<f64>) -> Self {
        debug_assert!((v.norm() - 1.0).abs() < 1e-6);
        Self(v)
    }
}

impl std::ops::Deref for UnitVector {
    type Target = DVector<f64>;

    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Anything that can be viewed as a dense column vector.
pub trait VectorRef {
    fn vector(&self) -> &DVector<f64>;
}

impl VectorRef for DVector<f64> {
    fn vector(&self) -> &DVector<f64> {
        self
    }
}

impl VectorRef for UnitVector {
    fn vector(&self) -> &DVector<f64> {
        &self.0
    }
}

impl<T: VectorRef + ?Sized> VectorRef for &T {
    fn vector(&self) -> &DVector<f64> {
        (**self).vector()
    }
}

/// `v / ‖v‖₂`.
pub fn normalize(v: &DVector<f64>) -> Result<UnitVector, SphereError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(SphereError::NonFinite);
    }
    let n = v.norm();
    if n == 0.0 {
        return Err(SphereError::ZeroVector);
    }
    Ok(UnitVector(v / n))
}

pub fn normalize_slice(v: &[f64]) -> Result<UnitVector, SphereError> {
    normalize(&DVector::from_column_slice(v))
}

/// Mean direction and concentration of one vMF component.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfParams {
    pub mean: UnitVector,
    pub concentration: f64,
}

impl VmfParams {
    pub fn new(mean: UnitVector, concentration: f64) -> Result<Self, SphereError> {
        if concentration.is_nan() || concentration < 0.0 {
            return Err(SphereError::NegativeConcentration(concentration));
        }
        Ok(Self { mean, concentration })
    }

    pub fn from_temperature(mean: UnitVector, temperature: f64) -> Result<Self, SphereError> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(SphereError::BadTemperature(temperature));
        }
        Ok(Self { mean, concentration: 1.0 / temperature })
    }

    /// `1/κ`; infinite for the uniform (κ = 0) component.
    pub fn temperature(&self) -> f64 {
        1.0 / self.concentration
    }

    pub fn log_density_unnorm(&self, z: &UnitVector) -> f64 {
        self.concentration * self.mean.dot(z)
    }
}

/// `κ⟨p, z⟩`, the vMF log-density without `log Z_d(κ)`.
pub fn vmf_log_density_unnorm(z: &UnitVector, p: &UnitVector, kappa: f64) -> Result<f64, SphereError> {
    if kappa.is_nan() || kappa < 0.0 {
        return Err(SphereError::NegativeConcentration(kappa));
    }
    Ok(kappa * p.dot(z))
}

fn check_temperature(tau: f64) -> Result<(), SphereError> {
    if tau.is_nan() || tau <= 0.0 {
        Err(SphereError::BadTemperature(tau))
    } else {
        Ok(())
    }
}

pub(crate) fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `xs`, shifted by the max for stability.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Log of the (weighted) mixture mass `Σ_k w_k exp(⟨p_k, z⟩/τ)` of one class.
/// Zero-weight components contribute nothing.
pub(crate) fn log_mixture_mass(z: &DVector<f64>, prototypes: &[UnitVector], weights: &[f64], tau: f64) -> f64 {
    log_sum_exp(
        prototypes
            .iter()
            .zip(weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(p, &w)| w.ln() + p.as_vector().dot(z) / tau),
    )
}

/// Class posterior of the vMF mixture classifier.
///
/// `prototypes[c]` and `weights[c]` are class `c`'s prototype set and its
/// assignment weights for this sample. Computed in the log domain.
pub fn mixture_class_posterior(
    z: &UnitVector,
    prototypes: &[Vec<UnitVector>],
    weights: &[Vec<f64>],
    tau: f64,
) -> Result<Vec<f64>, SphereError> {
    check_temperature(tau)?;
    for (c, (p, w)) in prototypes.iter().zip(weights).enumerate() {
        if p.is_empty() {
            return Err(SphereError::EmptyPrototypes(c));
        }
        if p.len() != w.len() {
            return Err(SphereError::WeightMismatch { class: c, weights: w.len(), prototypes: p.len() });
        }
    }
    let logs: Vec<f64> =
        prototypes.iter().zip(weights).map(|(p, w)| log_mixture_mass(z, p, w, tau)).collect();
    Ok(softmax(&logs))
}

/// Soft assignment of `z` to a class's prototypes: softmax of cosine
/// similarities at temperature `tau_assign`.
pub fn assignment_weights(z: &UnitVector, prototypes: &[UnitVector], tau_assign: f64) -> Result<Vec<f64>, SphereError> {
    check_temperature(tau_assign)?;
    if prototypes.is_empty() {
        return Err(SphereError::EmptyPrototypes(0));
    }
    let sims: Vec<f64> = prototypes.iter().map(|p| p.dot(z) / tau_assign).collect();
    Ok(softmax(&sims))
}
