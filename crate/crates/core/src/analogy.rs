//! Class statistics by analogy to the base session: new-class prototypes,
//! similarity-weighted calibration of means and covariances, shrunk
//! correlation matrices and Mahalanobis scoring.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::adaptation::stats::{mean_vector, symmetrize, unbiased_covariance};
use crate::adaptation::BasePrototype;
use crate::hypersphere::softmax;

#[derive(Debug, Error, PartialEq)]
pub enum AnalogyError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("class {0} has no shots")]
    EmptyShots(u32),
    #[error("shrunk correlation matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("{0}")]
    BadParameter(String),
}

/// Calibration hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalogyConfig {
    /// Sharpness of the base-class weights.
    pub tau_cal: f64,
    /// Share of the class's own prototype in the calibrated mean.
    pub beta: f64,
    /// Covariance scale.
    pub eta: f64,
    /// Shrinkage added to the diagonal before normalization.
    pub gamma: f64,
}

impl Default for AnalogyConfig {
    fn default() -> Self {
        Self { tau_cal: 16.0, beta: 0.9, eta: 1.0, gamma: 500.0 }
    }
}

impl AnalogyConfig {
    /// Defaults for a named dataset; CIFAR100-style datasets calibrate harder.
    pub fn for_dataset(name: &str) -> Self {
        Self { beta: default_beta(name), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), AnalogyError> {
        let bad = |m: &str| Err(AnalogyError::BadParameter(m.to_string()));
        if !(self.tau_cal > 0.0 && self.tau_cal.is_finite()) {
            return bad("tau_cal must be positive");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        Ok(())
    }
}

pub fn default_beta(dataset: &str) -> f64 {
    let key: String = dataset.chars().filter(char::is_ascii_alphanumeric).collect::<String>().to_ascii_lowercase();
    if key.starts_with("cifar100") {
        0.75
    } else {
        0.9
    }
}

/// Prototypes of an n-shot class: the shot mean followed by every shot,
/// with one covariance shared by all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct NewClassPrototypes {
    pub class_id: u32,
    pub prototypes: Vec<DVector<f64>>,
    pub covariance: DMatrix<f64>,
}

impl NewClassPrototypes {
    pub fn shot_mean(&self) -> &DVector<f64> {
        &self.prototypes[0]
    }
}

/// `shots` are frozen features of the class's training samples.
pub fn build_new_class_prototypes(class_id: u32, shots: &[DVector<f64>]) -> Result<NewClassPrototypes, AnalogyError> {
    let mean = mean_vector(shots).ok_or(AnalogyError::EmptyShots(class_id))?;
    let d = mean.len();
    if let Some(bad) = shots.iter().find(|s| s.len() != d) {
        return Err(AnalogyError::DimensionMismatch { expected: d, found: bad.len() });
    }
    let covariance = unbiased_covariance(shots).expect("nonempty");
    let mut prototypes = Vec::with_capacity(shots.len() + 1);
    prototypes.push(mean);
    prototypes.extend(shots.iter().cloned());
    Ok(NewClassPrototypes { class_id, prototypes, covariance })
}

/// Cosine similarity scaled by `tau_cal`.
pub fn similarity(base: &DVector<f64>, p: &DVector<f64>, tau_cal: f64) -> Result<f64, AnalogyError> {
    if base.len() != p.len() {
        return Err(AnalogyError::DimensionMismatch { expected: base.len(), found: p.len() });
    }
    let (nb, np) = (base.norm(), p.norm());
    if !(nb.is_finite() && np.is_finite()) {
        return Err(AnalogyError::NonFinite("similarity input"));
    }
    if nb == 0.0 || np == 0.0 {
        return Err(AnalogyError::ZeroVector);
    }
    Ok(base.dot(p) / (nb * np) * tau_cal)
}

/// Softmax over the base classes.
pub fn analogy_weights(similarities: &[f64]) -> Vec<f64> {
    softmax(similarities)
}

/// `β·p + (1−β)·Σ_b w_b·p_b`.
pub fn calibrate_mean(p: &DVector<f64>, base_means: &[DVector<f64>], weights: &[f64], beta: f64) -> DVector<f64> {
    assert_eq!(base_means.len(), weights.len(), "one weight per base mean");
    let mut blend = DVector::zeros(p.len());
    for (m, &w) in base_means.iter().zip(weights) {
        blend.axpy(w, m, 1.0);
    }
    p * beta + blend * (1.0 - beta)
}

/// `η·(Σ + Σ_b w_b·Σ_b)`.
pub fn calibrate_covariance(
    sigma: &DMatrix<f64>,
    base_covariances: &[DMatrix<f64>],
    weights: &[f64],
    eta: f64,
) -> Result<DMatrix<f64>, AnalogyError> {
    assert_eq!(base_covariances.len(), weights.len(), "one weight per base covariance");
    let mut acc = sigma.clone();
    for (s, &w) in base_covariances.iter().zip(weights) {
        if s.shape() != sigma.shape() {
            return Err(AnalogyError::DimensionMismatch { expected: sigma.nrows(), found: s.nrows() });
        }
        acc += s * w;
    }
    Ok(symmetrize(acc * eta))
}

/// Unit-diagonal correlation of `Σ̂ + γI` and its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrunkCorrelation {
    pub matrix: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
}

pub fn shrink_and_normalize(sigma_hat: &DMatrix<f64>, gamma: f64) -> Result<ShrunkCorrelation, AnalogyError> {
    if sigma_hat.iter().any(|v| !v.is_finite()) {
        return Err(AnalogyError::NonFinite("covariance"));
    }
    let d = sigma_hat.nrows();
    let mut a = sigma_hat.clone();
    for i in 0..d {
        a[(i, i)] += gamma;
    }
    let diag: Vec<f64> = (0..d).map(|i| a[(i, i)]).collect();
    if diag.iter().any(|&v| v <= 0.0) {
        return Err(AnalogyError::NotPositiveDefinite);
    }
    let mut matrix = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { a[(i, j)] / (diag[i] * diag[j]).sqrt() });
    matrix = symmetrize(matrix);
    for i in 0..d {
        matrix[(i, i)] = 1.0;
    }
    let inverse = Cholesky::new(matrix.clone()).ok_or(AnalogyError::NotPositiveDefinite)?.inverse();
    Ok(ShrunkCorrelation { matrix, inverse: symmetrize(inverse) })
}

/// `(x − p)ᵀ M (x − p)`, clamped at zero.
pub fn mahalanobis(x: &DVector<f64>, p: &DVector<f64>, inverse: &DMatrix<f64>) -> f64 {
    let diff = x - p;
    let q = (inverse * &diff).dot(&diff);
    q.max(0.0)
}

/// One scoring component: a (possibly calibrated) mean and its metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub mean: DVector<f64>,
    pub correlation: ShrunkCorrelation,
}

impl Component {
    pub fn new(mean: DVector<f64>, covariance: &DMatrix<f64>, gamma: f64) -> Result<Self, AnalogyError> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(AnalogyError::DimensionMismatch { expected: mean.len(), found: covariance.nrows() });
        }
        Ok(Self { mean, correlation: shrink_and_normalize(covariance, gamma)? })
    }

    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        mahalanobis(x, &self.mean, &self.correlation.inverse)
    }
}

/// Scoring statistics of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStatistics {
    pub class_id: u32,
    pub is_base: bool,
    pub components: Vec<Component>,
    /// Base-class weights of the shot-mean prototype, for calibrated new classes.
    pub analogy_weights: Option<Vec<f64>>,
}

impl ClassStatistics {
    /// Smallest Mahalanobis distance over the components.
    pub fn min_distance(&self, x: &DVector<f64>) -> f64 {
        self.components.iter().map(|c| c.distance(x)).fold(f64::INFINITY, f64::min)
    }
}

/// Raw means and covariances of the base classes, the reference set for
/// every calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseReference {
    pub class_ids: Vec<u32>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl BaseReference {
    pub fn new(prototypes: &[BasePrototype], covariances: Vec<DMatrix<f64>>) -> Self {
        assert_eq!(prototypes.len(), covariances.len());
        Self {
            class_ids: prototypes.iter().map(|p| p.class_id).collect(),
            means: prototypes.iter().map(|p| p.raw.clone()).collect(),
            covariances,
        }
    }

    /// Analogy weights of prototype `p` over the base classes.
    pub fn weights_for(&self, p: &DVector<f64>, tau_cal: f64) -> Result<Vec<f64>, AnalogyError> {
        let sims = self.means.iter().map(|b| similarity(b, p, tau_cal)).collect::<Result<Vec<_>, _>>()?;
        Ok(analogy_weights(&sims))
    }

    /// Base classes keep their own mean and uncalibrated covariance.
    pub fn base_statistics(&self, gamma: f64) -> Result<Vec<ClassStatistics>, AnalogyError> {
        self.class_ids
            .iter()
            .zip(self.means.iter().zip(&self.covariances))
            .map(|(&class_id, (m, s))| {
                Ok(ClassStatistics { class_id, is_base: true, components: vec![Component::new(m.clone(), s, gamma)?], analogy_weights: None })
            })
            .collect()
    }
}

/// Every prototype of the class is calibrated against the base classes.
pub fn calibrate_new_class(
    protos: &NewClassPrototypes,
    base: &BaseReference,
    config: &AnalogyConfig,
) -> Result<ClassStatistics, AnalogyError> {
    let mut components = Vec::with_capacity(protos.prototypes.len());
    let mut first_weights = None;
    for p in &protos.prototypes {
        let w = base.weights_for(p, config.tau_cal)?;
        let mean = calibrate_mean(p, &base.means, &w, config.beta);
        let cov = calibrate_covariance(&protos.covariance, &base.covariances, &w, config.eta)?;
        components.push(Component::new(mean, &cov, config.gamma)?);
        first_weights.get_or_insert(w);
    }
    Ok(ClassStatistics { class_id: protos.class_id, is_base: false, components, analogy_weights: first_weights })
}

/// A new class scored by its shot mean and shot covariance alone.
pub fn uncalibrated_new_class(protos: &NewClassPrototypes, gamma: f64) -> Result<ClassStatistics, AnalogyError> {
    Ok(ClassStatistics {
        class_id: protos.class_id,
        is_base: false,
        components: vec![Component::new(protos.shot_mean().clone(), &protos.covariance, gamma)?],
        analogy_weights: None,
    })
}

/// `max_k exp(−D_k)`.
pub fn sa_score(x: &DVector<f64>, class: &ClassStatistics) -> f64 {
    (-class.min_distance(x)).exp()
}

/// Min-max normalized scores; `degenerate` marks an all-equal input, which
/// maps to zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub degenerate: bool,
}

pub fn min_max_normalize(raw: &[f64]) -> ScoreVector {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() || !(hi > lo) {
        return ScoreVector { scores: vec![0.0; raw.len()], degenerate: true };
    }
    ScoreVector { scores: raw.iter().map(|&s| (s - lo) / (hi - lo)).collect(), degenerate: false }
}

/// Normalized scores of `x` over `classes`.
///
/// Raw scores are formed as `exp(−(D_c − min D))`, a common positive factor
/// away from `exp(−D_c)`, so the normalized result is unchanged while far
/// samples cannot underflow every class to zero.
pub fn sa_score_vector(x: &DVector<f64>, classes: &[ClassStatistics]) -> ScoreVector {
    let ds: Vec<f64> = classes.iter().map(|c| c.min_distance(x)).collect();
    let d_min = ds.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = ds.iter().map(|d| (-(d - d_min)).exp()).collect();
    min_max_normalize(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.random_range(-scale..scale))
    }

    fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(d, d + 2, |_, _| rng.random_range(-3.0..3.0));
        symmetrize(&b * b.transpose())
    }

    #[test]
    fn prototypes_of_one_shot() {
        let p = build_new_class_prototypes(3, &[v(&[1.0, 2.0])]).unwrap();
        assert_eq!(p.prototypes, vec![v(&[1.0, 2.0]), v(&[1.0, 2.0])]);
        assert_eq!(p.covariance, DMatrix::zeros(2, 2));
        assert_eq!(build_new_class_prototypes(3, &[]), Err(AnalogyError::EmptyShots(3)));
    }

    #[test]
    fn five_shots_give_six_prototypes_with_mean_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shots: Vec<_> = (0..5).map(|_| random_vec(&mut rng, 7, 2.0)).collect();
        let p = build_new_class_prototypes(0, &shots).unwrap();
        assert_eq!(p.prototypes.len(), 6);
        for j in 0..7 {
            let direct = shots.iter().map(|s| s[j]).sum::<f64>() / 5.0;
            assert_abs_diff_eq!(p.prototypes[0][j], direct, epsilon = 1e-12);
        }
        assert_eq!(&p.prototypes[1..], &shots[..]);
    }

    #[test]
    fn similarity_cases() {
        let a = v(&[1.0, 2.0, 2.0]);
        assert_abs_diff_eq!(similarity(&a, &a, 16.0).unwrap(), 16.0, epsilon = 1e-12);
        assert_eq!(similarity(&v(&[1.0, 0.0]), &v(&[0.0, 3.0]), 16.0).unwrap(), 0.0);
        assert_abs_diff_eq!(similarity(&a, &(-&a * 2.0), 16.0).unwrap(), -16.0, epsilon = 1e-12);
        assert_eq!(similarity(&a, &v(&[0.0; 3]), 16.0), Err(AnalogyError::ZeroVector));
    }

    #[test]
    fn weight_cases() {
        assert_eq!(analogy_weights(&[3.7]), vec![1.0]);
        assert_eq!(analogy_weights(&[2.0; 4]), vec![0.25; 4]);
        let w = analogy_weights(&[16.0, 0.0]);
        let e = 16f64.exp();
        assert_abs_diff_eq!(w[0], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 1.0 / (e + 1.0), epsilon = 1e-20);
        assert_abs_diff_eq!(w[1], 1.125e-7, epsilon = 1e-10);
    }

    #[test]
    fn mean_calibration_cases() {
        let p = v(&[1.0, -2.0, 0.5]);
        let bases = vec![v(&[3.0, 1.0, 0.0]), v(&[0.0, 4.0, -1.0])];
        assert_eq!(calibrate_mean(&p, &bases, &[0.3, 0.7], 1.0), p);
        assert_eq!(calibrate_mean(&p, &bases[..1], &[1.0], 0.0), bases[0]);
        let out = calibrate_mean(&p, &bases, &[0.3, 0.7], 0.75);
        let expect = [
            0.75 * 1.0 + 0.25 * (0.3 * 3.0 + 0.7 * 0.0),
            0.75 * -2.0 + 0.25 * (0.3 * 1.0 + 0.7 * 4.0),
            0.75 * 0.5 + 0.25 * (0.3 * 0.0 + 0.7 * -1.0),
        ];
        for j in 0..3 {
            assert_abs_diff_eq!(out[j], expect[j], epsilon = 1e-15);
        }
    }

    #[test]
    fn covariance_calibration_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sb = random_psd(&mut rng, 4);
        let zero = DMatrix::zeros(4, 4);
        assert_eq!(calibrate_covariance(&zero, &[sb.clone()], &[1.0], 1.0).unwrap(), sb);
        let s = random_psd(&mut rng, 4);
        let bases = vec![sb, random_psd(&mut rng, 4)];
        let one = calibrate_covariance(&s, &bases, &[0.4, 0.6], 1.0).unwrap();
        let half = calibrate_covariance(&s, &bases, &[0.4, 0.6], 0.5).unwrap();
        assert_eq!(half, &one * 0.5);
        assert_eq!(one, one.transpose());
        assert!(matches!(
            calibrate_covariance(&s, &[DMatrix::zeros(3, 3)], &[1.0], 1.0),
            Err(AnalogyError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn isotropic_covariance_normalizes_to_identity() {
        for sigma2 in [0.0, 0.3, 7.0, 1e4] {
            let s = DMatrix::identity(5, 5) * sigma2;
            let c = shrink_and_normalize(&s, 500.0).unwrap();
            assert_eq!(c.matrix, DMatrix::identity(5, 5));
            assert_abs_diff_eq!(c.inverse, DMatrix::identity(5, 5), epsilon = 1e-15);
        }
    }

    #[test]
    fn random_correlation_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = random_psd(&mut rng, 8) * 50.0;
            let c = shrink_and_normalize(&s, 500.0).unwrap();
            for i in 0..8 {
                assert_eq!(c.matrix[(i, i)], 1.0);
            }
            assert_eq!(c.matrix, c.matrix.transpose());
            // independent solve for the inverse
            let solved = c.matrix.clone().lu().solve(&DMatrix::identity(8, 8)).unwrap();
            assert_abs_diff_eq!(c.inverse, solved, epsilon = 1e-8);
            assert_abs_diff_eq!(&c.matrix * &c.inverse, DMatrix::identity(8, 8), epsilon = 1e-8);
        }
        let bad = DMatrix::from_element(2, 2, f64::NAN);
        assert_eq!(shrink_and_normalize(&bad, 1.0), Err(AnalogyError::NonFinite("covariance")));
    }

    #[test]
    fn mahalanobis_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_vec(&mut rng, 6, 3.0);
        let c = shrink_and_normalize(&(random_psd(&mut rng, 6) * 100.0), 500.0).unwrap();
        assert_eq!(mahalanobis(&x, &x, &c.inverse), 0.0);
        let p = random_vec(&mut rng, 6, 3.0);
        let iso = shrink_and_normalize(&DMatrix::identity(6, 6), 500.0).unwrap();
        assert_abs_diff_eq!(mahalanobis(&x, &p, &iso.inverse), (&x - &p).norm_squared(), epsilon = 1e-12);
        let mut q = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                q += (x[i] - p[i]) * c.inverse[(i, j)] * (x[j] - p[j]);
            }
        }
        assert_abs_diff_eq!(mahalanobis(&x, &p, &c.inverse), q, epsilon = 1e-10);
        assert_abs_diff_eq!(mahalanobis(&x, &p, &c.inverse), mahalanobis(&p, &x, &c.inverse), epsilon = 1e-12);
    }

    fn class_with_means(means: Vec<DVector<f64>>) -> ClassStatistics {
        let d = means[0].len();
        let components = means.into_iter().map(|m| Component::new(m, &DMatrix::identity(d, d), 500.0).unwrap()).collect();
        ClassStatistics { class_id: 0, is_base: false, components, analogy_weights: None }
    }

    #[test]
    fn sa_score_cases() {
        let x = v(&[1.0, 2.0]);
        assert_eq!(sa_score(&x, &class_with_means(vec![x.clone()])), 1.0);
        assert_eq!(sa_score(&x, &class_with_means(vec![v(&[40.0, -30.0]), x.clone()])), 1.0);
        let means = vec![v(&[0.0, 1.0]), v(&[2.0, 2.5]), v(&[-1.0, 0.0])];
        let best = means.iter().map(|m| (-(&x - m).norm_squared()).exp()).fold(0.0, f64::max);
        assert_abs_diff_eq!(sa_score(&x, &class_with_means(means)), best, epsilon = 1e-12);
    }

    #[test]
    fn min_max_cases() {
        let s = min_max_normalize(&[0.2, 0.8, 0.5]);
        assert!(!s.degenerate);
        assert_abs_diff_eq!(s.scores[0], 0.0);
        assert_abs_diff_eq!(s.scores[1], 1.0);
        assert_abs_diff_eq!(s.scores[2], 0.5, epsilon = 1e-15);
        let d = min_max_normalize(&[0.4, 0.4]);
        assert!(d.degenerate);
        assert_eq!(d.scores, vec![0.0, 0.0]);
    }

    #[test]
    fn shifted_scores_match_direct_exponentials() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let classes: Vec<_> = (0..4).map(|_| class_with_means(vec![random_vec(&mut rng, 3, 2.0), random_vec(&mut rng, 3, 2.0)])).collect();
        let x = random_vec(&mut rng, 3, 1.0);
        let raw: Vec<f64> = classes.iter().map(|c| sa_score(&x, c)).collect();
        let direct = min_max_normalize(&raw);
        let shifted = sa_score_vector(&x, &classes);
        for (a, b) in direct.scores.iter().zip(&shifted.scores) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn base_classes_bypass_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let means: Vec<_> = (0..3).map(|_| random_vec(&mut rng, 4, 2.0)).collect();
        let covs: Vec<_> = (0..3).map(|_| random_psd(&mut rng, 4)).collect();
        let base = BaseReference { class_ids: vec![0, 1, 2], means: means.clone(), covariances: covs.clone() };
        let stats = base.base_statistics(500.0).unwrap();
        for (i, s) in stats.iter().enumerate() {
            assert!(s.is_base);
            assert_eq!(s.components.len(), 1);
            assert_eq!(s.components[0].mean, means[i]);
            assert_eq!(s.components[0].correlation, shrink_and_normalize(&covs[i], 500.0).unwrap());
        }
    }

    #[test]
    fn calibrated_class_has_one_component_per_prototype() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = BaseReference {
            class_ids: vec![0, 1],
            means: vec![random_vec(&mut rng, 4, 2.0), random_vec(&mut rng, 4, 2.0)],
            covariances: vec![random_psd(&mut rng, 4), random_psd(&mut rng, 4)],
        };
        let shots: Vec<_> = (0..5).map(|_| random_vec(&mut rng, 4, 2.0)).collect();
        let protos = build_new_class_prototypes(9, &shots).unwrap();
        let cfg = AnalogyConfig::default();
        let stats = calibrate_new_class(&protos, &base, &cfg).unwrap();
        assert_eq!(stats.components.len(), 6);
        let w = base.weights_for(&protos.prototypes[0], 16.0).unwrap();
        assert_eq!(stats.analogy_weights.as_deref(), Some(&w[..]));
        assert_eq!(stats.components[0].mean, calibrate_mean(&protos.prototypes[0], &base.means, &w, 0.9));
        let plain = uncalibrated_new_class(&protos, 500.0).unwrap();
        assert_eq!(plain.components.len(), 1);
        assert_eq!(plain.components[0].mean, protos.prototypes[0]);
    }

    #[test]
    fn beta_defaults() {
        assert_eq!(default_beta("cifar100"), 0.75);
        assert_eq!(default_beta("CIFAR-100"), 0.75);
        assert_eq!(default_beta("cub200"), 0.9);
        assert_eq!(AnalogyConfig::for_dataset("cifar100").beta, 0.75);
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(sims in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let w = analogy_weights(&sims);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn min_max_preserves_argmax(raw in prop::collection::vec(0.0f64..1.0, 2..30)) {
            let s = min_max_normalize(&raw);
            prop_assume!(!s.degenerate);
            let argmax = |xs: &[f64]| xs.iter().enumerate().fold(0, |b, (i, &x)| if x > xs[b] { i } else { b });
            prop_assert_eq!(argmax(&raw), argmax(&s.scores));
            prop_assert!(s.scores.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn mean_calibration_with_full_beta_is_identity(p in prop::collection::vec(-1e3f64..1e3, 1..10)) {
            let p = DVector::from_vec(p);
            let base = vec![p.map(|x| x * 2.0 + 1.0)];
            prop_assert_eq!(calibrate_mean(&p, &base, &[1.0], 1.0), p);
        }

        #[test]
        fn mahalanobis_zero_only_at_the_mean(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = shrink_and_normalize(&(random_psd(&mut rng, 5) * 10.0), 500.0).unwrap();
            let x = random_vec(&mut rng, 5, 3.0);
            let p = random_vec(&mut rng, 5, 3.0);
            prop_assert!(mahalanobis(&x, &p, &c.inverse) > 0.0);
            prop_assert!((mahalanobis(&x, &p, &c.inverse) - mahalanobis(&p, &x, &c.inverse)).abs() < 1e-9);
        }
    }
}
