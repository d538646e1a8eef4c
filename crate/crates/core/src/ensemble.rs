//! Soft voting and the off-the-shelf scorer it combines with.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::analogy::{min_max_normalize, ScoreVector};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("score vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty score vector")]
    Empty,
    #[error("projection width {projection} is smaller than the input dimension {dim}")]
    ProjectionTooNarrow { dim: usize, projection: usize },
    #[error("input has dimension {found}, scorer expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("ridge system is singular; use a positive ridge parameter")]
    Singular,
    #[error("scorer has not been fitted")]
    NotFitted,
    #[error("class {0} is unknown to the scorer")]
    UnknownClass(u32),
    #[error("{0}")]
    BadParameter(String),
}

/// `s_sa + weight·s_ots`, elementwise.
pub fn soft_vote(s_sa: &[f64], s_ots: &[f64], weight: f64) -> Result<Vec<f64>, EnsembleError> {
    if s_sa.len() != s_ots.len() {
        return Err(EnsembleError::LengthMismatch(s_sa.len(), s_ots.len()));
    }
    Ok(s_sa.iter().zip(s_ots).map(|(a, b)| a + weight * b).collect())
}

/// Index of the largest score; ties go to the lowest index.
pub fn predict(scores: &[f64]) -> Result<usize, EnsembleError> {
    if scores.is_empty() {
        return Err(EnsembleError::Empty);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Mean-calibration request for one new class: its base-class weights and
/// the share kept from its own statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCalibration {
    pub class_id: u32,
    pub base_weights: Vec<(u32, f64)>,
    pub beta: f64,
}

/// A classifier whose normalized scores join the vote.
pub trait OtsScorer {
    fn fit_base(&mut self, xs: &[DVector<f64>], labels: &[u32]) -> Result<(), EnsembleError>;

    fn fit_increment(
        &mut self,
        xs: &[DVector<f64>],
        labels: &[u32],
        calibration: &[ClassCalibration],
    ) -> Result<(), EnsembleError>;

    /// Min-max normalized scores over `classes`, in that order.
    fn score_vector(&self, x: &DVector<f64>, classes: &[u32]) -> Result<ScoreVector, EnsembleError>;
}

/// Ridge regression on a frozen random ReLU expansion of the features.
///
/// `h = max(0, Rᵀx)`, `G = Σ h hᵀ`, `Q = Σ h·onehot(y)ᵀ`, readout
/// `W = (G + ρI)⁻¹ Q`. Class columns are kept in ascending class id order.
#[derive(Debug, Clone)]
pub struct RandomProjectionScorer {
    projection: DMatrix<f64>,
    ridge: f64,
    gram: DMatrix<f64>,
    targets: BTreeMap<u32, DVector<f64>>,
    counts: BTreeMap<u32, usize>,
    /// Sum of the expanded features per class, kept for calibration.
    feature_sums: BTreeMap<u32, DVector<f64>>,
    readout: Option<DMatrix<f64>>,
}

const ROWS_PER_BLOCK: usize = 256;

impl RandomProjectionScorer {
    pub fn new(dim: usize, projection_dim: usize, ridge: f64, seed: u64) -> Result<Self, EnsembleError> {
        if projection_dim < dim {
            return Err(EnsembleError::ProjectionTooNarrow { dim, projection: projection_dim });
        }
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(EnsembleError::BadParameter("ridge must be nonnegative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let projection = DMatrix::from_fn(dim, projection_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(Self {
            projection,
            ridge,
            gram: DMatrix::zeros(projection_dim, projection_dim),
            targets: BTreeMap::new(),
            counts: BTreeMap::new(),
            feature_sums: BTreeMap::new(),
            readout: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn projection_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.targets.keys().copied().collect()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn readout(&self) -> Option<&DMatrix<f64>> {
        self.readout.as_ref()
    }

    pub fn expand(&self, x: &DVector<f64>) -> DVector<f64> {
        self.projection.tr_mul(x).map(|v| v.max(0.0))
    }

    /// Adds samples to the Gram and target accumulators. The readout must
    /// be re-solved before scoring.
    pub fn accumulate(&mut self, xs: &[DVector<f64>], labels: &[u32]) -> Result<(), EnsembleError> {
        if xs.len() != labels.len() {
            return Err(EnsembleError::LengthMismatch(xs.len(), labels.len()));
        }
        if let Some(x) = xs.iter().find(|x| x.len() != self.dim()) {
            return Err(EnsembleError::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        let p = self.projection_dim();
        for (block, ys) in xs.chunks(ROWS_PER_BLOCK).zip(labels.chunks(ROWS_PER_BLOCK)) {
            let x_block = DMatrix::from_fn(block.len(), self.dim(), |i, j| block[i][j]);
            let h = (x_block * &self.projection).map(|v| v.max(0.0));
            self.gram.gemm_tr(1.0, &h, &h, 1.0);
            for (i, &y) in ys.iter().enumerate() {
                let row = h.row(i).transpose();
                *self.targets.entry(y).or_insert_with(|| DVector::zeros(p)) += &row;
                *self.feature_sums.entry(y).or_insert_with(|| DVector::zeros(p)) += &row;
                *self.counts.entry(y).or_insert(0) += 1;
            }
        }
        self.readout = None;
        Ok(())
    }

    /// Replaces a class's target column with `n_c·(β·h̄_c + (1−β)·Σ_b w_b·h̄_b)`.
    pub fn calibrate(&mut self, cal: &ClassCalibration) -> Result<(), EnsembleError> {
        let n = *self.counts.get(&cal.class_id).ok_or(EnsembleError::UnknownClass(cal.class_id))? as f64;
        let own = &self.feature_sums[&cal.class_id] / n;
        let mut blend = DVector::zeros(own.len());
        for &(b, w) in &cal.base_weights {
            let nb = *self.counts.get(&b).ok_or(EnsembleError::UnknownClass(b))? as f64;
            blend.axpy(w / nb, &self.feature_sums[&b], 1.0);
        }
        self.targets.insert(cal.class_id, (own * cal.beta + blend * (1.0 - cal.beta)) * n);
        self.readout = None;
        Ok(())
    }

    /// Solves for the readout.
    pub fn solve(&mut self) -> Result<(), EnsembleError> {
        let p = self.projection_dim();
        let mut a = self.gram.clone();
        for i in 0..p {
            a[(i, i)] += self.ridge;
        }
        let chol = Cholesky::new(a).ok_or(EnsembleError::Singular)?;
        let q = DMatrix::from_columns(&self.targets.values().cloned().collect::<Vec<_>>());
        if q.ncols() == 0 {
            return Err(EnsembleError::NotFitted);
        }
        self.readout = Some(chol.solve(&q));
        Ok(())
    }

    /// Raw readout scores in ascending class id order.
    pub fn raw_scores(&self, x: &DVector<f64>) -> Result<DVector<f64>, EnsembleError> {
        let w = self.readout.as_ref().ok_or(EnsembleError::NotFitted)?;
        if x.len() != self.dim() {
            return Err(EnsembleError::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        Ok(w.tr_mul(&self.expand(x)))
    }
}

impl OtsScorer for RandomProjectionScorer {
    fn fit_base(&mut self, xs: &[DVector<f64>], labels: &[u32]) -> Result<(), EnsembleError> {
        self.accumulate(xs, labels)?;
        self.solve()
    }

    fn fit_increment(
        &mut self,
        xs: &[DVector<f64>],
        labels: &[u32],
        calibration: &[ClassCalibration],
    ) -> Result<(), EnsembleError> {
        self.accumulate(xs, labels)?;
        for cal in calibration {
            self.calibrate(cal)?;
        }
        self.solve()
    }

    fn score_vector(&self, x: &DVector<f64>, classes: &[u32]) -> Result<ScoreVector, EnsembleError> {
        let raw = self.raw_scores(x)?;
        let index: BTreeMap<u32, usize> = self.targets.keys().enumerate().map(|(i, &c)| (c, i)).collect();
        let picked = classes
            .iter()
            .map(|c| index.get(c).map(|&i| raw[i]).ok_or(EnsembleError::UnknownClass(*c)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(min_max_normalize(&picked))
    }
}
