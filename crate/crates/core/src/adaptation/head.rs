use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::hypersphere::{normalize, SphereError, UnitVector};

/// Nonlinearity between the down- and up-projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// tanh approximation of GELU; smooth everywhere.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }

    pub fn as_byte(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Gelu),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

/// Residual bottleneck adapter over frozen features plus a linear
/// classifier on the normalized embedding.
///
/// `features(x) = x + W_upᵀ act(W_downᵀ x)` (without the `x` term when
/// `residual` is off), `z = features(x) / ‖features(x)‖`, `logits = W_clsᵀ z`.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckHead {
    /// d × r
    pub w_down: DMatrix<f64>,
    /// r × d
    pub w_up: DMatrix<f64>,
    /// d × C
    pub w_cls: DMatrix<f64>,
    pub activation: Activation,
    pub residual: bool,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: DVector<f64>,
    pub pre_activation: DVector<f64>,
    pub hidden: DVector<f64>,
    pub features: DVector<f64>,
    pub norm: f64,
    pub z: UnitVector,
}

impl BottleneckHead {
    /// Down-projection drawn from N(0, 1/d), up-projection zero, classifier
    /// from N(0, 0.01²). The adapter starts as the identity map.
    pub fn init<R: Rng>(dim: usize, bottleneck: usize, classes: usize, activation: Activation, residual: bool, rng: &mut R) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let w_down = DMatrix::from_fn(dim, bottleneck, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        let w_up = DMatrix::zeros(bottleneck, dim);
        let w_cls = DMatrix::from_fn(dim, classes, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
        Self { w_down, w_up, w_cls, activation, residual }
    }

    pub fn dim(&self) -> usize {
        self.w_down.nrows()
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.ncols()
    }

    pub fn classes(&self) -> usize {
        self.w_cls.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.w_down.iter().chain(self.w_up.iter()).chain(self.w_cls.iter()).all(|v| v.is_finite())
    }

    /// Raw adapter output, before normalization.
    pub fn features(&self, x: &DVector<f64>) -> DVector<f64> {
        let pre = self.w_down.tr_mul(x);
        let hidden = pre.map(|a| self.activation.apply(a));
        let up = self.w_up.tr_mul(&hidden);
        if self.residual {
            up + x
        } else {
            up
        }
    }

    pub fn forward_embed(&self, x: &DVector<f64>) -> Result<UnitVector, SphereError> {
        normalize(&self.features(x))
    }

    pub fn forward_cached(&self, x: &DVector<f64>) -> Result<ForwardCache, SphereError> {
        let pre_activation = self.w_down.tr_mul(x);
        let hidden = pre_activation.map(|a| self.activation.apply(a));
        let mut features = self.w_up.tr_mul(&hidden);
        if self.residual {
            features += x;
        }
        let z = normalize(&features)?;
        let norm = features.norm();
        Ok(ForwardCache { input: x.clone(), pre_activation, hidden, features, norm, z })
    }

    pub fn logits(&self, z: &UnitVector) -> DVector<f64> {
        self.w_cls.tr_mul(z.as_vector())
    }

    /// Accumulates into `grad` the adapter gradient for an upstream gradient
    /// `g_z` on the normalized embedding.
    pub fn backward_embed(&self, cache: &ForwardCache, g_z: &DVector<f64>, grad: &mut HeadGradient) {
        let z = cache.z.as_vector();
        let g_feat = (g_z - z * z.dot(g_z)) / cache.norm;
        // features = W_upᵀ h (+ x)
        grad.w_up.ger(1.0, &cache.hidden, &g_feat, 1.0);
        let g_hidden = &self.w_up * &g_feat;
        let g_pre = g_hidden.zip_map(&cache.pre_activation, |g, a| g * self.activation.derivative(a));
        grad.w_down.ger(1.0, &cache.input, &g_pre, 1.0);
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.w_down.len() + self.w_up.len() + self.w_cls.len()
    }

    /// Parameters flattened in (W_down, W_up, W_cls) column-major order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.w_down.iter().chain(self.w_up.iter()).chain(self.w_cls.iter()).copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.parameter_count());
        let (a, rest) = flat.split_at(self.w_down.len());
        let (b, c) = rest.split_at(self.w_up.len());
        self.w_down.copy_from_slice(a);
        self.w_up.copy_from_slice(b);
        self.w_cls.copy_from_slice(c);
    }
}

/// Gradient with the same shapes as a [`BottleneckHead`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub w_down: DMatrix<f64>,
    pub w_up: DMatrix<f64>,
    pub w_cls: DMatrix<f64>,
}

impl HeadGradient {
    pub fn zeros_like(head: &BottleneckHead) -> Self {
        Self {
            w_down: DMatrix::zeros(head.w_down.nrows(), head.w_down.ncols()),
            w_up: DMatrix::zeros(head.w_up.nrows(), head.w_up.ncols()),
            w_cls: DMatrix::zeros(head.w_cls.nrows(), head.w_cls.ncols()),
        }
    }

    pub fn add_scaled(&mut self, other: &HeadGradient, s: f64) {
        self.w_down += &other.w_down * s;
        self.w_up += &other.w_up * s;
        self.w_cls += &other.w_cls * s;
    }

    pub fn scale(&mut self, s: f64) {
        self.w_down *= s;
        self.w_up *= s;
        self.w_cls *= s;
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.w_down.iter().chain(self.w_up.iter()).chain(self.w_cls.iter()).copied().collect()
    }
}
