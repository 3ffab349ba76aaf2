//! Two-layer projection head from frozen query embeddings onto the descriptor sphere.
//!
//! `q = normalize(W2 · act(W1 · x + b1) + b2)`. Parameters are kept in one flat
//! buffer laid out as `[W1 | b1 | W2 | b2]` (row-major matrices) so optimizers and
//! gradient checks can treat them as a single vector.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{affine, dot, norm};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Identity,
    #[default]
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Gelu => "gelu",
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => libm::tanh(z),
            Activation::Gelu => 0.5 * z * (1.0 + libm::tanh(GELU_C * (z + GELU_A * z * z * z))),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = libm::tanh(z);
                1.0 - t * t
            }
            Activation::Gelu => {
                let u = GELU_C * (z + GELU_A * z * z * z);
                let t = libm::tanh(u);
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
            }
        }
    }
}

/// A unit-norm query representation.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector(Vec<f64>);

impl QueryVector {
    /// Wraps `v`, which must already be unit norm.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = norm(&v);
        if (n - 1.0).abs() > crate::descriptors::UNIT_TOLERANCE {
            return Err(Error::OutOfRange { context: "query vector norm".into(), value: n });
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for QueryVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Intermediate values of one forward pass, needed by [`MlpHead::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
    pub output_norm: f64,
    pub query: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    activation: Activation,
    params: Vec<f64>,
}

impl MlpHead {
    pub fn param_count(input_dim: usize, hidden_dim: usize, output_dim: usize) -> usize {
        hidden_dim * input_dim + hidden_dim + output_dim * hidden_dim + output_dim
    }

    /// Fan-in scaled uniform weights `U(-1/√fan_in, 1/√fan_in)`, zero biases.
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidConfig("head dimensions must be at least 1".into()));
        }
        let mut head = Self {
            input_dim,
            hidden_dim,
            output_dim,
            activation,
            params: alloc::vec![0.0; Self::param_count(input_dim, hidden_dim, output_dim)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b1 = 1.0 / libm::sqrt(input_dim as f64);
        for w in head.w1_mut() {
            *w = rng.random_range(-b1..b1);
        }
        let b2 = 1.0 / libm::sqrt(hidden_dim as f64);
        for w in head.w2_mut() {
            *w = rng.random_range(-b2..b2);
        }
        Ok(head)
    }

    /// Builds a head from explicit parameters in `[W1 | b1 | W2 | b2]` layout.
    pub fn from_params(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let expected = Self::param_count(input_dim, hidden_dim, output_dim);
        if params.len() != expected {
            return Err(Error::DimensionMismatch { context: "head parameters", expected, found: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { context: "head parameters".into() });
        }
        Ok(Self { input_dim, hidden_dim, output_dim, activation, params })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = w1 + self.hidden_dim * self.input_dim;
        let w2 = b1 + self.hidden_dim;
        let b2 = w2 + self.output_dim * self.hidden_dim;
        [w1, b1, w2, b2]
    }

    pub fn w1(&self) -> &[f64] {
        let [w1, b1, ..] = self.offsets();
        &self.params[w1..b1]
    }

    pub fn b1(&self) -> &[f64] {
        let [_, b1, w2, _] = self.offsets();
        &self.params[b1..w2]
    }

    pub fn w2(&self) -> &[f64] {
        let [_, _, w2, b2] = self.offsets();
        &self.params[w2..b2]
    }

    pub fn b2(&self) -> &[f64] {
        let [.., b2] = self.offsets();
        &self.params[b2..]
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let [w1, b1, ..] = self.offsets();
        &mut self.params[w1..b1]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        let [_, _, w2, b2] = self.offsets();
        &mut self.params[w2..b2]
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "head input",
                expected: self.input_dim,
                found: x.len(),
            });
        }
        let mut pre = alloc::vec![0.0; self.hidden_dim];
        affine(self.w1(), self.b1(), x, &mut pre);
        let hidden: Vec<f64> = pre.iter().map(|&z| self.activation.apply(z)).collect();
        let mut output = alloc::vec![0.0; self.output_dim];
        affine(self.w2(), self.b2(), &hidden, &mut output);
        let n = norm(&output);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::ZeroVector { context: format!("head output (norm {n})") });
        }
        let query = output.iter().map(|y| y / n).collect();
        Ok(ForwardCache { pre_activation: pre, hidden, output, output_norm: n, query })
    }

    pub fn forward(&self, x: &[f64]) -> Result<QueryVector> {
        Ok(QueryVector(self.forward_cached(x)?.query))
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂q` for one cached sample.
    pub fn backward(&self, x: &[f64], cache: &ForwardCache, d_query: &[f64], grads: &mut [f64]) {
        debug_assert_eq!(grads.len(), self.params.len());
        let [w1_at, b1_at, w2_at, b2_at] = self.offsets();
        let (h, d) = (self.hidden_dim, self.input_dim);

        // q = y/‖y‖  ⇒  ∂L/∂y = (g − q (q·g)) / ‖y‖
        let qg = dot(&cache.query, d_query);
        let d_out: Vec<f64> = cache
            .query
            .iter()
            .zip(d_query)
            .map(|(q, g)| (g - q * qg) / cache.output_norm)
            .collect();

        let w2 = self.w2();
        let mut d_hidden = alloc::vec![0.0; h];
        for (r, &dy) in d_out.iter().enumerate() {
            grads[b2_at + r] += dy;
            let row = &mut grads[w2_at + r * h..w2_at + (r + 1) * h];
            for (g, &hv) in row.iter_mut().zip(&cache.hidden) {
                *g += dy * hv;
            }
            for (dh, &w) in d_hidden.iter_mut().zip(&w2[r * h..(r + 1) * h]) {
                *dh += dy * w;
            }
        }
        for (j, dh) in d_hidden.iter().enumerate() {
            let dz = dh * self.activation.derivative(cache.pre_activation[j]);
            grads[b1_at + j] += dz;
            let row = &mut grads[w1_at + j * d..w1_at + (j + 1) * d];
            for (g, &xv) in row.iter_mut().zip(x) {
                *g += dz * xv;
            }
        }
    }
}
