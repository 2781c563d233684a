//! The clustering layer `I = W2ᵀ · dropout(tanh(W1 · e))`, its exact
//! gradients, an adaptive-moment optimizer, and the checkpoint file.
//!
//! Batches are row-major: `E` is `n × H`, the hidden activations are
//! `n × H`, and the intent representations `I` are `n × k`. There are no
//! bias terms.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::FormatError;
use crate::rng::seeded_rng;
use crate::{Error, Phase, Result};

pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterNetParams {
    /// `H × H`
    pub w1: Array2<f64>,
    /// `H × k`
    pub w2: Array2<f64>,
    pub dropout_rate: f64,
    pub mode: Mode,
    /// Bumped on every optimizer step so stale forward caches are detectable.
    version: u64,
}

impl ClusterNetParams {
    pub fn from_weights(w1: Array2<f64>, w2: Array2<f64>) -> Result<Self> {
        let h = w1.nrows();
        if h == 0 || w1.ncols() != h {
            return Err(Error::Shape(format!("W1 must be square and non-empty, got {:?}", w1.dim())));
        }
        if w2.nrows() != h {
            return Err(Error::Shape(format!("W2 must have {h} rows, got {}", w2.nrows())));
        }
        if w2.ncols() < 2 {
            return Err(Error::param("k", "at least two clusters required"));
        }
        if w1.iter().chain(w2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::param("weights", "non-finite entry"));
        }
        Ok(Self { w1, w2, dropout_rate: DEFAULT_DROPOUT, mode: Mode::Train, version: 0 })
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::param("dropout_rate", format!("{rate} not in [0, 1)")));
        }
        self.dropout_rate = rate;
        Ok(self)
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn clusters(&self) -> usize {
        self.w2.ncols()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn is_finite(&self) -> bool {
        self.w1.iter().chain(self.w2.iter()).all(|v| v.is_finite())
    }
}

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

/// Glorot-uniform weights for `H` input features and `k` clusters.
pub fn init_params(hidden: usize, clusters: usize, seed: u64) -> Result<ClusterNetParams> {
    if hidden == 0 {
        return Err(Error::param("H", "must be at least 1"));
    }
    if clusters < 2 {
        return Err(Error::param("k", format!("{clusters} < 2")));
    }
    let mut rng = seeded_rng(seed);
    let w1 = uniform_matrix(hidden, hidden, (6.0 / (2 * hidden) as f64).sqrt(), &mut rng);
    let w2 = uniform_matrix(hidden, clusters, (6.0 / (hidden + clusters) as f64).sqrt(), &mut rng);
    ClusterNetParams::from_weights(w1, w2)
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    /// `tanh(E W1ᵀ)`
    hidden: Array2<f64>,
    /// Per-unit dropout multiplier (0 or `1/(1-p)`); `None` when dropout is identity.
    mask: Option<Array2<f64>>,
    /// Post-dropout activations fed to `W2`.
    dropped: Array2<f64>,
    version: u64,
}

impl ForwardCache {
    pub fn mask(&self) -> Option<&Array2<f64>> {
        self.mask.as_ref()
    }
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, seed: u64) -> Array2<f64> {
    let mut rng = seeded_rng(seed);
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

pub fn forward(
    params: &ClusterNetParams,
    input: ArrayView2<'_, f64>,
    dropout_seed: u64,
) -> Result<(Array2<f64>, ForwardCache)> {
    if input.ncols() != params.hidden() {
        return Err(Error::Shape(format!(
            "input has {} columns, clustering layer expects {}",
            input.ncols(),
            params.hidden()
        )));
    }
    let hidden = input.dot(&params.w1.t()).mapv_into(f64::tanh);
    let mask = (params.mode == Mode::Train && params.dropout_rate > 0.0)
        .then(|| dropout_mask(hidden.nrows(), hidden.ncols(), params.dropout_rate, dropout_seed));
    let dropped = match &mask {
        Some(m) => &hidden * m,
        None => hidden.clone(),
    };
    let intents = dropped.dot(&params.w2);
    let cache = ForwardCache {
        input: input.to_owned(),
        hidden,
        mask,
        dropped,
        version: params.version,
    };
    Ok((intents, cache))
}

/// Eval-mode forward pass, discarding the cache.
pub fn represent(params: &ClusterNetParams, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let eval = ClusterNetParams { mode: Mode::Eval, ..params.clone() };
    Ok(forward(&eval, input, 0)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    /// Gradient with respect to the (fixed) input embeddings.
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(self.w2.iter()).all(|v| v.is_finite())
    }
}

pub fn backward(params: &ClusterNetParams, cache: &ForwardCache, d_intents: &Array2<f64>) -> Result<Gradients> {
    if cache.version != params.version {
        return Err(Error::StaleCache);
    }
    let expected = (cache.input.nrows(), params.clusters());
    if d_intents.dim() != expected || cache.input.ncols() != params.hidden() {
        return Err(Error::Shape(format!(
            "upstream gradient is {:?}, forward produced {expected:?}",
            d_intents.dim()
        )));
    }
    let w2 = cache.dropped.t().dot(d_intents);
    let mut d_hidden = d_intents.dot(&params.w2.t());
    if let Some(mask) = &cache.mask {
        d_hidden *= mask;
    }
    // through tanh: d/dz tanh(z) = 1 - tanh(z)^2
    Zip::from(&mut d_hidden)
        .and(&cache.hidden)
        .for_each(|d, &a| *d *= 1.0 - a * a);
    let w1 = d_hidden.t().dot(&cache.input);
    let input = d_hidden.dot(&params.w1);
    Ok(Gradients { w1, w2, input })
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Array2<f64>,
    second: Array2<f64>,
}

/// Adaptive-moment optimizer state for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    slots: Vec<Moments>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[(usize, usize)]) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", format!("{learning_rate} must be >= 0")));
        }
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            slots: shapes
                .iter()
                .map(|&s| Moments { first: Array2::zeros(s), second: Array2::zeros(s) })
                .collect(),
        })
    }

    /// State for the two weight matrices of `params`.
    pub fn for_params(params: &ClusterNetParams, learning_rate: f64) -> Result<Self> {
        Self::new(learning_rate, &[params.w1.dim(), params.w2.dim()])
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every tensor. Gradients are checked for
    /// finiteness before anything is touched.
    pub fn update(&mut self, params: &mut [&mut Array2<f64>], grads: &[&Array2<f64>], phase: Phase) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::Shape(format!(
                "optimizer has {} slots, got {} parameters and {} gradients",
                self.slots.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), slot) in params.iter().zip(grads).zip(&self.slots) {
            if p.dim() != slot.first.dim() || g.dim() != slot.first.dim() {
                return Err(Error::Shape(format!(
                    "parameter {:?} / gradient {:?} vs optimizer slot {:?}",
                    p.dim(),
                    g.dim(),
                    slot.first.dim()
                )));
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient { phase });
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            Zip::from(&mut **p)
                .and(*g)
                .and(&mut slot.first)
                .and(&mut slot.second)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

pub type OptimizerState = Adam;

/// Applies one optimizer step to the clustering layer and invalidates
/// outstanding forward caches.
pub fn step(params: &mut ClusterNetParams, opt: &mut Adam, grads: &Gradients, phase: Phase) -> Result<()> {
    opt.update(&mut [&mut params.w1, &mut params.w2], &[&grads.w1, &grads.w2], phase)?;
    params.version += 1;
    if !params.is_finite() {
        return Err(Error::NonFiniteParameters { phase });
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDAC";

/// Trained state: clustering-layer weights, the threshold parameter λ, and
/// refinement centroids when refinement ran.
///
/// Layout: `"CDAC" | H: u32 | k: u32 | centroid_rows: u32`, then `W1`
/// (`H × H`), `W2` (`H × k`), `λ`, and `U` (`centroid_rows × k`) as
/// row-major little-endian f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub lambda: f64,
    pub centroids: Option<Array2<f64>>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let h = self.w1.nrows();
        let k = self.w2.ncols();
        let u_rows = self.centroids.as_ref().map_or(0, Array2::nrows);
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for n in [h, k, u_rows] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        let values = self
            .w1
            .iter()
            .chain(self.w2.iter())
            .chain(std::iter::once(&self.lambda))
            .chain(self.centroids.iter().flat_map(|u| u.iter()));
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(FormatError::Truncated("checkpoint header".into()).into());
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: "CDAC".into(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            }
            .into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (h, k, u_rows) = (word(0), word(1), word(2));
        let count = h * h + h * k + 1 + u_rows * k;
        let body = &bytes[16..];
        if body.len() != count * 8 {
            return Err(FormatError::Truncated(format!(
                "checkpoint body: expected {} bytes, found {}",
                count * 8,
                body.len()
            ))
            .into());
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (w1, rest) = values.split_at(h * h);
        let (w2, rest) = rest.split_at(h * k);
        let (lambda, u) = rest.split_at(1);
        let shape = |r, c, v: &[f64]| Array2::from_shape_vec((r, c), v.to_vec()).expect("sizes checked");
        Ok(Self {
            w1: shape(h, h, w1),
            w2: shape(h, k, w2),
            lambda: lambda[0],
            centroids: (u_rows > 0).then(|| shape(u_rows, k, u)),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
