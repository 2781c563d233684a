//! Sentence vectors from token-level embeddings.

use ndarray::{Array1, Array2, Axis};

use crate::{Error, Result};

/// Token embeddings for one sample; the first row is the classification
/// token, the rest are the sequence tokens. Padding must be stripped upstream.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Array2<f64>,
}

impl TokenSequence {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(Error::InvalidDataset("empty token sequence".into()));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite token embedding".into()));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Column mean over every row, the classification token included.
pub fn mean_pool(seq: &TokenSequence) -> Array1<f64> {
    let mut sum = Array1::zeros(seq.dim());
    for row in seq.tokens.axis_iter(Axis(0)) {
        sum += &row;
    }
    sum / seq.len() as f64
}
