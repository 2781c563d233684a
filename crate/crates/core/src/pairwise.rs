//! Pairwise classification: cosine similarity of intent representations,
//! supervised and threshold-selected pair labels, the binary cross-entropy
//! similarity loss, the λ threshold schedule, and the alternating training
//! loop.

use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::clusternet::{self, Adam, ClusterNetParams, Mode};
use crate::dataset::{batches_from, EmbeddedDataset, ExperimentMask, Split};
use crate::rng::derive_seed;
use crate::{Error, Phase, Result};

/// Norm below which an intent representation counts as collapsed.
pub const MIN_NORM: f64 = 1e-12;
/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` inside the logarithms.
pub const CLAMP: f64 = 1e-7;

/// Cosine similarities of a batch of intent representations, with the
/// normalized rows kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
    unit_rows: Array2<f64>,
    norms: Array1<f64>,
}

impl SimilarityMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Chains `dL/dS` back to `dL/dI`. Every entry of `d_sim` is treated as
    /// an independent use of `S_ij = ⟨Î_i, Î_j⟩`.
    pub fn backward(&self, d_sim: &Array2<f64>) -> Array2<f64> {
        let sym = d_sim + &d_sim.t();
        let d_unit = sym.dot(&self.unit_rows);
        let mut d_rows = Array2::zeros(d_unit.raw_dim());
        for (i, (mut out, (du, u))) in d_rows
            .outer_iter_mut()
            .zip(d_unit.outer_iter().zip(self.unit_rows.outer_iter()))
            .enumerate()
        {
            let radial = du.dot(&u);
            out.assign(&((&du - &(&u * radial)) / self.norms[i]));
        }
        d_rows
    }
}

pub fn similarity_matrix(intents: &Array2<f64>) -> Result<SimilarityMatrix> {
    let norms = intents.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some((row, &norm)) = norms.iter().enumerate().find(|(_, n)| n.is_nan() || **n < MIN_NORM) {
        return Err(Error::DegenerateRepresentation { row, norm });
    }
    let unit_rows = intents / &norms.view().insert_axis(Axis(1));
    let mut values = unit_rows.dot(&unit_rows.t());
    let n = values.nrows();
    for i in 0..n {
        values[(i, i)] = 1.0;
        for j in i + 1..n {
            values[(j, i)] = values[(i, j)];
        }
    }
    Ok(SimilarityMatrix { values, unit_rows, norms })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Similar,
    Dissimilar,
    NotSelected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLabels {
    pub values: Array2<PairLabel>,
}

impl PairLabels {
    /// Fraction of off-diagonal pairs that carry a label.
    pub fn selected_fraction(&self) -> f64 {
        let n = self.values.nrows();
        if n < 2 {
            return 0.0;
        }
        let selected = self
            .values
            .indexed_iter()
            .filter(|((i, j), l)| i != j && **l != PairLabel::NotSelected)
            .count();
        selected as f64 / (n * (n - 1)) as f64
    }
}

/// Ground-truth pair labels for a fully labeled batch.
pub fn label_matrix(labels: &[Option<usize>]) -> Result<PairLabels> {
    let classes: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| l.ok_or(Error::MissingLabel(i)))
        .collect::<Result<_>>()?;
    let n = classes.len();
    Ok(PairLabels {
        values: Array2::from_shape_fn((n, n), |(i, j)| {
            if classes[i] == classes[j] {
                PairLabel::Similar
            } else {
                PairLabel::Dissimilar
            }
        }),
    })
}

/// Threshold selection with label precedence: pairs whose members are both
/// labeled take their ground truth; other pairs are similar above `upper`,
/// dissimilar below `lower`, and unselected in between.
pub fn threshold_labels(sim: &SimilarityMatrix, labels: &[Option<usize>], upper: f64, lower: f64) -> Result<PairLabels> {
    let n = sim.len();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for a {n}-sample batch", labels.len())));
    }
    let s = &sim.values;
    Ok(PairLabels {
        values: Array2::from_shape_fn((n, n), |(i, j)| match (labels[i], labels[j]) {
            (Some(a), Some(b)) if a == b => PairLabel::Similar,
            (Some(_), Some(_)) => PairLabel::Dissimilar,
            _ if s[(i, j)] > upper => PairLabel::Similar,
            _ if s[(i, j)] < lower => PairLabel::Dissimilar,
            _ => PairLabel::NotSelected,
        }),
    })
}

pub fn self_label_matrix(sim: &SimilarityMatrix, labels: &[Option<usize>], ts: &ThresholdState) -> Result<PairLabels> {
    if !ts.is_active() {
        return Err(Error::Config(format!(
            "thresholds have met (u = {}, l = {}); self-labeling is finished",
            ts.upper(),
            ts.lower()
        )));
    }
    threshold_labels(sim, labels, ts.upper(), ts.lower())
}

/// Mean binary cross-entropy over selected off-diagonal pairs and its
/// gradient with respect to every entry of `S`.
pub fn similarity_loss(sim: &Array2<f64>, labels: &PairLabels) -> Result<(f64, Array2<f64>)> {
    let n = sim.nrows();
    if labels.values.dim() != (n, n) || sim.ncols() != n {
        return Err(Error::Shape(format!(
            "similarity {:?} vs labels {:?}",
            sim.dim(),
            labels.values.dim()
        )));
    }
    let mut grad = Array2::zeros((n, n));
    let mut total = 0.0;
    let mut count = 0usize;
    for ((i, j), label) in labels.values.indexed_iter() {
        if i == j || *label == PairLabel::NotSelected {
            continue;
        }
        let s = sim[(i, j)];
        let p = s.clamp(CLAMP, 1.0 - CLAMP);
        let clamped = p != s;
        let (l, g) = match label {
            PairLabel::Similar => (-p.ln(), -1.0 / p),
            _ => (-(1.0 - p).ln(), 1.0 / (1.0 - p)),
        };
        total += l;
        if !clamped {
            grad[(i, j)] = g;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptySelection);
    }
    let scale = 1.0 / count as f64;
    grad *= scale;
    Ok((total * scale, grad))
}

/// Adaptive thresholds `u(λ) = 0.95 − λ` and `l(λ) = 0.455 + 0.1·λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub lambda: f64,
    pub eta: f64,
    pub u_intercept: f64,
    pub u_slope: f64,
    pub l_intercept: f64,
    pub l_slope: f64,
    pub updates: u32,
}

impl Default for ThresholdState {
    fn default() -> Self {
        Self::new(0.009)
    }
}

impl ThresholdState {
    pub fn new(eta: f64) -> Self {
        Self {
            lambda: 0.0,
            eta,
            u_intercept: 0.95,
            u_slope: -1.0,
            l_intercept: 0.455,
            l_slope: 0.1,
            updates: 0,
        }
    }

    pub fn upper(&self) -> f64 {
        self.u_intercept + self.u_slope * self.lambda
    }

    pub fn lower(&self) -> f64 {
        self.l_intercept + self.l_slope * self.lambda
    }

    /// `E(λ) = u(λ) − l(λ)`
    pub fn gap(&self) -> f64 {
        self.upper() - self.lower()
    }

    /// `dE/dλ`, constant for linear thresholds.
    pub fn gap_derivative(&self) -> f64 {
        self.u_slope - self.l_slope
    }

    /// Self-labeling continues while `u(λ) > l(λ)`.
    pub fn is_active(&self) -> bool {
        self.upper() > self.lower()
    }
}

/// One gradient-descent step on the threshold gap.
pub fn update_lambda(ts: &ThresholdState) -> ThresholdState {
    ThresholdState {
        lambda: ts.lambda - ts.eta * ts.gap_derivative(),
        updates: ts.updates + 1,
        ..*ts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for PairwiseConfig {
    fn default() -> Self {
        Self { batch_size: 256, max_epochs: 100, seed: 0 }
    }
}

/// One row of the training log, written after the epoch's λ update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseEpoch {
    pub epoch: usize,
    /// `None` when no supervised batch ran.
    pub sup_loss: Option<f64>,
    pub selfsup_loss: Option<f64>,
    pub lambda: f64,
    pub u: f64,
    pub l: f64,
    pub selected_fraction: f64,
}

/// One optimizer step on a batch; `None` when no pair was selected.
fn train_batch(
    params: &mut ClusterNetParams,
    opt: &mut Adam,
    inputs: &Array2<f64>,
    labels: &[Option<usize>],
    select: impl Fn(&SimilarityMatrix, &[Option<usize>]) -> Result<PairLabels>,
    dropout_seed: u64,
    phase: Phase,
) -> Result<Option<(f64, f64)>> {
    let (intents, cache) = clusternet::forward(params, inputs.view(), dropout_seed)?;
    // a row whose hidden units were all dropped has no direction; leave it out
    let keep: Vec<usize> = match cache.mask() {
        Some(m) => (0..m.nrows()).filter(|&i| m.row(i).iter().any(|&v| v != 0.0)).collect(),
        None => (0..intents.nrows()).collect(),
    };
    if keep.len() < 2 {
        return Ok(None);
    }
    let kept_labels: Vec<Option<usize>> = keep.iter().map(|&i| labels[i]).collect();
    let sim = similarity_matrix(&intents.select(Axis(0), &keep))?;
    let pairs = select(&sim, &kept_labels)?;
    let fraction = pairs.selected_fraction();
    let (loss, d_sim) = match similarity_loss(sim.values(), &pairs) {
        Ok(v) => v,
        Err(Error::EmptySelection) => return Ok(None),
        Err(e) => return Err(e),
    };
    let d_kept = sim.backward(&d_sim);
    let mut d_intents = Array2::zeros(intents.raw_dim());
    for (row, &i) in keep.iter().enumerate() {
        d_intents.row_mut(i).assign(&d_kept.row(row));
    }
    let grads = clusternet::backward(params, &cache, &d_intents)?;
    clusternet::step(params, opt, &grads, phase)?;
    Ok(Some((loss, fraction)))
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Alternates a supervised pass over labeled training rows with a
/// self-supervised pass over all training rows, updating λ once per epoch,
/// until the thresholds meet or `max_epochs` is reached.
pub fn run_pairwise_training(
    ds: &EmbeddedDataset,
    mask: &ExperimentMask,
    params: &mut ClusterNetParams,
    opt: &mut Adam,
    ts: &mut ThresholdState,
    config: &PairwiseConfig,
) -> Result<Vec<PairwiseEpoch>> {
    let class_idx = if mask.labeled_rows.is_empty() {
        vec![0; ds.len()]
    } else {
        ds.class_indices()?
    };
    let mut row_label = vec![None; ds.len()];
    for &r in &mask.labeled_rows {
        row_label[r] = Some(class_idx[r]);
    }
    let train_rows = ds.split_indices(Split::Train);
    let mode = params.mode;
    params.mode = Mode::Train;

    let mut log = Vec::new();
    let mut epoch = 0;
    while ts.is_active() && epoch < config.max_epochs {
        let epoch_seed = derive_seed(config.seed, epoch as u64);

        let mut sup = Vec::new();
        if mask.labeled_rows.len() >= 2 {
            let batches = batches_from(&mask.labeled_rows, config.batch_size, derive_seed(epoch_seed, 1))?;
            for (b, batch) in batches.iter().enumerate().filter(|(_, b)| b.size() >= 2) {
                let labels: Vec<_> = batch.indices.iter().map(|&r| row_label[r]).collect();
                let step = train_batch(
                    params,
                    opt,
                    &ds.rows(&batch.indices),
                    &labels,
                    |_, l| label_matrix(l),
                    derive_seed(epoch_seed, 1000 + b as u64),
                    Phase::Supervised,
                )?;
                sup.extend(step.map(|(loss, _)| loss));
            }
        }

        let mut selfsup = Vec::new();
        let mut fractions = Vec::new();
        let batches = batches_from(&train_rows, config.batch_size, derive_seed(epoch_seed, 2))?;
        let thresholds = *ts;
        for (b, batch) in batches.iter().enumerate().filter(|(_, b)| b.size() >= 2) {
            let labels: Vec<_> = batch.indices.iter().map(|&r| row_label[r]).collect();
            let step = train_batch(
                params,
                opt,
                &ds.rows(&batch.indices),
                &labels,
                |s, l| self_label_matrix(s, l, &thresholds),
                derive_seed(epoch_seed, 2000 + b as u64),
                Phase::SelfSupervised,
            )?;
            match step {
                Some((loss, fraction)) => {
                    selfsup.push(loss);
                    fractions.push(fraction);
                }
                None => fractions.push(0.0),
            }
        }

        *ts = update_lambda(ts);
        log.push(PairwiseEpoch {
            epoch,
            sup_loss: mean(&sup),
            selfsup_loss: mean(&selfsup),
            lambda: ts.lambda,
            u: ts.upper(),
            l: ts.lower(),
            selected_fraction: mean(&fractions).unwrap_or(0.0),
        });
        epoch += 1;
    }
    params.mode = mode;
    Ok(log)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// CSV with columns `epoch,sup_loss,selfsup_loss,lambda,u,l,selected_fraction`;
/// skipped passes leave an empty cell.
pub fn write_log_csv(log: &[PairwiseEpoch], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch,sup_loss,selfsup_loss,lambda,u,l,selected_fraction")?;
    for e in log {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            e.epoch,
            opt_cell(e.sup_loss),
            opt_cell(e.selfsup_loss),
            e.lambda,
            e.u,
            e.l,
            e.selected_fraction
        )?;
    }
    Ok(())
}
