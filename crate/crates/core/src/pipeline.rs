//! End-to-end runs of the method and its ablations, repeated over seeds,
//! and one-axis parameter sweeps.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clusternet::{self, init_params, Adam, Checkpoint, ClusterNetParams};
use crate::dataset::{make_experiment_mask, subsample_imbalanced, EmbeddedDataset, ExperimentMask, Split};
use crate::metrics::{evaluate, MetricsReport};
use crate::pairwise::{run_pairwise_training, PairwiseConfig, PairwiseEpoch, ThresholdState};
use crate::refine::{self, kmeans_restarts, run_refinement, RefineConfig, RefineEpoch, RefinementState};
use crate::rng::derive_seed;
use crate::{Error, Result};

const SEED_SUBSAMPLE: u64 = 1;
const SEED_MASK: u64 = 2;
const SEED_INIT: u64 = 3;
const SEED_PAIRWISE: u64 = 4;
const SEED_KMEANS: u64 = 5;
const SEED_REFINE: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "DAC")]
    Dac,
    #[serde(rename = "DAC-KM")]
    DacKm,
    #[serde(rename = "DAC+")]
    DacPlus,
    #[serde(rename = "CDAC")]
    Cdac,
    #[serde(rename = "CDAC-KM")]
    CdacKm,
    #[serde(rename = "CDAC+")]
    CdacPlus,
    #[serde(rename = "KM-raw")]
    KmRaw,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Dac,
        Variant::DacKm,
        Variant::DacPlus,
        Variant::Cdac,
        Variant::CdacKm,
        Variant::CdacPlus,
        Variant::KmRaw,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dac => "DAC",
            Variant::DacKm => "DAC-KM",
            Variant::DacPlus => "DAC+",
            Variant::Cdac => "CDAC",
            Variant::CdacKm => "CDAC-KM",
            Variant::CdacPlus => "CDAC+",
            Variant::KmRaw => "KM-raw",
        }
    }

    /// Uses labeled pairs (supervised step and label precedence).
    pub fn constrained(self) -> bool {
        matches!(self, Variant::Cdac | Variant::CdacKm | Variant::CdacPlus)
    }

    pub fn refines(self) -> bool {
        matches!(self, Variant::DacPlus | Variant::CdacPlus)
    }

    pub fn plan(self) -> MethodPlan {
        MethodPlan {
            train_network: self != Variant::KmRaw,
            constrained: self.constrained(),
            refine: self.refines(),
        }
    }

    /// How hard assignments are produced, recorded in every report.
    pub fn inference_note(self) -> &'static str {
        match self {
            Variant::Dac | Variant::Cdac => {
                "approximation: no inference rule is defined for this variant; \
                 test samples are assigned to k-means centroids fit once on training \
                 representations (same rule as the -KM evaluation), without refinement"
            }
            Variant::DacKm | Variant::CdacKm => "k-means centroids on training representations, nearest centroid",
            Variant::DacPlus | Variant::CdacPlus => "refined centroids, argmax of Student-t soft assignment",
            Variant::KmRaw => "k-means centroids on raw training embeddings, nearest centroid",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        let norm = norm.strip_suffix("PLUS").map_or(norm.clone(), |b| format!("{}+", b.trim_end_matches('-')));
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().to_ascii_uppercase() == norm)
            .ok_or_else(|| {
                format!(
                    "unknown variant {s:?}; expected one of {}",
                    Variant::ALL.map(Variant::as_str).join(", ")
                )
            })
    }
}

/// The stages a run executes. Variants map onto plans; plans can also be
/// run directly for ablation checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodPlan {
    pub train_network: bool,
    pub constrained: bool,
    pub refine: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: Variant,
    /// Explicit cluster count; when `None` it is the number of true classes
    /// times `cluster_multiplier`, rounded.
    pub cluster_count: Option<usize>,
    pub cluster_multiplier: f64,
    pub labeled_ratio: f64,
    pub unknown_class_ratio: f64,
    pub gamma: Option<f64>,
    pub seed: u64,
    pub num_runs: usize,
    pub pairwise_learning_rate: f64,
    /// Defaults to the pairwise rate when `None`.
    pub refine_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub eta: f64,
    pub delta_label: f64,
    pub dropout: f64,
    pub pairwise_max_epochs: usize,
    pub refine_max_epochs: usize,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    /// Worker threads for independent runs; results do not depend on it.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CdacPlus,
            cluster_count: None,
            cluster_multiplier: 1.0,
            labeled_ratio: 0.1,
            unknown_class_ratio: 0.25,
            gamma: None,
            seed: 0,
            num_runs: 1,
            pairwise_learning_rate: 1e-3,
            refine_learning_rate: None,
            batch_size: 256,
            eta: 0.009,
            delta_label: 0.001,
            dropout: clusternet::DEFAULT_DROPOUT,
            pairwise_max_epochs: 100,
            refine_max_epochs: 100,
            kmeans_restarts: 10,
            kmeans_max_iters: 300,
            jobs: 1,
        }
    }
}

impl RunConfig {
    /// Learning rate for a fine-tuned encoder, as opposed to the desk-scale default.
    pub const PARITY_LEARNING_RATE: f64 = 5e-5;

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.variant.constrained() && self.labeled_ratio <= 0.0 {
            return bad(format!("{} needs labeled data but labeled_ratio is {}", self.variant, self.labeled_ratio));
        }
        if !(0.0..=1.0).contains(&self.labeled_ratio) {
            return bad(format!("labeled_ratio {} not in [0, 1]", self.labeled_ratio));
        }
        if !(0.0..1.0).contains(&self.unknown_class_ratio) {
            return bad(format!("unknown_class_ratio {} not in [0, 1)", self.unknown_class_ratio));
        }
        if !(self.cluster_multiplier >= 1.0 && self.cluster_multiplier.is_finite()) {
            return bad(format!("cluster_multiplier {} must be >= 1", self.cluster_multiplier));
        }
        if matches!(self.cluster_count, Some(k) if k < 2) {
            return bad("cluster_count must be at least 2".into());
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return bad(format!("gamma {g} not in (0, 1]"));
            }
        }
        if self.num_runs == 0 {
            return bad("num_runs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2", self.batch_size));
        }
        if self.eta.is_nan() || self.eta <= 0.0 {
            return bad(format!("eta {} must be positive", self.eta));
        }
        if !(self.delta_label > 0.0 && self.delta_label < 1.0) {
            return bad(format!("delta_label {} not in (0, 1)", self.delta_label));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        for (name, lr) in [("pairwise", Some(self.pairwise_learning_rate)), ("refine", self.refine_learning_rate)] {
            if let Some(lr) = lr {
                if !(lr >= 0.0 && lr.is_finite()) {
                    return bad(format!("{name} learning rate {lr} must be >= 0"));
                }
            }
        }
        Ok(())
    }

    pub fn resolved_cluster_count(&self, true_classes: usize) -> usize {
        self.cluster_count
            .unwrap_or_else(|| (true_classes as f64 * self.cluster_multiplier).round() as usize)
            .max(2)
    }

    fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub nmi: Stat,
    pub ari: Stat,
    pub acc: Stat,
}

impl Aggregate {
    pub fn of(reports: &[&MetricsReport]) -> Self {
        let collect = |f: fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).collect::<Vec<_>>();
        Self {
            runs: reports.len(),
            nmi: Stat::of(&collect(|r| r.nmi)),
            ari: Stat::of(&collect(|r| r.ari)),
            acc: Stat::of(&collect(|r| r.acc)),
        }
    }
}

/// Everything one seeded repetition produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_index: usize,
    pub seed: u64,
    pub samples: usize,
    pub known_classes: Vec<String>,
    pub labeled_samples: usize,
    pub labeled_shortfall: usize,
    pub test: MetricsReport,
    pub test_occupied_clusters: usize,
    /// Validation rows of known classes only.
    pub validation_known: Option<MetricsReport>,
    pub train: MetricsReport,
    pub pairwise_log: Vec<PairwiseEpoch>,
    pub refine_log: Vec<RefineEpoch>,
    /// `(sample id, cluster)` for every test row.
    #[serde(skip)]
    pub test_predictions: Vec<(String, usize)>,
    #[serde(skip)]
    pub checkpoint: Option<Checkpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub variant: Variant,
    pub plan: MethodPlan,
    pub inference: String,
    pub true_classes: usize,
    pub class_names: Vec<String>,
    pub cluster_count: usize,
    pub config: RunConfig,
    pub aggregate: Aggregate,
    pub runs: Vec<RunReport>,
}

impl ClusteringReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Runs `config.variant` `config.num_runs` times with seeds `seed + run`.
pub fn run_variant(config: &RunConfig, ds: &EmbeddedDataset) -> Result<ClusteringReport> {
    config.validate()?;
    run_plan(config, config.variant.plan(), ds)
}

/// Like [`run_variant`] but executes an explicit stage plan; the report still
/// names `config.variant`.
pub fn run_plan(config: &RunConfig, plan: MethodPlan, ds: &EmbeddedDataset) -> Result<ClusteringReport> {
    if !ds.has_labels() {
        return Err(Error::Unlabeled);
    }
    let class_names = ds.classes();
    let k = config.resolved_cluster_count(class_names.len());
    let runs = (0..config.num_runs).collect::<Vec<_>>();
    let execute = || {
        runs.par_iter()
            .map(|&r| run_once(config, plan, ds, r, k))
            .collect::<Result<Vec<_>>>()
    };
    let runs = if config.jobs > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(execute)?
    } else {
        runs.iter().map(|&r| run_once(config, plan, ds, r, k)).collect::<Result<Vec<_>>>()?
    };
    let aggregate = Aggregate::of(&runs.iter().map(|r| &r.test).collect::<Vec<_>>());
    Ok(ClusteringReport {
        variant: config.variant,
        plan,
        inference: config.variant.inference_note().to_string(),
        true_classes: class_names.len(),
        class_names,
        cluster_count: k,
        config: config.clone(),
        aggregate,
        runs,
    })
}

fn run_once(config: &RunConfig, plan: MethodPlan, full: &EmbeddedDataset, run: usize, k: usize) -> Result<RunReport> {
    let seed = config.run_seed(run);
    let subsampled;
    let ds = match config.gamma {
        Some(g) if g < 1.0 => {
            subsampled = subsample_imbalanced(full, g, derive_seed(seed, SEED_SUBSAMPLE))?;
            &subsampled
        }
        _ => full,
    };
    let classes = class_indices_against(full, ds)?;

    let mut mask = make_experiment_mask(ds, config.unknown_class_ratio, config.labeled_ratio, derive_seed(seed, SEED_MASK))?;
    if !plan.constrained {
        mask = ExperimentMask { labeled_rows: Vec::new(), shortfall: 0, ..mask };
    }

    let train_rows = ds.split_indices(Split::Train);
    if train_rows.len() < k {
        return Err(Error::Config(format!("{} training samples for {k} clusters", train_rows.len())));
    }

    let fitted = fit(config, plan, ds, &mask, &train_rows, k, seed)?;
    let centroids = &fitted.centroids;
    let represent = |rows: &[usize]| -> Result<Array2<f64>> {
        match &fitted.params {
            Some(params) => clusternet::represent(params, ds.rows(rows).view()),
            None => Ok(ds.rows(rows)),
        }
    };

    let predict = |rows: &[usize]| -> Result<Vec<usize>> { refine::infer(&represent(rows)?, centroids) };
    let score = |rows: &[usize]| -> Result<MetricsReport> {
        let truth: Vec<usize> = rows.iter().map(|&r| classes[r]).collect();
        evaluate(&truth, &predict(rows)?, Some(k))
    };

    let test_rows = ds.split_indices(Split::Test);
    if test_rows.is_empty() {
        return Err(Error::InvalidDataset("no test rows to evaluate".into()));
    }
    let test_pred = predict(&test_rows)?;
    let truth: Vec<usize> = test_rows.iter().map(|&r| classes[r]).collect();
    let test = evaluate(&truth, &test_pred, Some(k))?;

    let labels = ds.labels().expect("labeled");
    let val_rows: Vec<usize> = ds
        .split_indices(Split::Validation)
        .into_iter()
        .filter(|&r| mask.is_known(&labels[r]))
        .collect();
    let validation_known = if val_rows.is_empty() { None } else { Some(score(&val_rows)?) };

    Ok(RunReport {
        run_index: run,
        seed,
        samples: ds.len(),
        known_classes: mask.known_classes.iter().cloned().collect(),
        labeled_samples: mask.labeled_rows.len(),
        labeled_shortfall: mask.shortfall,
        test_occupied_clusters: refine::occupied_clusters(&test_pred),
        test,
        validation_known,
        train: score(&train_rows)?,
        checkpoint: fitted.checkpoint(),
        pairwise_log: fitted.pairwise_log,
        refine_log: fitted.refine_log,
        test_predictions: test_rows.iter().zip(&test_pred).map(|(&r, &c)| (ds.ids()[r].clone(), c)).collect(),
    })
}

/// Trained clustering layer (absent for raw k-means) and final centroids.
struct Fitted {
    params: Option<ClusterNetParams>,
    centroids: Array2<f64>,
    lambda: f64,
    pairwise_log: Vec<PairwiseEpoch>,
    refine_log: Vec<RefineEpoch>,
}

impl Fitted {
    fn checkpoint(&self) -> Option<Checkpoint> {
        self.params.as_ref().map(|p| Checkpoint {
            w1: p.w1.clone(),
            w2: p.w2.clone(),
            lambda: self.lambda,
            centroids: Some(self.centroids.clone()),
        })
    }
}

fn fit(
    config: &RunConfig,
    plan: MethodPlan,
    ds: &EmbeddedDataset,
    mask: &ExperimentMask,
    train_rows: &[usize],
    k: usize,
    seed: u64,
) -> Result<Fitted> {
    let kmeans = |x: &Array2<f64>| {
        kmeans_restarts(x, k, derive_seed(seed, SEED_KMEANS), config.kmeans_max_iters, config.kmeans_restarts)
    };
    if !plan.train_network {
        return Ok(Fitted {
            params: None,
            centroids: kmeans(&ds.rows(train_rows))?.centroids,
            lambda: 0.0,
            pairwise_log: Vec::new(),
            refine_log: Vec::new(),
        });
    }
    let mut params = init_params(ds.dim(), k, derive_seed(seed, SEED_INIT))?.with_dropout(config.dropout)?;
    let mut opt = Adam::for_params(&params, config.pairwise_learning_rate)?;
    let mut ts = ThresholdState::new(config.eta);
    let pairwise_log = run_pairwise_training(
        ds,
        mask,
        &mut params,
        &mut opt,
        &mut ts,
        &PairwiseConfig {
            batch_size: config.batch_size,
            max_epochs: config.pairwise_max_epochs,
            seed: derive_seed(seed, SEED_PAIRWISE),
        },
    )?;
    let mut centroids = kmeans(&clusternet::represent(&params, ds.rows(train_rows).view())?)?.centroids;
    let mut refine_log = Vec::new();
    if plan.refine {
        let lr = config.refine_learning_rate.unwrap_or(config.pairwise_learning_rate);
        opt.learning_rate = lr;
        let mut state = RefinementState::new(centroids, config.delta_label)?;
        refine_log = run_refinement(
            ds,
            &mut params,
            &mut opt,
            &mut state,
            &RefineConfig {
                batch_size: config.batch_size,
                max_epochs: config.refine_max_epochs,
                learning_rate: lr,
                seed: derive_seed(seed, SEED_REFINE),
            },
        )?;
        centroids = state.centroids;
    }
    Ok(Fitted { params: Some(params), centroids, lambda: ts.lambda, pairwise_log, refine_log })
}

/// Class index of each row of `ds`, numbered by the class order of `full` so
/// that subsampling cannot renumber classes.
fn class_indices_against(full: &EmbeddedDataset, ds: &EmbeddedDataset) -> Result<Vec<usize>> {
    let classes = full.classes();
    let labels = ds.labels().ok_or(Error::Unlabeled)?;
    Ok(labels.iter().map(|l| classes.binary_search(l).expect("subset of full")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ClusterMultiplier,
    LabeledRatio,
    UnknownClassRatio,
    Gamma,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::ClusterMultiplier => "cluster_multiplier",
            SweepAxis::LabeledRatio => "labeled_ratio",
            SweepAxis::UnknownClassRatio => "unknown_class_ratio",
            SweepAxis::Gamma => "gamma",
        }
    }

    fn check(self, value: f64) -> Result<()> {
        let ok = match self {
            SweepAxis::ClusterMultiplier => (1.0..=4.0).contains(&value),
            SweepAxis::LabeledRatio => value > 0.0 && value <= 1.0,
            SweepAxis::UnknownClassRatio => (0.0..1.0).contains(&value),
            SweepAxis::Gamma => value > 0.0 && value <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{value} is outside the {} domain", self.as_str())))
        }
    }

    fn apply(self, base: &RunConfig, value: f64) -> RunConfig {
        let mut c = base.clone();
        match self {
            SweepAxis::ClusterMultiplier => {
                c.cluster_multiplier = value;
                c.cluster_count = None;
            }
            SweepAxis::LabeledRatio => c.labeled_ratio = value,
            SweepAxis::UnknownClassRatio => c.unknown_class_ratio = value,
            SweepAxis::Gamma => c.gamma = Some(value),
        }
        c
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cluster_multiplier" | "clusters-multiplier" | "cluster-multiplier" => Ok(SweepAxis::ClusterMultiplier),
            "labeled_ratio" | "labeled-ratio" => Ok(SweepAxis::LabeledRatio),
            "unknown_class_ratio" | "unknown-class-ratio" | "unknown_ratio" => Ok(SweepAxis::UnknownClassRatio),
            "gamma" => Ok(SweepAxis::Gamma),
            other => Err(format!(
                "unknown sweep axis {other:?}; expected cluster_multiplier, labeled_ratio, unknown_class_ratio or gamma"
            )),
        }
    }
}

/// One report per value with everything else held fixed. Seeds are shared
/// across values, so masks and initializations are paired.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[f64], ds: &EmbeddedDataset) -> Result<Vec<ClusteringReport>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    for &v in values {
        axis.check(v)?;
    }
    values.iter().map(|&v| run_variant(&axis.apply(base, v), ds)).collect()
}

/// `value,mean,std` for one metric across a sweep.
pub fn write_plot_csv(
    values: &[f64],
    reports: &[ClusteringReport],
    metric: fn(&Aggregate) -> Stat,
    mut out: impl Write,
) -> std::io::Result<()> {
    writeln!(out, "value,mean,std")?;
    for (v, r) in values.iter().zip(reports) {
        let s = metric(&r.aggregate);
        writeln!(out, "{v},{},{}", s.mean, s.std)?;
    }
    Ok(())
}
