//! Embedded datasets, experiment masks, imbalance subsampling, batching, and
//! the synthetic blob generator.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::seeded_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Split> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Validation),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(other.to_string()),
        }
    }
}

/// A validated set of embedding vectors with optional class labels and a
/// train/validation/test tag per row.
///
/// Embeddings are held in 64-bit floats; file formats store 32-bit values.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedDataset {
    ids: Vec<String>,
    embeddings: Array2<f64>,
    labels: Option<Vec<String>>,
    splits: Vec<Split>,
}

impl EmbeddedDataset {
    pub fn new(
        ids: Vec<String>,
        embeddings: Array2<f64>,
        labels: Option<Vec<String>>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let rows = embeddings.nrows();
        if rows == 0 {
            return Err(Error::InvalidDataset("no rows".into()));
        }
        if embeddings.ncols() == 0 {
            return Err(Error::InvalidDataset("embedding dimension is zero".into()));
        }
        if ids.len() != rows {
            return Err(Error::InvalidDataset(format!(
                "{} ids for {rows} embedding rows",
                ids.len()
            )));
        }
        if splits.len() != rows {
            return Err(Error::InvalidDataset(format!(
                "{} split tags for {rows} embedding rows",
                splits.len()
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != rows {
                return Err(Error::InvalidDataset(format!(
                    "{} labels for {rows} embedding rows",
                    labels.len()
                )));
            }
        }
        if let Some((row, _)) = embeddings
            .outer_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidDataset(format!("row {row} has a non-finite value")));
        }
        let mut seen = HashSet::with_capacity(rows);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidDataset(format!("duplicate id {dup:?}")));
        }
        Ok(Self { ids, embeddings, labels, splits })
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Distinct class identifiers in sorted order.
    pub fn classes(&self) -> Vec<String> {
        match &self.labels {
            Some(labels) => labels
                .iter()
                .cloned()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            None => Vec::new(),
        }
    }

    /// Per-row class index, following the sorted order of [`Self::classes`].
    pub fn class_indices(&self) -> Result<Vec<usize>> {
        let labels = self.labels.as_ref().ok_or(Error::Unlabeled)?;
        let lookup: BTreeMap<&str, usize> = self
            .classes_ref()
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, i))
            .collect();
        Ok(labels.iter().map(|l| lookup[l.as_str()]).collect())
    }

    fn classes_ref(&self) -> Vec<&str> {
        self.labels
            .iter()
            .flatten()
            .map(String::as_str)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Row indices tagged with `split`, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Embedding rows for `rows`, in the given order.
    pub fn rows(&self, rows: &[usize]) -> Array2<f64> {
        self.embeddings.select(Axis(0), rows)
    }

    /// A new dataset holding only `rows`, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            rows.iter().map(|&r| self.ids[r].clone()).collect(),
            self.rows(rows),
            self.labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r].clone()).collect()),
            rows.iter().map(|&r| self.splits[r]).collect(),
        )
    }
}

/// Which classes are known during training and which training rows carry
/// their label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMask {
    pub known_classes: BTreeSet<String>,
    /// Row indices of labeled training samples, ascending.
    pub labeled_rows: Vec<usize>,
    pub seed: u64,
    pub labeled_ratio: f64,
    pub unknown_class_ratio: f64,
    /// How many labeled samples were requested but unavailable because the
    /// known-class pool was too small.
    pub shortfall: usize,
}

impl ExperimentMask {
    /// A mask with every class known and nothing labeled.
    pub fn unlabeled(ds: &EmbeddedDataset, seed: u64) -> Self {
        Self {
            known_classes: ds.classes().into_iter().collect(),
            labeled_rows: Vec::new(),
            seed,
            labeled_ratio: 0.0,
            unknown_class_ratio: 0.0,
            shortfall: 0,
        }
    }

    pub fn labeled_sample_ids<'a>(&self, ds: &'a EmbeddedDataset) -> BTreeSet<&'a str> {
        self.labeled_rows.iter().map(|&r| ds.ids()[r].as_str()).collect()
    }

    pub fn is_known(&self, class: &str) -> bool {
        self.known_classes.contains(class)
    }
}

/// Number of known classes for `total` classes when `unknown_ratio` of them
/// are hidden. Rounds half away from zero and never drops below one.
pub fn known_class_count(total: usize, unknown_ratio: f64) -> usize {
    ((total as f64 * (1.0 - unknown_ratio)).round() as usize).max(1)
}

pub fn make_experiment_mask(
    ds: &EmbeddedDataset,
    unknown_class_ratio: f64,
    labeled_ratio: f64,
    seed: u64,
) -> Result<ExperimentMask> {
    let labels = ds.labels().ok_or(Error::Unlabeled)?;
    if !(0.0..1.0).contains(&unknown_class_ratio) {
        return Err(Error::param("unknown_class_ratio", format!("{unknown_class_ratio} not in [0, 1)")));
    }
    if !(0.0..=1.0).contains(&labeled_ratio) {
        return Err(Error::param("labeled_ratio", format!("{labeled_ratio} not in [0, 1]")));
    }
    let mut rng = seeded_rng(seed);

    let mut classes = ds.classes();
    let n_known = known_class_count(classes.len(), unknown_class_ratio);
    classes.shuffle(&mut rng);
    let known_classes: BTreeSet<String> = classes.into_iter().take(n_known).collect();

    let train = ds.split_indices(Split::Train);
    let pool: Vec<usize> = train
        .iter()
        .copied()
        .filter(|&r| known_classes.contains(&labels[r]))
        .collect();
    let requested = (labeled_ratio * train.len() as f64 + 1e-9).floor() as usize;
    let take = requested.min(pool.len());
    let mut labeled_rows: Vec<usize> = index::sample(&mut rng, pool.len(), take)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    labeled_rows.sort_unstable();

    Ok(ExperimentMask {
        known_classes,
        labeled_rows,
        seed,
        labeled_ratio,
        unknown_class_ratio,
        shortfall: requested - take,
    })
}

/// Keep-probability for the class at zero-based sorted position `class_pos`
/// out of `num_classes`.
pub fn retention_probability(gamma: f64, class_pos: usize, num_classes: usize) -> f64 {
    if num_classes <= 1 {
        return 1.0;
    }
    gamma + (1.0 - gamma) * class_pos as f64 / (num_classes - 1) as f64
}

/// Class-imbalanced subsample: the first class (in sorted identifier order)
/// keeps each sample with probability `gamma`, the last keeps everything, and
/// the classes in between interpolate linearly.
pub fn subsample_imbalanced(ds: &EmbeddedDataset, gamma: f64, seed: u64) -> Result<EmbeddedDataset> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::param("gamma", format!("{gamma} not in (0, 1]")));
    }
    let class_idx = ds.class_indices()?;
    let n_classes = ds.classes().len();
    let mut rng = seeded_rng(seed);
    let keep: Vec<usize> = class_idx
        .iter()
        .enumerate()
        .filter_map(|(row, &c)| {
            let draw: f64 = rng.random();
            (draw < retention_probability(gamma, c, n_classes)).then_some(row)
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::InvalidDataset("imbalanced subsample kept no rows".into()));
    }
    ds.subset(&keep)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

/// Shuffles `indices` with `seed` and cuts them into batches of at most
/// `batch_size`; the last batch takes the remainder.
pub fn batches_from(indices: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::param("batch_size", format!("{batch_size} < 2")));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut seeded_rng(seed));
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch { indices: c.to_vec() })
        .collect())
}

pub fn iter_batches(
    ds: &EmbeddedDataset,
    split: Split,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    batches_from(&ds.split_indices(split), batch_size, shuffle_seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub centroid_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            num_classes: 8,
            per_class: 200,
            dim: 16,
            centroid_scale: 10.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

/// Train/validation/test counts for one class of `n` samples (80/10/10,
/// every split non-empty once `n >= 3`).
fn stratified_counts(n: usize) -> (usize, usize, usize) {
    let mut val = (n as f64 * 0.1).round() as usize;
    let mut test = (n as f64 * 0.1).round() as usize;
    if n >= 3 {
        val = val.max(1);
        test = test.max(1);
    }
    let val = val.min(n);
    let test = test.min(n - val);
    (n - val - test, val, test)
}

/// Gaussian blobs around uniformly drawn class centroids. Values are rounded
/// to 32-bit precision so the dataset survives a file round trip unchanged.
pub fn generate_synthetic_blobs(params: &BlobParams) -> Result<EmbeddedDataset> {
    let BlobParams { num_classes, per_class, dim, centroid_scale, noise_sigma, seed } = *params;
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::param("num_classes/per_class/dim", "must be positive"));
    }
    if !(centroid_scale > 0.0 && centroid_scale.is_finite()) {
        return Err(Error::param("centroid_scale", format!("{centroid_scale} must be positive")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::param("noise_sigma", format!("{noise_sigma} must be non-negative")));
    }
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::param("noise_sigma", e.to_string()))?;

    let centroids = Array2::from_shape_fn((num_classes, dim), |_| {
        rng.random_range(-centroid_scale..=centroid_scale)
    });

    let total = num_classes * per_class;
    let label_width = digits(num_classes.saturating_sub(1)).max(2);
    let id_width = digits(total.saturating_sub(1)).max(5);
    let (n_train, n_val, _) = stratified_counts(per_class);

    let mut embeddings = Array2::zeros((total, dim));
    let mut ids = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    for c in 0..num_classes {
        for s in 0..per_class {
            let row = c * per_class + s;
            for d in 0..dim {
                let v = centroids[(c, d)] + noise.sample(&mut rng);
                embeddings[(row, d)] = v as f32 as f64;
            }
            ids.push(format!("s{row:0id_width$}"));
            labels.push(format!("class_{c:0label_width$}"));
            splits.push(if s < n_train {
                Split::Train
            } else if s < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            });
        }
    }
    EmbeddedDataset::new(ids, embeddings, Some(labels), splits)
}

fn digits(mut n: usize) -> usize {
    let mut d = 1;
    while n >= 10 {
        n /= 10;
        d += 1;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn labeled(classes: usize, per_class: usize) -> EmbeddedDataset {
        generate_synthetic_blobs(&BlobParams {
            num_classes: classes,
            per_class,
            dim: 2,
            centroid_scale: 1.0,
            noise_sigma: 0.1,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn known_counts_follow_benchmark_splits() {
        assert_eq!(known_class_count(20, 0.25), 15);
        assert_eq!(known_class_count(7, 0.25), 5);
        assert_eq!(known_class_count(14, 0.25), 11);
        assert_eq!(known_class_count(3, 0.9), 1);
    }

    #[test]
    fn mask_on_twenty_classes() {
        let ds = labeled(20, 10);
        let mask = make_experiment_mask(&ds, 0.25, 0.1, 1).unwrap();
        assert_eq!(mask.known_classes.len(), 15);
        let train = ds.split_indices(Split::Train).len();
        assert_eq!(mask.labeled_rows.len(), train / 10);
        let labels = ds.labels().unwrap();
        for &r in &mask.labeled_rows {
            assert_eq!(ds.splits()[r], Split::Train);
            assert!(mask.is_known(&labels[r]));
        }
    }

    #[test]
    fn mask_with_no_unknown_classes_spans_all() {
        let ds = labeled(4, 50);
        let mask = make_experiment_mask(&ds, 0.0, 1.0, 9).unwrap();
        assert_eq!(mask.known_classes.len(), 4);
        assert_eq!(mask.labeled_rows, ds.split_indices(Split::Train));
        assert_eq!(mask.shortfall, 0);
    }

    #[test]
    fn mask_shortfall_when_pool_small() {
        let ds = labeled(4, 50);
        // 3 known classes hold 120 of 160 training rows
        let mask = make_experiment_mask(&ds, 0.25, 1.0, 2).unwrap();
        assert_eq!(mask.labeled_rows.len(), 120);
        assert_eq!(mask.shortfall, 40);
    }

    #[test]
    fn mask_rejects_bad_input() {
        let ds = labeled(4, 10);
        assert!(make_experiment_mask(&ds, 1.0, 0.1, 0).is_err());
        assert!(make_experiment_mask(&ds, 0.25, 1.5, 0).is_err());
        let unl = EmbeddedDataset::new(
            vec!["a".into(), "b".into()],
            array![[1.0], [2.0]],
            None,
            vec![Split::Train; 2],
        )
        .unwrap();
        assert!(matches!(make_experiment_mask(&unl, 0.25, 0.1, 0), Err(Error::Unlabeled)));
    }

    #[test]
    fn retention_endpoints() {
        assert_eq!(retention_probability(0.5, 0, 2), 0.5);
        assert_eq!(retention_probability(0.5, 1, 2), 1.0);
        assert_eq!(retention_probability(0.3, 0, 1), 1.0);
    }

    #[test]
    fn subsample_gamma_one_is_identity() {
        let ds = labeled(5, 20);
        assert_eq!(subsample_imbalanced(&ds, 1.0, 4).unwrap(), ds);
        assert!(subsample_imbalanced(&ds, 0.0, 4).is_err());
        assert!(subsample_imbalanced(&ds, 1.2, 4).is_err());
    }

    #[test]
    fn subsample_class_one_is_binomial() {
        let ds = labeled(20, 1000);
        let sub = subsample_imbalanced(&ds, 0.3, 11).unwrap();
        let first = ds.classes()[0].clone();
        let kept = sub.labels().unwrap().iter().filter(|l| **l == first).count() as f64;
        let sigma = (1000.0f64 * 0.3 * 0.7).sqrt();
        assert!((kept - 300.0).abs() < 3.0 * sigma, "kept {kept}");
        let last = ds.classes()[19].clone();
        let kept_last = sub.labels().unwrap().iter().filter(|l| **l == last).count();
        assert_eq!(kept_last, 1000);
    }

    #[test]
    fn batches_partition_700() {
        let idx: Vec<usize> = (0..700).collect();
        let b = batches_from(&idx, 256, 5).unwrap();
        let sizes: Vec<usize> = b.iter().map(Batch::size).collect();
        assert_eq!(sizes, vec![256, 256, 188]);
        assert_eq!(b, batches_from(&idx, 256, 5).unwrap());
        let other = batches_from(&idx, 256, 6).unwrap();
        assert_ne!(b, other);
        let mut a: Vec<usize> = b.iter().flat_map(|x| x.indices.clone()).collect();
        let mut c: Vec<usize> = other.iter().flat_map(|x| x.indices.clone()).collect();
        a.sort_unstable();
        c.sort_unstable();
        assert_eq!(a, c);
        assert!(batches_from(&idx, 1, 5).is_err());
    }

    #[test]
    fn blob_shapes_and_splits() {
        let ds = generate_synthetic_blobs(&BlobParams::default()).unwrap();
        assert_eq!(ds.len(), 1600);
        assert_eq!(ds.dim(), 16);
        assert_eq!(ds.split_indices(Split::Train).len(), 1280);
        assert_eq!(ds.split_indices(Split::Validation).len(), 160);
        assert_eq!(ds.split_indices(Split::Test).len(), 160);
        assert_eq!(ds.classes().len(), 8);
    }

    #[test]
    fn zero_noise_blobs_collapse_to_centroids() {
        let ds = generate_synthetic_blobs(&BlobParams {
            noise_sigma: 0.0,
            per_class: 5,
            ..BlobParams::default()
        })
        .unwrap();
        let idx = ds.class_indices().unwrap();
        for r in 1..ds.len() {
            if idx[r] == idx[r - 1] {
                assert_eq!(ds.embeddings().row(r), ds.embeddings().row(r - 1));
            }
        }
    }

    #[test]
    fn dataset_rejects_invalid_rows() {
        let bad = EmbeddedDataset::new(
            vec!["a".into()],
            array![[f64::NAN, 1.0]],
            None,
            vec![Split::Train],
        );
        assert!(bad.is_err());
        let dup = EmbeddedDataset::new(
            vec!["a".into(), "a".into()],
            array![[0.0], [1.0]],
            None,
            vec![Split::Train; 2],
        );
        assert!(dup.is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn retention_is_monotone(gamma in 0.01f64..=1.0, n in 2usize..40) {
            for c in 1..n {
                prop_assert!(retention_probability(gamma, c, n) >= retention_probability(gamma, c - 1, n));
            }
        }

        #[test]
        fn unknown_classes_never_labeled(seed in 0u64..1000, ratio in 0.0f64..0.9) {
            let ds = labeled(6, 12);
            let mask = make_experiment_mask(&ds, ratio, 0.5, seed).unwrap();
            let labels = ds.labels().unwrap();
            prop_assert!(mask.labeled_rows.iter().all(|&r| mask.is_known(&labels[r])));
            prop_assert_eq!(&mask, &make_experiment_mask(&ds, ratio, 0.5, seed).unwrap());
        }

        #[test]
        fn epoch_is_permutation(n in 2usize..300, bs in 2usize..64, seed in 0u64..100) {
            let idx: Vec<usize> = (0..n).collect();
            let mut all: Vec<usize> = batches_from(&idx, bs, seed).unwrap()
                .into_iter().flat_map(|b| b.indices).collect();
            all.sort_unstable();
            prop_assert_eq!(all, idx);
        }
    }
}
