//! Clustering evaluation: normalized mutual information, adjusted Rand
//! index, and Hungarian-aligned accuracy.
//!
//! NMI is normalized by the arithmetic mean of the two entropies (natural
//! log). Other normalizations (min, max, geometric) give different numbers.

use std::collections::BTreeSet;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Counts of samples per (true class, predicted cluster) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    /// Row labels, ascending.
    pub classes: Vec<usize>,
    /// Column labels, ascending.
    pub clusters: Vec<usize>,
    /// `classes.len() × clusters.len()`, row-major.
    pub counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn new(truth: &[usize], predicted: &[usize]) -> Result<Self> {
        Self::build(truth, predicted, None)
    }

    /// Like [`Self::new`] but with a column for every cluster in `0..k`,
    /// occupied or not.
    pub fn with_cluster_count(truth: &[usize], predicted: &[usize], k: usize) -> Result<Self> {
        Self::build(truth, predicted, Some(k))
    }

    fn build(truth: &[usize], predicted: &[usize], k: Option<usize>) -> Result<Self> {
        check_lengths(truth, predicted)?;
        let classes: Vec<usize> = truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut cluster_set: BTreeSet<usize> = predicted.iter().copied().collect();
        if let Some(k) = k {
            cluster_set.extend(0..k);
        }
        let clusters: Vec<usize> = cluster_set.into_iter().collect();
        let mut counts = vec![vec![0u64; clusters.len()]; classes.len()];
        for (t, p) in truth.iter().zip(predicted) {
            let r = classes.binary_search(t).unwrap();
            let c = clusters.binary_search(p).unwrap();
            counts[r][c] += 1;
        }
        Ok(Self { classes, clusters, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        (0..self.clusters.len())
            .map(|c| self.counts.iter().map(|r| r[c]).sum())
            .collect()
    }

    /// CSV with a header row of clusters and a leading column of classes.
    /// Names, when given, are indexed by class and cluster id. Clusters with
    /// no samples are dropped unless `include_empty`.
    pub fn write_csv(
        &self,
        class_names: Option<&[String]>,
        cluster_names: Option<&[String]>,
        include_empty: bool,
        mut out: impl Write,
    ) -> std::io::Result<()> {
        let col_sums = self.col_sums();
        let keep: Vec<usize> = (0..self.clusters.len())
            .filter(|&c| include_empty || col_sums[c] > 0)
            .collect();
        write!(out, "class")?;
        for &c in &keep {
            match cluster_names {
                Some(names) => write!(out, ",{}", names[self.clusters[c]])?,
                None => write!(out, ",{}", self.clusters[c])?,
            }
        }
        writeln!(out)?;
        for (r, row) in self.counts.iter().enumerate() {
            match class_names {
                Some(names) => write!(out, "{}", names[self.classes[r]])?,
                None => write!(out, "{}", self.classes[r])?,
            }
            for &c in &keep {
                write!(out, ",{}", row[c])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn check_lengths(truth: &[usize], predicted: &[usize]) -> Result<()> {
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch { left: truth.len(), right: predicted.len() });
    }
    if truth.is_empty() {
        return Err(Error::param("labels", "at least one sample required"));
    }
    Ok(())
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information over the arithmetic mean of the entropies. Two
/// single-cluster partitions score 1; exactly one single-cluster partition
/// scores 0.
pub fn nmi(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(truth, predicted)?;
    let (rows, cols) = (table.classes.len(), table.clusters.len());
    if rows == 1 && cols == 1 {
        return Ok(1.0);
    }
    if rows == 1 || cols == 1 {
        return Ok(0.0);
    }
    let n = table.total() as f64;
    let a = table.row_sums();
    let b = table.col_sums();
    let mut mi = 0.0;
    for (r, row) in table.counts.iter().enumerate() {
        for (c, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (a[r] as f64 * b[c] as f64)).ln();
            }
        }
    }
    let denom = 0.5 * (entropy(&a, n) + entropy(&b, n));
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Pair-counting adjusted Rand index.
pub fn ari(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    check_lengths(truth, predicted)?;
    if truth.len() < 2 {
        return Err(Error::param("labels", "at least two samples required"));
    }
    let table = ContingencyTable::new(truth, predicted)?;
    let index: f64 = table.counts.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_a: f64 = table.row_sums().into_iter().map(comb2).sum();
    let sum_b: f64 = table.col_sums().into_iter().map(comb2).sum();
    let expected = sum_a * sum_b / comb2(table.total());
    let max_index = 0.5 * (sum_a + sum_b);
    if max_index == expected {
        // both partitions are all-singletons or both single-cluster
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `row_to_col[r]` is the column matched to row `r`, or `None` when the
    /// row was matched to padding.
    pub row_to_col: Vec<Option<usize>>,
    pub total_cost: f64,
}

/// Minimum-cost one-to-one assignment (Kuhn–Munkres with potentials,
/// `O(n³)`). Rectangular inputs are padded to square with zero cost.
pub fn hungarian(cost: &Array2<f64>) -> Result<Assignment> {
    let (rows, cols) = cost.dim();
    if let Some(((row, col), _)) = cost.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteCost { row, col });
    }
    let n = rows.max(cols);
    if n == 0 {
        return Ok(Assignment { row_to_col: Vec::new(), total_cost: 0.0 });
    }
    let at = |i: usize, j: usize| if i < rows && j < cols { cost[(i, j)] } else { 0.0 };

    // 1-based arrays; index 0 is the virtual start column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![None; rows];
    let mut total_cost = 0.0;
    for j in 1..=n {
        let i = col_owner[j];
        if i >= 1 && i <= rows && j <= cols {
            row_to_col[i - 1] = Some(j - 1);
            total_cost += cost[(i - 1, j - 1)];
        }
    }
    Ok(Assignment { row_to_col, total_cost })
}

/// Accuracy under the best one-to-one cluster→class alignment. Clusters
/// beyond the number of classes stay unmatched and count as errors.
///
/// Returns the accuracy and the `(cluster, class)` pairs of the alignment.
pub fn acc(truth: &[usize], predicted: &[usize]) -> Result<(f64, Vec<(usize, usize)>)> {
    let table = ContingencyTable::new(truth, predicted)?;
    let (n_classes, n_clusters) = (table.classes.len(), table.clusters.len());
    let cost = Array2::from_shape_fn((n_clusters, n_classes), |(c, r)| -(table.counts[r][c] as f64));
    let assignment = hungarian(&cost)?;
    let mut alignment = Vec::new();
    let mut correct = 0u64;
    for (c, matched) in assignment.row_to_col.iter().enumerate() {
        if let Some(r) = *matched {
            alignment.push((table.clusters[c], table.classes[r]));
            correct += table.counts[r][c];
        }
    }
    Ok((correct as f64 / table.total() as f64, alignment))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmi: f64,
    pub ari: f64,
    pub acc: f64,
    /// `(cluster, class)` pairs chosen by the Hungarian alignment.
    pub alignment: Vec<(usize, usize)>,
    pub confusion: ContingencyTable,
}

/// All three metrics plus the confusion table. When `cluster_count` is given
/// the table has a column for every cluster, including empty ones.
pub fn evaluate(truth: &[usize], predicted: &[usize], cluster_count: Option<usize>) -> Result<MetricsReport> {
    let (acc, alignment) = acc(truth, predicted)?;
    let ari = if truth.len() >= 2 { ari(truth, predicted)? } else { 1.0 };
    let confusion = match cluster_count {
        Some(k) => ContingencyTable::with_cluster_count(truth, predicted, k)?,
        None => ContingencyTable::new(truth, predicted)?,
    };
    Ok(MetricsReport { nmi: nmi(truth, predicted)?, ari, acc, alignment, confusion })
}
