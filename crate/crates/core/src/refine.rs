//! Cluster refinement: k-means initialization, Student-t soft assignments,
//! the sharpened target distribution, the KL divergence loss with gradients
//! back to representations and centroids, and hard-assignment inference.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clusternet::{self, Adam, ClusterNetParams, Mode};
use crate::dataset::{batches_from, EmbeddedDataset, Split};
use crate::rng::{derive_seed, seeded_rng};
use crate::{Error, Phase, Result};

/// Cluster frequencies are floored here so a dead cluster cannot divide by zero.
pub const MIN_FREQUENCY: f64 = 1e-12;

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.outer_iter().map(argmax).collect()
}

pub fn occupied_clusters(assignments: &[usize]) -> usize {
    let mut seen: Vec<usize> = assignments.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

fn nearest(x: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.outer_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_seeds(x: &Array2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let m = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    centroids.row_mut(0).assign(&x.row(rng.random_range(0..m)));
    let mut d2: Vec<f64> = x.outer_iter().map(|r| sq_dist(r, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = m - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, r) in x.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centroids.row(c)));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until the assignment
/// stops changing or `max_iters` updates have run. A cluster that empties
/// is re-seeded with the point farthest from its current centroid.
pub fn kmeans(x: &Array2<f64>, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    let m = x.nrows();
    if k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    if m < k {
        return Err(Error::param("k", format!("{k} clusters for {m} points")));
    }
    let mut rng = seeded_rng(seed);
    let mut centroids = plus_plus_seeds(x, k, &mut rng);
    let mut assign: Vec<usize> = x.outer_iter().map(|r| nearest(r, &centroids).0).collect();
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        reseed_empty(x, &mut centroids, &mut assign);
        centroids = cluster_means(x, &assign, k);
        let next: Vec<usize> = x.outer_iter().map(|r| nearest(r, &centroids).0).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    let inertia = x
        .outer_iter()
        .zip(&assign)
        .map(|(r, &c)| sq_dist(r, centroids.row(c)))
        .sum();
    Ok(KMeans { centroids, assignments: assign, inertia, iterations })
}

fn reseed_empty(x: &Array2<f64>, centroids: &mut Array2<f64>, assign: &mut [usize]) {
    let k = centroids.nrows();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assign.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let far = (0..x.nrows())
            .filter(|&i| sizes[assign[i]] > 1)
            .map(|i| (i, sq_dist(x.row(i), centroids.row(assign[i]))))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        let Some((point, _)) = far else {
            return;
        };
        centroids.row_mut(empty).assign(&x.row(point));
        assign[point] = empty;
    }
}

fn cluster_means(x: &Array2<f64>, assign: &[usize], k: usize) -> Array2<f64> {
    let mut sums = Array2::zeros((k, x.ncols()));
    let mut counts = vec![0usize; k];
    for (r, &c) in x.outer_iter().zip(assign) {
        let mut row = sums.row_mut(c);
        row += &r;
        counts[c] += 1;
    }
    for (mut row, &n) in sums.outer_iter_mut().zip(&counts) {
        if n > 0 {
            row /= n as f64;
        }
    }
    sums
}

/// Best of `restarts` k-means runs by inertia (earliest run wins ties).
pub fn kmeans_restarts(x: &Array2<f64>, k: usize, seed: u64, max_iters: usize, restarts: usize) -> Result<KMeans> {
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans(x, k, derive_seed(seed, r as u64), max_iters)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// `m × k` matrix of `(1 + ‖I_i − U_j‖²)^-1`.
fn student_kernel(intents: &Array2<f64>, centroids: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((intents.nrows(), centroids.nrows()), |(i, j)| {
        1.0 / (1.0 + sq_dist(intents.row(i), centroids.row(j)))
    })
}

fn check_centroids(intents: &Array2<f64>, centroids: &Array2<f64>) -> Result<()> {
    if intents.ncols() != centroids.ncols() {
        return Err(Error::Shape(format!(
            "representations have {} columns, centroids {}",
            intents.ncols(),
            centroids.ncols()
        )));
    }
    Ok(())
}

/// Student-t (one degree of freedom) soft assignment, rows normalized.
pub fn soft_assign(intents: &Array2<f64>, centroids: &Array2<f64>) -> Result<Array2<f64>> {
    check_centroids(intents, centroids)?;
    let mut q = student_kernel(intents, centroids);
    for mut row in q.outer_iter_mut() {
        let z = row.sum();
        row /= z;
    }
    Ok(q)
}

/// Chains `dL/dQ` through [`soft_assign`] to the representations and the centroids.
pub fn soft_assign_backward(
    intents: &Array2<f64>,
    centroids: &Array2<f64>,
    d_q: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_centroids(intents, centroids)?;
    let w = student_kernel(intents, centroids);
    let mut d_i = Array2::zeros(intents.raw_dim());
    let mut d_u = Array2::zeros(centroids.raw_dim());
    for i in 0..intents.nrows() {
        let z = w.row(i).sum();
        let q = w.row(i).mapv(|v| v / z);
        let inner = d_q.row(i).dot(&q);
        for j in 0..centroids.nrows() {
            let d_w = (d_q[(i, j)] - inner) / z;
            // d w / d ‖·‖² = -w², d ‖I−U‖² / dI = 2 (I − U)
            let coeff = -2.0 * d_w * w[(i, j)] * w[(i, j)];
            let diff = &intents.row(i) - &centroids.row(j);
            let mut di = d_i.row_mut(i);
            di.scaled_add(coeff, &diff);
            let mut du = d_u.row_mut(j);
            du.scaled_add(-coeff, &diff);
        }
    }
    Ok((d_i, d_u))
}

/// Squares each soft assignment, divides by its cluster's soft frequency
/// `f_j = Σ_i Q_ij`, and renormalizes each row.
pub fn target_distribution(q: &Array2<f64>) -> Array2<f64> {
    let freq: Array1<f64> = q.sum_axis(Axis(0)).mapv(|f| f.max(MIN_FREQUENCY));
    let mut p = q.mapv(|v| v * v) / &freq;
    for mut row in p.outer_iter_mut() {
        let z = row.sum();
        row /= z;
    }
    p
}

/// `Σ_ij P_ij ln(P_ij / Q_ij)` (with `0 · ln 0 = 0`) and `∂/∂Q = −P/Q`.
pub fn kld_loss(p: &Array2<f64>, q: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if p.dim() != q.dim() {
        return Err(Error::Shape(format!("P {:?} vs Q {:?}", p.dim(), q.dim())));
    }
    let loss = p
        .iter()
        .zip(q.iter())
        .map(|(&p, &q)| if p > 0.0 { p * (p / q).ln() } else { 0.0 })
        .sum();
    let grad = ndarray::Zip::from(p).and(q).map_collect(|&p, &q| -p / q);
    Ok((loss, grad))
}

/// Hard assignments: argmax of the soft assignment, lowest index on ties.
pub fn infer(intents: &Array2<f64>, centroids: &Array2<f64>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&soft_assign(intents, centroids)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementState {
    /// `k × k`: one row per cluster in the intent space.
    pub centroids: Array2<f64>,
    pub previous_assignments: Option<Vec<usize>>,
    pub delta_label: f64,
}

impl RefinementState {
    pub fn new(centroids: Array2<f64>, delta_label: f64) -> Result<Self> {
        if !(delta_label > 0.0 && delta_label < 1.0) {
            return Err(Error::param("delta_label", format!("{delta_label} not in (0, 1)")));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("centroids", "non-finite entry"));
        }
        Ok(Self { centroids, previous_assignments: None, delta_label })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { batch_size: 256, max_epochs: 100, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineEpoch {
    pub epoch: usize,
    /// Mean per-sample KL divergence over the epoch's minibatches.
    pub kld_loss: f64,
    pub changed_fraction: f64,
    pub occupied_clusters: usize,
}

fn changed_fraction(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len().max(1) as f64
}

/// Trains the clustering layer and the centroids on the KL divergence to a
/// per-epoch target distribution over the training split. Stops when fewer
/// than `delta_label` of the samples change cluster during an epoch.
///
/// Returns the per-epoch log; the final training-split assignments are left
/// in `state.previous_assignments`.
pub fn run_refinement(
    ds: &EmbeddedDataset,
    params: &mut ClusterNetParams,
    opt: &mut Adam,
    state: &mut RefinementState,
    config: &RefineConfig,
) -> Result<Vec<RefineEpoch>> {
    let rows = ds.split_indices(Split::Train);
    let inputs = ds.rows(&rows);
    let mode = params.mode;
    params.mode = Mode::Eval;
    let mut centroid_opt = Adam::new(config.learning_rate, &[state.centroids.dim()])?;

    let mut intents = clusternet::represent(params, inputs.view())?;
    let mut log = Vec::new();
    for epoch in 0..config.max_epochs {
        let q = soft_assign(&intents, &state.centroids)?;
        let before = argmax_rows(&q);
        let p = target_distribution(&q);

        let mut losses = Vec::new();
        let batches = batches_from(&(0..rows.len()).collect::<Vec<_>>(), config.batch_size, derive_seed(config.seed, epoch as u64))?;
        for batch in &batches {
            let (batch_i, cache) = clusternet::forward(params, inputs.select(Axis(0), &batch.indices).view(), 0)?;
            let batch_q = soft_assign(&batch_i, &state.centroids)?;
            let batch_p = p.select(Axis(0), &batch.indices);
            let (loss, d_q) = kld_loss(&batch_p, &batch_q)?;
            let scale = 1.0 / batch.size() as f64;
            let (d_i, d_u) = soft_assign_backward(&batch_i, &state.centroids, &(d_q * scale))?;
            let grads = clusternet::backward(params, &cache, &d_i)?;
            clusternet::step(params, opt, &grads, Phase::Refinement)?;
            centroid_opt.update(&mut [&mut state.centroids], &[&d_u], Phase::Refinement)?;
            if state.centroids.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteParameters { phase: Phase::Refinement });
            }
            losses.push(loss * scale);
        }

        intents = clusternet::represent(params, inputs.view())?;
        let after = infer(&intents, &state.centroids)?;
        let changed = changed_fraction(&before, &after);
        log.push(RefineEpoch {
            epoch,
            kld_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            changed_fraction: changed,
            occupied_clusters: occupied_clusters(&after),
        });
        state.previous_assignments = Some(after);
        if changed < state.delta_label {
            break;
        }
    }
    params.mode = mode;
    Ok(log)
}

/// CSV with columns `epoch,kld_loss,changed_fraction,occupied_clusters`.
pub fn write_log_csv(log: &[RefineEpoch], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch,kld_loss,changed_fraction,occupied_clusters")?;
    for e in log {
        writeln!(out, "{},{},{},{}", e.epoch, e.kld_loss, e.changed_fraction, e.occupied_clusters)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clusternet::init_params;
    use crate::dataset::{generate_synthetic_blobs, BlobParams};
    use ndarray::array;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn kmeans_exact_fit() {
        let x = array![[0.0, 0.0], [5.0, 1.0], [-3.0, 2.0], [1.0, -7.0]];
        let km = kmeans(&x, 4, 3, 300).unwrap();
        assert_eq!(km.inertia, 0.0);
        assert_eq!(occupied_clusters(&km.assignments), 4);
        for (i, &c) in km.assignments.iter().enumerate() {
            assert_eq!(km.centroids.row(c), x.row(i));
        }
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let x = array![[1.0, 2.0], [3.0, 6.0], [5.0, 1.0]];
        let km = kmeans(&x, 1, 0, 300).unwrap();
        assert!((km.centroids[(0, 0)] - 3.0).abs() < 1e-12);
        assert!((km.centroids[(0, 1)] - 3.0).abs() < 1e-12);
        assert!(kmeans(&x, 4, 0, 300).is_err());
    }

    #[test]
    fn kmeans_recovers_blob_means() {
        let mut rng = seeded_rng(12);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let means = [[-5.0, 0.0], [5.0, 3.0]];
        let x = Array2::from_shape_fn((400, 2), |(i, d)| means[i / 200][d] + noise.sample(&mut rng));
        let km = kmeans(&x, 2, 1, 300).unwrap();
        for m in means {
            let m = Array1::from(m.to_vec());
            let closest = km
                .centroids
                .outer_iter()
                .map(|c| sq_dist(c, m.view()).sqrt())
                .fold(f64::INFINITY, f64::min);
            // standard error of a 200-sample mean is 0.5/sqrt(200); allow σ
            assert!(closest < 0.5, "centroid {closest} away from {m}");
        }
    }

    #[test]
    fn kmeans_is_deterministic() {
        let ds = generate_synthetic_blobs(&BlobParams { per_class: 30, ..Default::default() }).unwrap();
        let a = kmeans(ds.embeddings(), 8, 5, 300).unwrap();
        assert_eq!(a, kmeans(ds.embeddings(), 8, 5, 300).unwrap());
    }

    #[test]
    fn reseeding_fills_empty_clusters() {
        let x = array![[0.0], [0.1], [10.0], [10.2], [20.0]];
        let mut centroids = array![[0.0], [10.0], [100.0]];
        let mut assign = vec![0, 0, 1, 1, 1];
        reseed_empty(&x, &mut centroids, &mut assign);
        assert_eq!(assign, vec![0, 0, 1, 1, 2]);
        assert_eq!(centroids[(2, 0)], 20.0);
    }

    #[test]
    fn soft_assign_examples() {
        let u = array![[0.0, 0.0], [2.0, 0.0]];
        let q = soft_assign(&array![[1.0, 0.0]], &u).unwrap();
        assert_eq!(q.row(0).to_vec(), vec![0.5, 0.5]);
        let u = array![[0.0, 0.0], [1.0, 0.0]];
        let q = soft_assign(&array![[0.0, 0.0]], &u).unwrap();
        assert!((q[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((q[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn target_distribution_examples() {
        let p = target_distribution(&array![[0.5, 0.5]]);
        assert_eq!(p, array![[0.5, 0.5]]);
        // f_1 = f_2: rows of [0.9, 0.1] and its mirror
        let p = target_distribution(&array![[0.9, 0.1], [0.1, 0.9]]);
        let expected = 0.81 / 0.82;
        assert!((p[(0, 0)] - expected).abs() < 1e-12);
        assert!((p[(0, 0)] - 0.988).abs() < 1e-3);
        assert!((p[(0, 1)] - 0.012).abs() < 1e-3);
    }

    #[test]
    fn dead_cluster_uses_frequency_floor() {
        let p = target_distribution(&array![[1.0, 0.0], [1.0, 0.0]]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert_eq!(p.column(0).to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn kld_examples() {
        let q = array![[0.3, 0.7], [0.6, 0.4]];
        assert_eq!(kld_loss(&q, &q).unwrap().0, 0.0);
        let (l, g) = kld_loss(&array![[1.0, 0.0]], &array![[0.5, 0.5]]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, array![[-2.0, 0.0]]);
    }

    #[test]
    fn infer_examples() {
        assert_eq!(argmax_rows(&array![[0.2, 0.7, 0.1], [0.5, 0.5, 0.0]]), vec![1, 0]);
        let u = array![[0.0, 0.0], [2.0, 0.0]];
        assert_eq!(infer(&array![[1.0, 0.0], [1.9, 0.3]], &u).unwrap(), vec![0, 1]);
    }

    /// KL(P‖Q(I, U)) with P fixed, against central differences in I and U.
    #[test]
    fn kld_gradient_through_soft_assign() {
        let i = array![[0.3, -0.4, 1.1], [0.9, 0.2, -0.5]];
        let u = array![[0.0, 0.1, 0.2], [1.0, -0.3, 0.4], [-0.6, 0.5, 0.0]];
        let p = target_distribution(&soft_assign(&i, &u).unwrap());
        let loss = |i: &Array2<f64>, u: &Array2<f64>| kld_loss(&p, &soft_assign(i, u).unwrap()).unwrap().0;
        let (_, d_q) = kld_loss(&p, &soft_assign(&i, &u).unwrap()).unwrap();
        let (d_i, d_u) = soft_assign_backward(&i, &u, &d_q).unwrap();
        let h = 1e-5;
        for (which, grad) in [(0, &d_i), (1, &d_u)] {
            for idx in ndarray::indices(grad.dim()) {
                let (mut ip, mut im, mut up, mut um) = (i.clone(), i.clone(), u.clone(), u.clone());
                if which == 0 {
                    ip[idx] += h;
                    im[idx] -= h;
                } else {
                    up[idx] += h;
                    um[idx] -= h;
                }
                let fd = (loss(&ip, &up) - loss(&im, &um)) / (2.0 * h);
                let an = grad[idx];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-9);
                assert!(rel < 1e-4, "{which} {idx:?}: fd {fd} analytic {an}");
            }
        }
    }

    fn refine_fixture(k: usize) -> (EmbeddedDataset, ClusterNetParams, RefinementState) {
        let ds = generate_synthetic_blobs(&BlobParams { per_class: 40, num_classes: 4, dim: 6, ..Default::default() }).unwrap();
        let params = init_params(6, k, 1).unwrap().with_mode(Mode::Eval);
        let train = ds.rows(&ds.split_indices(Split::Train));
        let intents = clusternet::represent(&params, train.view()).unwrap();
        let km = kmeans_restarts(&intents, k, 0, 300, 5).unwrap();
        let state = RefinementState::new(km.centroids, 0.001).unwrap();
        (ds, params, state)
    }

    #[test]
    fn converged_state_stops_after_one_epoch() {
        let (ds, mut params, mut state) = refine_fixture(4);
        let mut opt = Adam::for_params(&params, 0.0).unwrap();
        let config = RefineConfig { learning_rate: 0.0, ..Default::default() };
        let log = run_refinement(&ds, &mut params, &mut opt, &mut state, &config).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].changed_fraction, 0.0);
    }

    #[test]
    fn refinement_reduces_divergence_and_logs() {
        let (ds, mut params, mut state) = refine_fixture(4);
        let mut opt = Adam::for_params(&params, 1e-3).unwrap();
        let config = RefineConfig { batch_size: 64, max_epochs: 20, ..Default::default() };
        let log = run_refinement(&ds, &mut params, &mut opt, &mut state, &config).unwrap();
        assert!(!log.is_empty());
        assert!(log.iter().all(|e| e.kld_loss.is_finite() && e.occupied_clusters <= 4));
        assert_eq!(state.previous_assignments.as_ref().unwrap().len(), ds.split_indices(Split::Train).len());
        let mut buf = Vec::new();
        write_log_csv(&log, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("epoch,kld_loss,changed_fraction,occupied_clusters\n"));
    }

    #[test]
    fn refinement_state_validates_delta() {
        assert!(RefinementState::new(Array2::zeros((2, 2)), 0.0).is_err());
        assert!(RefinementState::new(Array2::zeros((2, 2)), 1.0).is_err());
    }

    fn random_matrix(seed: u64, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
        let mut rng = seeded_rng(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn distributions_are_normalized(seed in 0u64..100_000, m in 1usize..12, k in 2usize..6) {
            let q = soft_assign(&random_matrix(seed, m, k, 3.0), &random_matrix(seed + 1, k, k, 3.0)).unwrap();
            let p = target_distribution(&q);
            for (qr, pr) in q.outer_iter().zip(p.outer_iter()) {
                prop_assert!((qr.sum() - 1.0).abs() < 1e-9);
                prop_assert!((pr.sum() - 1.0).abs() < 1e-9);
                prop_assert!(qr.iter().all(|v| *v > 0.0 && *v < 1.0));
            }
            let (loss, _) = kld_loss(&p, &q).unwrap();
            prop_assert!(loss >= -1e-12);
        }

        #[test]
        fn uniform_frequencies_keep_argmax(seed in 0u64..100_000, k in 2usize..6) {
            // a Latin-square Q has equal column sums
            let row = random_matrix(seed, 1, k, 1.0).mapv(|v| v.abs() + 0.01);
            let q = Array2::from_shape_fn((k, k), |(i, j)| row[(0, (i + j) % k)]);
            let q = &q / &q.sum_axis(Axis(1)).insert_axis(Axis(1));
            prop_assert_eq!(argmax_rows(&target_distribution(&q)), argmax_rows(&q));
        }

        #[test]
        fn infer_scale_invariant(seed in 0u64..100_000, m in 1usize..10, k in 2usize..5, scale in 0.1f64..10.0) {
            let i = random_matrix(seed, m, k, 3.0);
            let u = random_matrix(seed + 7, k, k, 3.0);
            let base = infer(&i, &u).unwrap();
            prop_assert_eq!(base.clone(), infer(&(&i * scale), &(&u * scale)).unwrap());
            // normalization is row-constant: argmax of the raw kernel agrees
            prop_assert_eq!(base, argmax_rows(&student_kernel(&i, &u)));
        }
    }
}
