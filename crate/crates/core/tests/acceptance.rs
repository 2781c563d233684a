use std::time::Instant;

use cdac::clusternet::{backward, forward, init_params, ClusterNetParams, Mode};
use cdac::dataset::{generate_synthetic_blobs, BlobParams, EmbeddedDataset};
use cdac::metrics::{acc, ari, nmi};
use cdac::pairwise::{similarity_loss, similarity_matrix, update_lambda, PairLabel, PairLabels, ThresholdState};
use cdac::pipeline::{run_variant, ClusteringReport, RunConfig, Variant};
use cdac::refine::{kld_loss, soft_assign, soft_assign_backward, target_distribution};
use cdac::seeded_rng;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

fn rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let scale = analytic.mapv(|v| v * v).sum().sqrt().max(numeric.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn numeric_grad(x: &Array2<f64>, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let h = 1e-6;
    let mut g = Array2::zeros(x.raw_dim());
    for idx in ndarray::indices(x.dim()) {
        let mut plus = x.clone();
        plus[idx] += h;
        let mut minus = x.clone();
        minus[idx] -= h;
        g[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

fn random_pair_labels(rng: &mut ChaCha8Rng, n: usize) -> PairLabels {
    loop {
        let mut values = Array2::from_elem((n, n), PairLabel::NotSelected);
        for i in 0..n {
            for j in i + 1..n {
                let l = match rng.random_range(0..3) {
                    0 => PairLabel::Similar,
                    1 => PairLabel::Dissimilar,
                    _ => PairLabel::NotSelected,
                };
                values[(i, j)] = l;
                values[(j, i)] = l;
            }
        }
        let labels = PairLabels { values };
        if labels.selected_fraction() > 0.0 {
            return labels;
        }
    }
}

fn gradient_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for case in 0..200u64 {
        if instances == 60 {
            break;
        }
        let mut rng = seeded_rng(1000 + case);
        let n = rng.random_range(2..=4);
        let h = rng.random_range(1..=8);
        let k = rng.random_range(2..=4);
        let e = random_matrix(&mut rng, n, h, 1.0);
        let params = init_params(h, k, case).unwrap();
        // skip instances where dropout leaves a row of I (near) zero
        let drop_seed = case * 7 + 1;
        let (probe, _) = forward(&params, e.view(), drop_seed).unwrap();
        if probe.outer_iter().any(|r| r.dot(&r).sqrt() < 1e-2) {
            continue;
        }

        // similarity loss through the clustering layer
        let labels = random_pair_labels(&mut rng, n);
        let sim_loss = |w1: &Array2<f64>, w2: &Array2<f64>| {
            let p = ClusterNetParams::from_weights(w1.clone(), w2.clone()).unwrap();
            let (i, _) = forward(&p, e.view(), drop_seed).unwrap();
            similarity_loss(similarity_matrix(&i).unwrap().values(), &labels).unwrap().0
        };
        let (intents, cache) = forward(&params, e.view(), drop_seed).unwrap();
        let sim = similarity_matrix(&intents).unwrap();
        let (_, d_sim) = similarity_loss(sim.values(), &labels).unwrap();
        let grads = backward(&params, &cache, &sim.backward(&d_sim)).unwrap();
        let n1 = numeric_grad(&params.w1, |w| sim_loss(w, &params.w2));
        let n2 = numeric_grad(&params.w2, |w| sim_loss(&params.w1, w));
        worst = worst.max(rel_err(&grads.w1, &n1)).max(rel_err(&grads.w2, &n2));

        // divergence loss through the clustering layer and the centroids
        let eval = params.clone().with_mode(Mode::Eval);
        let u = random_matrix(&mut rng, k, k, 1.0);
        let (i0, cache) = forward(&eval, e.view(), 0).unwrap();
        let p = target_distribution(&soft_assign(&i0, &u).unwrap());
        let kl = |w1: &Array2<f64>, w2: &Array2<f64>, u: &Array2<f64>| {
            let pr = ClusterNetParams::from_weights(w1.clone(), w2.clone()).unwrap().with_mode(Mode::Eval);
            let (i, _) = forward(&pr, e.view(), 0).unwrap();
            kld_loss(&p, &soft_assign(&i, u).unwrap()).unwrap().0
        };
        let (_, d_q) = kld_loss(&p, &soft_assign(&i0, &u).unwrap()).unwrap();
        let (d_i, d_u) = soft_assign_backward(&i0, &u, &d_q).unwrap();
        let grads = backward(&eval, &cache, &d_i).unwrap();
        let n1 = numeric_grad(&eval.w1, |w| kl(w, &eval.w2, &u));
        let n2 = numeric_grad(&eval.w2, |w| kl(&eval.w1, w, &u));
        let nu = numeric_grad(&u, |uu| kl(&eval.w1, &eval.w2, uu));
        worst = worst
            .max(rel_err(&grads.w1, &n1))
            .max(rel_err(&grads.w2, &n2))
            .max(rel_err(&d_u, &nu));
        instances += 1;
    }
    outcome(instances >= 50 && worst < 1e-4, format!("{instances} instances, worst relative error {worst:.2e}"))
}

fn distribution_invariants() -> Outcome {
    let mut worst_sum: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    let mut worst_self_kl: f64 = 0.0;
    let mut zero_when_different = 0;
    for case in 0..1000u64 {
        let mut rng = seeded_rng(50_000 + case);
        let m = rng.random_range(1..=12);
        let k = rng.random_range(2..=6);
        let dim = rng.random_range(1..=6);
        let q = soft_assign(&random_matrix(&mut rng, m, dim, 3.0), &random_matrix(&mut rng, k, dim, 3.0)).unwrap();
        let p = target_distribution(&q);
        for (qr, pr) in q.outer_iter().zip(p.outer_iter()) {
            worst_sum = worst_sum.max((qr.sum() - 1.0).abs()).max((pr.sum() - 1.0).abs());
        }
        let kl = kld_loss(&p, &q).unwrap().0;
        min_kl = min_kl.min(kl);
        worst_self_kl = worst_self_kl.max(kld_loss(&q, &q).unwrap().0.abs());
        let differs = (&p - &q).iter().any(|d| d.abs() > 1e-6);
        if differs && kl <= 1e-12 {
            zero_when_different += 1;
        }
    }
    let pass = worst_sum < 1e-9 && min_kl >= -1e-12 && worst_self_kl <= 1e-12 && zero_when_different == 0;
    outcome(
        pass,
        format!(
            "1000 instances, max |row sum - 1| {worst_sum:.1e}, min KL {min_kl:.1e}, max KL(Q,Q) {worst_self_kl:.1e}, \
             zero KL with P != Q: {zero_when_different}"
        ),
    )
}

fn threshold_schedule() -> Outcome {
    let mut ts = ThresholdState::new(0.009);
    let mut updates = 0u32;
    let mut worst: f64 = 0.0;
    while ts.is_active() {
        ts = update_lambda(&ts);
        updates += 1;
        worst = worst.max((ts.lambda - 0.0099 * updates as f64).abs());
    }
    outcome(
        updates == 46 && ts.updates == 46 && worst <= 1e-12,
        format!("{updates} updates, final lambda {:.4}, max trace error {worst:.1e}", ts.lambda),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force_acc(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.iter().chain(pred).max().unwrap() + 1;
    permutations(n)
        .iter()
        .map(|perm| truth.iter().zip(pred).filter(|(t, p)| perm[**p] == **t).count())
        .max()
        .unwrap() as f64
        / truth.len() as f64
}

fn metric_oracles() -> Outcome {
    let mut mismatches = 0;
    for case in 0..200u64 {
        let mut rng = seeded_rng(90_000 + case);
        let classes = rng.random_range(1..=6);
        let clusters = rng.random_range(1..=6);
        let len = rng.random_range(1..=30);
        let truth: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<usize> = (0..len).map(|_| rng.random_range(0..clusters)).collect();
        if (acc(&truth, &pred).unwrap().0 - brute_force_acc(&truth, &pred)).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    let ari_example = ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
    let both_single = nmi(&[0, 0, 0], &[0, 0, 0]).unwrap();
    let one_single = nmi(&[0, 0, 0], &[0, 1, 2]).unwrap();
    let other_single = nmi(&[0, 1, 2], &[1, 1, 1]).unwrap();
    let pass = mismatches == 0
        && (ari_example + 0.5).abs() < 1e-12
        && both_single == 1.0
        && one_single == 0.0
        && other_single == 0.0;
    outcome(
        pass,
        format!(
            "200 ACC instances, {mismatches} mismatches; ARI example {ari_example}; NMI single/single {both_single}, \
             single/split {one_single}, split/single {other_single}"
        ),
    )
}

fn blobs() -> EmbeddedDataset {
    generate_synthetic_blobs(&BlobParams {
        num_classes: 8,
        per_class: 200,
        dim: 16,
        centroid_scale: 10.0,
        noise_sigma: 1.0,
        seed: 0,
    })
    .unwrap()
}

fn synthetic(variant: Variant) -> RunConfig {
    RunConfig {
        variant,
        unknown_class_ratio: 0.25,
        labeled_ratio: 0.1,
        num_runs: 3,
        seed: 0,
        refine_learning_rate: Some(0.1),
        jobs: 1,
        ..Default::default()
    }
}

fn run(config: &RunConfig, ds: &EmbeddedDataset) -> ClusteringReport {
    run_variant(config, ds).unwrap()
}

fn accs(r: &ClusteringReport) -> String {
    let v: Vec<String> = r.runs.iter().map(|x| format!("{:.4}", x.test.acc)).collect();
    format!("[{}]", v.join(", "))
}

fn end_to_end() -> Outcome {
    let ds = blobs();
    let cdac_plus = run(&synthetic(Variant::CdacPlus), &ds);
    let km = run(&synthetic(Variant::KmRaw), &ds);
    let (a, b) = (cdac_plus.aggregate.acc.mean, km.aggregate.acc.mean);
    outcome(
        a >= 0.90 && a >= b,
        format!("CDAC+ mean ACC {a:.4} {}, KM-raw mean ACC {b:.4}", accs(&cdac_plus)),
    )
}

fn cluster_count_insensitivity() -> Outcome {
    let ds = blobs();
    let base = run(&synthetic(Variant::CdacPlus), &ds);
    let doubled = RunConfig { cluster_multiplier: 2.0, ..synthetic(Variant::CdacPlus) };
    let cdac_plus = run(&doubled, &ds);
    let km = run(&RunConfig { variant: Variant::CdacKm, ..doubled }, &ds);
    let k = cdac_plus.cluster_count;
    let drop = base.aggregate.acc.mean - cdac_plus.aggregate.acc.mean;
    let occupied: Vec<usize> = cdac_plus.runs.iter().map(|r| r.test_occupied_clusters).collect();
    let after_refinement: Vec<usize> = cdac_plus
        .runs
        .iter()
        .map(|r| r.refine_log.last().map_or(k, |e| e.occupied_clusters))
        .collect();
    let empty = after_refinement.iter().chain(&occupied).any(|&o| o < k);
    let pass = drop < 0.05 && empty && cdac_plus.aggregate.acc.mean >= km.aggregate.acc.mean;
    outcome(
        pass,
        format!(
            "k={k}: CDAC+ ACC {:.4} (drop {drop:.4}), CDAC-KM ACC {:.4}, occupied after refinement {after_refinement:?}, \
             on test {occupied:?}",
            cdac_plus.aggregate.acc.mean, km.aggregate.acc.mean
        ),
    )
}

fn ablation_ordering() -> Outcome {
    let ds = blobs();
    let full = run(&synthetic(Variant::CdacPlus), &ds).aggregate.acc.mean;
    let dac_plus = run(&synthetic(Variant::DacPlus), &ds).aggregate.acc.mean;
    let cdac_km = run(&synthetic(Variant::CdacKm), &ds).aggregate.acc.mean;
    outcome(
        full >= dac_plus - 0.02 && full >= cdac_km - 0.02,
        format!("CDAC+ {full:.4}, DAC+ {dac_plus:.4}, CDAC-KM {cdac_km:.4}"),
    )
}

fn imbalance_robustness() -> Outcome {
    let ds = blobs();
    let balanced = run(&RunConfig { gamma: Some(1.0), ..synthetic(Variant::CdacPlus) }, &ds);
    let skewed = run(&RunConfig { gamma: Some(0.3), ..synthetic(Variant::CdacPlus) }, &ds);
    let drop = balanced.aggregate.acc.mean - skewed.aggregate.acc.mean;
    let sizes: Vec<usize> = skewed.runs.iter().map(|r| r.samples).collect();
    outcome(
        drop < 0.10,
        format!(
            "gamma 1.0 ACC {:.4}, gamma 0.3 ACC {:.4} (drop {drop:.4}, subsampled sizes {sizes:?})",
            balanced.aggregate.acc.mean, skewed.aggregate.acc.mean
        ),
    )
}

fn determinism() -> Outcome {
    let ds = generate_synthetic_blobs(&BlobParams { num_classes: 4, per_class: 60, dim: 8, ..Default::default() }).unwrap();
    let config = RunConfig { num_runs: 2, seed: 17, batch_size: 64, ..synthetic(Variant::CdacPlus) };
    let a = run(&config, &ds).to_json();
    let b = run(&config, &ds).to_json();
    let c = run(&RunConfig { jobs: 2, ..config }, &ds).to_json();
    outcome(
        a == b && a == c,
        format!("report JSON of {} bytes identical across repeated and parallel invocations", a.len()),
    )
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check, f64); 9] = [
        ("1 gradient correctness", gradient_correctness, 10.0),
        ("2 distribution invariants", distribution_invariants, 5.0),
        ("3 threshold schedule", threshold_schedule, 1.0),
        ("4 metric oracles", metric_oracles, 10.0),
        ("5 end-to-end synthetic", end_to_end, 300.0),
        ("6 cluster-count insensitivity", cluster_count_insensitivity, 600.0),
        ("7 ablation ordering", ablation_ordering, 900.0),
        ("8 imbalance robustness", imbalance_robustness, 600.0),
        ("9 determinism", determinism, 600.0),
    ];
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let o = check();
        let secs = start.elapsed().as_secs_f64();
        let pass = o.pass && secs < limit;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {name}: {} | {} | {secs:.2}s (limit {limit}s)",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
