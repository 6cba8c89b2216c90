//! Acceptance criteria AC1..AC10.
//!
//! Each criterion prints one `[PASS]`/`[FAIL]` line with the measured values.
//! All tolerances and runtime limits are pinned below.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use moso::data::{generate_blobs, inject_label_noise, split, Dataset, NoiseConfig, Sample};
use moso::eval::{evaluate_coreset, noise_detection, spearman};
use moso::model::{init_params, GradVector, ModelKind, ModelParams, ModelSpec};
use moso::pipeline::{make_partition, prune, score_direct, score_pipeline};
use moso::scores::ScoreMethod;
use moso::scoring::{
    approximation_error_probe, loo_mean_gradient, moso_approx, moso_exact, probe_from_text, probe_to_text,
    random_score, SamplingRule,
};
use moso::seed::derive_indexed_seed;
use moso::trainer::{batch_plan, fit, CaptureRule, Checkpoint, CheckpointTrace, Schedule, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const AC1_MIN_SPEARMAN: f64 = 0.5;
const AC2_MIN_RECALL: f64 = 0.4;
const AC4_MAX_REL_ERR: f64 = 1e-6;
const AC4_TRIALS_PER_KIND: usize = 100;
const AC5_TOL: f64 = 1e-12;
const AC6_TOL: f64 = 1e-12;
const AC7_REL_TOL: f64 = 1e-12;

const AC3_REPEATS: usize = 5;

const AC1_SPREAD: f64 = 1.0;
const NOISY_SPREAD: f64 = 0.5;
const NOISE_RATE: f64 = 0.2;
const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Train config shared by the desk-scale criteria.
fn default_cfg(seed: u64) -> TrainConfig {
    TrainConfig::constant(30, 32, 0.5, seed)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn ac1() -> Outcome {
    let ds = generate_blobs(2, 16, 2, AC1_SPREAD, 2024).unwrap();
    let spec = ModelSpec::logistic(2, 2).with_seed(7);
    let cfg = default_cfg(13);
    let full = fit(&ds, &spec, &cfg, &CaptureRule::AllSteps).unwrap();
    let exact = moso_exact(&ds, &spec, &cfg, &full.final_params).unwrap();
    let approx = moso_approx(&ds, &full.trace, &SamplingRule::AllSteps).unwrap();
    let rho = spearman(&exact, &approx).unwrap();
    outcome(
        rho > AC1_MIN_SPEARMAN,
        format!(
            "N=32 T={} spearman(exact, approx)={rho:.4} (need > {AC1_MIN_SPEARMAN})",
            full.trace.total_steps()
        ),
    )
}

/// Noisy N=200 training set plus a clean 50-sample test split.
fn noisy_instance(seed: u64) -> (Dataset, Dataset) {
    let base = generate_blobs(2, 125, 2, NOISY_SPREAD, seed).unwrap();
    let (train, test) = split(&base, 0.8, seed ^ 0x5eed).unwrap();
    let train = inject_label_noise(
        &train.dataset,
        NoiseConfig {
            rate: NOISE_RATE,
            seed: seed.wrapping_add(1),
        },
    )
    .unwrap();
    assert_eq!(train.len(), 200);
    (train, test.dataset)
}

/// All-steps MoSo scores; step sampling is exercised separately by AC9.
fn moso_scores(ds: &Dataset, seed: u64) -> moso::scores::ScoreTable {
    let spec = ModelSpec::logistic(ds.dim(), ds.num_classes()).with_seed(seed);
    score_direct(
        ds,
        &spec,
        &default_cfg(seed),
        &SamplingRule::AllSteps,
        ScoreMethod::MosoApprox,
    )
    .unwrap()
}

fn ac2() -> Outcome {
    let mut recalls = Vec::new();
    for &seed in &SEEDS {
        let (train, _) = noisy_instance(seed);
        let scores = moso_scores(&train, seed);
        let report = noise_detection(&scores, &train, 0.2).unwrap();
        recalls.push(report.recall.expect("noise present"));
    }
    let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
    outcome(
        mean >= AC2_MIN_RECALL,
        format!("recall per seed {recalls:.3?}, mean={mean:.4} (need >= {AC2_MIN_RECALL})"),
    )
}

fn ac3() -> Outcome {
    let mut moso_acc = Vec::new();
    let mut rand_acc = Vec::new();
    for &seed in &SEEDS {
        let (train, test) = noisy_instance(seed);
        let spec = ModelSpec::logistic(2, 2).with_seed(seed);
        let cfg = default_cfg(seed);
        let moso_scores = moso_scores(&train, seed);
        let random_scores = random_score(&train, seed).unwrap();
        for (scores, acc) in [(&moso_scores, &mut moso_acc), (&random_scores, &mut rand_acc)] {
            let coreset = prune(&train, scores, 0.3).unwrap();
            let report = evaluate_coreset(&train, &coreset, &test, &spec, &cfg, AC3_REPEATS).unwrap();
            acc.push(report.accuracy);
        }
    }
    let m = moso_acc.iter().sum::<f64>() / 5.0;
    let r = rand_acc.iter().sum::<f64>() / 5.0;
    outcome(
        m >= r,
        format!("delta=0.3 moso {moso_acc:.3?} mean={m:.4} vs random {rand_acc:.3?} mean={r:.4}"),
    )
}

fn central_difference(params: &ModelParams, sample: &Sample, h: f64) -> Vec<f64> {
    let theta = params.theta().to_vec();
    (0..theta.len())
        .map(|i| {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = ModelParams::from_theta(*params.spec(), plus)
                .unwrap()
                .loss(sample)
                .unwrap();
            let lm = ModelParams::from_theta(*params.spec(), minus)
                .unwrap()
                .loss(sample)
                .unwrap();
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn ac4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 2];
    for (slot, kind) in [ModelKind::Logistic, ModelKind::Mlp].into_iter().enumerate() {
        for trial in 0..AC4_TRIALS_PER_KIND {
            let dim = rng.random_range(1..6);
            let k = rng.random_range(2..5);
            let spec = match kind {
                ModelKind::Logistic => ModelSpec::logistic(dim, k),
                ModelKind::Mlp => ModelSpec::mlp(dim, k, rng.random_range(1..8)),
            }
            .with_seed(trial as u64)
            .with_scale(1.0);
            let params = init_params(&spec).unwrap();
            let sample = Sample {
                id: 0,
                features: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                label: rng.random_range(0..k),
                noisy: false,
            };
            let g = params.grad_sample(&sample).unwrap();
            let fd = central_difference(&params, &sample, 1e-5);
            let diff: Vec<f64> = g.as_slice().iter().zip(&fd).map(|(a, b)| a - b).collect();
            let scale = norm(g.as_slice()).max(norm(&fd)).max(1e-8);
            worst[slot] = worst[slot].max(norm(&diff) / scale);
        }
    }
    outcome(
        worst.iter().all(|&w| w <= AC4_MAX_REL_ERR),
        format!(
            "{AC4_TRIALS_PER_KIND} trials per kind, worst relative error logistic={:.2e} mlp={:.2e} (need <= {AC4_MAX_REL_ERR:e})",
            worst[0], worst[1]
        ),
    )
}

fn ac5() -> Outcome {
    let ds = generate_blobs(3, 17, 4, 0.7, 5).unwrap();
    let ds = Dataset::new(4, 3, ds.samples()[..50].to_vec()).unwrap();
    let mut worst = 0.0f64;
    for spec in [ModelSpec::logistic(4, 3), ModelSpec::mlp(4, 3, 6)] {
        let params = init_params(&spec.with_scale(0.8)).unwrap();
        let full = params.grad_mean(ds.samples()).unwrap();
        for z in ds.samples() {
            let g_z = params.grad_sample(z).unwrap();
            let identity = loo_mean_gradient(&full, &g_z, ds.len()).unwrap();
            let direct = params.grad_mean(ds.samples().iter().filter(|s| s.id != z.id)).unwrap();
            worst = worst.max(max_abs_diff(identity.as_slice(), direct.as_slice()));
        }
    }
    outcome(
        worst <= AC5_TOL,
        format!("N=50 both models, max |identity - direct|={worst:.2e} (need <= {AC5_TOL:e})"),
    )
}

fn ac6() -> Outcome {
    let ds = generate_blobs(3, 17, 3, 0.6, 6).unwrap();
    let n = ds.len();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for spec in [
        ModelSpec::logistic(3, 3).with_seed(1),
        ModelSpec::mlp(3, 3, 5).with_seed(2),
    ] {
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 16,
            schedule: Schedule::Step {
                eta: 0.4,
                drop_every: 2,
                factor: 0.5,
            },
            shuffle_seed: 99,
        };
        let result = fit(&ds, &spec, &cfg, &CaptureRule::AllSteps).unwrap();
        let plan = batch_plan(n, &cfg);
        let mut prev = init_params(&spec).unwrap();
        for (t, batch) in (1..).zip(&plan) {
            let cp = result.trace.get(t).expect("all steps captured");
            let eta = cfg.rate_at(t, n);
            assert_eq!(cp.eta, eta);
            let grad = prev.grad_mean(batch.iter().map(|&i| &ds.samples()[i])).unwrap();
            let expected: Vec<f64> = prev
                .theta()
                .iter()
                .zip(grad.as_slice())
                .map(|(w, g)| w - eta * g)
                .collect();
            worst = worst.max(max_abs_diff(&expected, cp.params.theta()));
            prev = cp.params.clone();
            checked += 1;
        }
    }
    outcome(
        worst <= AC6_TOL,
        format!("{checked} consecutive pairs, max deviation={worst:.2e} (need <= {AC6_TOL:e})"),
    )
}

fn kept_set(ds: &Dataset, scores: &moso::scores::ScoreTable, delta: f64) -> BTreeSet<usize> {
    prune(ds, scores, delta).unwrap().kept.into_iter().collect()
}

fn ac7() -> Outcome {
    let mut failures = Vec::new();

    // A sample whose softmax saturates to an exact one-hot has a zero gradient.
    let mut samples: Vec<Sample> = generate_blobs(2, 5, 2, 0.5, 3).unwrap().samples().to_vec();
    samples.push(Sample {
        id: samples.len(),
        features: vec![500.0, 0.0],
        label: 0,
        noisy: false,
    });
    let ds = Dataset::new(2, 2, samples).unwrap();
    let spec = ModelSpec::logistic(2, 2);
    let entries = (1..=3)
        .map(|t| Checkpoint {
            step: t,
            eta: 0.5,
            params: ModelParams::from_theta(spec, vec![t as f64, 0.3, -(t as f64), 0.1, 0.05, -0.05]).unwrap(),
        })
        .collect();
    let trace = CheckpointTrace::new(entries, 3, ds.len()).unwrap();
    let zero_id = ds.len() - 1;
    let g = trace.entries()[0].params.grad_sample(&ds.samples()[zero_id]).unwrap();
    let zero_score = moso_approx(&ds, &trace, &SamplingRule::AllSteps)
        .unwrap()
        .get(zero_id)
        .unwrap();
    if g != GradVector::zeros(g.len()) || zero_score != 0.0 {
        failures.push(format!("zero-gradient score {zero_score}"));
    }

    // Learning-rate scaling.
    let base = generate_blobs(2, 30, 2, 0.6, 17).unwrap();
    let mut samples = base.samples().to_vec();
    let dup = Sample {
        id: samples.len(),
        ..samples[4].clone()
    };
    samples.push(dup);
    let ds = Dataset::new(2, 2, samples).unwrap();
    let spec = ModelSpec::logistic(2, 2).with_seed(3);
    let cfg = TrainConfig::constant(10, 16, 0.3, 8);
    let full = fit(&ds, &spec, &cfg, &CaptureRule::AllSteps).unwrap();
    let scores = moso_approx(&ds, &full.trace, &SamplingRule::AllSteps).unwrap();
    let deltas = [0.1, 0.25, 0.5, 0.75, 0.9];
    for c in [2.0, 3.0] {
        let scaled = moso_approx(&ds, &full.trace.with_scaled_rates(c), &SamplingRule::AllSteps).unwrap();
        for (a, b) in scores.scores().iter().zip(scaled.scores()) {
            let ok = if c == 2.0 {
                *b == 2.0 * a
            } else {
                (b - c * a).abs() <= AC7_REL_TOL * (c * a).abs().max(f64::MIN_POSITIVE)
            };
            if !ok {
                failures.push(format!("scaling by {c}: {a} -> {b}"));
                break;
            }
        }
        for &d in &deltas {
            if kept_set(&ds, &scores, d) != kept_set(&ds, &scaled, d) {
                failures.push(format!("scaling by {c} changed the pruned set at delta={d}"));
            }
        }
    }

    // Duplicates.
    let (a, b) = (scores.get(4).unwrap(), scores.get(ds.len() - 1).unwrap());
    if a.to_bits() != b.to_bits() {
        failures.push(format!("duplicate scores differ: {a} vs {b}"));
    }

    // delta = 0 and monotonicity.
    if kept_set(&ds, &scores, 0.0) != (0..ds.len()).collect() {
        failures.push("delta=0 removed samples".into());
    }
    let grid: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
    for w in grid.windows(2) {
        if !kept_set(&ds, &scores, w[1]).is_subset(&kept_set(&ds, &scores, w[0])) {
            failures.push(format!("monotonicity broken between {} and {}", w[0], w[1]));
        }
    }

    let pass = failures.is_empty();
    let detail = if pass {
        "zero-gradient=0, lr scaling x2 exact / x3 within 1e-12 rel, duplicates bit-identical, delta=0 no-op, monotone"
            .to_string()
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}

fn ac8() -> Outcome {
    let mut failures = Vec::new();
    let ds = generate_blobs(3, 20, 2, 0.6, 8).unwrap();
    let spec = ModelSpec::logistic(2, 3).with_seed(4);
    let cfg = TrainConfig::constant(8, 16, 0.5, 5);
    let rule = SamplingRule::UniformK { k: 5, seed: 6 };
    let one = make_partition(&ds, 1, 3).unwrap();
    for method in [
        ScoreMethod::MosoApprox,
        ScoreMethod::Grand,
        ScoreMethod::El2n,
        ScoreMethod::Forgetting,
        ScoreMethod::Random,
    ] {
        let piped = score_pipeline(&ds, &spec, &cfg, &one, &rule, method).unwrap();
        let direct = score_direct(&ds, &spec, &cfg, &rule, method).unwrap();
        if piped.to_text() != direct.to_text() {
            failures.push(format!("I=1 differs from direct for {method}"));
        }
    }

    // Uneven class sizes so the stratification has to spread remainders.
    let mut samples = generate_blobs(3, 23, 2, 0.6, 9).unwrap().samples().to_vec();
    samples.retain(|s| s.label != 2 || s.id % 3 != 0);
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = i;
    }
    let ds = Dataset::new(2, 3, samples).unwrap();
    for parts in 2..=5 {
        let plan = make_partition(&ds, parts, parts as u64).unwrap();
        let subsets = plan.subsets();
        let mut seen = vec![0usize; ds.len()];
        for s in &subsets {
            for &id in s {
                seen[id] += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            failures.push(format!("I={parts}: ids not covered exactly once"));
        }
        for class in 0..3 {
            let counts: Vec<usize> = subsets
                .iter()
                .map(|s| s.iter().filter(|&&id| ds.samples()[id].label == class).count())
                .collect();
            if counts.iter().max().unwrap() - counts.iter().min().unwrap() > 1 {
                failures.push(format!("I={parts}: class {class} counts {counts:?}"));
            }
        }
        let merged = score_pipeline(&ds, &spec, &cfg, &plan, &rule, ScoreMethod::MosoApprox).unwrap();
        if merged.len() != ds.len() || merged.scores().iter().any(|s| !s.is_finite()) {
            failures.push(format!("I={parts}: merged table incomplete"));
        }
    }
    let pass = failures.is_empty();
    let detail = if pass {
        "I=1 byte-identical for 5 methods; I=2..5 cover all ids once, classes balanced within 1".to_string()
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}

fn ac9() -> Outcome {
    let ds = generate_blobs(2, 32, 2, 0.6, 19).unwrap();
    let spec = ModelSpec::logistic(2, 2).with_seed(1);
    let cfg = TrainConfig::constant(20, 16, 0.5, 2);
    let full = fit(&ds, &spec, &cfg, &CaptureRule::AllSteps).unwrap();
    let t = full.trace.total_steps();
    let mut variances = Vec::new();
    for pct in [10usize, 25, 50, 100] {
        let k = (t * pct).div_ceil(100);
        let runs: Vec<Vec<f64>> = (0..20)
            .map(|s| {
                let rule = SamplingRule::UniformK {
                    k,
                    seed: derive_indexed_seed(77, "ac9", s),
                };
                moso_approx(&ds, &full.trace, &rule).unwrap().scores().to_vec()
            })
            .collect();
        let mean_var = (0..ds.len())
            .map(|i| {
                // shifted by the first run so bit-identical runs give exactly 0
                let col: Vec<f64> = runs.iter().map(|r| r[i] - runs[0][i]).collect();
                let m = col.iter().sum::<f64>() / col.len() as f64;
                col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64
            })
            .sum::<f64>()
            / ds.len() as f64;
        variances.push((pct, k, mean_var));
    }
    let zero_at_full = variances[3].2 == 0.0;
    let non_increasing = variances.windows(2).all(|w| w[1].2 <= w[0].2);
    outcome(
        zero_at_full && non_increasing,
        format!(
            "T={t} mean per-sample variance {}",
            variances
                .iter()
                .map(|(p, k, v)| format!("{p}%(k={k})={v:.3e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn ac10() -> Outcome {
    let ds = generate_blobs(2, 16, 2, 0.5, 2024).unwrap();
    let spec = ModelSpec::logistic(2, 2).with_seed(7);
    let cfg = default_cfg(13);
    let rows = approximation_error_probe(&ds, &spec, &cfg, &[5, 50], 1000).unwrap();
    let text = probe_to_text(&rows);
    let reparsed = probe_from_text(&text).unwrap();
    let well_formed = rows.len() == 2
        && rows[0].epochs == 5
        && rows[1].epochs == 50
        && rows[0].total_steps == cfg.total_steps(ds.len()) * 5 / 30
        && rows
            .iter()
            .all(|r| r.mean_abs_error.is_finite() && r.mean_abs_error >= 0.0)
        && reparsed == rows;
    let trend = if rows.len() == 2 && rows[1].mean_abs_error > rows[0].mean_abs_error {
        "increasing"
    } else {
        "not increasing"
    };
    outcome(
        well_formed,
        format!(
            "errors T={}:{:.4e} T={}:{:.4e} ({trend} with T, not gated)",
            rows[0].total_steps, rows[0].mean_abs_error, rows[1].total_steps, rows[1].mean_abs_error
        ),
    )
}

fn main() {
    type Criterion = (&'static str, &'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 10] = [
        ("AC1", "oracle agreement", ac1, Duration::from_secs(120)),
        ("AC2", "noise separation", ac2, Duration::from_secs(60)),
        ("AC3", "pruning benefit under noise", ac3, Duration::from_secs(120)),
        ("AC4", "gradient correctness", ac4, Duration::from_secs(30)),
        ("AC5", "leave-one-out gradient identity", ac5, Duration::from_secs(10)),
        ("AC6", "update rule fidelity", ac6, Duration::from_secs(30)),
        ("AC7", "invariance suite", ac7, Duration::from_secs(30)),
        ("AC8", "pipeline equivalence", ac8, Duration::from_secs(60)),
        ("AC9", "sampling variance trend", ac9, Duration::from_secs(120)),
        ("AC10", "error-vs-T probe", ac10, Duration::from_secs(300)),
    ];
    let mut failed = Vec::new();
    for (id, name, run, limit) in criteria {
        let start = Instant::now();
        let o = run();
        let elapsed = start.elapsed();
        let pass = o.pass && elapsed < limit;
        println!(
            "[{}] {id} {name}: {} [{:.2}s, limit {}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", criteria.len());
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
