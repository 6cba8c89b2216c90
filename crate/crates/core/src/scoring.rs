//! Sample scoring: the gradient-agreement MoSo approximator, the exact
//! leave-one-out MoSo oracle, and the GraNd / EL2N / random baselines.
//!
//! The approximate score of a sample `z` is the mean over sampled checkpoints
//! `t` of `(T / N) * eta_t * <g_loo(t), g_z(t)>`, where `g_z` is the sample's
//! own loss gradient at `w_t` and `g_loo` the mean gradient of every other
//! sample, obtained in O(P) from the full mean as `(N * g_mean - g_z) / (N - 1)`.
//!
//! The exact score retrains without `z` and measures the loss change on `S \ z`:
//! `L(S\z, w*_{S\z}) - L(S\z, w*_S)`. Useful samples score positive, harmful
//! ones (e.g. mislabelled) negative.

use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Open01;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{GradVector, ModelParams, ModelSpec};
use crate::scores::{ScoreMethod, ScoreTable};
use crate::textio::{self, fmt_f64, parse_f64, parse_usize, Header};
use crate::trainer::{fit, retrain_without, CaptureRule, Checkpoint, CheckpointTrace, TrainConfig};

/// Default cap on dataset size for leave-one-out retraining.
pub const DEFAULT_EXACT_LIMIT: usize = 10_000;

/// How checkpoints are drawn to estimate the expectation over training steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SamplingRule {
    /// Every captured checkpoint.
    AllSteps,
    /// `k` captured checkpoints drawn uniformly without replacement.
    UniformK { k: usize, seed: u64 },
    /// An explicit list of steps; each must be present in the trace.
    Steps(Vec<usize>),
}

impl fmt::Display for SamplingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingRule::AllSteps => f.write_str("all_steps"),
            SamplingRule::UniformK { k, seed } => write!(f, "uniform_k({k},{seed})"),
            SamplingRule::Steps(steps) => {
                let list: Vec<String> = steps.iter().map(usize::to_string).collect();
                write!(f, "steps({})", list.join(","))
            }
        }
    }
}

impl SamplingRule {
    /// Checkpoints selected from `trace`, in ascending step order.
    pub fn select<'a>(&self, trace: &'a CheckpointTrace) -> Result<Vec<&'a Checkpoint>> {
        if trace.is_empty() {
            return Err(Error::config("checkpoint trace is empty"));
        }
        let entries = trace.entries();
        match self {
            SamplingRule::AllSteps => Ok(entries.iter().collect()),
            SamplingRule::UniformK { k, seed } => {
                if *k == 0 || *k > entries.len() {
                    return Err(Error::config(format!(
                        "cannot sample {k} steps from {} captured checkpoints",
                        entries.len()
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut picked = index::sample(&mut rng, entries.len(), *k).into_vec();
                picked.sort_unstable();
                Ok(picked.into_iter().map(|i| &entries[i]).collect())
            }
            SamplingRule::Steps(steps) => {
                let mut sorted = steps.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.is_empty() {
                    return Err(Error::config("empty step list"));
                }
                sorted
                    .into_iter()
                    .map(|t| {
                        trace
                            .get(t)
                            .ok_or_else(|| Error::config(format!("step {t} was not captured in the trace")))
                    })
                    .collect()
            }
        }
    }
}

/// Mean gradient over `S \ z` from the full-set mean: `(N * full_mean - g_z) / (N - 1)`.
pub fn loo_mean_gradient(full_mean: &GradVector, g_z: &GradVector, n: usize) -> Result<GradVector> {
    if n < 2 {
        return Err(Error::arg("leave-one-out mean needs N >= 2"));
    }
    if full_mean.len() != g_z.len() {
        return Err(Error::arg("gradient length mismatch"));
    }
    let nf = n as f64;
    let denom = (n - 1) as f64;
    Ok(GradVector(
        full_mean
            .0
            .iter()
            .zip(&g_z.0)
            .map(|(m, g)| (nf * m - g) / denom)
            .collect(),
    ))
}

/// One step's contribution `(T / N) * eta * <loo_mean, g_z>`.
pub fn approx_term(total_steps: usize, n: usize, eta: f64, full_mean: &GradVector, g_z: &GradVector) -> Result<f64> {
    let loo = loo_mean_gradient(full_mean, g_z, n)?;
    Ok(total_steps as f64 / n as f64 * eta * loo.dot(g_z))
}

fn check_trace(ds: &Dataset, trace: &CheckpointTrace) -> Result<()> {
    if trace.train_size() != ds.len() {
        return Err(Error::config(format!(
            "trace was captured on N={} samples, dataset has N={}",
            trace.train_size(),
            ds.len()
        )));
    }
    Ok(())
}

/// Approximate MoSo scores from a checkpoint trace.
pub fn moso_approx(ds: &Dataset, trace: &CheckpointTrace, rule: &SamplingRule) -> Result<ScoreTable> {
    check_trace(ds, trace)?;
    let n = ds.len();
    if n < 2 {
        return Err(Error::config("MoSo scoring needs at least 2 samples"));
    }
    let selected = rule.select(trace)?;
    let total_steps = trace.total_steps();

    let full_means = selected
        .par_iter()
        .map(|c| c.params.grad_mean(ds.samples()))
        .collect::<Result<Vec<_>>>()?;

    let k = selected.len() as f64;
    let scores = ds
        .samples()
        .par_iter()
        .map(|s| {
            let mut acc = 0.0;
            for (c, mean) in selected.iter().zip(&full_means) {
                let g = c.params.grad_sample(s)?;
                acc += approx_term(total_steps, n, c.eta, mean, &g)?;
            }
            Ok(acc / k)
        })
        .collect::<Result<Vec<f64>>>()?;

    ScoreTable::new(
        ScoreMethod::MosoApprox,
        format!("rule={rule};T={total_steps};N={n};k={}", selected.len()),
        scores,
    )
}

/// Mean gradient norm over sampled checkpoints (GraNd).
pub fn grand_score(ds: &Dataset, trace: &CheckpointTrace, rule: &SamplingRule) -> Result<ScoreTable> {
    check_trace(ds, trace)?;
    let selected = rule.select(trace)?;
    let k = selected.len() as f64;
    let scores = ds
        .samples()
        .par_iter()
        .map(|s| {
            let mut acc = 0.0;
            for c in &selected {
                acc += c.params.grad_sample(s)?.norm();
            }
            Ok(acc / k)
        })
        .collect::<Result<Vec<f64>>>()?;
    ScoreTable::new(
        ScoreMethod::Grand,
        format!(
            "rule={rule};T={};N={};k={}",
            trace.total_steps(),
            ds.len(),
            selected.len()
        ),
        scores,
    )
}

/// `|| softmax(x) - onehot(y) ||_2` at the given parameters (EL2N, one model).
pub fn el2n_score(ds: &Dataset, params: &ModelParams) -> Result<ScoreTable> {
    let scores = ds
        .samples()
        .iter()
        .map(|s| {
            let p = params.forward(&s.features)?;
            Ok(el2n(&p, s.label))
        })
        .collect::<Result<Vec<f64>>>()?;
    ScoreTable::new(ScoreMethod::El2n, format!("final_params;N={}", ds.len()), scores)
}

/// Error-vector norm of one probability vector against a label.
pub fn el2n(probs: &[f64], label: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(c, p)| {
            let e = p - if c == label { 1.0 } else { 0.0 };
            e * e
        })
        .sum::<f64>()
        .sqrt()
}

/// I.i.d. uniform scores in the open interval (0, 1).
pub fn random_score(ds: &Dataset, seed: u64) -> Result<ScoreTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..ds.len()).map(|_| rng.sample::<f64, _>(Open01)).collect();
    ScoreTable::new(ScoreMethod::Random, format!("seed={seed};N={}", ds.len()), scores)
}

/// Exact MoSo scores by leave-one-out retraining, refusing datasets larger than
/// [`DEFAULT_EXACT_LIMIT`].
pub fn moso_exact(ds: &Dataset, spec: &ModelSpec, cfg: &TrainConfig, full_fit: &ModelParams) -> Result<ScoreTable> {
    moso_exact_with_limit(ds, spec, cfg, full_fit, DEFAULT_EXACT_LIMIT)
}

pub fn moso_exact_with_limit(
    ds: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    full_params: &ModelParams,
    max_samples: usize,
) -> Result<ScoreTable> {
    guard_exact(ds.len(), max_samples)?;
    if ds.len() < 2 {
        return Err(Error::config("exact MoSo needs at least 2 samples"));
    }
    let scores = (0..ds.len())
        .into_par_iter()
        .map(|z| {
            let without = retrain_without(ds, z, spec, cfg)?;
            let rest = || ds.samples().iter().filter(move |s| s.id != z);
            Ok(without.mean_loss(rest())? - full_params.mean_loss(rest())?)
        })
        .collect::<Result<Vec<f64>>>()?;
    ScoreTable::new(
        ScoreMethod::MosoExact,
        format!("loo;{};init_seed={};N={}", cfg.describe(), spec.init_seed, ds.len()),
        scores,
    )
}

fn guard_exact(n: usize, max_samples: usize) -> Result<()> {
    if n > max_samples {
        return Err(Error::Guard(format!(
            "exact MoSo on N={n} exceeds the limit of {max_samples} samples: \
             leave-one-out retraining costs O(T*n^2)"
        )));
    }
    Ok(())
}

/// One row of the approximation-error probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub epochs: usize,
    pub total_steps: usize,
    /// Mean over samples of `|exact - approx|`.
    pub mean_abs_error: f64,
    pub mean_abs_exact: f64,
    pub mean_abs_approx: f64,
}

/// For each epoch budget, computes exact and all-steps approximate scores and
/// reports their mean absolute difference.
pub fn approximation_error_probe(
    ds: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    epoch_budgets: &[usize],
    max_samples: usize,
) -> Result<Vec<ProbeRow>> {
    guard_exact(ds.len(), max_samples)?;
    epoch_budgets
        .iter()
        .map(|&epochs| {
            let cfg = TrainConfig { epochs, ..*cfg };
            let full = fit(ds, spec, &cfg, &CaptureRule::AllSteps)?;
            let exact = moso_exact_with_limit(ds, spec, &cfg, &full.final_params, max_samples)?;
            let approx = moso_approx(ds, &full.trace, &SamplingRule::AllSteps)?;
            let n = ds.len() as f64;
            let mean_abs = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() / n;
            let mean_abs_error = exact
                .scores()
                .iter()
                .zip(approx.scores())
                .map(|(e, a)| (e - a).abs())
                .sum::<f64>()
                / n;
            Ok(ProbeRow {
                epochs,
                total_steps: full.trace.total_steps(),
                mean_abs_error,
                mean_abs_exact: mean_abs(exact.scores()),
                mean_abs_approx: mean_abs(approx.scores()),
            })
        })
        .collect()
}

pub fn probe_to_text(rows: &[ProbeRow]) -> String {
    let mut out = format!("#moso-probe v1 rows={}\n", rows.len());
    for r in rows {
        out.push_str(&format!(
            "epochs={} T={} mean_abs_error={} mean_abs_exact={} mean_abs_approx={}\n",
            r.epochs,
            r.total_steps,
            fmt_f64(r.mean_abs_error),
            fmt_f64(r.mean_abs_exact),
            fmt_f64(r.mean_abs_approx)
        ));
    }
    out
}

pub fn probe_from_text(text: &str) -> Result<Vec<ProbeRow>> {
    let (header_line, body) = textio::content_lines(text)?;
    let header = Header::parse(header_line, "probe", 1)?;
    let declared = header.usize("rows", 1)?;
    if declared != body.len() {
        return Err(Error::parse(
            1,
            format!("header declares {declared} rows, found {}", body.len()),
        ));
    }
    body.into_iter()
        .map(|(lineno, line)| {
            let mut fields = std::collections::BTreeMap::new();
            for part in line.split_whitespace() {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| Error::parse(lineno, format!("malformed field {part:?}")))?;
                fields.insert(k, v);
            }
            let get = |k: &str| {
                fields
                    .get(k)
                    .copied()
                    .ok_or_else(|| Error::parse(lineno, format!("missing {k}")))
            };
            Ok(ProbeRow {
                epochs: parse_usize(get("epochs")?, lineno)?,
                total_steps: parse_usize(get("T")?, lineno)?,
                mean_abs_error: parse_f64(get("mean_abs_error")?, lineno)?,
                mean_abs_exact: parse_f64(get("mean_abs_exact")?, lineno)?,
                mean_abs_approx: parse_f64(get("mean_abs_approx")?, lineno)?,
            })
        })
        .collect()
}

pub fn write_probe(rows: &[ProbeRow], path: &Path) -> Result<()> {
    textio::write_file(path, &probe_to_text(rows))
}

/// The approximate score's per-sample accumulation over explicit checkpoints,
/// exposed for callers that already hold full-set mean gradients.
pub fn moso_from_means(
    g_z: &[GradVector],
    full_means: &[GradVector],
    etas: &[f64],
    total_steps: usize,
    n: usize,
) -> Result<f64> {
    if g_z.is_empty() || g_z.len() != full_means.len() || g_z.len() != etas.len() {
        return Err(Error::arg("per-step inputs must be nonempty and of equal length"));
    }
    let mut acc = 0.0;
    for ((g, m), &eta) in g_z.iter().zip(full_means).zip(etas) {
        acc += approx_term(total_steps, n, eta, m, g)?;
    }
    Ok(acc / g_z.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, inject_label_noise, NoiseConfig, Sample};
    use crate::model::init_params;

    fn gv(v: &[f64]) -> GradVector {
        GradVector(v.to_vec())
    }

    #[test]
    fn loo_identity_scalar() {
        // per-sample gradients {1, 2, 3}: mean 2, drop 3 → 1.5
        let loo = loo_mean_gradient(&gv(&[2.0]), &gv(&[3.0]), 3).unwrap();
        assert_eq!(loo.0, vec![1.5]);
        let m = gv(&[0.3, -1.0]);
        assert_eq!(loo_mean_gradient(&m, &m, 7).unwrap(), m);
        assert!(loo_mean_gradient(&m, &m, 1).is_err());
    }

    #[test]
    fn approx_term_arithmetic() {
        // N=2, T=1, eta=0.5
        let t = approx_term(1, 2, 0.5, &gv(&[1.0, 1.0]), &gv(&[1.0, 1.0])).unwrap();
        assert_eq!(t, 0.5);
        let t = approx_term(1, 2, 0.5, &gv(&[1.0, 1.0]), &gv(&[2.0, 0.0])).unwrap();
        assert_eq!(t, 0.0);
        let zero = approx_term(10, 5, 0.3, &gv(&[1.0, -2.0]), &gv(&[0.0, 0.0])).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn moso_from_means_averages_steps() {
        let s = moso_from_means(
            &[gv(&[1.0, 1.0]), gv(&[2.0, 0.0])],
            &[gv(&[1.0, 1.0]), gv(&[1.0, 1.0])],
            &[0.5, 0.5],
            1,
            2,
        )
        .unwrap();
        assert_eq!(s, 0.25);
    }

    #[test]
    fn el2n_values() {
        assert_eq!(el2n(&[1.0, 0.0], 0), 0.0);
        assert!((el2n(&[0.7, 0.3], 0) - 0.3 * 2f64.sqrt()).abs() < 1e-15);
        assert!((el2n(&[0.5, 0.5], 1) - 2f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn random_scores_are_open_unit_and_seeded() {
        let ds = generate_blobs(2, 50, 2, 0.5, 1).unwrap();
        let a = random_score(&ds, 3).unwrap();
        assert_eq!(a, random_score(&ds, 3).unwrap());
        assert_ne!(a.scores(), random_score(&ds, 4).unwrap().scores());
        assert!(a.scores().iter().all(|&s| s > 0.0 && s < 1.0));
    }

    fn trained(n_per_class: usize) -> (Dataset, ModelSpec, TrainConfig, crate::trainer::FitResult) {
        let ds = generate_blobs(2, n_per_class, 2, 0.5, 5).unwrap();
        let spec = ModelSpec::logistic(2, 2).with_seed(1);
        let cfg = TrainConfig::constant(3, 4, 0.5, 2);
        let fit = fit(&ds, &spec, &cfg, &CaptureRule::AllSteps).unwrap();
        (ds, spec, cfg, fit)
    }

    #[test]
    fn sampling_rules() {
        let (ds, _, _, fit) = trained(4);
        let t = fit.trace.total_steps();
        assert_eq!(SamplingRule::AllSteps.select(&fit.trace).unwrap().len(), t);
        let picked = SamplingRule::UniformK { k: 3, seed: 1 }.select(&fit.trace).unwrap();
        assert_eq!(picked.len(), 3);
        assert!(picked.windows(2).all(|w| w[0].step < w[1].step));
        assert!(SamplingRule::UniformK { k: t + 1, seed: 1 }.select(&fit.trace).is_err());
        assert!(SamplingRule::UniformK { k: 0, seed: 1 }.select(&fit.trace).is_err());

        let sparse = fit_sparse(&ds);
        match moso_approx(&ds, &sparse, &SamplingRule::Steps(vec![2, 3])) {
            Err(Error::Config(m)) => assert!(m.contains("step 3"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn fit_sparse(ds: &Dataset) -> CheckpointTrace {
        let spec = ModelSpec::logistic(2, 2).with_seed(1);
        let cfg = TrainConfig::constant(3, 4, 0.5, 2);
        fit(ds, &spec, &cfg, &CaptureRule::Every(2)).unwrap().trace
    }

    #[test]
    fn full_coverage_ignores_seed() {
        let (ds, _, _, fit) = trained(6);
        let t = fit.trace.total_steps();
        let a = moso_approx(&ds, &fit.trace, &SamplingRule::UniformK { k: t, seed: 1 }).unwrap();
        let b = moso_approx(&ds, &fit.trace, &SamplingRule::UniformK { k: t, seed: 99 }).unwrap();
        let all = moso_approx(&ds, &fit.trace, &SamplingRule::AllSteps).unwrap();
        assert_eq!(a.scores(), b.scores());
        assert_eq!(a.scores(), all.scores());
    }

    #[test]
    fn grand_is_mean_norm() {
        let (ds, _, _, fit) = trained(4);
        let steps = [fit.trace.entries()[0].step, fit.trace.entries()[3].step];
        let table = grand_score(&ds, &fit.trace, &SamplingRule::Steps(steps.to_vec())).unwrap();
        for s in ds.samples() {
            let n0 = fit.trace.entries()[0].params.grad_sample(s).unwrap().norm();
            let n1 = fit.trace.entries()[3].params.grad_sample(s).unwrap().norm();
            assert_eq!(table.scores()[s.id], (n0 + n1) / 2.0);
            assert!(table.scores()[s.id] >= 0.0);
        }
    }

    #[test]
    fn exact_scores_vanish_without_learning() {
        let ds = generate_blobs(2, 4, 2, 0.5, 5).unwrap();
        let spec = ModelSpec::logistic(2, 2);
        let cfg = TrainConfig::constant(2, 3, 0.0, 0);
        let w0 = init_params(&spec).unwrap();
        let exact = moso_exact(&ds, &spec, &cfg, &w0).unwrap();
        assert!(exact.scores().iter().all(|&s| s == 0.0));
        let rows = approximation_error_probe(&ds, &spec, &cfg, &[1, 3], 100).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.mean_abs_error == 0.0));
    }

    #[test]
    fn exact_guard() {
        let ds = generate_blobs(2, 4, 2, 0.5, 5).unwrap();
        let spec = ModelSpec::logistic(2, 2);
        let cfg = TrainConfig::constant(1, 3, 0.1, 0);
        let w0 = init_params(&spec).unwrap();
        match moso_exact_with_limit(&ds, &spec, &cfg, &w0, 5) {
            Err(Error::Guard(m)) => assert!(m.contains("O(T*n^2)")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flipped_label_scores_lowest_exactly() {
        // 32 blobs, one flipped label, full-batch gradient descent.
        let clean = generate_blobs(2, 16, 2, 0.5, 12).unwrap();
        let mut samples: Vec<Sample> = clean.samples().to_vec();
        samples[7].label = 1 - samples[7].label;
        samples[7].noisy = true;
        let ds = Dataset::new(2, 2, samples).unwrap();
        let spec = ModelSpec::logistic(2, 2).with_seed(3);
        let cfg = TrainConfig::constant(30, 32, 0.5, 4);
        let full = fit(&ds, &spec, &cfg, &CaptureRule::AllSteps).unwrap();
        let exact = moso_exact(&ds, &spec, &cfg, &full.final_params).unwrap();
        assert_eq!(exact.ascending_ids()[0], 7);
        assert!(exact.scores()[7] < 0.0);
        let approx = moso_approx(&ds, &full.trace, &SamplingRule::AllSteps).unwrap();
        assert_eq!(approx.ascending_ids()[0], 7);
    }

    #[test]
    fn noisy_samples_sink_under_approx() {
        let ds = generate_blobs(2, 40, 2, 0.4, 8).unwrap();
        let ds = inject_label_noise(&ds, NoiseConfig { rate: 0.2, seed: 1 }).unwrap();
        let spec = ModelSpec::logistic(2, 2);
        let cfg = TrainConfig::constant(10, 16, 0.5, 1);
        let full = fit(&ds, &spec, &cfg, &CaptureRule::AllSteps).unwrap();
        let t = moso_approx(&ds, &full.trace, &SamplingRule::AllSteps).unwrap();
        let noisy_mean = mean(ds.samples().iter().filter(|s| s.noisy).map(|s| t.scores()[s.id]));
        let clean_mean = mean(ds.samples().iter().filter(|s| !s.noisy).map(|s| t.scores()[s.id]));
        assert!(noisy_mean < clean_mean);
    }

    fn mean(it: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = it.collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn probe_text_round_trip() {
        let rows = vec![
            ProbeRow {
                epochs: 5,
                total_steps: 5,
                mean_abs_error: 0.01,
                mean_abs_exact: 0.02,
                mean_abs_approx: 0.03,
            },
            ProbeRow {
                epochs: 50,
                total_steps: 50,
                mean_abs_error: 0.1,
                mean_abs_exact: 0.2,
                mean_abs_approx: 0.3,
            },
        ];
        assert_eq!(probe_from_text(&probe_to_text(&rows)).unwrap(), rows);
    }
}
