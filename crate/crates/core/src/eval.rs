//! Coreset evaluation, rank agreement and noise-detection diagnostics, plus the
//! `#moso-report v1` and plot-grid CSV formats.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::pipeline::{materialize, Coreset};
use crate::scores::{ScoreMethod, ScoreTable};
use crate::seed::derive_indexed_seed;
use crate::textio::{self, fmt_f64, parse_f64, parse_usize};
use crate::trainer::{fit_view, CaptureRule, TrainConfig};

/// Result of retraining on a coreset and testing on held-out data.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub method: ScoreMethod,
    pub delta: f64,
    pub coreset_size: usize,
    /// Mean test accuracy over repeats.
    pub accuracy: f64,
    /// Sample standard deviation over repeats (0 for a single repeat).
    pub accuracy_sd: f64,
    pub repeat_accuracies: Vec<f64>,
    /// Mean per-class test accuracy; classes absent from the test set report 0.
    pub per_class_accuracy: Vec<f64>,
    /// `(init_seed, shuffle_seed)` of every repeat.
    pub seeds: Vec<(u64, u64)>,
    /// Wall-clock seconds per phase; empty when timings are not recorded.
    pub timings: Vec<(String, f64)>,
}

/// Seeds of evaluation repeat `r`.
pub fn repeat_seeds(spec: &ModelSpec, cfg: &TrainConfig, r: usize) -> (u64, u64) {
    (
        derive_indexed_seed(spec.init_seed, "repeat-init", r),
        derive_indexed_seed(cfg.shuffle_seed, "repeat-shuffle", r),
    )
}

/// Retrains on the materialized coreset `repeats` times and reports test accuracy.
pub fn evaluate_coreset(
    train: &Dataset,
    coreset: &Coreset,
    test: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    repeats: usize,
) -> Result<PruneReport> {
    if repeats == 0 {
        return Err(Error::arg("repeats must be at least 1"));
    }
    if coreset.is_empty() {
        return Err(Error::arg("coreset is empty"));
    }
    if test.is_empty() {
        return Err(Error::arg("test set is empty"));
    }
    if test.dim() != train.dim() || test.num_classes() != train.num_classes() {
        return Err(Error::arg("test set shape differs from training set"));
    }
    let start = Instant::now();
    let sub = materialize(train, coreset)?;
    let view: Vec<&Sample> = sub.dataset.samples().iter().collect();
    let k = train.num_classes();

    let runs = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let seeds = repeat_seeds(spec, cfg, r);
            let spec = spec.with_seed(seeds.0);
            let cfg = TrainConfig {
                shuffle_seed: seeds.1,
                ..*cfg
            };
            let params = fit_view(&view, &spec, &cfg, &CaptureRule::none(), false)?.final_params;
            let mut correct = vec![0usize; k];
            let mut total = vec![0usize; k];
            for s in test.samples() {
                total[s.label] += 1;
                if params.predict(&s.features)? == s.label {
                    correct[s.label] += 1;
                }
            }
            let acc = correct.iter().sum::<usize>() as f64 / test.len() as f64;
            let per_class: Vec<f64> = correct
                .iter()
                .zip(&total)
                .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
                .collect();
            Ok((seeds, acc, per_class))
        })
        .collect::<Result<Vec<_>>>()?;

    let repeat_accuracies: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let (accuracy, accuracy_sd) = mean_sd(&repeat_accuracies);
    let per_class_accuracy = (0..k)
        .map(|c| runs.iter().map(|r| r.2[c]).sum::<f64>() / repeats as f64)
        .collect();
    Ok(PruneReport {
        method: coreset.method,
        delta: coreset.delta,
        coreset_size: coreset.len(),
        accuracy,
        accuracy_sd,
        repeat_accuracies,
        per_class_accuracy,
        seeds: runs.iter().map(|r| r.0).collect(),
        timings: vec![("retrain".to_string(), start.elapsed().as_secs_f64())],
    })
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Spearman rank correlation between two score tables over the same ids.
pub fn spearman(a: &ScoreTable, b: &ScoreTable) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg(format!(
            "score tables cover different id sets ({} vs {} ids)",
            a.len(),
            b.len()
        )));
    }
    spearman_slices(a.scores(), b.scores())
}

/// Pearson correlation of average ranks.
pub fn spearman_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg("inputs differ in length"));
    }
    if a.len() < 2 {
        return Err(Error::arg("rank correlation needs at least 2 values"));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::arg("rank correlation is undefined for a constant input"));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties sharing the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// How many label-noise samples sit among the lowest scores.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDetectReport {
    /// Fraction of samples flagged noisy.
    pub noise_rate: f64,
    pub bottom_fraction: f64,
    /// `floor(bottom_fraction * N)`.
    pub examined: usize,
    pub noisy_total: usize,
    pub noisy_found: usize,
    /// `None` when the dataset has no noisy samples.
    pub recall: Option<f64>,
    /// Expected recall of scores independent of noise.
    pub random_baseline: f64,
}

pub fn noise_detection(scores: &ScoreTable, ds: &Dataset, bottom_fraction: f64) -> Result<NoiseDetectReport> {
    if !(bottom_fraction > 0.0 && bottom_fraction <= 1.0) {
        return Err(Error::arg("bottom_fraction must be in (0, 1]"));
    }
    if scores.len() != ds.len() {
        return Err(Error::arg("score table does not cover the dataset"));
    }
    let n = ds.len();
    let examined = (bottom_fraction * n as f64).floor() as usize;
    let noisy_total = ds.noisy_count();
    let noisy_found = scores.ascending_ids()[..examined]
        .iter()
        .filter(|&&id| ds.samples()[id].noisy)
        .count();
    Ok(NoiseDetectReport {
        noise_rate: noisy_total as f64 / n as f64,
        bottom_fraction,
        examined,
        noisy_total,
        noisy_found,
        recall: (noisy_total > 0).then(|| noisy_found as f64 / noisy_total as f64),
        random_baseline: bottom_fraction,
    })
}

/// Contents of a `#moso-report v1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub prune: PruneReport,
    pub noise: Option<NoiseDetectReport>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let p = &self.prune;
        let mut kv: Vec<(String, String)> = vec![
            ("method".into(), p.method.to_string()),
            ("delta".into(), fmt_f64(p.delta)),
            ("coreset_size".into(), p.coreset_size.to_string()),
            ("accuracy".into(), fmt_f64(p.accuracy)),
            ("accuracy_sd".into(), fmt_f64(p.accuracy_sd)),
            ("repeats".into(), p.repeat_accuracies.len().to_string()),
        ];
        for (r, (acc, (init, shuffle))) in p.repeat_accuracies.iter().zip(&p.seeds).enumerate() {
            kv.push((format!("repeat.{r}.accuracy"), fmt_f64(*acc)));
            kv.push((format!("repeat.{r}.init_seed"), init.to_string()));
            kv.push((format!("repeat.{r}.shuffle_seed"), shuffle.to_string()));
        }
        kv.push(("classes".into(), p.per_class_accuracy.len().to_string()));
        for (c, acc) in p.per_class_accuracy.iter().enumerate() {
            kv.push((format!("class.{c}.accuracy"), fmt_f64(*acc)));
        }
        for (phase, secs) in &p.timings {
            kv.push((format!("time.{phase}"), fmt_f64(*secs)));
        }
        if let Some(n) = &self.noise {
            kv.push(("noise.rate".into(), fmt_f64(n.noise_rate)));
            kv.push(("noise.bottom_fraction".into(), fmt_f64(n.bottom_fraction)));
            kv.push(("noise.examined".into(), n.examined.to_string()));
            kv.push(("noise.noisy_total".into(), n.noisy_total.to_string()));
            kv.push(("noise.noisy_found".into(), n.noisy_found.to_string()));
            kv.push((
                "noise.recall".into(),
                n.recall.map_or_else(|| "na".to_string(), fmt_f64),
            ));
            kv.push(("noise.random_baseline".into(), fmt_f64(n.random_baseline)));
        }
        let mut out = String::from("#moso-report v1\n");
        for (k, v) in kv {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (header, body) = textio::content_lines(text)?;
        if header.trim() != "#moso-report v1" {
            return Err(Error::parse(1, "expected #moso-report v1 header"));
        }
        let mut kv = BTreeMap::new();
        for (lineno, line) in body {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(lineno, "expected key=value"))?;
            if kv.insert(k.to_string(), (lineno, v.to_string())).is_some() {
                return Err(Error::parse(lineno, format!("duplicate key {k}")));
            }
        }
        let get = |k: &str| -> Result<(usize, &str)> {
            kv.get(k)
                .map(|(l, v)| (*l, v.as_str()))
                .ok_or_else(|| Error::parse(1, format!("report missing {k}")))
        };
        let f = |k: &str| -> Result<f64> {
            let (l, v) = get(k)?;
            parse_f64(v, l)
        };
        let u = |k: &str| -> Result<usize> {
            let (l, v) = get(k)?;
            parse_usize(v, l)
        };
        let seed = |k: &str| -> Result<u64> {
            let (l, v) = get(k)?;
            v.parse::<u64>()
                .map_err(|_| Error::parse(l, format!("invalid seed {v:?}")))
        };

        let (ml, mv) = get("method")?;
        let method: ScoreMethod = mv.parse().map_err(|e: Error| Error::parse(ml, e.to_string()))?;
        let repeats = u("repeats")?;
        let mut repeat_accuracies = Vec::with_capacity(repeats);
        let mut seeds = Vec::with_capacity(repeats);
        for r in 0..repeats {
            repeat_accuracies.push(f(&format!("repeat.{r}.accuracy"))?);
            seeds.push((
                seed(&format!("repeat.{r}.init_seed"))?,
                seed(&format!("repeat.{r}.shuffle_seed"))?,
            ));
        }
        let classes = u("classes")?;
        let per_class_accuracy = (0..classes)
            .map(|c| f(&format!("class.{c}.accuracy")))
            .collect::<Result<Vec<_>>>()?;
        let mut timings = Vec::new();
        for (k, (l, v)) in &kv {
            if let Some(phase) = k.strip_prefix("time.") {
                timings.push((phase.to_string(), parse_f64(v, *l)?));
            }
        }
        let noise = if kv.contains_key("noise.rate") {
            let (rl, rv) = get("noise.recall")?;
            let recall = if rv == "na" { None } else { Some(parse_f64(rv, rl)?) };
            Some(NoiseDetectReport {
                noise_rate: f("noise.rate")?,
                bottom_fraction: f("noise.bottom_fraction")?,
                examined: u("noise.examined")?,
                noisy_total: u("noise.noisy_total")?,
                noisy_found: u("noise.noisy_found")?,
                recall,
                random_baseline: f("noise.random_baseline")?,
            })
        } else {
            None
        };
        Ok(EvalReport {
            prune: PruneReport {
                method,
                delta: f("delta")?,
                coreset_size: u("coreset_size")?,
                accuracy: f("accuracy")?,
                accuracy_sd: f("accuracy_sd")?,
                repeat_accuracies,
                per_class_accuracy,
                seeds,
                timings,
            },
            noise,
        })
    }
}

pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    textio::write_file(path, &report.to_text())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    EvalReport::from_text(&textio::read_file(path)?)
}

/// One cell of the method-by-delta accuracy grid; `accuracy` is `None` for a failed run.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub method: ScoreMethod,
    pub delta: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
}

pub fn plot_data_to_csv(rows: &[PlotRow]) -> String {
    let mut out = String::from("method,delta,seed,accuracy\n");
    for r in rows {
        let acc = r.accuracy.map_or_else(|| "null".to_string(), fmt_f64);
        out.push_str(&format!("{},{},{},{}\n", r.method, fmt_f64(r.delta), r.seed, acc));
    }
    out
}

pub fn plot_data_from_csv(text: &str) -> Result<Vec<PlotRow>> {
    let (header, body) = textio::content_lines(text)?;
    if header.trim() != "method,delta,seed,accuracy" {
        return Err(Error::parse(1, "expected CSV header method,delta,seed,accuracy"));
    }
    body.into_iter()
        .map(|(lineno, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::parse(lineno, "expected 4 columns"));
            }
            Ok(PlotRow {
                method: cols[0]
                    .parse()
                    .map_err(|e: Error| Error::parse(lineno, e.to_string()))?,
                delta: parse_f64(cols[1], lineno)?,
                seed: cols[2].parse().map_err(|_| Error::parse(lineno, "invalid seed"))?,
                accuracy: match cols[3] {
                    "null" => None,
                    v => Some(parse_f64(v, lineno)?),
                },
            })
        })
        .collect()
}

pub fn emit_plot_data(rows: &[PlotRow], path: &Path) -> Result<()> {
    textio::write_file(path, &plot_data_to_csv(rows))
}
