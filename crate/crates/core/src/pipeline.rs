//! End-to-end pruning: stratified partitioning, per-subset surrogate training
//! and scoring, score merging, and pruning at ratio `delta`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, Subset};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::scores::{ScoreMethod, ScoreTable};
use crate::scoring::{el2n_score, grand_score, moso_approx, random_score, SamplingRule};
use crate::seed::derive_indexed_seed;
use crate::textio::{self, fmt_f64, parse_f64, parse_usize, Header};
use crate::trainer::{fit, forgetting_counts, CaptureRule, TrainConfig};

/// Assignment of every sample to one of `num_subsets` disjoint subsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    num_subsets: usize,
    assignment: Vec<usize>,
}

impl PartitionPlan {
    pub fn num_subsets(&self) -> usize {
        self.num_subsets
    }

    /// `assignment()[id]` is the subset holding sample `id`.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Ids of each subset, ascending.
    pub fn subsets(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_subsets];
        for (id, &s) in self.assignment.iter().enumerate() {
            out[s].push(id);
        }
        out
    }
}

/// Stratified round-robin partition.
///
/// Ids of each class are shuffled with one seeded stream (classes in order),
/// then dealt to subsets round-robin with the dealer position carried across
/// classes. Each subset therefore holds `floor` or `ceil` of every class's
/// share, and subset sizes differ by at most one.
pub fn make_partition(ds: &Dataset, num_subsets: usize, seed: u64) -> Result<PartitionPlan> {
    if num_subsets == 0 || num_subsets > ds.len() {
        return Err(Error::arg(format!(
            "number of subsets {num_subsets} must be in 1..={}",
            ds.len()
        )));
    }
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for s in ds.samples() {
        by_class[s.label].push(s.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; ds.len()];
    let mut dealer = 0;
    for ids in &mut by_class {
        ids.shuffle(&mut rng);
        for &id in ids.iter() {
            assignment[id] = dealer;
            dealer = (dealer + 1) % num_subsets;
        }
    }
    Ok(PartitionPlan {
        num_subsets,
        assignment,
    })
}

/// Seeds for the surrogate trained on subset `index` of a plan with
/// `num_subsets` subsets. A single subset keeps the base seeds unchanged.
pub fn subset_seeds(spec: &ModelSpec, cfg: &TrainConfig, index: usize, num_subsets: usize) -> (u64, u64) {
    if num_subsets == 1 {
        (spec.init_seed, cfg.shuffle_seed)
    } else {
        (
            derive_indexed_seed(spec.init_seed, "subset-init", index),
            derive_indexed_seed(cfg.shuffle_seed, "subset-shuffle", index),
        )
    }
}

/// Scores every sample of `ds`, one surrogate per subset of `plan`.
///
/// For each subset a surrogate is trained on that subset alone and its samples
/// are scored within it. With a single subset the result is identical to
/// scoring the full dataset directly.
pub fn score_pipeline(
    ds: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    plan: &PartitionPlan,
    rule: &SamplingRule,
    method: ScoreMethod,
) -> Result<ScoreTable> {
    if method == ScoreMethod::MosoExact {
        return Err(Error::config(
            "the pipeline does not run leave-one-out retraining; use the oracle",
        ));
    }
    if plan.assignment.len() != ds.len() {
        return Err(Error::config("partition plan does not match dataset size"));
    }
    let subsets = plan.subsets();
    if let Some((i, s)) = subsets.iter().enumerate().find(|(_, s)| s.len() < 2) {
        return Err(Error::config(format!(
            "subset {i} has {} sample(s); each subset needs at least 2 to train and score",
            s.len()
        )));
    }
    let i_count = plan.num_subsets;

    let per_subset = subsets
        .par_iter()
        .enumerate()
        .map(|(i, ids)| {
            let sub = ds.select(ids)?;
            let (init_seed, shuffle_seed) = subset_seeds(spec, cfg, i, i_count);
            let spec = spec.with_seed(init_seed);
            let cfg = TrainConfig { shuffle_seed, ..*cfg };
            let table = score_direct(&sub.dataset, &spec, &cfg, rule, method)?;
            Ok((sub, table))
        })
        .collect::<Result<Vec<(Subset, ScoreTable)>>>()?;

    if i_count == 1 {
        return Ok(per_subset.into_iter().next().expect("one subset").1);
    }

    let mut merged = vec![f64::NAN; ds.len()];
    let mut configs = Vec::with_capacity(i_count);
    for (sub, table) in &per_subset {
        for (local, &origin) in sub.origin_ids.iter().enumerate() {
            merged[origin] = table.scores()[local];
        }
        configs.push(table.config().to_string());
    }
    ScoreTable::new(method, format!("partitions={i_count};{}", configs.join("|")), merged)
}

/// Trains one surrogate on `ds` and scores it with `method`.
pub fn score_direct(
    ds: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    rule: &SamplingRule,
    method: ScoreMethod,
) -> Result<ScoreTable> {
    match method {
        ScoreMethod::Random => random_score(ds, cfg.shuffle_seed),
        ScoreMethod::MosoExact => Err(Error::config("exact MoSo is not a pipeline method")),
        ScoreMethod::MosoApprox | ScoreMethod::Grand | ScoreMethod::El2n | ScoreMethod::Forgetting => {
            let capture = match method {
                ScoreMethod::MosoApprox | ScoreMethod::Grand => CaptureRule::AllSteps,
                _ => CaptureRule::none(),
            };
            let result = fit(ds, spec, cfg, &capture)?;
            match method {
                ScoreMethod::MosoApprox => moso_approx(ds, &result.trace, rule),
                ScoreMethod::Grand => grand_score(ds, &result.trace, rule),
                ScoreMethod::El2n => el2n_score(ds, &result.final_params),
                _ => forgetting_counts(&result),
            }
        }
    }
}

/// The kept part of a dataset after pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct Coreset {
    /// Kept sample ids, ascending.
    pub kept: Vec<usize>,
    pub source_digest: String,
    pub delta: f64,
    pub method: ScoreMethod,
}

impl Coreset {
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "#moso-coreset v1 delta={} method={} source={}\n",
            fmt_f64(self.delta),
            self.method,
            self.source_digest
        );
        for id in &self.kept {
            writeln!(out, "{id}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (header_line, body) = textio::content_lines(text)?;
        let header = Header::parse(header_line, "coreset", 1)?;
        let delta = parse_f64(header.get("delta", 1)?, 1)?;
        let method = header
            .get("method", 1)?
            .parse()
            .map_err(|e: Error| Error::parse(1, e.to_string()))?;
        let source_digest = header.get("source", 1)?.to_string();
        let mut kept = Vec::with_capacity(body.len());
        for (lineno, line) in body {
            let id = parse_usize(line, lineno)?;
            if kept.last().is_some_and(|&prev| prev >= id) {
                return Err(Error::parse(lineno, "coreset ids must be strictly ascending"));
            }
            kept.push(id);
        }
        Ok(Coreset {
            kept,
            source_digest,
            delta,
            method,
        })
    }
}

pub fn read_coreset(path: &Path) -> Result<Coreset> {
    Coreset::from_text(&textio::read_file(path)?)
}

pub fn write_coreset(coreset: &Coreset, path: &Path) -> Result<()> {
    textio::write_file(path, &coreset.to_text())
}

/// Number of samples removed at ratio `delta`: `floor(delta * N)`.
pub fn prune_count(delta: f64, n: usize) -> usize {
    (delta * n as f64).floor() as usize
}

/// Removes the `floor(delta * N)` lowest-scored samples (ties: lower id first).
pub fn prune(ds: &Dataset, scores: &ScoreTable, delta: f64) -> Result<Coreset> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::arg("delta must be >= 0"));
    }
    if delta >= 1.0 {
        return Err(Error::arg("delta must be < 1"));
    }
    if scores.len() != ds.len() {
        return Err(Error::arg(format!(
            "score table covers {} ids, dataset has {}",
            scores.len(),
            ds.len()
        )));
    }
    let removed = prune_count(delta, ds.len());
    let mut kept = scores.ascending_ids().split_off(removed);
    kept.sort_unstable();
    Ok(Coreset {
        kept,
        source_digest: ds.digest(),
        delta,
        method: scores.method(),
    })
}

/// The coreset's samples as a new dataset with contiguous ids.
pub fn materialize(ds: &Dataset, coreset: &Coreset) -> Result<Subset> {
    if coreset.source_digest != ds.digest() {
        return Err(Error::arg(format!(
            "coreset was built from dataset {} but this dataset is {}",
            coreset.source_digest,
            ds.digest()
        )));
    }
    ds.select(&coreset.kept)
}
