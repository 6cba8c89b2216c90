//! Deterministic mini-batch SGD with checkpoint capture.
//!
//! Every epoch draws a fresh permutation from one ChaCha8 stream seeded by
//! `shuffle_seed`, cuts it into batches of `batch_size` (the last one may be
//! short) and applies `w_t = w_{t-1} - eta_t * mean_grad(B_t, w_{t-1})`.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelParams, ModelSpec};
use crate::scores::{ScoreMethod, ScoreTable};
use crate::textio::{self, fmt_f64, parse_f64, parse_usize, Header};

/// Learning-rate schedule over steps `1..=T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant {
        eta: f64,
    },
    /// Multiply by `factor` every `drop_every` epochs.
    Step {
        eta: f64,
        drop_every: usize,
        factor: f64,
    },
    /// Cosine annealing from `eta_max` at step 1 towards `eta_min`.
    Cosine {
        eta_max: f64,
        eta_min: f64,
    },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let ok_rate = |r: f64| r.is_finite() && r >= 0.0;
        let valid = match *self {
            Schedule::Constant { eta } => ok_rate(eta),
            Schedule::Step {
                eta,
                drop_every,
                factor,
            } => ok_rate(eta) && drop_every >= 1 && factor.is_finite() && factor > 0.0,
            Schedule::Cosine { eta_max, eta_min } => ok_rate(eta_max) && ok_rate(eta_min) && eta_min <= eta_max,
        };
        if valid {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid learning-rate schedule {self}")))
        }
    }

    /// Rate at 1-based step `t` of `total_steps`, with `steps_per_epoch` steps per epoch.
    pub fn rate(&self, t: usize, steps_per_epoch: usize, total_steps: usize) -> f64 {
        match *self {
            Schedule::Constant { eta } => eta,
            Schedule::Step {
                eta,
                drop_every,
                factor,
            } => {
                let epoch = (t - 1) / steps_per_epoch;
                eta * factor.powi((epoch / drop_every) as i32)
            }
            Schedule::Cosine { eta_max, eta_min } => {
                let progress = (t - 1) as f64 / total_steps as f64;
                eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    /// Same schedule with every rate multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Schedule {
        match *self {
            Schedule::Constant { eta } => Schedule::Constant { eta: eta * c },
            Schedule::Step {
                eta,
                drop_every,
                factor,
            } => Schedule::Step {
                eta: eta * c,
                drop_every,
                factor,
            },
            Schedule::Cosine { eta_max, eta_min } => Schedule::Cosine {
                eta_max: eta_max * c,
                eta_min: eta_min * c,
            },
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Schedule::Constant { eta } => write!(f, "constant({})", fmt_f64(eta)),
            Schedule::Step {
                eta,
                drop_every,
                factor,
            } => write!(f, "step({},{drop_every},{})", fmt_f64(eta), fmt_f64(factor)),
            Schedule::Cosine { eta_max, eta_min } => {
                write!(f, "cosine({},{})", fmt_f64(eta_max), fmt_f64(eta_min))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Clamped to the training-set size.
    pub batch_size: usize,
    pub schedule: Schedule,
    pub shuffle_seed: u64,
}

impl TrainConfig {
    pub fn constant(epochs: usize, batch_size: usize, eta: f64, shuffle_seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            schedule: Schedule::Constant { eta },
            shuffle_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be at least 1"));
        }
        self.schedule.validate()
    }

    pub fn effective_batch(&self, n: usize) -> usize {
        self.batch_size.min(n).max(1)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.effective_batch(n))
    }

    /// `T = epochs * ceil(N / batch)`.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }

    /// Rate used at 1-based step `t` for a training set of size `n`.
    pub fn rate_at(&self, t: usize, n: usize) -> f64 {
        self.schedule.rate(t, self.steps_per_epoch(n), self.total_steps(n))
    }

    pub fn describe(&self) -> String {
        format!(
            "epochs={};batch={};schedule={};shuffle_seed={}",
            self.epochs, self.batch_size, self.schedule, self.shuffle_seed
        )
    }
}

/// The batches of every step, as positions into a training view of size `n`.
///
/// `batch_plan(n, cfg)[t - 1]` is `B_t`.
pub fn batch_plan(n: usize, cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let batch = cfg.effective_batch(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut plan = Vec::with_capacity(cfg.total_steps(n));
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        plan.extend(order.chunks(batch).map(<[usize]>::to_vec));
    }
    plan
}

/// Which steps end up in the checkpoint trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CaptureRule {
    AllSteps,
    /// Steps `k, 2k, 3k, ...`.
    Every(usize),
    /// An explicit, strictly increasing list of steps.
    Steps(Vec<usize>),
}

impl CaptureRule {
    pub fn none() -> Self {
        CaptureRule::Steps(Vec::new())
    }

    fn validate(&self) -> Result<()> {
        match self {
            CaptureRule::AllSteps => Ok(()),
            CaptureRule::Every(0) => Err(Error::arg("capture interval must be at least 1")),
            CaptureRule::Every(_) => Ok(()),
            CaptureRule::Steps(steps) => {
                if steps.windows(2).any(|w| w[0] >= w[1]) || steps.first() == Some(&0) {
                    Err(Error::arg("capture steps must be strictly increasing and >= 1"))
                } else {
                    Ok(())
                }
            }
        }
    }

    fn captures(&self, t: usize) -> bool {
        match self {
            CaptureRule::AllSteps => true,
            CaptureRule::Every(k) => t.is_multiple_of(*k),
            CaptureRule::Steps(steps) => steps.binary_search(&t).is_ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// 1-based step index.
    pub step: usize,
    pub eta: f64,
    /// Parameters after the update of this step.
    pub params: ModelParams,
}

/// Parameters and learning rates recorded during surrogate training.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTrace {
    entries: Vec<Checkpoint>,
    total_steps: usize,
    train_size: usize,
}

impl CheckpointTrace {
    pub fn new(entries: Vec<Checkpoint>, total_steps: usize, train_size: usize) -> Result<Self> {
        if entries.windows(2).any(|w| w[0].step >= w[1].step) {
            return Err(Error::arg("checkpoint steps must be strictly increasing"));
        }
        if entries.iter().any(|e| e.step == 0 || e.step > total_steps) {
            return Err(Error::arg(format!("checkpoint step outside 1..={total_steps}")));
        }
        Ok(CheckpointTrace {
            entries,
            total_steps,
            train_size,
        })
    }

    pub fn entries(&self) -> &[Checkpoint] {
        &self.entries
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn train_size(&self) -> usize {
        self.train_size
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, step: usize) -> Option<&Checkpoint> {
        self.entries
            .binary_search_by_key(&step, |e| e.step)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn captures_all_steps(&self) -> bool {
        self.entries.len() == self.total_steps
    }

    /// Copy of the trace with every learning rate multiplied by `c`.
    pub fn with_scaled_rates(&self, c: f64) -> CheckpointTrace {
        CheckpointTrace {
            entries: self
                .entries
                .iter()
                .map(|e| Checkpoint {
                    eta: e.eta * c,
                    ..e.clone()
                })
                .collect(),
            ..*self
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "#moso-trace v1 T={} N={} count={}\n",
            self.total_steps,
            self.train_size,
            self.entries.len()
        );
        for e in &self.entries {
            out.push_str(&format!("t={} eta={}\n", e.step, fmt_f64(e.eta)));
            out.push_str(&e.params.to_text());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (header_line, body) = textio::content_lines(text)?;
        let header = Header::parse(header_line, "trace", 1)?;
        let total_steps = header.usize("T", 1)?;
        let train_size = header.usize("N", 1)?;
        let count = header.usize("count", 1)?;
        let mut entries = Vec::with_capacity(count);
        let mut i = 0;
        while i < body.len() {
            let (lineno, line) = body[i];
            let (step, eta) = parse_step_line(line, lineno)?;
            let block: Vec<&str> = body[i + 1..].iter().map(|(_, l)| *l).collect();
            let block_line = body.get(i + 1).map_or(lineno + 1, |(l, _)| *l);
            let (params, used) = ModelParams::parse_block(&block, block_line)?;
            entries.push(Checkpoint { step, eta, params });
            i += 1 + used;
        }
        if entries.len() != count {
            return Err(Error::parse(
                1,
                format!("header count={count}, found {}", entries.len()),
            ));
        }
        CheckpointTrace::new(entries, total_steps, train_size).map_err(|e| Error::parse(1, e.to_string()))
    }
}

fn parse_step_line(line: &str, lineno: usize) -> Result<(usize, f64)> {
    let mut step = None;
    let mut eta = None;
    for part in line.split_whitespace() {
        match part.split_once('=') {
            Some(("t", v)) => step = Some(parse_usize(v, lineno)?),
            Some(("eta", v)) => eta = Some(parse_f64(v, lineno)?),
            _ => return Err(Error::parse(lineno, format!("unexpected field {part:?} in step line"))),
        }
    }
    match (step, eta) {
        (Some(s), Some(e)) => Ok((s, e)),
        _ => Err(Error::parse(lineno, "step line needs t= and eta=")),
    }
}

pub fn read_trace(path: &Path) -> Result<CheckpointTrace> {
    CheckpointTrace::from_text(&textio::read_file(path)?)
}

pub fn write_trace(trace: &CheckpointTrace, path: &Path) -> Result<()> {
    textio::write_file(path, &trace.to_text())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub final_params: ModelParams,
    pub trace: CheckpointTrace,
    /// `correctness[i][e]`: sample `i` predicted correctly at the end of epoch `e`.
    pub correctness: Vec<Vec<bool>>,
}

impl FitResult {
    /// Full textual form: trace, final parameters, and correctness history.
    pub fn to_text(&self) -> String {
        let mut out = self.trace.to_text();
        out.push_str(&self.final_params.to_text());
        for row in &self.correctness {
            out.extend(row.iter().map(|&c| if c { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }
}

/// Trains a freshly initialized model on `ds`.
pub fn fit(ds: &Dataset, spec: &ModelSpec, cfg: &TrainConfig, capture: &CaptureRule) -> Result<FitResult> {
    check_compat(ds, spec)?;
    let view: Vec<&Sample> = ds.samples().iter().collect();
    fit_view(&view, spec, cfg, capture, true)
}

/// Trains on every sample except `excluded_id`, with the same initialization
/// and shuffle seed as the full-set run (permutations are drawn over `N - 1`
/// positions).
pub fn retrain_without(ds: &Dataset, excluded_id: usize, spec: &ModelSpec, cfg: &TrainConfig) -> Result<ModelParams> {
    check_compat(ds, spec)?;
    if excluded_id >= ds.len() {
        return Err(Error::arg(format!("sample id {excluded_id} not in dataset")));
    }
    if ds.len() == 1 {
        return Err(Error::arg("cannot train on empty set"));
    }
    let view: Vec<&Sample> = ds.samples().iter().filter(|s| s.id != excluded_id).collect();
    Ok(fit_view(&view, spec, cfg, &CaptureRule::none(), false)?.final_params)
}

fn check_compat(ds: &Dataset, spec: &ModelSpec) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::arg("cannot train on empty set"));
    }
    if ds.dim() != spec.dim || ds.num_classes() != spec.num_classes {
        return Err(Error::arg(format!(
            "model expects d={} K={}, dataset has d={} K={}",
            spec.dim,
            spec.num_classes,
            ds.dim(),
            ds.num_classes()
        )));
    }
    Ok(())
}

pub(crate) fn fit_view(
    view: &[&Sample],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    capture: &CaptureRule,
    track_history: bool,
) -> Result<FitResult> {
    cfg.validate()?;
    capture.validate()?;
    let n = view.len();
    if n == 0 {
        return Err(Error::arg("cannot train on empty set"));
    }
    let total_steps = cfg.total_steps(n);
    let steps_per_epoch = cfg.steps_per_epoch(n);
    let mut params = init_params(spec)?;
    let mut entries = Vec::new();
    let mut correctness = if track_history {
        vec![Vec::with_capacity(cfg.epochs); n]
    } else {
        Vec::new()
    };

    for (t0, batch) in batch_plan(n, cfg).into_iter().enumerate() {
        let t = t0 + 1;
        let eta = cfg.rate_at(t, n);
        let grad = params.grad_mean(batch.iter().map(|&i| view[i]))?;
        for (w, g) in params.theta_mut().iter_mut().zip(&grad.0) {
            *w -= eta * g;
        }
        if params.theta().iter().any(|w| !w.is_finite()) {
            return Err(Error::Runtime(format!(
                "training diverged at step {t}; lower the learning rate"
            )));
        }
        if capture.captures(t) {
            entries.push(Checkpoint {
                step: t,
                eta,
                params: params.clone(),
            });
        }
        if track_history && t % steps_per_epoch == 0 {
            for (row, s) in correctness.iter_mut().zip(view) {
                row.push(params.predict(&s.features)? == s.label);
            }
        }
    }

    Ok(FitResult {
        final_params: params,
        trace: CheckpointTrace::new(entries, total_steps, n)?,
        correctness,
    })
}

/// Number of correct→incorrect transitions between consecutive epochs per
/// sample; samples never predicted correctly score `epochs`.
pub fn forgetting_counts(result: &FitResult) -> Result<ScoreTable> {
    let epochs = result.correctness.first().map_or(0, Vec::len);
    if result.correctness.iter().any(|r| r.len() != epochs) {
        return Err(Error::arg("correctness history rows have unequal lengths"));
    }
    let scores = result
        .correctness
        .iter()
        .map(|row| forgetting_events(row) as f64)
        .collect();
    ScoreTable::new(ScoreMethod::Forgetting, format!("epochs={epochs}"), scores)
}

/// Forgetting events in one correctness history.
pub fn forgetting_events(history: &[bool]) -> usize {
    if !history.iter().any(|&c| c) {
        return history.len();
    }
    history.windows(2).filter(|w| w[0] && !w[1]).count()
}
