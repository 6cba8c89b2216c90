//! Command-line front end.
//!
//! Every subcommand reads named input files and writes named output files.
//! Each output ends with `#manifest key=value` comment lines recording the
//! subcommand, version, global seed and every resolved flag.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{generate_blobs, inject_label_noise, read_dataset, split, Dataset, NoiseConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_coreset, noise_detection, plot_data_to_csv, spearman, EvalReport, PlotRow};
use crate::model::{ModelKind, ModelSpec};
use crate::pipeline::{make_partition, prune, read_coreset, score_pipeline};
use crate::scores::{read_scores, ScoreMethod};
use crate::scoring::{approximation_error_probe, moso_approx, moso_exact_with_limit, probe_to_text, SamplingRule};
use crate::seed::derive_seed;
use crate::textio::fmt_f64;
use crate::trainer::{fit, CaptureRule, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_GUARD: i32 = 3;
pub const EXIT_PARSE: i32 = 4;

const DEFAULT_DELTAS: &str = "0.2,0.3,0.4,0.5,0.6,0.7,0.8";

#[derive(Debug, Parser)]
#[command(name = "moso", version, about = "Moving-one-Sample-out data pruning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic blobs dataset (optionally noisy) and a held-out test split.
    Generate(GenerateArgs),
    /// Train surrogates and score every training sample.
    Score(ScoreArgs),
    /// Prune the lowest-scored fraction of a dataset.
    Prune(PruneArgs),
    /// Retrain on a coreset and report held-out accuracy.
    Eval(EvalArgs),
    /// Sweep methods and pruning ratios into a plot-data grid.
    Compare(CompareArgs),
    /// Compare exact leave-one-out scores with the gradient approximation.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Global seed; component seeds are derived from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "logistic", value_parser = parse_kind)]
    pub model: ModelKind,
    /// Hidden width of the mlp model.
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Constant learning rate.
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub init_scale: f64,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 125)]
    pub per_class: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.5)]
    pub spread: f64,
    /// Symmetric label-noise rate applied to the training split.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Training split output.
    #[arg(long)]
    pub out: PathBuf,
    /// Test split output.
    #[arg(long)]
    pub test_out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// moso | grand | el2n | forgetting | random
    #[arg(long, default_value = "moso", value_parser = parse_method)]
    pub method: ScoreMethod,
    #[arg(long, default_value_t = 1)]
    pub partitions: usize,
    /// Checkpoints sampled per surrogate (0 = all steps).
    #[arg(long, default_value_t = 10)]
    pub sample_steps: usize,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub delta: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Training set the coreset was pruned from.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub coreset: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Also report noise detection for this score table.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub bottom_fraction: f64,
    /// Record wall-clock phase timings (makes the report non-reproducible).
    #[arg(long)]
    pub timings: bool,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Comma-separated methods.
    #[arg(long, default_value = "moso,grand,el2n,forgetting,random")]
    pub methods: String,
    /// Comma-separated pruning ratios.
    #[arg(long, default_value = DEFAULT_DELTAS)]
    pub deltas: String,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub partitions: usize,
    #[arg(long, default_value_t = 10)]
    pub sample_steps: usize,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Refuse datasets larger than this (one retraining per sample).
    #[arg(long, default_value_t = 2000)]
    pub max_samples: usize,
    /// Comma-separated epoch budgets for the error-vs-T probe (empty to skip).
    #[arg(long, default_value = "5,50")]
    pub probe_epochs: String,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub common: Common,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<ScoreMethod, String> {
    let m = if s == "moso" {
        ScoreMethod::MosoApprox
    } else {
        s.parse().map_err(|e: Error| e.to_string())?
    };
    if m == ScoreMethod::MosoExact {
        return Err("moso_exact is only available through the oracle subcommand".into());
    }
    Ok(m)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|_| Error::arg(format!("invalid {what} {x:?}"))))
        .collect()
}

/// Self-description embedded in every output file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub flags: Vec<(String, String)>,
}

impl RunManifest {
    fn new(subcommand: &'static str, seed: Option<u64>) -> Self {
        RunManifest {
            subcommand,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            flags: Vec::new(),
        }
    }

    fn flag(mut self, name: &str, value: impl ToString) -> Self {
        self.flags.push((name.to_string(), value.to_string()));
        self
    }

    fn train(self, t: &TrainArgs) -> Self {
        self.flag("model", t.model)
            .flag("hidden", t.hidden)
            .flag("epochs", t.epochs)
            .flag("batch", t.batch)
            .flag("eta", fmt_f64(t.eta))
            .flag("init-scale", fmt_f64(t.init_scale))
    }

    /// Trailing `#manifest` comment lines.
    pub fn to_comment(&self) -> String {
        let mut out = format!(
            "#manifest subcommand={}\n#manifest version={}\n",
            self.subcommand, self.version
        );
        if let Some(seed) = self.seed {
            out.push_str(&format!("#manifest seed={seed}\n"));
        }
        for (k, v) in &self.flags {
            out.push_str(&format!("#manifest flag.{k}={v}\n"));
        }
        out
    }
}

fn write_output(path: &Path, body: &str, manifest: &RunManifest) -> Result<()> {
    let mut text = String::with_capacity(body.len() + 256);
    text.push_str(body);
    text.push_str(&manifest.to_comment());
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Component seeds fanned out from the global seed.
struct Seeds {
    init: u64,
    shuffle: u64,
    sampling: u64,
    partition: u64,
}

impl Seeds {
    fn from(seed: u64) -> Self {
        Seeds {
            init: derive_seed(seed, "init"),
            shuffle: derive_seed(seed, "shuffle"),
            sampling: derive_seed(seed, "sampling"),
            partition: derive_seed(seed, "partition"),
        }
    }
}

fn model_spec(t: &TrainArgs, ds: &Dataset, seeds: &Seeds) -> ModelSpec {
    ModelSpec {
        kind: t.model,
        dim: ds.dim(),
        num_classes: ds.num_classes(),
        hidden: if t.model == ModelKind::Mlp { t.hidden } else { 0 },
        init_seed: seeds.init,
        init_scale: t.init_scale,
    }
}

fn train_config(t: &TrainArgs, seeds: &Seeds) -> TrainConfig {
    TrainConfig::constant(t.epochs, t.batch, t.eta, seeds.shuffle)
}

/// Sampling rule for `k` requested steps, clamped to the smallest subset's step count.
fn sampling_rule(k: usize, seeds: &Seeds, cfg: &TrainConfig, min_subset: usize) -> SamplingRule {
    if k == 0 {
        return SamplingRule::AllSteps;
    }
    let t = cfg.total_steps(min_subset.max(1));
    SamplingRule::UniformK {
        k: k.min(t),
        seed: seeds.sampling,
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Runtime(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let ds = generate_blobs(
        a.classes,
        a.per_class,
        a.dim,
        a.spread,
        derive_seed(a.common.seed, "data"),
    )?;
    let (train, test) = split(&ds, a.train_fraction, derive_seed(a.common.seed, "split"))?;
    let train = inject_label_noise(
        &train.dataset,
        NoiseConfig {
            rate: a.noise,
            seed: derive_seed(a.common.seed, "noise"),
        },
    )?;
    let manifest = RunManifest::new("generate", Some(a.common.seed))
        .flag("classes", a.classes)
        .flag("per-class", a.per_class)
        .flag("dim", a.dim)
        .flag("spread", fmt_f64(a.spread))
        .flag("noise", fmt_f64(a.noise))
        .flag("train-fraction", fmt_f64(a.train_fraction))
        .flag("out", a.out.display())
        .flag("test-out", a.test_out.display());
    write_output(&a.out, &train.to_text(), &manifest)?;
    write_output(&a.test_out, &test.dataset.to_text(), &manifest)
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let seeds = Seeds::from(a.common.seed);
    let spec = model_spec(&a.train, &ds, &seeds);
    let cfg = train_config(&a.train, &seeds);
    let plan = make_partition(&ds, a.partitions, seeds.partition)?;
    let min_subset = ds.len() / a.partitions;
    let rule = sampling_rule(a.sample_steps, &seeds, &cfg, min_subset);
    let table = with_pool(a.common.jobs, || {
        score_pipeline(&ds, &spec, &cfg, &plan, &rule, a.method)
    })?;
    let manifest = RunManifest::new("score", Some(a.common.seed))
        .flag("data", a.data.display())
        .flag("method", a.method)
        .flag("partitions", a.partitions)
        .flag("sample-steps", a.sample_steps)
        .train(&a.train)
        .flag("jobs", a.common.jobs)
        .flag("out", a.out.display());
    write_output(&a.out, &table.to_text(), &manifest)
}

fn cmd_prune(a: &PruneArgs) -> Result<()> {
    if a.delta >= 1.0 {
        return Err(Error::arg("delta must be < 1"));
    }
    let ds = read_dataset(&a.data)?;
    let scores = read_scores(&a.scores)?;
    let coreset = prune(&ds, &scores, a.delta)?;
    let manifest = RunManifest::new("prune", None)
        .flag("data", a.data.display())
        .flag("scores", a.scores.display())
        .flag("delta", fmt_f64(a.delta))
        .flag("out", a.out.display());
    write_output(&a.out, &coreset.to_text(), &manifest)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let train = read_dataset(&a.data)?;
    let test = read_dataset(&a.test)?;
    let coreset = read_coreset(&a.coreset)?;
    let seeds = Seeds::from(a.common.seed);
    let spec = model_spec(&a.train, &train, &seeds);
    let cfg = train_config(&a.train, &seeds);
    let mut prune_report = with_pool(a.common.jobs, || {
        evaluate_coreset(&train, &coreset, &test, &spec, &cfg, a.repeats)
    })?;
    if !a.timings {
        prune_report.timings.clear();
    }
    let noise = match &a.scores {
        Some(path) => Some(noise_detection(&read_scores(path)?, &train, a.bottom_fraction)?),
        None => None,
    };
    let report = EvalReport {
        prune: prune_report,
        noise,
    };
    let mut manifest = RunManifest::new("eval", Some(a.common.seed))
        .flag("data", a.data.display())
        .flag("test", a.test.display())
        .flag("coreset", a.coreset.display())
        .flag("repeats", a.repeats);
    if let Some(s) = &a.scores {
        manifest = manifest
            .flag("scores", s.display())
            .flag("bottom-fraction", fmt_f64(a.bottom_fraction));
    }
    let manifest = manifest
        .flag("timings", a.timings)
        .train(&a.train)
        .flag("jobs", a.common.jobs)
        .flag("out", a.out.display());
    write_output(&a.out, &report.to_text(), &manifest)
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let train = read_dataset(&a.data)?;
    let test = read_dataset(&a.test)?;
    let methods = a
        .methods
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(|m| parse_method(m).map_err(Error::Argument))
        .collect::<Result<Vec<_>>>()?;
    let deltas: Vec<f64> = parse_list(&a.deltas, "delta")?;
    if let Some(d) = deltas.iter().find(|d| !(0.0..1.0).contains(*d)) {
        return Err(Error::arg(format!("delta {d} must be in [0, 1)")));
    }
    let seeds = Seeds::from(a.common.seed);
    let spec = model_spec(&a.train, &train, &seeds);
    let cfg = train_config(&a.train, &seeds);
    let plan = make_partition(&train, a.partitions, seeds.partition)?;
    let rule = sampling_rule(a.sample_steps, &seeds, &cfg, train.len() / a.partitions);

    let rows = with_pool(a.common.jobs, || {
        let mut rows = Vec::new();
        for &method in &methods {
            let scores = score_pipeline(&train, &spec, &cfg, &plan, &rule, method);
            for &delta in &deltas {
                let accuracy = scores
                    .as_ref()
                    .ok()
                    .and_then(|s| prune(&train, s, delta).ok())
                    .and_then(|c| evaluate_coreset(&train, &c, &test, &spec, &cfg, a.repeats).ok())
                    .map(|r| r.accuracy);
                rows.push(PlotRow {
                    method,
                    delta,
                    seed: a.common.seed,
                    accuracy,
                });
            }
        }
        Ok(rows)
    })?;
    let manifest = RunManifest::new("compare", Some(a.common.seed))
        .flag("data", a.data.display())
        .flag("test", a.test.display())
        .flag("methods", &a.methods)
        .flag("deltas", &a.deltas)
        .flag("repeats", a.repeats)
        .flag("partitions", a.partitions)
        .flag("sample-steps", a.sample_steps)
        .train(&a.train)
        .flag("jobs", a.common.jobs)
        .flag("out", a.out.display());
    write_output(&a.out, &plot_data_to_csv(&rows), &manifest)
}

fn cmd_oracle(a: &OracleArgs) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    if ds.len() > a.max_samples {
        return Err(Error::Guard(format!(
            "exact MoSo on N={} exceeds --max-samples {}: leave-one-out retraining costs O(T*n^2)",
            ds.len(),
            a.max_samples
        )));
    }
    let budgets: Vec<usize> = parse_list(&a.probe_epochs, "epoch budget")?;
    let seeds = Seeds::from(a.common.seed);
    let spec = model_spec(&a.train, &ds, &seeds);
    let cfg = train_config(&a.train, &seeds);

    let (exact, approx, rho, probe) = with_pool(a.common.jobs, || {
        let full = fit(&ds, &spec, &cfg, &CaptureRule::AllSteps)?;
        let exact = moso_exact_with_limit(&ds, &spec, &cfg, &full.final_params, a.max_samples)?;
        let approx = moso_approx(&ds, &full.trace, &SamplingRule::AllSteps)?;
        let rho = spearman(&exact, &approx)?;
        let probe = if budgets.is_empty() {
            Vec::new()
        } else {
            approximation_error_probe(&ds, &spec, &cfg, &budgets, a.max_samples)?
        };
        Ok((exact, approx, rho, probe))
    })?;

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let manifest = RunManifest::new("oracle", Some(a.common.seed))
        .flag("data", a.data.display())
        .flag("max-samples", a.max_samples)
        .flag("probe-epochs", &a.probe_epochs)
        .train(&a.train)
        .flag("jobs", a.common.jobs)
        .flag("out", a.out.display());
    write_output(&a.out.join("exact.scores"), &exact.to_text(), &manifest)?;
    write_output(&a.out.join("approx.scores"), &approx.to_text(), &manifest)?;
    if !probe.is_empty() {
        write_output(&a.out.join("probe.txt"), &probe_to_text(&probe), &manifest)?;
    }
    let summary = format!(
        "#moso-oracle v1\nn={}\nT={}\nspearman={}\n",
        ds.len(),
        cfg.total_steps(ds.len()),
        fmt_f64(rho)
    );
    write_output(&a.out.join("summary.txt"), &summary, &manifest)
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse { .. } => EXIT_PARSE,
        Error::Argument(_) | Error::Config(_) | Error::Guard(_) => EXIT_GUARD,
        Error::Io { .. } | Error::Runtime(_) => EXIT_RUNTIME,
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Score(a) => cmd_score(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Oracle(a) => cmd_oracle(a),
    }
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I, stderr: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                print!("{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}
