//! Datasets: validated sample tables, synthetic Gaussian blobs, symmetric
//! label noise, seeded splits and the `#moso-dataset v1` text format.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::short_digest;
use crate::textio::{self, fmt_f64, parse_f64, parse_usize, Header};

/// One labelled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
    /// True iff label-noise injection changed this sample's label.
    pub noisy: bool,
}

/// An immutable, validated table of samples with ids `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    /// Builds a dataset, checking every structural invariant.
    pub fn new(dim: usize, num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::arg("a dataset needs at least 2 classes"));
        }
        if dim == 0 {
            return Err(Error::arg("feature dimension must be at least 1"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.id != i {
                return Err(Error::arg(format!("sample at position {i} has id {}", s.id)));
            }
            if s.features.len() != dim {
                return Err(Error::arg(format!(
                    "sample {i} has {} features, expected {dim}",
                    s.features.len()
                )));
            }
            if s.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::arg(format!("sample {i} has a non-finite feature")));
            }
            if s.label >= num_classes {
                return Err(Error::arg(format!(
                    "sample {i} has label {} but K = {num_classes}",
                    s.label
                )));
            }
        }
        Ok(Dataset {
            samples,
            dim,
            num_classes,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, id: usize) -> Option<&Sample> {
        self.samples.get(id)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn noisy_count(&self) -> usize {
        self.samples.iter().filter(|s| s.noisy).count()
    }

    /// Builds a new dataset from the samples at `ids` (in the given order),
    /// re-indexing them contiguously.
    pub fn select(&self, ids: &[usize]) -> Result<Subset> {
        let mut samples = Vec::with_capacity(ids.len());
        for (new_id, &id) in ids.iter().enumerate() {
            let s = self
                .sample(id)
                .ok_or_else(|| Error::arg(format!("sample id {id} not in dataset")))?;
            samples.push(Sample {
                id: new_id,
                ..s.clone()
            });
        }
        Ok(Subset {
            dataset: Dataset {
                samples,
                dim: self.dim,
                num_classes: self.num_classes,
            },
            origin_ids: ids.to_vec(),
        })
    }

    /// Serializes to the `#moso-dataset v1` text format.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "#moso-dataset v1 d={} K={} N={}\n",
            self.dim,
            self.num_classes,
            self.len()
        );
        for s in &self.samples {
            write!(out, "{},{},{}", s.id, s.label, u8::from(s.noisy)).unwrap();
            for x in &s.features {
                out.push(',');
                out.push_str(&fmt_f64(*x));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (header_line, body) = textio::content_lines(text)?;
        let header = Header::parse(header_line, "dataset", 1)?;
        let dim = header.usize("d", 1)?;
        let num_classes = header.usize("K", 1)?;
        let n = header.usize("N", 1)?;
        if num_classes < 2 || dim == 0 {
            return Err(Error::parse(1, "header requires d >= 1 and K >= 2"));
        }
        if body.len() != n {
            let line = body.last().map_or(1, |(l, _)| *l);
            return Err(Error::parse(
                line,
                format!("header declares N={n} but found {} rows", body.len()),
            ));
        }
        let mut samples = Vec::with_capacity(n);
        for (expected_id, (lineno, line)) in body.into_iter().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 + dim {
                return Err(Error::parse(
                    lineno,
                    format!(
                        "expected {} fields (id,label,noisy + {dim} features), found {}",
                        3 + dim,
                        fields.len()
                    ),
                ));
            }
            let id = parse_usize(fields[0], lineno)?;
            if id != expected_id {
                return Err(Error::parse(lineno, format!("expected id {expected_id}, found {id}")));
            }
            let label = parse_usize(fields[1], lineno)?;
            if label >= num_classes {
                return Err(Error::parse(
                    lineno,
                    format!("label {label} out of range for K={num_classes}"),
                ));
            }
            let noisy = match fields[2].trim() {
                "0" => false,
                "1" => true,
                other => return Err(Error::parse(lineno, format!("invalid noisy flag {other:?}"))),
            };
            let features = fields[3..]
                .iter()
                .map(|f| {
                    let x = parse_f64(f, lineno)?;
                    if x.is_finite() {
                        Ok(x)
                    } else {
                        Err(Error::parse(lineno, "non-finite feature"))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                id,
                features,
                label,
                noisy,
            });
        }
        Ok(Dataset {
            samples,
            dim,
            num_classes,
        })
    }

    /// Content digest of the serialized dataset.
    pub fn digest(&self) -> String {
        short_digest(self.to_text().as_bytes())
    }
}

/// A dataset carved out of another one, with the original id of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub dataset: Dataset,
    /// `origin_ids[new_id]` is the id of the sample in the source dataset.
    pub origin_ids: Vec<usize>,
}

/// Symmetric label-noise settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub rate: f64,
    pub seed: u64,
}

/// Generates `num_classes` isotropic Gaussian clusters of `per_class` points each.
///
/// Cluster centres are drawn uniformly in `[-2, 2]^dim` and rejected while
/// closer than 1.5 to an earlier centre (bounded number of attempts). Sample
/// order is shuffled so ids carry no class information.
pub fn generate_blobs(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::arg("num_classes must be at least 2"));
    }
    if per_class < 1 {
        return Err(Error::arg("per_class must be at least 1"));
    }
    if dim < 1 {
        return Err(Error::arg("dim must be at least 1"));
    }
    if !(spread.is_finite() && spread > 0.0) {
        return Err(Error::arg("spread must be a positive finite number"));
    }

    const MIN_SEPARATION: f64 = 1.5;
    const MAX_ATTEMPTS: usize = 1000;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..MAX_ATTEMPTS {
            let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let nearest = centres.iter().map(|o| euclidean(o, &c)).fold(f64::INFINITY, f64::min);
            if nearest >= MIN_SEPARATION {
                best = Some((nearest, c));
                break;
            }
            if best.as_ref().is_none_or(|(d, _)| nearest > *d) {
                best = Some((nearest, c));
            }
        }
        centres.push(best.expect("at least one attempt").1);
    }

    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(num_classes * per_class);
    for (label, centre) in centres.iter().enumerate() {
        for _ in 0..per_class {
            let x = centre
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + spread * z
                })
                .collect();
            rows.push((label, x));
        }
    }
    rows.shuffle(&mut rng);

    let samples = rows
        .into_iter()
        .enumerate()
        .map(|(id, (label, features))| Sample {
            id,
            features,
            label,
            noisy: false,
        })
        .collect();
    Dataset::new(dim, num_classes, samples)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Redraws the labels of `round(rate * N)` uniformly chosen samples from all
/// `K` classes (the current label included).
///
/// A redrawn sample is flagged noisy only when its label actually changed;
/// flags of untouched samples are carried over.
pub fn inject_label_noise(ds: &Dataset, cfg: NoiseConfig) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&cfg.rate) {
        return Err(Error::arg(format!("noise rate {} outside [0, 1]", cfg.rate)));
    }
    let n = ds.len();
    let count = textio::round_half_even(cfg.rate * n as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chosen = index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();

    let mut samples = ds.samples.clone();
    for i in chosen {
        let new_label = rng.random_range(0..ds.num_classes);
        let s = &mut samples[i];
        if new_label != s.label {
            s.noisy = true;
        }
        s.label = new_label;
    }
    Dataset::new(ds.dim, ds.num_classes, samples)
}

/// Number of samples [`inject_label_noise`] redraws for a dataset of size `n`.
pub fn noise_redraw_count(rate: f64, n: usize) -> usize {
    textio::round_half_even(rate * n as f64) as usize
}

/// Shuffled train/test split.
///
/// The test side gets `round_half_down((1 - train_fraction) * N)` samples,
/// clamped so each side keeps at least one.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Subset, Subset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::arg(format!(
            "train_fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n = ds.len();
    if n < 2 {
        return Err(Error::arg("splitting needs at least 2 samples"));
    }
    let raw = (1.0 - train_fraction) * n as f64;
    let test_size = ((raw - 0.5).ceil().max(0.0) as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train_ids, test_ids) = order.split_at(n - test_size);
    Ok((ds.select(train_ids)?, ds.select(test_ids)?))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_text(&textio::read_file(path)?)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    textio::write_file(path, &ds.to_text())
}
