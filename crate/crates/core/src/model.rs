//! Softmax classifiers with exact per-sample cross-entropy gradients.
//!
//! Parameters live in one flat vector. Layouts (row-major, one row per output unit):
//!
//! * logistic: `W[K×d] | b[K]`
//! * mlp:      `W1[H×d] | b1[H] | W2[K×H] | b2[K]`, hidden activation `tanh`

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::textio::{self, fmt_f64, parse_f64, Header};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Logistic,
    Mlp,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Logistic => "logistic",
            ModelKind::Mlp => "mlp",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ModelKind::Logistic),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::arg(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Architecture plus initialization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dim: usize,
    pub num_classes: usize,
    /// Hidden width; ignored for logistic models.
    pub hidden: usize,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl ModelSpec {
    pub fn logistic(dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            dim,
            num_classes,
            hidden: 0,
            init_seed: 0,
            init_scale: 0.1,
        }
    }

    pub fn mlp(dim: usize, num_classes: usize, hidden: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            hidden,
            ..Self::logistic(dim, num_classes)
        }
    }

    pub fn with_seed(self, init_seed: u64) -> Self {
        ModelSpec { init_seed, ..self }
    }

    pub fn with_scale(self, init_scale: f64) -> Self {
        ModelSpec { init_scale, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::arg("model input dimension must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::arg("model needs at least 2 classes"));
        }
        if self.kind == ModelKind::Mlp && self.hidden == 0 {
            return Err(Error::arg("mlp hidden width must be at least 1"));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(Error::arg("init_scale must be positive and finite"));
        }
        Ok(())
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        let (d, k, h) = (self.dim, self.num_classes, self.hidden);
        match self.kind {
            ModelKind::Logistic => k * d + k,
            ModelKind::Mlp => h * d + h + k * h + k,
        }
    }
}

/// A flat parameter vector, as the per-sample gradients see it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(pub Vec<f64>);

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        GradVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &GradVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    theta: Vec<f64>,
}

/// Draws parameters uniformly from `[-init_scale, init_scale)`.
pub fn init_params(spec: &ModelSpec) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let theta = (0..spec.param_count())
        .map(|_| rng.random_range(-spec.init_scale..spec.init_scale))
        .collect();
    Ok(ModelParams { spec: *spec, theta })
}

impl ModelParams {
    pub fn from_theta(spec: ModelSpec, theta: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if theta.len() != spec.param_count() {
            return Err(Error::arg(format!(
                "parameter vector has length {}, spec needs {}",
                theta.len(),
                spec.param_count()
            )));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("parameter vector has a non-finite entry"));
        }
        Ok(ModelParams { spec, theta })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub(crate) fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.spec.dim {
            return Err(Error::arg(format!(
                "input has dimension {}, model expects {}",
                features.len(),
                self.spec.dim
            )));
        }
        Ok(())
    }

    /// Hidden activations (mlp only) and output logits.
    fn logits(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, k, h) = (self.spec.dim, self.spec.num_classes, self.spec.hidden);
        match self.spec.kind {
            ModelKind::Logistic => {
                let (w, b) = self.theta.split_at(k * d);
                let z = (0..k).map(|c| dot(&w[c * d..(c + 1) * d], x) + b[c]).collect();
                (Vec::new(), z)
            }
            ModelKind::Mlp => {
                let (w1, rest) = self.theta.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);
                let act: Vec<f64> = (0..h)
                    .map(|j| (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh())
                    .collect();
                let z = (0..k).map(|c| dot(&w2[c * h..(c + 1) * h], &act) + b2[c]).collect();
                (act, z)
            }
        }
    }

    /// Class probabilities for one input.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(features)?;
        Ok(softmax(&self.logits(features).1))
    }

    /// Index of the most probable class (lowest index on ties).
    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        self.check_dim(features)?;
        let (_, z) = self.logits(features);
        Ok(argmax(&z))
    }

    /// Cross-entropy `-ln p[label]`, computed through log-sum-exp.
    pub fn loss(&self, sample: &Sample) -> Result<f64> {
        self.check_dim(&sample.features)?;
        let (_, z) = self.logits(&sample.features);
        Ok(log_sum_exp(&z) - z[sample.label])
    }

    /// Mean cross-entropy over a nonempty collection of samples.
    pub fn mean_loss<'a>(&self, samples: impl IntoIterator<Item = &'a Sample>) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for s in samples {
            total += self.loss(s)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::arg("mean loss over an empty set"));
        }
        Ok(total / n as f64)
    }

    /// Exact gradient of the sample's cross-entropy loss.
    pub fn grad_sample(&self, sample: &Sample) -> Result<GradVector> {
        let mut g = GradVector::zeros(self.theta.len());
        self.accumulate_grad(sample, 1.0, &mut g.0)?;
        Ok(g)
    }

    /// Mean of the per-sample gradients over a nonempty collection.
    pub fn grad_mean<'a>(&self, samples: impl IntoIterator<Item = &'a Sample>) -> Result<GradVector> {
        let mut g = GradVector::zeros(self.theta.len());
        let mut n = 0usize;
        for s in samples {
            self.accumulate_grad(s, 1.0, &mut g.0)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::arg("mean gradient over an empty set"));
        }
        let inv = n as f64;
        g.0.iter_mut().for_each(|v| *v /= inv);
        Ok(g)
    }

    /// Adds `scale * ∇ loss(sample)` into `out`.
    pub(crate) fn accumulate_grad(&self, sample: &Sample, scale: f64, out: &mut [f64]) -> Result<()> {
        self.check_dim(&sample.features)?;
        let x = &sample.features;
        let (d, k, h) = (self.spec.dim, self.spec.num_classes, self.spec.hidden);
        let (act, z) = self.logits(x);
        let mut delta = softmax(&z);
        delta[sample.label] -= 1.0;

        match self.spec.kind {
            ModelKind::Logistic => {
                let (gw, gb) = out.split_at_mut(k * d);
                for c in 0..k {
                    let dc = scale * delta[c];
                    for (g, xi) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *g += dc * xi;
                    }
                    gb[c] += dc;
                }
            }
            ModelKind::Mlp => {
                let w2 = &self.theta[h * d + h..h * d + h + k * h];
                let (gw1, rest) = out.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(k * h);
                let mut dact = vec![0.0; h];
                for c in 0..k {
                    let dc = delta[c];
                    for j in 0..h {
                        gw2[c * h + j] += scale * dc * act[j];
                        dact[j] += dc * w2[c * h + j];
                    }
                    gb2[c] += scale * dc;
                }
                for j in 0..h {
                    let da = scale * dact[j] * (1.0 - act[j] * act[j]);
                    for (g, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g += da * xi;
                    }
                    gb1[j] += da;
                }
            }
        }
        Ok(())
    }

    /// Serializes to the `#moso-params v1` text format.
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "#moso-params v1 kind={} d={} K={} hidden={} P={} init_seed={} init_scale={}\n",
            s.kind,
            s.dim,
            s.num_classes,
            s.hidden,
            self.theta.len(),
            s.init_seed,
            fmt_f64(s.init_scale)
        );
        for v in &self.theta {
            out.push_str(&fmt_f64(*v));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (header_line, body) = textio::content_lines(text)?;
        let lines: Vec<&str> = std::iter::once(header_line)
            .chain(body.iter().map(|(_, l)| *l))
            .collect();
        let (params, used) = Self::parse_block(&lines, 1)?;
        if used != lines.len() {
            return Err(Error::parse(used + 1, "trailing content after parameter block"));
        }
        Ok(params)
    }

    /// Parses a params block starting at `lines[0]`; `first_lineno` is the
    /// 1-based line number of that header. Returns the params and the number of
    /// lines consumed.
    pub(crate) fn parse_block(lines: &[&str], first_lineno: usize) -> Result<(Self, usize)> {
        let header_line = lines
            .first()
            .ok_or_else(|| Error::parse(first_lineno, "missing header"))?;
        let header = Header::parse(header_line, "params", first_lineno)?;
        let kind: ModelKind = header
            .get("kind", first_lineno)?
            .parse()
            .map_err(|_| Error::parse(first_lineno, "unknown model kind"))?;
        let init_seed = match header.get_opt("init_seed") {
            Some(v) => v
                .parse::<u64>()
                .map_err(|_| Error::parse(first_lineno, "invalid init_seed"))?,
            None => 0,
        };
        let init_scale = match header.get_opt("init_scale") {
            Some(v) => parse_f64(v, first_lineno)?,
            None => 0.1,
        };
        let spec = ModelSpec {
            kind,
            dim: header.usize("d", first_lineno)?,
            num_classes: header.usize("K", first_lineno)?,
            hidden: header.usize("hidden", first_lineno)?,
            init_seed,
            init_scale,
        };
        spec.validate().map_err(|e| Error::parse(first_lineno, e.to_string()))?;
        let p = header.usize("P", first_lineno)?;
        if p != spec.param_count() {
            return Err(Error::parse(
                first_lineno,
                format!("P={p} does not match architecture ({})", spec.param_count()),
            ));
        }
        if lines.len() < 1 + p {
            return Err(Error::parse(
                first_lineno + lines.len(),
                format!("expected {p} parameter lines"),
            ));
        }
        let theta = lines[1..=p]
            .iter()
            .enumerate()
            .map(|(i, l)| parse_f64(l, first_lineno + 1 + i))
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams::from_theta(spec, theta).map_err(|e| Error::parse(first_lineno, e.to_string()))?;
        Ok((params, 1 + p))
    }
}

pub fn read_params(path: &Path) -> Result<ModelParams> {
    ModelParams::from_text(&textio::read_file(path)?)
}

pub fn write_params(params: &ModelParams, path: &Path) -> Result<()> {
    textio::write_file(path, &params.to_text())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
