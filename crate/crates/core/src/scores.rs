//! Per-sample score tables and the `#moso-scores v1` format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::textio::{self, fmt_f64, parse_f64, parse_usize, Header};

/// Which scoring rule produced a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScoreMethod {
    MosoApprox,
    MosoExact,
    Grand,
    El2n,
    Forgetting,
    Random,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 6] = [
        ScoreMethod::MosoApprox,
        ScoreMethod::MosoExact,
        ScoreMethod::Grand,
        ScoreMethod::El2n,
        ScoreMethod::Forgetting,
        ScoreMethod::Random,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            ScoreMethod::MosoApprox => "moso_approx",
            ScoreMethod::MosoExact => "moso_exact",
            ScoreMethod::Grand => "grand",
            ScoreMethod::El2n => "el2n",
            ScoreMethod::Forgetting => "forgetting",
            ScoreMethod::Random => "random",
        }
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreMethod::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::arg(format!("unknown score method {s:?}")))
    }
}

/// One finite score per dataset id (`scores[id]`), tagged with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    method: ScoreMethod,
    config: String,
    scores: Vec<f64>,
}

impl ScoreTable {
    /// `config` must not contain whitespace; it is written into the file header.
    pub fn new(method: ScoreMethod, config: impl Into<String>, scores: Vec<f64>) -> Result<Self> {
        let config = config.into();
        if config.is_empty() || config.chars().any(char::is_whitespace) {
            return Err(Error::arg(
                "score config digest must be a nonempty token without whitespace",
            ));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::arg(format!("score for id {i} is not finite")));
        }
        Ok(ScoreTable { method, config, scores })
    }

    pub fn method(&self) -> ScoreMethod {
        self.method
    }

    pub fn config(&self) -> &str {
        &self.config
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn get(&self, id: usize) -> Option<f64> {
        self.scores.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Ids ordered by ascending score, ties by ascending id.
    pub fn ascending_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.scores.len()).collect();
        ids.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]).then(a.cmp(&b)));
        ids
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#moso-scores v1 method={} config={}\n", self.method, self.config);
        for (id, s) in self.scores.iter().enumerate() {
            out.push_str(&format!("{id},{}\n", fmt_f64(*s)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (header_line, body) = textio::content_lines(text)?;
        let header = Header::parse(header_line, "scores", 1)?;
        let method: ScoreMethod = header
            .get("method", 1)?
            .parse()
            .map_err(|e: Error| Error::parse(1, e.to_string()))?;
        let config = header.get("config", 1)?.to_string();
        let mut scores = Vec::with_capacity(body.len());
        for (expected, (lineno, line)) in body.into_iter().enumerate() {
            let (id, value) = line
                .split_once(',')
                .ok_or_else(|| Error::parse(lineno, "expected <id>,<score>"))?;
            let id = parse_usize(id, lineno)?;
            if id != expected {
                return Err(Error::parse(lineno, format!("expected id {expected}, found {id}")));
            }
            let v = parse_f64(value, lineno)?;
            if !v.is_finite() {
                return Err(Error::parse(lineno, "non-finite score"));
            }
            scores.push(v);
        }
        ScoreTable::new(method, config, scores).map_err(|e| Error::parse(1, e.to_string()))
    }
}

pub fn read_scores(path: &Path) -> Result<ScoreTable> {
    ScoreTable::from_text(&textio::read_file(path)?)
}

pub fn write_scores(table: &ScoreTable, path: &Path) -> Result<()> {
    textio::write_file(path, &table.to_text())
}
