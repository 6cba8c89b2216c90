//! Shared helpers for the line-oriented text formats.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Shortest decimal form that parses back to the same `f64`.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub(crate) fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(line, format!("invalid number {s:?}")))
}

pub(crate) fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| Error::parse(line, format!("invalid integer {s:?}")))
}

/// Parsed `#moso-<kind> v1 key=value ...` header.
pub(crate) struct Header {
    fields: BTreeMap<String, String>,
}

impl Header {
    /// Parses `line` (1-based line number `lineno`) expecting tag `#moso-<kind>`.
    pub(crate) fn parse(line: &str, kind: &str, lineno: usize) -> Result<Header> {
        let mut parts = line.split_whitespace();
        let tag = format!("#moso-{kind}");
        if parts.next() != Some(tag.as_str()) {
            return Err(Error::parse(lineno, format!("expected {tag} header")));
        }
        if parts.next() != Some("v1") {
            return Err(Error::parse(lineno, "unsupported format version"));
        }
        let mut fields = BTreeMap::new();
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::parse(lineno, format!("malformed header field {part:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        Ok(Header { fields })
    }

    pub(crate) fn get(&self, key: &str, lineno: usize) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::parse(lineno, format!("header missing {key}")))
    }

    pub(crate) fn get_opt(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    pub(crate) fn usize(&self, key: &str, lineno: usize) -> Result<usize> {
        parse_usize(self.get(key, lineno)?, lineno)
    }
}

/// Content lines of a text file, 1-based numbered. Blank lines and `#` comment
/// lines after the header are dropped; nested `#moso-` block headers are kept.
pub(crate) fn content_lines(text: &str) -> Result<(&str, Vec<(usize, &str)>)> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l,
            None => return Err(Error::parse(1, "missing header")),
        }
    };
    let body = lines
        .filter(|(_, l)| !l.trim().is_empty() && (!l.starts_with('#') || l.starts_with("#moso-")))
        .map(|(i, l)| (i + 1, l))
        .collect();
    Ok((header, body))
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Round half to even, as used for noise counts.
pub(crate) fn round_half_even(x: f64) -> f64 {
    let r = x.round();
    if (x - x.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r - x.signum()
    } else {
        r
    }
}
