//! The evaluation table `{(a_n, x_n, y_n, s_n)}`: categorical subpopulation
//! attributes, real covariates, a binary label and the classifier score.
//!
//! Storage is columnar (row-major blocks per field) so that subsetting and
//! bootstrap materialization are cheap copies. Datasets are immutable once
//! built; every derived dataset is a new value.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A categorical attribute and its allowed levels, in schema order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub levels: Vec<String>,
}

impl Attribute {
    pub fn new(name: impl Into<String>, levels: &[&str]) -> Self {
        Attribute {
            name: name.into(),
            levels: levels.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn level_index(&self, level: &str) -> Option<u32> {
        self.levels.iter().position(|l| l == level).map(|i| i as u32)
    }
}

/// One row with attribute levels coded as indices into the schema.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub levels: Vec<u32>,
    pub covariates: Vec<f64>,
    pub label: u8,
    pub score: f64,
}

/// A row described by names rather than schema codes, e.g. a query for a
/// covariate pattern that does not occur in the data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedRecord {
    pub attrs: BTreeMap<String, String>,
    pub covariates: BTreeMap<String, f64>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalDataset {
    attrs: Vec<Attribute>,
    covariates: Vec<String>,
    codes: Vec<u32>,
    cov_values: Vec<f64>,
    labels: Vec<u8>,
    scores: Vec<f64>,
}

impl EvalDataset {
    /// An empty dataset with the given schema.
    pub fn new(attrs: Vec<Attribute>, covariates: Vec<String>) -> Self {
        EvalDataset {
            attrs,
            covariates,
            codes: Vec::new(),
            cov_values: Vec::new(),
            labels: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn with_capacity(attrs: Vec<Attribute>, covariates: Vec<String>, n: usize) -> Self {
        let mut d = Self::new(attrs, covariates);
        d.codes.reserve(n * d.attrs.len());
        d.cov_values.reserve(n * d.covariates.len());
        d.labels.reserve(n);
        d.scores.reserve(n);
        d
    }

    /// Appends a record after checking it against the schema. `row` is only
    /// used to label errors.
    pub fn push(&mut self, record: EvalRecord) -> Result<()> {
        let row = self.len() + 1;
        if record.levels.len() != self.attrs.len() {
            return Err(Error::Shape(format!(
                "record has {} attribute levels, schema has {}",
                record.levels.len(),
                self.attrs.len()
            )));
        }
        if record.covariates.len() != self.covariates.len() {
            return Err(Error::Shape(format!(
                "record has {} covariates, schema has {}",
                record.covariates.len(),
                self.covariates.len()
            )));
        }
        for (a, &code) in self.attrs.iter().zip(&record.levels) {
            if code as usize >= a.levels.len() {
                return Err(Error::Validation {
                    row,
                    message: format!("level code {code} out of range for `{}`", a.name),
                });
            }
        }
        if record.label > 1 {
            return Err(Error::Validation {
                row,
                message: format!("label {} is not 0 or 1", record.label),
            });
        }
        if !record.score.is_finite() {
            return Err(Error::Validation {
                row,
                message: "score is not finite".into(),
            });
        }
        if let Some(i) = record.covariates.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation {
                row,
                message: format!("covariate `{}` is not finite", self.covariates[i]),
            });
        }
        self.push_unchecked(&record.levels, &record.covariates, record.label, record.score);
        Ok(())
    }

    pub(crate) fn push_unchecked(&mut self, levels: &[u32], covs: &[f64], label: u8, score: f64) {
        self.codes.extend_from_slice(levels);
        self.cov_values.extend_from_slice(covs);
        self.labels.push(label);
        self.scores.push(score);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attrs
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariates
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attrs.iter().position(|a| a.name == name)
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c == name)
    }

    /// Level codes of row `n`, in schema order.
    pub fn codes(&self, n: usize) -> &[u32] {
        let a = self.attrs.len();
        &self.codes[n * a..(n + 1) * a]
    }

    pub fn code(&self, n: usize, attr: usize) -> u32 {
        self.codes[n * self.attrs.len() + attr]
    }

    pub fn level(&self, n: usize, attr: usize) -> &str {
        &self.attrs[attr].levels[self.code(n, attr) as usize]
    }

    pub fn covariates(&self, n: usize) -> &[f64] {
        let c = self.covariates.len();
        &self.cov_values[n * c..(n + 1) * c]
    }

    pub fn label(&self, n: usize) -> u8 {
        self.labels[n]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn score(&self, n: usize) -> f64 {
        self.scores[n]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn record(&self, n: usize) -> EvalRecord {
        EvalRecord {
            levels: self.codes(n).to_vec(),
            covariates: self.covariates(n).to_vec(),
            label: self.labels[n],
            score: self.scores[n],
        }
    }

    /// Hex digest of schema and every record, used to tie cached
    /// log-likelihoods to the exact data they were computed on.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for a in &self.attrs {
            h.update(a.name.as_bytes());
            h.update([0u8]);
            for l in &a.levels {
                h.update(l.as_bytes());
                h.update([1u8]);
            }
        }
        for c in &self.covariates {
            h.update(c.as_bytes());
            h.update([2u8]);
        }
        for n in 0..self.len() {
            for &c in self.codes(n) {
                h.update(c.to_le_bytes());
            }
            for &v in self.covariates(n) {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update([self.label(n)]);
            h.update(self.score(n).to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }

    pub fn same_schema(&self, other: &EvalDataset) -> bool {
        self.attrs == other.attrs && self.covariates == other.covariates
    }

    /// Rows at `indices`, in that order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> EvalDataset {
        let mut out = Self::with_capacity(self.attrs.clone(), self.covariates.clone(), indices.len());
        for &n in indices {
            out.push_unchecked(self.codes(n), self.covariates(n), self.labels[n], self.scores[n]);
        }
        out
    }

    /// Same rows with the scores replaced.
    pub fn with_scores(&self, scores: Vec<f64>) -> Result<EvalDataset> {
        if scores.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} records",
                scores.len(),
                self.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Validation {
                row: i + 1,
                message: "score is not finite".into(),
            });
        }
        Ok(EvalDataset {
            scores,
            ..self.clone()
        })
    }

    /// Z-scores every covariate column; returns the (mean, sd) used per column.
    /// Constant columns are centred only.
    pub fn standardized(&self) -> (EvalDataset, Vec<(f64, f64)>) {
        let c = self.covariates.len();
        let n = self.len() as f64;
        let mut moments = Vec::with_capacity(c);
        for j in 0..c {
            let col = (0..self.len()).map(|i| self.covariates(i)[j]);
            let mean = col.clone().sum::<f64>() / n;
            let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            moments.push((mean, sd));
        }
        let mut out = self.clone();
        for (k, v) in out.cov_values.iter_mut().enumerate() {
            let (m, s) = moments[k % c];
            *v = (*v - m) / s;
        }
        (out, moments)
    }

    /// Converts a name-keyed record to schema codes.
    pub fn encode(&self, named: &NamedRecord) -> Result<(Vec<u32>, Vec<f64>)> {
        let mut levels = Vec::with_capacity(self.attrs.len());
        for a in &self.attrs {
            let level = named
                .attrs
                .get(&a.name)
                .ok_or_else(|| Error::Key(format!("record is missing attribute `{}`", a.name)))?;
            let code = a.level_index(level).ok_or_else(|| Error::UnknownLevel {
                attribute: a.name.clone(),
                level: level.clone(),
            })?;
            levels.push(code);
        }
        let mut covs = Vec::with_capacity(self.covariates.len());
        for c in &self.covariates {
            let v = named
                .covariates
                .get(c)
                .ok_or_else(|| Error::Key(format!("record is missing covariate `{c}`")))?;
            covs.push(*v);
        }
        Ok((levels, covs))
    }

    pub fn resolve(&self, key: &SubpopKey) -> Result<ResolvedKey> {
        let mut bound = Vec::with_capacity(key.bindings.len());
        for (name, level) in &key.bindings {
            let a = self
                .attr_index(name)
                .ok_or_else(|| Error::Key(format!("unknown attribute `{name}`")))?;
            let code = self.attrs[a]
                .level_index(level)
                .ok_or_else(|| Error::Key(format!("level `{level}` not allowed for `{name}`")))?;
            bound.push((a, code));
        }
        Ok(ResolvedKey { bound })
    }

    /// Records matching every binding of `key`.
    pub fn subset(&self, key: &SubpopKey) -> Result<EvalDataset> {
        let resolved = self.resolve(key)?;
        let idx: Vec<usize> = (0..self.len()).filter(|&n| resolved.matches(self, n)).collect();
        Ok(self.select(&idx))
    }

    /// Non-empty cells of the cross product of `attrs`, sorted by ascending
    /// count and then by key.
    pub fn enumerate_subpops(&self, attrs: &[&str]) -> Result<Vec<(SubpopKey, usize)>> {
        let part = CellPartition::build(self, attrs)?;
        Ok(part.keys.into_iter().zip(part.counts).collect())
    }

    pub fn load_csv(path: impl AsRef<Path>, config: &SchemaConfig) -> Result<EvalDataset> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, config)
    }

    pub fn read_csv<R: Read>(reader: R, config: &SchemaConfig) -> Result<EvalDataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::MissingColumn {
                    column: name.to_string(),
                })
        };
        let attr_cols: Vec<usize> = config
            .attributes
            .iter()
            .map(|a| col(a.column()))
            .collect::<Result<_>>()?;
        let cov_cols: Vec<usize> = config.covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;
        let label_col = col(&config.label)?;
        let score_col = col(&config.score)?;

        let mut raw_levels: Vec<Vec<String>> = Vec::new();
        let mut covs = Vec::new();
        let mut labels = Vec::new();
        let mut scores = Vec::new();

        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = i + 1;
            let cell = |c: usize, name: &str| -> Result<&str> {
                let v = rec.get(c).map(str::trim).unwrap_or("");
                if v.is_empty() {
                    Err(Error::Validation {
                        row,
                        message: format!("missing value in column `{name}`"),
                    })
                } else {
                    Ok(v)
                }
            };
            let number = |c: usize, name: &str| -> Result<f64> {
                let v = cell(c, name)?;
                let x: f64 = v.parse().map_err(|_| Error::Parse {
                    row,
                    column: name.to_string(),
                    value: v.to_string(),
                })?;
                if !x.is_finite() {
                    return Err(Error::Validation {
                        row,
                        message: format!("non-finite value in column `{name}`"),
                    });
                }
                Ok(x)
            };

            let mut levels = Vec::with_capacity(attr_cols.len());
            for (a, &c) in config.attributes.iter().zip(&attr_cols) {
                let v = cell(c, a.column())?;
                levels.push(a.bin_level(v, row)?);
            }
            for (name, &c) in config.covariates.iter().zip(&cov_cols) {
                covs.push(number(c, name)?);
            }
            let y = number(label_col, &config.label)?;
            if y != 0.0 && y != 1.0 {
                return Err(Error::Validation {
                    row,
                    message: format!("label {y} is not 0 or 1"),
                });
            }
            labels.push(y as u8);
            scores.push(number(score_col, &config.score)?);
            raw_levels.push(levels);
        }

        let attrs: Vec<Attribute> = config
            .attributes
            .iter()
            .enumerate()
            .map(|(j, a)| a.schema_levels(raw_levels.iter().map(|r| r[j].as_str())))
            .collect();
        let mut codes = Vec::with_capacity(raw_levels.len() * attrs.len());
        for (i, r) in raw_levels.iter().enumerate() {
            for (a, level) in attrs.iter().zip(r) {
                let code = a.level_index(level).ok_or_else(|| Error::Validation {
                    row: i + 1,
                    message: format!("level `{level}` not allowed for `{}`", a.name),
                })?;
                codes.push(code);
            }
        }
        Ok(EvalDataset {
            attrs,
            covariates: config.covariates.clone(),
            codes,
            cov_values: covs,
            labels,
            scores,
        })
    }

    /// Writes the table with one column per attribute and covariate followed
    /// by `y` and `s`. [`SchemaConfig::for_dataset`] reads it back.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.attrs.iter().map(|a| a.name.as_str()).collect();
        header.extend(self.covariates.iter().map(String::as_str));
        header.extend(["y", "s"]);
        w.write_record(&header)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for n in 0..self.len() {
            row.clear();
            row.extend((0..self.attrs.len()).map(|a| self.level(n, a).to_string()));
            row.extend(self.covariates(n).iter().map(|v| v.to_string()));
            row.push(self.labels[n].to_string());
            row.push(self.scores[n].to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// A subpopulation: a binding of some attributes to one level each. The empty
/// key denotes the whole population.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubpopKey {
    bindings: BTreeMap<String, String>,
}

impl SubpopKey {
    pub fn all() -> Self {
        SubpopKey::default()
    }

    pub fn bind(mut self, attr: impl Into<String>, level: impl Into<String>) -> Self {
        self.bindings.insert(attr.into(), level.into());
        self
    }

    pub fn bindings(&self) -> &BTreeMap<String, String> {
        &self.bindings
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }

    /// Union of two keys; fails if they bind the same attribute differently.
    pub fn merge(&self, other: &SubpopKey) -> Result<SubpopKey> {
        let mut out = self.clone();
        for (k, v) in &other.bindings {
            if let Some(old) = out.bindings.insert(k.clone(), v.clone()) {
                if &old != v {
                    return Err(Error::Key(format!("conflicting levels for `{k}`")));
                }
            }
        }
        Ok(out)
    }

    /// Parses `attr=level,attr=level`; `*` or an empty string is the whole population.
    pub fn parse(text: &str) -> Result<SubpopKey> {
        let text = text.trim();
        let mut key = SubpopKey::all();
        if text.is_empty() || text == "*" {
            return Ok(key);
        }
        for part in text.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Key(format!("expected attr=level, got `{part}`")))?;
            key = key.bind(k.trim(), v.trim());
        }
        Ok(key)
    }
}

impl fmt::Display for SubpopKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.bindings.is_empty() {
            return f.write_str("*");
        }
        for (i, (k, v)) in self.bindings.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// A key checked against a schema, as (attribute index, level code) pairs.
#[derive(Debug, Clone)]
pub struct ResolvedKey {
    bound: Vec<(usize, u32)>,
}

impl ResolvedKey {
    pub fn matches(&self, d: &EvalDataset, n: usize) -> bool {
        let codes = d.codes(n);
        self.bound.iter().all(|&(a, c)| codes[a] == c)
    }
}

/// Assignment of records to the non-empty cells of an attribute cross product.
#[derive(Debug, Clone)]
pub struct CellPartition {
    attr_idx: Vec<usize>,
    pub keys: Vec<SubpopKey>,
    pub counts: Vec<usize>,
    /// Cell index of every record.
    pub membership: Vec<usize>,
    lookup: BTreeMap<Vec<u32>, usize>,
}

impl CellPartition {
    pub fn build(d: &EvalDataset, attrs: &[&str]) -> Result<CellPartition> {
        let attr_idx: Vec<usize> = attrs
            .iter()
            .map(|name| {
                d.attr_index(name)
                    .ok_or_else(|| Error::Key(format!("unknown attribute `{name}`")))
            })
            .collect::<Result<_>>()?;
        let mut counts: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
        for n in 0..d.len() {
            let cell: Vec<u32> = attr_idx.iter().map(|&a| d.code(n, a)).collect();
            *counts.entry(cell).or_default() += 1;
        }
        let mut cells: Vec<(SubpopKey, usize, Vec<u32>)> = counts
            .into_iter()
            .map(|(cell, count)| {
                let key = attr_idx.iter().zip(&cell).fold(SubpopKey::all(), |k, (&a, &c)| {
                    let attr = &d.attributes()[a];
                    k.bind(attr.name.clone(), attr.levels[c as usize].clone())
                });
                (key, count, cell)
            })
            .collect();
        cells.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let lookup: BTreeMap<Vec<u32>, usize> =
            cells.iter().enumerate().map(|(i, c)| (c.2.clone(), i)).collect();
        let membership = (0..d.len())
            .map(|n| {
                let cell: Vec<u32> = attr_idx.iter().map(|&a| d.code(n, a)).collect();
                lookup[&cell]
            })
            .collect();
        Ok(CellPartition {
            attr_idx,
            counts: cells.iter().map(|c| c.1).collect(),
            keys: cells.into_iter().map(|c| c.0).collect(),
            membership,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Cell of every record of another dataset with the same schema, using
    /// this partition's cell numbering (`None` for cells absent here).
    pub fn assign(&self, d: &EvalDataset) -> Vec<Option<usize>> {
        (0..d.len())
            .map(|n| {
                let cell: Vec<u32> = self.attr_idx.iter().map(|&a| d.code(n, a)).collect();
                self.lookup.get(&cell).copied()
            })
            .collect()
    }

    /// Record indices grouped by cell.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.keys.len()];
        for (n, &c) in self.membership.iter().enumerate() {
            out[c].push(n);
        }
        out
    }
}

/// Column mapping for CSV ingestion.
///
/// ```toml
/// label = "y"
/// score = "s"
/// covariates = ["ln.sysbp"]
///
/// [[attributes]]
/// name = "age_bin"
/// column = "age"          # defaults to name
/// bins = [18, 40, 60, 80] # [18,40) [40,60) [60,80) [80,inf)
/// ```
///
/// Bins are left-closed and right-open; the last bin is unbounded above and
/// values below the first edge are rejected. Without bins, levels are either
/// the explicit `levels` list (which also fixes their order) or every observed
/// value, sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    #[serde(default = "default_label")]
    pub label: String,
    #[serde(default = "default_score")]
    pub score: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub attributes: Vec<AttributeConfig>,
}

fn default_label() -> String {
    "y".into()
}

fn default_score() -> String {
    "s".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl AttributeConfig {
    pub fn categorical(name: impl Into<String>) -> Self {
        AttributeConfig {
            name: name.into(),
            column: None,
            levels: None,
            bins: None,
            labels: None,
        }
    }

    fn column(&self) -> &str {
        self.column.as_deref().unwrap_or(&self.name)
    }

    fn bin_labels(&self, edges: &[f64]) -> Vec<String> {
        if let Some(labels) = &self.labels {
            return labels.clone();
        }
        (0..edges.len())
            .map(|i| match edges.get(i + 1) {
                Some(hi) => format!("{}-{}", edges[i], hi),
                None => format!("{}+", edges[i]),
            })
            .collect()
    }

    fn bin_level(&self, raw: &str, row: usize) -> Result<String> {
        let Some(edges) = &self.bins else {
            return Ok(raw.to_string());
        };
        let x: f64 = raw.parse().map_err(|_| Error::Parse {
            row,
            column: self.column().to_string(),
            value: raw.to_string(),
        })?;
        let bin = edges.partition_point(|&e| e <= x);
        if bin == 0 || x.is_nan() {
            return Err(Error::Validation {
                row,
                message: format!("value {x} of `{}` is below the first bin edge", self.name),
            });
        }
        Ok(self.bin_labels(edges)[bin - 1].clone())
    }

    fn schema_levels<'a>(&self, observed: impl Iterator<Item = &'a str>) -> Attribute {
        let levels = if let Some(edges) = &self.bins {
            self.bin_labels(edges)
        } else if let Some(levels) = &self.levels {
            levels.clone()
        } else {
            let mut seen: Vec<String> = observed.map(str::to_string).collect();
            seen.sort();
            seen.dedup();
            seen
        };
        Attribute {
            name: self.name.clone(),
            levels,
        }
    }
}

impl SchemaConfig {
    pub fn from_toml(text: &str) -> Result<SchemaConfig> {
        let cfg: SchemaConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("schema config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for a in &self.attributes {
            if let Some(edges) = &a.bins {
                if edges.is_empty() || edges.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::Config(format!(
                        "bins of `{}` must be strictly increasing and non-empty",
                        a.name
                    )));
                }
                if let Some(labels) = &a.labels {
                    if labels.len() != edges.len() {
                        return Err(Error::Config(format!(
                            "`{}` has {} bin labels for {} bins",
                            a.name,
                            labels.len(),
                            edges.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// The config that reads back a table written by [`EvalDataset::write_csv`],
    /// keeping the dataset's level orderings.
    pub fn for_dataset(d: &EvalDataset) -> SchemaConfig {
        SchemaConfig {
            label: "y".into(),
            score: "s".into(),
            covariates: d.covariates.clone(),
            attributes: d
                .attrs
                .iter()
                .map(|a| AttributeConfig {
                    levels: Some(a.levels.clone()),
                    ..AttributeConfig::categorical(a.name.clone())
                })
                .collect(),
        }
    }
}
