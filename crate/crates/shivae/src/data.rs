//! Heterogeneous sequence data model: attribute schemas, sequences with
//! observation masks, datasets, artificial-mask overlays, and the CSV
//! formats shared by every pipeline stage.
//!
//! Missing cells are stored as NaN in the value table, but the boolean
//! mask is authoritative: code must never branch on the sentinel.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShivaeError};

/// Data type of one attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttrKind {
    Real,
    Positive,
    Binary,
    Categorical { num_classes: usize },
}

impl AttrKind {
    pub fn is_continuous(&self) -> bool {
        matches!(self, AttrKind::Real | AttrKind::Positive)
    }

    pub fn is_discrete(&self) -> bool {
        !self.is_continuous()
    }
}

impl fmt::Display for AttrKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrKind::Real => write!(f, "real"),
            AttrKind::Positive => write!(f, "positive"),
            AttrKind::Binary => write!(f, "binary"),
            AttrKind::Categorical { num_classes } => {
                write!(f, "categorical({num_classes})")
            }
        }
    }
}

/// Name and data type of one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttrKind,
}

impl AttributeSchema {
    pub fn new(name: impl Into<String>, kind: AttrKind) -> Self {
        AttributeSchema { name: name.into(), kind }
    }

    pub fn real(name: impl Into<String>) -> Self {
        Self::new(name, AttrKind::Real)
    }

    pub fn positive(name: impl Into<String>) -> Self {
        Self::new(name, AttrKind::Positive)
    }

    pub fn binary(name: impl Into<String>) -> Self {
        Self::new(name, AttrKind::Binary)
    }

    pub fn categorical(name: impl Into<String>, num_classes: usize) -> Self {
        Self::new(name, AttrKind::Categorical { num_classes })
    }
}

/// Validate a schema: unique names, categorical arity >= 2.
pub fn validate_schema(schema: &[AttributeSchema]) -> Result<()> {
    if schema.is_empty() {
        return Err(ShivaeError::config("schema must declare at least one attribute"));
    }
    let mut seen = HashSet::new();
    for attr in schema {
        if !seen.insert(attr.name.as_str()) {
            return Err(ShivaeError::config(format!(
                "duplicate attribute name '{}' in schema",
                attr.name
            )));
        }
        if let AttrKind::Categorical { num_classes } = attr.kind {
            if num_classes < 2 {
                return Err(ShivaeError::config(format!(
                    "categorical attribute '{}' must have at least 2 classes, got {}",
                    attr.name, num_classes
                )));
            }
        }
    }
    Ok(())
}

/// One variable-length sequence of D-dimensional observations.
///
/// `values` is T x D with NaN in missing cells; `mask` is T x D with
/// `true` meaning observed. The mask is the source of truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
}

impl Sequence {
    pub fn new(id: impl Into<String>, values: Array2<f64>, mask: Array2<bool>) -> Result<Self> {
        if values.dim() != mask.dim() {
            return Err(ShivaeError::data(format!(
                "sequence value/mask shape mismatch: {:?} vs {:?}",
                values.dim(),
                mask.dim()
            )));
        }
        if values.nrows() == 0 {
            return Err(ShivaeError::data("sequence must have at least one time step"));
        }
        Ok(Sequence { id: id.into(), values, mask })
    }

    /// Fully observed sequence.
    pub fn fully_observed(id: impl Into<String>, values: Array2<f64>) -> Self {
        let mask = Array2::from_elem(values.dim(), true);
        Sequence { id: id.into(), values, mask }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn num_attrs(&self) -> usize {
        self.values.ncols()
    }

    /// Copy of this sequence with the cells flagged in `hidden` treated
    /// as missing. Values are left in place; only the mask changes.
    pub fn with_hidden(&self, hidden: &Array2<bool>) -> Result<Self> {
        if hidden.dim() != self.mask.dim() {
            return Err(ShivaeError::data(format!(
                "hidden-cell mask shape {:?} does not match sequence shape {:?}",
                hidden.dim(),
                self.mask.dim()
            )));
        }
        let mut mask = self.mask.clone();
        for (idx, h) in hidden.indexed_iter() {
            if *h {
                mask[idx] = false;
            }
        }
        Ok(Sequence { id: self.id.clone(), values: self.values.clone(), mask })
    }
}

/// Split a time step into observed and missing attribute index sets.
///
/// Returns `(observed, missing)`; the two sets are disjoint and together
/// cover `0..D`.
pub fn partition_observed(mask_t: &[bool], num_attrs: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if mask_t.len() != num_attrs {
        return Err(ShivaeError::data(format!(
            "mask length {} does not match attribute count {}",
            mask_t.len(),
            num_attrs
        )));
    }
    let mut observed = Vec::new();
    let mut missing = Vec::new();
    for (d, &m) in mask_t.iter().enumerate() {
        if m {
            observed.push(d);
        } else {
            missing.push(d);
        }
    }
    Ok((observed, missing))
}

/// A collection of sequences sharing one schema.
#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneousDataset {
    pub schema: Vec<AttributeSchema>,
    pub sequences: Vec<Sequence>,
}

impl HeterogeneousDataset {
    pub fn new(schema: Vec<AttributeSchema>, sequences: Vec<Sequence>) -> Result<Self> {
        validate_schema(&schema)?;
        if sequences.is_empty() {
            return Err(ShivaeError::data("dataset must contain at least one sequence"));
        }
        let d = schema.len();
        for seq in &sequences {
            if seq.num_attrs() != d {
                return Err(ShivaeError::data(format!(
                    "sequence '{}' has {} attributes, schema declares {}",
                    seq.id,
                    seq.num_attrs(),
                    d
                )));
            }
        }
        Ok(HeterogeneousDataset { schema, sequences })
    }

    pub fn num_attrs(&self) -> usize {
        self.schema.len()
    }

    pub fn num_sequences(&self) -> usize {
        self.sequences.len()
    }

    /// Indices of continuous (real/positive) attributes.
    pub fn continuous_attrs(&self) -> Vec<usize> {
        self.schema
            .iter()
            .enumerate()
            .filter(|(_, a)| a.kind.is_continuous())
            .map(|(d, _)| d)
            .collect()
    }
}

/// One violation found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub sequence_id: String,
    pub time: usize,
    pub attr: String,
    pub message: String,
}

/// Outcome of dataset validation. Violations are data, not errors.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// Short human-readable digest: first few violations plus a count.
    pub fn summary(&self) -> String {
        if self.passed() {
            return "no violations".to_string();
        }
        let shown: Vec<String> = self
            .violations
            .iter()
            .take(3)
            .map(|v| format!("{}[t={}].{}: {}", v.sequence_id, v.time, v.attr, v.message))
            .collect();
        format!("{} violation(s), e.g. {}", self.violations.len(), shown.join("; "))
    }
}

/// Check every observed cell against its attribute kind.
pub fn validate_dataset(ds: &HeterogeneousDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    for seq in &ds.sequences {
        for t in 0..seq.len() {
            for (d, attr) in ds.schema.iter().enumerate() {
                if !seq.mask[(t, d)] {
                    continue;
                }
                let v = seq.values[(t, d)];
                let problem = if !v.is_finite() {
                    Some("observed cell is not finite".to_string())
                } else {
                    match attr.kind {
                        AttrKind::Real => None,
                        AttrKind::Positive if v <= 0.0 => {
                            Some(format!("positive attribute has value {v}"))
                        }
                        AttrKind::Binary if v != 0.0 && v != 1.0 => {
                            Some(format!("binary attribute has value {v}"))
                        }
                        AttrKind::Categorical { num_classes }
                            if v.fract() != 0.0 || v < 0.0 || v >= num_classes as f64 =>
                        {
                            Some(format!(
                                "categorical code {v} outside 0..{}",
                                num_classes - 1
                            ))
                        }
                        _ => None,
                    }
                };
                if let Some(message) = problem {
                    report.violations.push(Violation {
                        sequence_id: seq.id.clone(),
                        time: t,
                        attr: attr.name.clone(),
                        message,
                    });
                }
            }
        }
    }
    report
}

/// Artificial-missingness overlay for a whole dataset: `true` marks a
/// cell that was observed in the raw data but hidden for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskOverlay {
    pub per_seq: Vec<Array2<bool>>,
}

impl MaskOverlay {
    /// All-false overlay matching a dataset's shapes.
    pub fn empty(ds: &HeterogeneousDataset) -> Self {
        MaskOverlay {
            per_seq: ds
                .sequences
                .iter()
                .map(|s| Array2::from_elem(s.values.dim(), false))
                .collect(),
        }
    }

    pub fn matches(&self, ds: &HeterogeneousDataset) -> Result<()> {
        if self.per_seq.len() != ds.sequences.len() {
            return Err(ShivaeError::data(format!(
                "overlay covers {} sequences, dataset has {}",
                self.per_seq.len(),
                ds.sequences.len()
            )));
        }
        for (ov, seq) in self.per_seq.iter().zip(&ds.sequences) {
            if ov.dim() != seq.values.dim() {
                return Err(ShivaeError::data(format!(
                    "overlay shape {:?} does not match sequence '{}' shape {:?}",
                    ov.dim(),
                    seq.id,
                    seq.values.dim()
                )));
            }
        }
        Ok(())
    }

    /// Assert the overlay never hides an already-missing cell.
    pub fn check_disjoint(&self, ds: &HeterogeneousDataset) -> Result<()> {
        self.matches(ds)?;
        for (ov, seq) in self.per_seq.iter().zip(&ds.sequences) {
            for ((t, d), &hidden) in ov.indexed_iter() {
                if hidden && !seq.mask[(t, d)] {
                    return Err(ShivaeError::data(format!(
                        "overlay hides already-missing cell (seq '{}', t={t}, attr {d})",
                        seq.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fraction of originally-observed cells of attribute `d` that the
    /// overlay hides.
    pub fn hidden_rate(&self, ds: &HeterogeneousDataset, d: usize) -> f64 {
        let mut observed = 0usize;
        let mut hidden = 0usize;
        for (ov, seq) in self.per_seq.iter().zip(&ds.sequences) {
            for t in 0..seq.len() {
                if seq.mask[(t, d)] {
                    observed += 1;
                    if ov[(t, d)] {
                        hidden += 1;
                    }
                }
            }
        }
        if observed == 0 {
            0.0
        } else {
            hidden as f64 / observed as f64
        }
    }
}

/// A set of overlays, one per evaluation replicate.
#[derive(Debug, Clone)]
pub struct MaskSuite {
    pub overlays: Vec<MaskOverlay>,
    pub target_rate: f64,
}

// ---------------------------------------------------------------------------
// CSV formats
// ---------------------------------------------------------------------------

fn format_cell(kind: &AttrKind, v: f64) -> String {
    match kind {
        AttrKind::Real | AttrKind::Positive => format!("{v}"),
        AttrKind::Binary | AttrKind::Categorical { .. } => format!("{}", v as i64),
    }
}

/// Write `data.csv` (columns `sequence_id,t,<attrs>`, empty cell = missing)
/// and `schema.json` into `dir`.
pub fn write_dataset(ds: &HeterogeneousDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| ShivaeError::data(format!("cannot create {}: {e}", dir.display())))?;
    write_schema(&ds.schema, &dir.join("schema.json"))?;

    let path = dir.join("data.csv");
    let mut w = csv::Writer::from_path(&path)
        .map_err(|e| ShivaeError::data(format!("cannot write {}: {e}", path.display())))?;
    let mut header = vec!["sequence_id".to_string(), "t".to_string()];
    header.extend(ds.schema.iter().map(|a| a.name.clone()));
    w.write_record(&header).map_err(|e| ShivaeError::data(e.to_string()))?;
    for seq in &ds.sequences {
        for t in 0..seq.len() {
            let mut rec = vec![seq.id.clone(), t.to_string()];
            for (d, attr) in ds.schema.iter().enumerate() {
                if seq.mask[(t, d)] {
                    rec.push(format_cell(&attr.kind, seq.values[(t, d)]));
                } else {
                    rec.push(String::new());
                }
            }
            w.write_record(&rec).map_err(|e| ShivaeError::data(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| ShivaeError::data(e.to_string()))?;
    Ok(())
}

pub fn write_schema(schema: &[AttributeSchema], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(schema)
        .map_err(|e| ShivaeError::config(e.to_string()))?;
    std::fs::write(path, json)
        .map_err(|e| ShivaeError::config(format!("cannot write {}: {e}", path.display())))
}

pub fn read_schema(path: &Path) -> Result<Vec<AttributeSchema>> {
    if !path.exists() {
        return Err(ShivaeError::config(format!("schema file {} not found", path.display())));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| ShivaeError::config(format!("cannot read {}: {e}", path.display())))?;
    let schema: Vec<AttributeSchema> =
        serde_json::from_str(&text).map_err(|e| ShivaeError::config(format!("bad schema: {e}")))?;
    validate_schema(&schema)?;
    Ok(schema)
}

/// Read a dataset from `dir` (`data.csv` + `schema.json`), or from a
/// custom schema path when `schema_path` is given.
pub fn read_dataset(dir: &Path, schema_path: Option<&Path>) -> Result<HeterogeneousDataset> {
    let schema_file = schema_path
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| dir.join("schema.json"));
    let schema = read_schema(&schema_file)?;
    let data_path = dir.join("data.csv");
    let rows = read_value_rows(&data_path, &schema.iter().map(|a| a.name.clone()).collect::<Vec<_>>())?;

    let d = schema.len();
    let mut sequences = Vec::new();
    for (id, cells) in rows {
        let t_len = cells.len();
        let mut values = Array2::from_elem((t_len, d), f64::NAN);
        let mut mask = Array2::from_elem((t_len, d), false);
        for (t, row) in cells.into_iter().enumerate() {
            for (j, cell) in row.into_iter().enumerate() {
                if let Some(v) = cell {
                    values[(t, j)] = v;
                    mask[(t, j)] = true;
                }
            }
        }
        sequences.push(Sequence::new(id, values, mask)?);
    }
    HeterogeneousDataset::new(schema, sequences)
}

type ParsedRows = Vec<(String, Vec<Vec<Option<f64>>>)>;

/// Shared reader for `sequence_id,t,<cols>` CSVs. Rows must be grouped by
/// sequence with `t` increasing from 0 within each group.
fn read_value_rows(path: &Path, expected_cols: &[String]) -> Result<ParsedRows> {
    if !path.exists() {
        return Err(ShivaeError::data(format!("{} not found", path.display())));
    }
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| ShivaeError::data(format!("cannot read {}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| ShivaeError::data(e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() != expected_cols.len() + 2 || cols[0] != "sequence_id" || cols[1] != "t" {
        return Err(ShivaeError::data(format!(
            "{}: expected header sequence_id,t,{}",
            path.display(),
            expected_cols.join(",")
        )));
    }
    for (got, want) in cols[2..].iter().zip(expected_cols) {
        if got != want {
            return Err(ShivaeError::data(format!(
                "{}: column '{got}' does not match schema attribute '{want}'",
                path.display()
            )));
        }
    }

    let mut rows: ParsedRows = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| ShivaeError::data(e.to_string()))?;
        let id = record.get(0).unwrap_or("").to_string();
        let t: usize = record
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|_| ShivaeError::data(format!("bad time index '{}'", record.get(1).unwrap_or(""))))?;
        let mut cells = Vec::with_capacity(expected_cols.len());
        for j in 0..expected_cols.len() {
            let raw = record.get(j + 2).unwrap_or("").trim();
            if raw.is_empty() {
                cells.push(None);
            } else {
                let v: f64 = raw.parse().map_err(|_| {
                    ShivaeError::data(format!("cannot parse '{raw}' in column {}", expected_cols[j]))
                })?;
                cells.push(Some(v));
            }
        }
        match rows.last_mut() {
            Some((last_id, seq_rows)) if *last_id == id => {
                if t != seq_rows.len() {
                    return Err(ShivaeError::data(format!(
                        "sequence '{id}': expected t={}, found t={t}",
                        seq_rows.len()
                    )));
                }
                seq_rows.push(cells);
            }
            _ => {
                if rows.iter().any(|(other, _)| *other == id) {
                    return Err(ShivaeError::data(format!(
                        "sequence '{id}' appears in non-contiguous blocks"
                    )));
                }
                if t != 0 {
                    return Err(ShivaeError::data(format!(
                        "sequence '{id}' must start at t=0, found t={t}"
                    )));
                }
                rows.push((id, vec![cells]));
            }
        }
    }
    Ok(rows)
}

/// Write one overlay as CSV: same shape as the dataset, cells in {0,1},
/// 1 = artificially hidden.
pub fn write_overlay(overlay: &MaskOverlay, ds: &HeterogeneousDataset, path: &Path) -> Result<()> {
    overlay.matches(ds)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| ShivaeError::data(format!("cannot create {}: {e}", parent.display())))?;
    }
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| ShivaeError::data(format!("cannot write {}: {e}", path.display())))?;
    let mut header = vec!["sequence_id".to_string(), "t".to_string()];
    header.extend(ds.schema.iter().map(|a| a.name.clone()));
    w.write_record(&header).map_err(|e| ShivaeError::data(e.to_string()))?;
    for (ov, seq) in overlay.per_seq.iter().zip(&ds.sequences) {
        for t in 0..seq.len() {
            let mut rec = vec![seq.id.clone(), t.to_string()];
            for d in 0..ds.num_attrs() {
                rec.push(if ov[(t, d)] { "1".into() } else { "0".into() });
            }
            w.write_record(&rec).map_err(|e| ShivaeError::data(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| ShivaeError::data(e.to_string()))?;
    Ok(())
}

/// Read an overlay CSV and align it against `ds`.
pub fn read_overlay(path: &Path, ds: &HeterogeneousDataset) -> Result<MaskOverlay> {
    let names: Vec<String> = ds.schema.iter().map(|a| a.name.clone()).collect();
    let rows = read_value_rows(path, &names)?;
    if rows.len() != ds.sequences.len() {
        return Err(ShivaeError::data(format!(
            "overlay {} covers {} sequences, dataset has {}",
            path.display(),
            rows.len(),
            ds.sequences.len()
        )));
    }
    let mut per_seq = Vec::with_capacity(rows.len());
    for ((id, cells), seq) in rows.into_iter().zip(&ds.sequences) {
        if id != seq.id {
            return Err(ShivaeError::data(format!(
                "overlay sequence '{id}' does not match dataset sequence '{}'",
                seq.id
            )));
        }
        if cells.len() != seq.len() {
            return Err(ShivaeError::data(format!(
                "overlay for '{id}' has {} steps, sequence has {}",
                cells.len(),
                seq.len()
            )));
        }
        let mut ov = Array2::from_elem(seq.values.dim(), false);
        for (t, row) in cells.into_iter().enumerate() {
            for (d, cell) in row.into_iter().enumerate() {
                let v = cell.ok_or_else(|| {
                    ShivaeError::data(format!("overlay cell ({id},{t},{d}) is empty"))
                })?;
                ov[(t, d)] = match v as i64 {
                    0 => false,
                    1 => true,
                    _ => {
                        return Err(ShivaeError::data(format!(
                            "overlay cell ({id},{t},{d}) must be 0 or 1, got {v}"
                        )))
                    }
                };
            }
        }
        per_seq.push(ov);
    }
    let overlay = MaskOverlay { per_seq };
    overlay.check_disjoint(ds)?;
    Ok(overlay)
}
