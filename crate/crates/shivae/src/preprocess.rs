//! Normalization and encoding between heterogeneous data space and the
//! real-valued network space: standard scaling for real attributes,
//! standard-scaled logs for positive attributes, one-hot expansion for
//! categorical attributes, and zero filling of missing inputs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{AttrKind, HeterogeneousDataset, MaskOverlay, Sequence};
use crate::error::{Result, ShivaeError};

/// Fitted transform for one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transform", rename_all = "snake_case")]
pub enum AttrTransform {
    /// Real attribute: (x - mean) / std.
    Standard { mean: f64, std: f64, degenerate: bool },
    /// Positive attribute: (ln x - log_mean) / log_std.
    LogStandard { log_mean: f64, log_std: f64, degenerate: bool },
    /// Binary attribute: raw {0,1} passes through.
    Identity,
    /// Categorical attribute: one-hot of width `num_classes`.
    OneHot { num_classes: usize },
}

impl AttrTransform {
    /// Width of this attribute in encoded space.
    pub fn width(&self) -> usize {
        match self {
            AttrTransform::OneHot { num_classes } => *num_classes,
            _ => 1,
        }
    }
}

/// Per-attribute statistics plus the encoded-space layout. Immutable
/// after fitting; serialized inside model checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformState {
    pub per_attr: Vec<AttrTransform>,
    /// Start column of each attribute in encoded space.
    pub offsets: Vec<usize>,
    pub encoded_dim: usize,
}

/// Mean and population standard deviation of a sample; the degenerate
/// flag marks constant (or single-value) attributes whose std was
/// replaced by 1 so scaling stays well defined.
fn mean_std(values: &[f64]) -> (f64, f64, bool) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 0.0 {
        (mean, std, false)
    } else {
        (mean, 1.0, true)
    }
}

/// Fit transform statistics from the observed cells of a training split.
/// Cells hidden by `overlay` are excluded so evaluation targets never
/// leak into the statistics.
pub fn fit_transform_state(
    train: &HeterogeneousDataset,
    overlay: Option<&MaskOverlay>,
) -> Result<TransformState> {
    if let Some(ov) = overlay {
        ov.matches(train)?;
    }
    let mut per_attr = Vec::with_capacity(train.num_attrs());
    for (d, attr) in train.schema.iter().enumerate() {
        let transform = match attr.kind {
            AttrKind::Binary => AttrTransform::Identity,
            AttrKind::Categorical { num_classes } => AttrTransform::OneHot { num_classes },
            AttrKind::Real | AttrKind::Positive => {
                let mut sample = Vec::new();
                for (i, seq) in train.sequences.iter().enumerate() {
                    for t in 0..seq.len() {
                        if !seq.mask[(t, d)] {
                            continue;
                        }
                        if overlay.is_some_and(|ov| ov.per_seq[i][(t, d)]) {
                            continue;
                        }
                        let v = seq.values[(t, d)];
                        if attr.kind == AttrKind::Positive {
                            if v <= 0.0 {
                                return Err(ShivaeError::data(format!(
                                    "attribute '{}': observed value {v} is not positive",
                                    attr.name
                                )));
                            }
                            sample.push(v.ln());
                        } else {
                            sample.push(v);
                        }
                    }
                }
                if sample.is_empty() {
                    return Err(ShivaeError::data(format!(
                        "attribute '{}' has no usable training values to fit scaling",
                        attr.name
                    )));
                }
                let (mean, std, degenerate) = mean_std(&sample);
                if attr.kind == AttrKind::Positive {
                    AttrTransform::LogStandard { log_mean: mean, log_std: std, degenerate }
                } else {
                    AttrTransform::Standard { mean, std, degenerate }
                }
            }
        };
        per_attr.push(transform);
    }
    Ok(TransformState::from_transforms(per_attr))
}

impl TransformState {
    pub fn from_transforms(per_attr: Vec<AttrTransform>) -> Self {
        let mut offsets = Vec::with_capacity(per_attr.len());
        let mut off = 0;
        for t in &per_attr {
            offsets.push(off);
            off += t.width();
        }
        TransformState { per_attr, offsets, encoded_dim: off }
    }

    pub fn num_attrs(&self) -> usize {
        self.per_attr.len()
    }

    /// Encoded columns `offset..offset+width` of attribute `d`.
    pub fn cols(&self, d: usize) -> std::ops::Range<usize> {
        let start = self.offsets[d];
        start..start + self.per_attr[d].width()
    }

    /// Encode one observed data-space value into its encoded columns.
    pub fn encode_value(&self, d: usize, x: f64, out: &mut [f64]) -> Result<()> {
        match &self.per_attr[d] {
            AttrTransform::Standard { mean, std, .. } => out[0] = (x - mean) / std,
            AttrTransform::LogStandard { log_mean, log_std, .. } => {
                if x <= 0.0 {
                    return Err(ShivaeError::data(format!(
                        "positive attribute {d} has observed value {x}"
                    )));
                }
                out[0] = (x.ln() - log_mean) / log_std;
            }
            AttrTransform::Identity => out[0] = x,
            AttrTransform::OneHot { num_classes } => {
                let code = x as usize;
                if x.fract() != 0.0 || code >= *num_classes {
                    return Err(ShivaeError::data(format!(
                        "categorical attribute {d} has code {x}, expected 0..{num_classes}"
                    )));
                }
                out.fill(0.0);
                out[code] = 1.0;
            }
        }
        Ok(())
    }

    /// Map one encoded slice back to a data-space value. One-hot slices
    /// decode by argmax, so this also accepts class probabilities.
    pub fn decode_value(&self, d: usize, enc: &[f64]) -> f64 {
        match &self.per_attr[d] {
            AttrTransform::Standard { mean, std, .. } => mean + std * enc[0],
            AttrTransform::LogStandard { log_mean, log_std, .. } => {
                (log_mean + log_std * enc[0]).exp()
            }
            AttrTransform::Identity => enc[0],
            AttrTransform::OneHot { .. } => {
                let mut best = 0;
                for (c, &v) in enc.iter().enumerate() {
                    if v > enc[best] {
                        best = c;
                    }
                }
                best as f64
            }
        }
    }

    /// Map an encoded-space Gaussian (mean, variance) for a continuous
    /// attribute to its data-space mean and variance. For positive
    /// attributes the encoded Gaussian models the scaled log, so the
    /// data-space law is log-normal and its moments follow from it.
    pub fn decode_gaussian(&self, d: usize, mean_e: f64, var_e: f64) -> (f64, f64) {
        match &self.per_attr[d] {
            AttrTransform::Standard { mean, std, .. } => {
                (mean + std * mean_e, std * std * var_e)
            }
            AttrTransform::LogStandard { log_mean, log_std, .. } => {
                let mu = log_mean + log_std * mean_e;
                let s2 = log_std * log_std * var_e;
                let m = (mu + 0.5 * s2).exp();
                let v = (s2.exp() - 1.0) * (2.0 * mu + s2).exp();
                (m, v)
            }
            _ => (mean_e, var_e),
        }
    }
}

/// A sequence in encoded space. `values` is T x E with NaN in missing
/// cells; `mask` is the per-encoded-column observation mask (all columns
/// of a one-hot block share their attribute's flag).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
}

/// Encode a whole sequence. Missing cells stay NaN and are flagged in
/// the encoded mask rather than transformed.
pub fn apply(ts: &TransformState, seq: &Sequence) -> Result<EncodedSequence> {
    if seq.num_attrs() != ts.num_attrs() {
        return Err(ShivaeError::data(format!(
            "sequence has {} attributes, transform expects {}",
            seq.num_attrs(),
            ts.num_attrs()
        )));
    }
    let t_len = seq.len();
    let mut values = Array2::from_elem((t_len, ts.encoded_dim), f64::NAN);
    let mut mask = Array2::from_elem((t_len, ts.encoded_dim), false);
    let mut buf = vec![0.0; ts.encoded_dim];
    for t in 0..t_len {
        for d in 0..ts.num_attrs() {
            if !seq.mask[(t, d)] {
                continue;
            }
            let cols = ts.cols(d);
            let slice = &mut buf[..cols.len()];
            ts.encode_value(d, seq.values[(t, d)], slice)?;
            for (k, c) in cols.enumerate() {
                values[(t, c)] = slice[k];
                mask[(t, c)] = true;
            }
        }
    }
    Ok(EncodedSequence { values, mask })
}

/// Replace missing encoded cells by zero, leaving observed cells alone.
/// The result carries no NaN and is safe to feed to the networks.
pub fn zero_fill(enc: &EncodedSequence) -> Array2<f64> {
    let mut out = enc.values.clone();
    for ((t, c), v) in out.indexed_iter_mut() {
        if !enc.mask[(t, c)] {
            *v = 0.0;
        }
    }
    out
}

/// Decode every time step of an encoded value table back to data space.
pub fn invert(ts: &TransformState, encoded: &Array2<f64>) -> Result<Array2<f64>> {
    if encoded.ncols() != ts.encoded_dim {
        return Err(ShivaeError::data(format!(
            "encoded table has {} columns, transform expects {}",
            encoded.ncols(),
            ts.encoded_dim
        )));
    }
    let mut out = Array2::zeros((encoded.nrows(), ts.num_attrs()));
    for t in 0..encoded.nrows() {
        for d in 0..ts.num_attrs() {
            let cols = ts.cols(d);
            let slice: Vec<f64> = cols.map(|c| encoded[(t, c)]).collect();
            out[(t, d)] = ts.decode_value(d, &slice);
        }
    }
    Ok(out)
}
