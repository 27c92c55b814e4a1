//! Imputation quality metrics, evaluated only at artificially hidden
//! cells: normalized RMSE for continuous attributes, classification
//! error for discrete ones, and a per-burst cross-correlation score
//! that rewards reconstructing the shape of a gap, not just its level.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{AttributeSchema, Sequence};
use crate::error::{Result, ShivaeError};

/// Root mean square error over hidden cells, divided by the value range
/// of the attribute's full ground truth. `None` when nothing is hidden
/// (the metric is absent, not zero).
///
/// Rows are per-sequence time series of one attribute; `hidden` flags
/// the evaluation cells, which must be observed in the ground truth.
pub fn nrmse(
    truth_rows: &[Vec<f64>],
    imputed_rows: &[Vec<f64>],
    hidden_rows: &[Vec<bool>],
) -> Result<Option<f64>> {
    check_shapes(truth_rows, imputed_rows, hidden_rows)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for row in truth_rows {
        for &v in row {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !(hi > lo) {
        return Err(ShivaeError::data(
            "attribute range is zero (constant ground truth); normalized error undefined",
        ));
    }
    let mut sq = 0.0;
    let mut n = 0usize;
    for ((t_row, i_row), h_row) in truth_rows.iter().zip(imputed_rows).zip(hidden_rows) {
        for ((&t, &i), &h) in t_row.iter().zip(i_row).zip(h_row) {
            if h {
                sq += (i - t) * (i - t);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Ok(None);
    }
    Ok(Some((sq / n as f64).sqrt() / (hi - lo)))
}

/// Fraction of hidden cells whose imputed code differs from the truth.
pub fn classification_error(
    truth_rows: &[Vec<f64>],
    imputed_rows: &[Vec<f64>],
    hidden_rows: &[Vec<bool>],
) -> Result<Option<f64>> {
    check_shapes(truth_rows, imputed_rows, hidden_rows)?;
    let mut wrong = 0usize;
    let mut n = 0usize;
    for ((t_row, i_row), h_row) in truth_rows.iter().zip(imputed_rows).zip(hidden_rows) {
        for ((&t, &i), &h) in t_row.iter().zip(i_row).zip(h_row) {
            if h {
                n += 1;
                if i != t {
                    wrong += 1;
                }
            }
        }
    }
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(wrong as f64 / n as f64))
}

/// Burst score: maximum over all lags (with at least one overlapping
/// point) of the cross-correlation between the mean-centered true and
/// imputed burst signals. Centering makes any constant truth score 0;
/// there is no further normalization, so values can exceed 1.
pub fn burst_xcorr(w: &[f64], w_hat: &[f64]) -> f64 {
    assert_eq!(w.len(), w_hat.len(), "burst signals must have equal length");
    assert!(!w.is_empty(), "burst must contain at least one point");
    let n = w.len() as f64;
    let mu_w = w.iter().sum::<f64>() / n;
    let mu_h = w_hat.iter().sum::<f64>() / n;
    let wc: Vec<f64> = w.iter().map(|&v| v - mu_w).collect();
    let hc: Vec<f64> = w_hat.iter().map(|&v| v - mu_h).collect();
    let len = wc.len() as isize;
    let mut best = f64::NEG_INFINITY;
    for lag in -(len - 1)..=(len - 1) {
        let mut acc = 0.0;
        for i in 0..len {
            let j = i + lag;
            if j >= 0 && j < len {
                acc += wc[i as usize] * hc[j as usize];
            }
        }
        best = best.max(acc);
    }
    best
}

/// Maximal runs of `true` in a boolean row, as index ranges.
pub fn hidden_runs(row: &[bool]) -> Vec<std::ops::Range<usize>> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &h) in row.iter().enumerate() {
        match (h, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(s..row.len());
    }
    runs
}

/// Burst cross-correlation summed over every maximal hidden run and
/// divided by the total number of hidden cells. `None` when nothing is
/// hidden.
pub fn phi(
    truth_rows: &[Vec<f64>],
    imputed_rows: &[Vec<f64>],
    hidden_rows: &[Vec<bool>],
) -> Result<Option<f64>> {
    check_shapes(truth_rows, imputed_rows, hidden_rows)?;
    let mut total = 0.0;
    let mut n_hidden = 0usize;
    for ((t_row, i_row), h_row) in truth_rows.iter().zip(imputed_rows).zip(hidden_rows) {
        for run in hidden_runs(h_row) {
            n_hidden += run.len();
            total += burst_xcorr(&t_row[run.clone()], &i_row[run]);
        }
    }
    if n_hidden == 0 {
        return Ok(None);
    }
    Ok(Some(total / n_hidden as f64))
}

fn check_shapes(
    truth_rows: &[Vec<f64>],
    imputed_rows: &[Vec<f64>],
    hidden_rows: &[Vec<bool>],
) -> Result<()> {
    if truth_rows.len() != imputed_rows.len() || truth_rows.len() != hidden_rows.len() {
        return Err(ShivaeError::data("metric inputs have different sequence counts"));
    }
    for ((t, i), h) in truth_rows.iter().zip(imputed_rows).zip(hidden_rows) {
        if t.len() != i.len() || t.len() != h.len() {
            return Err(ShivaeError::data("metric inputs have different sequence lengths"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset-level evaluation and aggregation
// ---------------------------------------------------------------------------

/// Metrics of one attribute under one mask replicate. Absent values
/// mean the replicate hid no cells of this attribute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttrMetrics {
    pub err: Option<f64>,
    pub phi: Option<f64>,
}

/// Metrics of one mask replicate across all attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub per_attr: Vec<AttrMetrics>,
    /// Mean error over attributes with a defined error.
    pub error_avg: Option<f64>,
    /// Mean burst score over all attributes with a defined score.
    pub xcorr_avg: Option<f64>,
    /// Mean burst score over continuous attributes only.
    pub xcorr_continuous: Option<f64>,
}

/// Evaluate one imputation against the ground truth. `hidden` holds the
/// evaluation cells per sequence; cells missing in the ground truth are
/// skipped even if flagged.
pub fn evaluate_replicate(
    schema: &[AttributeSchema],
    truth: &[&Sequence],
    completed: &[&Array2<f64>],
    hidden: &[&Array2<bool>],
) -> Result<ReplicateMetrics> {
    if truth.len() != completed.len() || truth.len() != hidden.len() {
        return Err(ShivaeError::data("evaluation inputs have different sequence counts"));
    }
    for ((seq, imp), hid) in truth.iter().zip(completed).zip(hidden) {
        if seq.values.dim() != imp.dim() || seq.values.dim() != hid.dim() {
            return Err(ShivaeError::data(format!(
                "evaluation shapes for sequence '{}' do not line up",
                seq.id
            )));
        }
    }
    let mut per_attr = Vec::with_capacity(schema.len());
    for (d, attr) in schema.iter().enumerate() {
        let mut truth_rows = Vec::with_capacity(truth.len());
        let mut imputed_rows = Vec::with_capacity(truth.len());
        let mut hidden_rows = Vec::with_capacity(truth.len());
        for ((seq, imp), hid) in truth.iter().zip(completed).zip(hidden) {
            let t_len = seq.len();
            let mut tr = Vec::with_capacity(t_len);
            let mut ir = Vec::with_capacity(t_len);
            let mut hr = Vec::with_capacity(t_len);
            for t in 0..t_len {
                tr.push(if seq.mask[(t, d)] { seq.values[(t, d)] } else { f64::NAN });
                ir.push(imp[(t, d)]);
                hr.push(hid[(t, d)] && seq.mask[(t, d)]);
            }
            truth_rows.push(tr);
            imputed_rows.push(ir);
            hidden_rows.push(hr);
        }
        let err = if attr.kind.is_continuous() {
            nrmse(&truth_rows, &imputed_rows, &hidden_rows)?
        } else {
            classification_error(&truth_rows, &imputed_rows, &hidden_rows)?
        };
        let phi_d = phi(&truth_rows, &imputed_rows, &hidden_rows)?;
        per_attr.push(AttrMetrics { err, phi: phi_d });
    }
    let error_avg = mean_defined(per_attr.iter().map(|a| a.err));
    let xcorr_avg = mean_defined(per_attr.iter().map(|a| a.phi));
    let xcorr_continuous = mean_defined(
        per_attr
            .iter()
            .zip(schema)
            .filter(|(_, a)| a.kind.is_continuous())
            .map(|(m, _)| m.phi),
    );
    Ok(ReplicateMetrics { per_attr, error_avg, xcorr_avg, xcorr_continuous })
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Mean and sample standard deviation across mask replicates. A single
/// replicate reports a standard deviation of 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = if samples.len() < 2 {
            0.0
        } else {
            (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(MeanStd { mean, std })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} \u{00b1} {:.4}", self.mean, self.std)
    }
}

/// Replicate-aggregated metrics for one imputation method. Replicate
/// values with an absent metric are skipped in that metric's average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub attr_names: Vec<String>,
    pub replicates: Vec<ReplicateMetrics>,
    pub per_attr_err: Vec<Option<MeanStd>>,
    pub per_attr_phi: Vec<Option<MeanStd>>,
    pub error: Option<MeanStd>,
    pub xcorr: Option<MeanStd>,
    pub xcorr_continuous: Option<MeanStd>,
}

/// Aggregate per-replicate metrics into mean-and-spread summaries.
pub fn aggregate(schema: &[AttributeSchema], replicates: Vec<ReplicateMetrics>) -> Result<MetricReport> {
    if replicates.is_empty() {
        return Err(ShivaeError::data("aggregation needs at least one replicate"));
    }
    for r in &replicates {
        if r.per_attr.len() != schema.len() {
            return Err(ShivaeError::data("replicate attribute count does not match the schema"));
        }
    }
    let collect = |f: &dyn Fn(&ReplicateMetrics) -> Option<f64>| -> Option<MeanStd> {
        let vals: Vec<f64> = replicates.iter().filter_map(f).collect();
        MeanStd::from_samples(&vals)
    };
    let per_attr_err = (0..schema.len())
        .map(|d| collect(&|r: &ReplicateMetrics| r.per_attr[d].err))
        .collect();
    let per_attr_phi = (0..schema.len())
        .map(|d| collect(&|r: &ReplicateMetrics| r.per_attr[d].phi))
        .collect();
    Ok(MetricReport {
        attr_names: schema.iter().map(|a| a.name.clone()).collect(),
        per_attr_err,
        per_attr_phi,
        error: collect(&|r| r.error_avg),
        xcorr: collect(&|r| r.xcorr_avg),
        xcorr_continuous: collect(&|r| r.xcorr_continuous),
        replicates,
    })
}
