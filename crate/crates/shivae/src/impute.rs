//! Imputation strategies behind a single trait, registered by name so
//! callers select a method at runtime: the trained sequential VAE plus
//! the Mean and LOCF (last observation carried forward) baselines.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::Serialize;

use crate::data::{AttrKind, HeterogeneousDataset, MaskOverlay, Sequence};
use crate::error::{Result, ShivaeError};
use crate::model::{filter_sequence, AttrParamValues, SeededNoise, ShiVae};
use crate::nn::ParamStore;
use crate::preprocess::{apply, zero_fill, TransformState};
use crate::synth::derive_seed;
use crate::train::Checkpoint;

/// Data-space likelihood parameters of one cell. Baselines produce
/// point estimates without a distributional summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CellParams {
    Gaussian { mean: f64, var: f64 },
    Bernoulli { p: f64 },
    Categorical { probs: Vec<f64> },
    Point,
}

/// A completed sequence plus per-cell parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationResult {
    /// T x D in data space; observed cells equal the input exactly.
    pub completed: Array2<f64>,
    /// T x D likelihood parameters.
    pub params: Vec<Vec<CellParams>>,
    /// Number of forward samples averaged into the estimates.
    pub samples: usize,
}

/// One imputation method. The sequence's mask already reflects every
/// cell to treat as missing (original gaps and evaluation overlays
/// alike); values under masked cells must not influence the output.
pub trait Imputer {
    fn name(&self) -> &str;
    fn impute(&self, seq: &Sequence, seed: u64) -> Result<ImputationResult>;
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// Name-keyed strategy registry backing the CLI's method selection.
#[derive(Default)]
pub struct ImputerRegistry {
    entries: BTreeMap<String, Box<dyn Imputer>>,
}

impl ImputerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, imputer: Box<dyn Imputer>) -> Result<()> {
        let name = imputer.name().to_string();
        if self.entries.contains_key(&name) {
            return Err(ShivaeError::config(format!(
                "imputation method '{name}' registered twice"
            )));
        }
        self.entries.insert(name, imputer);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&dyn Imputer> {
        self.entries.get(name).map(Box::as_ref).ok_or_else(|| {
            ShivaeError::config(format!(
                "unknown imputation method '{name}'; available: {}",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

/// Apply one imputer to every sequence of a dataset, with evaluation
/// overlays folded into the masks and one derived seed per sequence.
pub fn impute_dataset(
    imputer: &dyn Imputer,
    ds: &HeterogeneousDataset,
    overlay: Option<&MaskOverlay>,
    seed: u64,
) -> Result<Vec<ImputationResult>> {
    if let Some(ov) = overlay {
        ov.matches(ds)?;
    }
    ds.sequences
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let masked = match overlay {
                Some(ov) => seq.with_hidden(&ov.per_seq[i])?,
                None => seq.clone(),
            };
            imputer.impute(&masked, derive_seed(seed, i as u64))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Model-based imputer
// ---------------------------------------------------------------------------

/// Imputer backed by a trained model: S independent forward filtering
/// passes, combined per cell (mean of decoded means for continuous
/// attributes, majority vote for discrete ones).
pub struct ShiVaeImputer {
    model: ShiVae,
    store: ParamStore,
    transform: TransformState,
    samples: usize,
    /// Use the posterior mean of the continuous latent instead of a draw.
    latent_mean: bool,
}

impl ShiVaeImputer {
    pub fn from_checkpoint(cp: &Checkpoint, samples: usize, latent_mean: bool) -> Result<Self> {
        if samples < 1 {
            return Err(ShivaeError::config("sample count must be at least 1"));
        }
        let (model, store) = cp.instantiate()?;
        Ok(ShiVaeImputer {
            model,
            store,
            transform: cp.transform.clone(),
            samples,
            latent_mean,
        })
    }
}

impl Imputer for ShiVaeImputer {
    fn name(&self) -> &str {
        "shi-vae"
    }

    fn impute(&self, seq: &Sequence, seed: u64) -> Result<ImputationResult> {
        if seq.num_attrs() != self.model.schema.len() {
            return Err(ShivaeError::data(format!(
                "sequence has {} attributes, model expects {}",
                seq.num_attrs(),
                self.model.schema.len()
            )));
        }
        let t_len = seq.len();
        let d_len = seq.num_attrs();
        let enc = apply(&self.transform, seq)?;
        let x_filled = zero_fill(&enc);
        let attr_obs = seq.mask.map(|&m| f64::from(m));

        let mut passes = Vec::with_capacity(self.samples);
        for s in 0..self.samples {
            let mut noise = SeededNoise::new(derive_seed(seed, s as u64));
            passes.push(filter_sequence(
                &self.model,
                &self.store,
                &x_filled,
                &attr_obs,
                &mut noise,
                self.latent_mean,
            )?);
        }

        let mut completed = seq.values.clone();
        let mut params = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut row = Vec::with_capacity(d_len);
            for d in 0..d_len {
                let (cell, value) = combine_cell(&self.transform, &self.model.schema[d].kind, d, &passes, t);
                if !seq.mask[(t, d)] {
                    completed[(t, d)] = value;
                }
                row.push(cell);
            }
            params.push(row);
        }
        Ok(ImputationResult { completed, params, samples: self.samples })
    }
}

/// Combine the S per-pass likelihood parameters of one cell into a
/// data-space summary and a point estimate.
fn combine_cell(
    ts: &TransformState,
    kind: &AttrKind,
    d: usize,
    passes: &[Vec<Vec<AttrParamValues>>],
    t: usize,
) -> (CellParams, f64) {
    let s_count = passes.len() as f64;
    match kind {
        AttrKind::Real | AttrKind::Positive => {
            // mixture moments over the S decoded Gaussians
            let mut mean_sum = 0.0;
            let mut second_sum = 0.0;
            for pass in passes {
                let (mu, var) = match &pass[t][d] {
                    AttrParamValues::Gaussian { mu, var } => (*mu, *var),
                    other => unreachable!("continuous head produced {other:?}"),
                };
                let (m, v) = ts.decode_gaussian(d, mu, var);
                mean_sum += m;
                second_sum += v + m * m;
            }
            let mean = mean_sum / s_count;
            let var = (second_sum / s_count - mean * mean).max(0.0);
            (CellParams::Gaussian { mean, var }, mean)
        }
        AttrKind::Binary => {
            let mut votes = 0usize;
            let mut p_sum = 0.0;
            for pass in passes {
                let p = match &pass[t][d] {
                    AttrParamValues::Bernoulli { p } => *p,
                    other => unreachable!("binary head produced {other:?}"),
                };
                p_sum += p;
                if p > 0.5 {
                    votes += 1;
                }
            }
            let p_mean = p_sum / s_count;
            // majority vote; an even split defers to the mean probability
            let value = match (2 * votes).cmp(&passes.len()) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Less => 0.0,
                std::cmp::Ordering::Equal => f64::from(p_mean >= 0.5),
            };
            (CellParams::Bernoulli { p: p_mean }, value)
        }
        AttrKind::Categorical { num_classes } => {
            let mut votes = vec![0usize; *num_classes];
            let mut prob_sum = vec![0.0; *num_classes];
            for pass in passes {
                let probs = match &pass[t][d] {
                    AttrParamValues::Categorical { probs } => probs,
                    other => unreachable!("categorical head produced {other:?}"),
                };
                let mut best = 0;
                for (c, &p) in probs.iter().enumerate() {
                    prob_sum[c] += p;
                    if p > probs[best] {
                        best = c;
                    }
                }
                votes[best] += 1;
            }
            // ties resolve to the smallest class index
            let mut winner = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[winner] {
                    winner = c;
                }
            }
            let probs: Vec<f64> = prob_sum.iter().map(|&p| p / s_count).collect();
            (CellParams::Categorical { probs }, winner as f64)
        }
    }
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Unconditional baseline: every missing cell takes the training-split
/// mean (continuous) or mode (discrete) of its attribute.
#[derive(Debug, Clone)]
pub struct MeanImputer {
    fill: Vec<f64>,
}

impl MeanImputer {
    /// Fit fill values from the observed cells of a training split.
    /// The split's masks must already hide any evaluation cells.
    pub fn fit(train: &HeterogeneousDataset) -> Result<Self> {
        let mut fill = Vec::with_capacity(train.num_attrs());
        for (d, attr) in train.schema.iter().enumerate() {
            let observed: Vec<f64> = train
                .sequences
                .iter()
                .flat_map(|seq| {
                    (0..seq.len())
                        .filter(move |&t| seq.mask[(t, d)])
                        .map(move |t| seq.values[(t, d)])
                })
                .collect();
            if observed.is_empty() {
                return Err(ShivaeError::data(format!(
                    "attribute '{}' is never observed in training; cannot fit a mean",
                    attr.name
                )));
            }
            let value = match attr.kind {
                AttrKind::Real | AttrKind::Positive => {
                    observed.iter().sum::<f64>() / observed.len() as f64
                }
                AttrKind::Binary => {
                    let ones = observed.iter().filter(|&&v| v == 1.0).count();
                    // mode; a tie resolves to 0
                    f64::from(2 * ones > observed.len())
                }
                AttrKind::Categorical { num_classes } => {
                    let mut counts = vec![0usize; num_classes];
                    for &v in &observed {
                        counts[v as usize] += 1;
                    }
                    let mut winner = 0;
                    for (c, &n) in counts.iter().enumerate() {
                        if n > counts[winner] {
                            winner = c;
                        }
                    }
                    winner as f64
                }
            };
            fill.push(value);
        }
        Ok(MeanImputer { fill })
    }
}

impl Imputer for MeanImputer {
    fn name(&self) -> &str {
        "mean"
    }

    fn impute(&self, seq: &Sequence, _seed: u64) -> Result<ImputationResult> {
        if seq.num_attrs() != self.fill.len() {
            return Err(ShivaeError::data(format!(
                "sequence has {} attributes, fitted statistics expect {}",
                seq.num_attrs(),
                self.fill.len()
            )));
        }
        let mut completed = seq.values.clone();
        for ((t, d), v) in completed.indexed_iter_mut() {
            if !seq.mask[(t, d)] {
                *v = self.fill[d];
            }
        }
        let params = point_params(seq.len(), seq.num_attrs());
        Ok(ImputationResult { completed, params, samples: 1 })
    }
}

/// Carry the most recent observed value forward; leading gaps take the
/// first observed value.
pub struct LocfImputer;

impl Imputer for LocfImputer {
    fn name(&self) -> &str {
        "locf"
    }

    fn impute(&self, seq: &Sequence, _seed: u64) -> Result<ImputationResult> {
        let mut completed = seq.values.clone();
        for d in 0..seq.num_attrs() {
            let first_obs = (0..seq.len()).find(|&t| seq.mask[(t, d)]).ok_or_else(|| {
                ShivaeError::data(format!(
                    "attribute {d} of sequence '{}' has no observed values to carry forward",
                    seq.id
                ))
            })?;
            let mut last = seq.values[(first_obs, d)];
            for t in 0..seq.len() {
                if seq.mask[(t, d)] {
                    last = seq.values[(t, d)];
                } else {
                    completed[(t, d)] = last;
                }
            }
        }
        let params = point_params(seq.len(), seq.num_attrs());
        Ok(ImputationResult { completed, params, samples: 1 })
    }
}

fn point_params(t_len: usize, d_len: usize) -> Vec<Vec<CellParams>> {
    (0..t_len).map(|_| vec![CellParams::Point; d_len]).collect()
}
