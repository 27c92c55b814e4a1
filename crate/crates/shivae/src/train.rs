//! Optimization loop: deterministic splitting, right-padded batching,
//! Adam with global-norm gradient clipping, linear KL annealing, and
//! versioned checksummed checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{validate_dataset, AttributeSchema, HeterogeneousDataset, MaskOverlay, Sequence};
use crate::error::{Result, ShivaeError};
use crate::model::{elbo_forward, Batch, ElboSettings, ElboTerms, ModelDims, SeededNoise, ShiVae};
use crate::nn::ParamStore;
use crate::preprocess::{apply, fit_transform_state, zero_fill, TransformState};
use crate::synth::derive_seed;
use crate::tape::Tape;

/// Format version of the checkpoint container.
pub const CHECKPOINT_VERSION: u32 = 1;

// Named substream indices fed to the seed-derivation mix so each random
// decision gets an independent deterministic stream.
const SUB_SPLIT: u64 = 0x5001;
const SUB_INIT: u64 = 0x5002;
const SUB_SHUFFLE: u64 = 0x5003;
const SUB_NOISE: u64 = 0x5004;
const SUB_VAL_NOISE: u64 = 0x5005;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Training hyperparameters. Defaults follow the synthetic benchmark
/// configuration; every field can be overridden from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub annealing_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Continuous latent dimension.
    pub k: usize,
    /// Recurrent hidden dimension.
    pub h: usize,
    /// Mixture size of the discrete latent.
    pub l: usize,
    /// Hidden width of the small feedforward networks.
    pub width: usize,
    /// Global gradient-norm clip threshold.
    pub clip: f64,
    pub seed: u64,
    /// Gumbel-softmax temperature at the first epoch.
    pub temperature_start: f64,
    /// Temperature at the last epoch; equal to the start disables decay.
    pub temperature_end: f64,
    /// Train/validation/test fractions, summing to 1.
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            annealing_epochs: 20,
            learning_rate: 5e-3,
            batch_size: 64,
            k: 2,
            h: 10,
            l: 3,
            width: 32,
            clip: 0.5,
            seed: 0,
            temperature_start: 1.0,
            temperature_end: 1.0,
            split: [0.8, 0.1, 0.1],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.annealing_epochs == 0 {
            return Err(ShivaeError::config("annealing_epochs must be at least 1"));
        }
        if self.epochs > 0 && self.annealing_epochs > self.epochs {
            return Err(ShivaeError::config(format!(
                "annealing_epochs {} exceeds epochs {}",
                self.annealing_epochs, self.epochs
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ShivaeError::config("learning_rate must be positive"));
        }
        if !(self.clip > 0.0) {
            return Err(ShivaeError::config("gradient clip threshold must be positive"));
        }
        if self.batch_size == 0 {
            return Err(ShivaeError::config("batch_size must be at least 1"));
        }
        if !(self.temperature_start > 0.0) || !(self.temperature_end > 0.0) {
            return Err(ShivaeError::config("temperatures must be positive"));
        }
        self.dims().validate()?;
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|&f| f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(ShivaeError::config(format!(
                "split fractions {:?} must be nonnegative and sum to 1",
                self.split
            )));
        }
        if self.split[0] <= 0.0 {
            return Err(ShivaeError::config("training fraction must be positive"));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims { k: self.k, h: self.h, l: self.l, width: self.width }
    }

    /// Load from a JSON file; missing fields fall back to defaults.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ShivaeError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| {
            ShivaeError::config(format!("invalid config {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Linear annealing weight: `min(1, epoch / annealing_epochs)` with
/// epochs counted from 1.
pub fn anneal_beta(epoch: usize, annealing_epochs: usize) -> f64 {
    assert!(epoch >= 1 && annealing_epochs >= 1);
    (epoch as f64 / annealing_epochs as f64).min(1.0)
}

/// Gumbel-softmax temperature at an epoch: linear between the start and
/// end values across the configured run length.
pub fn temperature_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.temperature_start;
    }
    let frac = (epoch - 1) as f64 / (cfg.epochs - 1) as f64;
    cfg.temperature_start + (cfg.temperature_end - cfg.temperature_start) * frac
}

// ---------------------------------------------------------------------------
// Splitting and batching
// ---------------------------------------------------------------------------

/// Deterministic index split of `n` sequences into train/val/test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if n == 0 {
        return Err(ShivaeError::data("cannot split an empty dataset"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = ((n as f64 * fractions[0]).round() as usize).clamp(1, n);
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let train = idx[..n_train].to_vec();
    let val = idx[n_train..n_train + n_val].to_vec();
    let test = idx[n_train + n_val..].to_vec();
    Ok(SplitIndices { train, val, test })
}

/// One sequence ready for the network: zero-filled encoded values and a
/// per-attribute observation indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSeq {
    /// T x E zero-filled encoded values.
    pub x: Array2<f64>,
    /// T x D observation indicator as 0.0 / 1.0.
    pub attr_obs: Array2<f64>,
}

impl PreparedSeq {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// Encode, zero-fill, and extract indicators for a set of sequences.
pub fn prepare_sequences(ts: &TransformState, seqs: &[Sequence]) -> Result<Vec<PreparedSeq>> {
    seqs.iter()
        .map(|seq| {
            let enc = apply(ts, seq)?;
            let x = zero_fill(&enc);
            let attr_obs = seq.mask.map(|&m| f64::from(m));
            Ok(PreparedSeq { x, attr_obs })
        })
        .collect()
}

/// Group sequences (in the given order) into right-padded batches.
/// Padded steps carry zero values, zero indicators, and zero validity,
/// so they contribute nothing to any loss term.
pub fn make_batches(
    prepared: &[PreparedSeq],
    order: &[usize],
    batch_size: usize,
    enc_dim: usize,
    num_attrs: usize,
) -> Vec<Batch> {
    assert!(batch_size > 0);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let b = chunk.len();
            let t_max = chunk.iter().map(|&i| prepared[i].len()).max().unwrap_or(0);
            let mut x = Vec::with_capacity(t_max);
            let mut attr_obs = Vec::with_capacity(t_max);
            let mut valid = Vec::with_capacity(t_max);
            for t in 0..t_max {
                let mut xt = Array2::zeros((b, enc_dim));
                let mut ot = Array2::zeros((b, num_attrs));
                let mut vt = Array2::zeros((b, 1));
                for (row, &i) in chunk.iter().enumerate() {
                    let seq = &prepared[i];
                    if t < seq.len() {
                        xt.row_mut(row).assign(&seq.x.row(t));
                        ot.row_mut(row).assign(&seq.attr_obs.row(t));
                        vt[(row, 0)] = 1.0;
                    }
                }
                x.push(xt);
                attr_obs.push(ot);
                valid.push(vt);
            }
            Batch { x, attr_obs, valid }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Scale gradients so the global L2 norm does not exceed `threshold`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut BTreeMap<String, Array2<f64>>, threshold: f64) -> f64 {
    assert!(threshold > 0.0);
    let sq: f64 = grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > threshold {
        let factor = threshold / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }
    norm
}

/// Adam with the usual moment coefficients and bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: usize,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let p = store.get_mut(name);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Per-epoch record of the objective on the training and validation
/// splits. Validation is always evaluated with full KL weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub temperature: f64,
    pub train: ElboTerms,
    pub val: Option<ElboTerms>,
}

/// Everything needed to resume or apply a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dims: ModelDims,
    pub schema: Vec<AttributeSchema>,
    pub transform: TransformState,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Rebuild the architecture and hand back the stored weights.
    pub fn instantiate(&self) -> Result<(ShiVae, ParamStore)> {
        let (model, fresh) = ShiVae::init(self.dims, &self.schema, 0)?;
        let expected: Vec<&str> = fresh.names().collect();
        let got: Vec<&str> = self.params.names().collect();
        if expected != got {
            return Err(ShivaeError::data(
                "checkpoint parameters do not match the declared architecture",
            ));
        }
        for (name, w) in fresh.iter() {
            if self.params.get(name).dim() != w.dim() {
                return Err(ShivaeError::data(format!(
                    "checkpoint parameter '{name}' has the wrong shape"
                )));
            }
        }
        Ok((model, self.params.clone()))
    }
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    sha256: String,
    body: String,
}

const CONTAINER_FORMAT: &str = "shivae-checkpoint";

fn hex_digest(data: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data.as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    let body = serde_json::to_string(cp)
        .map_err(|e| ShivaeError::data(format!("cannot serialize checkpoint: {e}")))?;
    let container = Container {
        format: CONTAINER_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        sha256: hex_digest(&body),
        body,
    };
    let text = serde_json::to_string(&container)
        .map_err(|e| ShivaeError::data(format!("cannot serialize checkpoint: {e}")))?;
    std::fs::write(path, text).map_err(|e| {
        ShivaeError::data(format!("cannot write checkpoint {}: {e}", path.display()))
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        ShivaeError::data(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    let container: Container = serde_json::from_str(&text).map_err(|e| {
        ShivaeError::data(format!(
            "{} is not a readable checkpoint container: {e}",
            path.display()
        ))
    })?;
    if container.format != CONTAINER_FORMAT {
        return Err(ShivaeError::data(format!(
            "{} is not a checkpoint (format tag '{}')",
            path.display(),
            container.format
        )));
    }
    if container.version != CHECKPOINT_VERSION {
        return Err(ShivaeError::data(format!(
            "unsupported checkpoint version {} (this build reads version {})",
            container.version, CHECKPOINT_VERSION
        )));
    }
    if hex_digest(&container.body) != container.sha256 {
        return Err(ShivaeError::data(format!(
            "checkpoint {} failed its integrity check (corrupt or edited)",
            path.display()
        )));
    }
    serde_json::from_str(&container.body)
        .map_err(|e| ShivaeError::data(format!("corrupt checkpoint body: {e}")))
}

// ---------------------------------------------------------------------------
// The loop
// ---------------------------------------------------------------------------

/// Result of a training run. When the loss turns non-finite the run
/// stops early: `aborted` holds the reason and the checkpoints carry the
/// last parameters that were still finite.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Checkpoint of the epoch with the best validation objective;
    /// equals the final checkpoint when there is no validation split.
    pub best_checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub split: SplitIndices,
    pub aborted: Option<String>,
}

fn weighted_terms(parts: &[(ElboTerms, usize)]) -> ElboTerms {
    let total_w: f64 = parts.iter().map(|(_, w)| *w as f64).sum();
    let mut acc = ElboTerms { recon: 0.0, kl_z: 0.0, kl_s: 0.0, beta: 0.0, total: 0.0 };
    for (t, w) in parts {
        let w = *w as f64 / total_w;
        acc.recon += w * t.recon;
        acc.kl_z += w * t.kl_z;
        acc.kl_s += w * t.kl_s;
        acc.total += w * t.total;
        acc.beta = t.beta;
    }
    acc
}

/// Mean objective of a prepared split without updating parameters.
pub fn evaluate_split(
    model: &ShiVae,
    store: &ParamStore,
    prepared: &[PreparedSeq],
    batch_size: usize,
    settings: ElboSettings,
    noise_seed: u64,
) -> Result<ElboTerms> {
    if prepared.is_empty() {
        return Err(ShivaeError::data("cannot evaluate an empty split"));
    }
    let order: Vec<usize> = (0..prepared.len()).collect();
    let num_attrs = model.schema.len();
    let batches = make_batches(prepared, &order, batch_size, model.enc_dim, num_attrs);
    let mut noise = SeededNoise::new(noise_seed);
    let mut parts = Vec::with_capacity(batches.len());
    for batch in &batches {
        let terms = crate::model::elbo(model, store, batch, settings, &mut noise)?;
        parts.push((terms, batch.batch_size()));
    }
    Ok(weighted_terms(&parts))
}

/// Train a model on the training split of `ds`, hiding any overlay
/// cells from both the inputs and the objective. Deterministic given
/// the config seed.
pub fn train(
    ds: &HeterogeneousDataset,
    overlay: Option<&MaskOverlay>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let report = validate_dataset(ds);
    if !report.passed() {
        return Err(ShivaeError::data(format!(
            "dataset failed validation: {}",
            report.summary()
        )));
    }
    if let Some(ov) = overlay {
        ov.matches(ds)?;
    }

    let split = split_indices(ds.sequences.len(), cfg.split, derive_seed(cfg.seed, SUB_SPLIT))?;

    let masked = |i: usize| -> Result<Sequence> {
        let seq = &ds.sequences[i];
        match overlay {
            Some(ov) => seq.with_hidden(&ov.per_seq[i]),
            None => Ok(seq.clone()),
        }
    };
    let train_seqs: Vec<Sequence> = split.train.iter().map(|&i| masked(i)).collect::<Result<_>>()?;
    let val_seqs: Vec<Sequence> = split.val.iter().map(|&i| masked(i)).collect::<Result<_>>()?;

    let train_ds = HeterogeneousDataset::new(ds.schema.clone(), train_seqs)?;
    let ts = fit_transform_state(&train_ds, None)?;
    let prepared_train = prepare_sequences(&ts, &train_ds.sequences)?;
    let prepared_val = prepare_sequences(&ts, &val_seqs)?;

    let (model, mut store) = ShiVae::init(cfg.dims(), &ds.schema, derive_seed(cfg.seed, SUB_INIT))?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, SUB_SHUFFLE));
    let mut noise = SeededNoise::new(derive_seed(cfg.seed, SUB_NOISE));
    let val_noise_seed = derive_seed(cfg.seed, SUB_VAL_NOISE);

    let num_attrs = ds.schema.len();
    let mut history: Vec<EpochStats> = Vec::with_capacity(cfg.epochs);
    let mut best_params = store.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut aborted: Option<String> = None;

    'epochs: for epoch in 1..=cfg.epochs {
        let beta = anneal_beta(epoch, cfg.annealing_epochs);
        let temperature = temperature_at(cfg, epoch);
        let settings = ElboSettings { beta, temperature };

        let mut order: Vec<usize> = (0..prepared_train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let batches = make_batches(&prepared_train, &order, cfg.batch_size, ts.encoded_dim, num_attrs);

        let mut parts = Vec::with_capacity(batches.len());
        for batch in &batches {
            let prev = store.clone();
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let vars = elbo_forward(&model, &mut tape, &bind, batch, settings, &mut noise);
            let loss = tape.scalar(vars.loss);
            if !loss.is_finite() {
                aborted = Some(format!("non-finite loss at epoch {epoch}; keeping last good parameters"));
                break 'epochs;
            }
            let terms = ElboTerms {
                recon: tape.scalar(vars.recon),
                kl_z: tape.scalar(vars.kl_z),
                kl_s: tape.scalar(vars.kl_s),
                beta,
                total: -loss,
            };
            parts.push((terms, batch.batch_size()));

            let grads = tape.backward(vars.loss);
            let mut gmap = bind.collect_grads(&tape, &grads);
            let norm = clip_gradients(&mut gmap, cfg.clip);
            if !norm.is_finite() {
                aborted = Some(format!("non-finite gradients at epoch {epoch}; keeping last good parameters"));
                break 'epochs;
            }
            adam.step(&mut store, &gmap);
            if store.assert_finite().is_err() {
                store = prev;
                aborted = Some(format!("parameters turned non-finite at epoch {epoch}; keeping last good parameters"));
                break 'epochs;
            }
        }

        let train_terms = weighted_terms(&parts);
        let val_terms = if prepared_val.is_empty() {
            None
        } else {
            let val_settings = ElboSettings { beta: 1.0, temperature };
            Some(evaluate_split(&model, &store, &prepared_val, cfg.batch_size, val_settings, val_noise_seed)?)
        };
        if let Some(v) = &val_terms {
            if v.total > best_val {
                best_val = v.total;
                best_params = store.clone();
                best_epoch = epoch;
            }
        }
        history.push(EpochStats { epoch, temperature, train: train_terms, val: val_terms });
    }

    let completed = history.len();
    let make_ckpt = |params: ParamStore, history: Vec<EpochStats>| Checkpoint {
        dims: cfg.dims(),
        schema: ds.schema.clone(),
        transform: ts.clone(),
        config: cfg.clone(),
        epoch: completed,
        history,
        params,
    };
    let final_checkpoint = make_ckpt(store, history.clone());
    let (best_checkpoint, best_epoch) = if best_epoch == 0 {
        (final_checkpoint.clone(), completed)
    } else {
        (make_ckpt(best_params, history), best_epoch)
    };
    Ok(TrainOutcome { final_checkpoint, best_checkpoint, best_epoch, split, aborted })
}
