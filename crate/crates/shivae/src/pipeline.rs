//! Experiment orchestration: build or load a dataset, overlay burst
//! masks, train one model per mask, impute the held-out split with every
//! requested method, score the hidden cells, and render report tables
//! and charts. A manifest records every artifact with a checksum so a
//! rerun with the same seeds can be compared file by file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    read_dataset, read_overlay, write_dataset, write_overlay, AttrKind, AttributeSchema,
    HeterogeneousDataset, MaskOverlay, MaskSuite, Sequence,
};
use crate::error::{Result, ShivaeError};
use crate::impute::{
    impute_dataset, ImputationResult, ImputerRegistry, LocfImputer, MeanImputer, ShiVaeImputer,
};
use crate::metrics::{aggregate, evaluate_replicate, MeanStd, MetricReport, ReplicateMetrics};
use crate::physionet::{load_physionet_format, synthetic_standin};
use crate::synth::{derive_seed, generate_mask_suite, sample_hmm_dataset, BurstSpec, HmmConfig};
use crate::train::{train, save_checkpoint, Checkpoint, TrainConfig};

// Substream labels hashed together with the root seed, one per stage
// that consumes randomness.
pub const SUB_DATAGEN: u64 = 0x7001;
pub const SUB_MASK: u64 = 0x7002;
pub const SUB_TRAIN: u64 = 0x7003;
pub const SUB_IMPUTE: u64 = 0x7004;

// ---------------------------------------------------------------------------
// Experiment configuration and presets
// ---------------------------------------------------------------------------

/// Full description of one experiment run. Always obtained from
/// [`ExperimentConfig::named`] or a JSON file with the same fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// One of `synthetic`, `synthetic-desk`, `physionet-format`,
    /// `human-monitoring`, `custom`.
    pub preset: String,
    /// Root seed; all stage randomness is derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Sequence count for generated data; `None` keeps the preset size.
    #[serde(default)]
    pub num_sequences: Option<usize>,
    /// Maximum sequence length for generated data.
    #[serde(default)]
    pub seq_len: Option<usize>,
    /// Input directory for `custom` (dataset CSV) and optionally for
    /// `physionet-format` (per-patient CSVs); generated otherwise.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Artificial burst-missing rate per attribute.
    pub mask_rate: f64,
    /// Number of independent mask replicates.
    pub num_masks: usize,
    /// Imputation methods to run, by registry name.
    pub methods: Vec<String>,
    /// Forward samples averaged per model imputation.
    pub samples: usize,
    pub train: TrainConfig,
}

const PRESETS: [&str; 5] =
    ["synthetic", "synthetic-desk", "physionet-format", "human-monitoring", "custom"];

impl ExperimentConfig {
    /// Built-in experiment presets with their published configurations.
    pub fn named(preset: &str) -> Result<Self> {
        let base = ExperimentConfig {
            preset: preset.to_string(),
            seed: 0,
            num_sequences: None,
            seq_len: None,
            data_dir: None,
            mask_rate: 0.3,
            num_masks: 10,
            methods: vec!["shi-vae".into(), "mean".into(), "locf".into()],
            samples: 10,
            train: TrainConfig::default(),
        };
        match preset {
            // three-state chain benchmark, full and desk-sized
            "synthetic" => Ok(base),
            "synthetic-desk" => {
                Ok(ExperimentConfig { num_sequences: Some(200), seq_len: Some(50), ..base })
            }
            // 48-hour ICU layout; stand-in data unless a directory of
            // patient CSVs is supplied
            "physionet-format" => Ok(ExperimentConfig {
                train: TrainConfig { k: 35, l: 10, ..base.train },
                ..base
            }),
            // seven-attribute wearable-style stand-in with heavy native
            // missingness and variable lengths
            "human-monitoring" => Ok(ExperimentConfig {
                mask_rate: 0.15,
                train: TrainConfig { k: 5, l: 3, annealing_epochs: 50, ..base.train },
                ..base
            }),
            "custom" => Ok(base),
            other => Err(ShivaeError::config(format!(
                "unknown preset '{other}'; available: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ShivaeError::config(format!("cannot read experiment config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| ShivaeError::config(format!("bad experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !PRESETS.contains(&self.preset.as_str()) {
            return Err(ShivaeError::config(format!(
                "unknown preset '{}'; available: {}",
                self.preset,
                PRESETS.join(", ")
            )));
        }
        if self.preset == "custom" && self.data_dir.is_none() {
            return Err(ShivaeError::config("preset 'custom' needs data_dir"));
        }
        if !(0.0..1.0).contains(&self.mask_rate) || self.mask_rate <= 0.0 {
            return Err(ShivaeError::config(format!(
                "mask_rate {} must lie in (0,1)",
                self.mask_rate
            )));
        }
        if self.num_masks == 0 {
            return Err(ShivaeError::config("num_masks must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(ShivaeError::config("at least one imputation method is required"));
        }
        if self.samples == 0 {
            return Err(ShivaeError::config("samples must be at least 1"));
        }
        self.train.validate()
    }
}

// ---------------------------------------------------------------------------
// Data sources
// ---------------------------------------------------------------------------

/// A constructed dataset plus provenance notes for the manifest.
pub struct DataSource {
    pub dataset: HeterogeneousDataset,
    pub description: String,
    pub notes: Vec<String>,
}

/// Generate or load the dataset selected by the preset.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<DataSource> {
    let seed = derive_seed(cfg.seed, SUB_DATAGEN);
    match cfg.preset.as_str() {
        "synthetic" | "synthetic-desk" => {
            let full = cfg.preset == "synthetic";
            let n = cfg.num_sequences.unwrap_or(if full { 1000 } else { 200 });
            let t = cfg.seq_len.unwrap_or(if full { 100 } else { 50 });
            let hmm = HmmConfig::benchmark(n, t, seed);
            let dataset = sample_hmm_dataset(&hmm)?;
            Ok(DataSource {
                dataset,
                description: format!("generated three-state chain benchmark, N={n}, T={t}"),
                notes: Vec::new(),
            })
        }
        "physionet-format" => match &cfg.data_dir {
            Some(dir) => {
                let load = load_physionet_format(dir)?;
                Ok(DataSource {
                    description: format!(
                        "loaded {} patient files from {}",
                        load.dataset.num_sequences(),
                        dir.display()
                    ),
                    dataset: load.dataset,
                    notes: load.warnings,
                })
            }
            None => {
                let n = cfg.num_sequences.unwrap_or(60);
                Ok(DataSource {
                    dataset: synthetic_standin(n, seed)?,
                    description: format!("generated 35-variable ICU stand-in, N={n}, T=48"),
                    notes: Vec::new(),
                })
            }
        },
        "human-monitoring" => {
            let n = cfg.num_sequences.unwrap_or(170);
            let max_len = cfg.seq_len.unwrap_or(120);
            Ok(DataSource {
                dataset: human_monitoring_standin(n, max_len, seed)?,
                description: format!(
                    "generated seven-attribute monitoring stand-in, N={n}, lengths up to {max_len}"
                ),
                notes: Vec::new(),
            })
        }
        "custom" => {
            let dir = cfg
                .data_dir
                .as_ref()
                .ok_or_else(|| ShivaeError::config("preset 'custom' needs data_dir"))?;
            let dataset = read_dataset(dir, None)?;
            Ok(DataSource {
                description: format!(
                    "loaded {} sequences from {}",
                    dataset.num_sequences(),
                    dir.display()
                ),
                dataset,
                notes: Vec::new(),
            })
        }
        other => Err(ShivaeError::config(format!("unknown preset '{other}'"))),
    }
}

/// Attributes of the wearable-style stand-in: name, kind, and native
/// missing rate.
const MONITORING_ATTRS: [(&str, AttrKind, f64); 7] = [
    ("distance", AttrKind::Positive, 0.42),
    ("steps_home", AttrKind::Binary, 0.66),
    ("steps_total", AttrKind::Positive, 0.22),
    ("app_usage", AttrKind::Positive, 0.38),
    ("sport", AttrKind::Binary, 0.62),
    ("sleep", AttrKind::Positive, 0.31),
    ("vehicle", AttrKind::Positive, 0.44),
];

/// Synthetic stand-in for a private mobile-monitoring corpus: positive
/// activity magnitudes, sticky binary flags, variable sequence lengths,
/// and per-attribute native missing rates matching the published ones.
pub fn human_monitoring_standin(
    num_sequences: usize,
    max_len: usize,
    seed: u64,
) -> Result<HeterogeneousDataset> {
    if num_sequences == 0 {
        return Err(ShivaeError::config("stand-in needs at least one sequence"));
    }
    let min_len = (max_len / 3).max(12);
    if max_len < min_len {
        return Err(ShivaeError::config(format!(
            "max length {max_len} is too short; need at least {min_len}"
        )));
    }
    let schema: Vec<AttributeSchema> = MONITORING_ATTRS
        .iter()
        .map(|(name, kind, _)| AttributeSchema::new(*name, kind.clone()))
        .collect();
    let mut attr_rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0));
    let log_levels: Vec<f64> =
        (0..schema.len()).map(|_| attr_rng.random_range(2.0..5.0)).collect();

    let mut sequences = Vec::with_capacity(num_sequences);
    for i in 0..num_sequences {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 1 + i as u64));
        let t_len = rng.random_range(min_len..=max_len);
        let mut values = Array2::from_elem((t_len, schema.len()), f64::NAN);
        let mut mask = Array2::from_elem((t_len, schema.len()), false);
        for (d, (_, kind, miss_rate)) in MONITORING_ATTRS.iter().enumerate() {
            let mut state: f64 = StandardNormal.sample(&mut rng);
            let mut flag = rng.random_bool(0.4);
            for t in 0..t_len {
                let eps: f64 = StandardNormal.sample(&mut rng);
                state = 0.9 * state + (1.0f64 - 0.81).sqrt() * eps;
                let v = match kind {
                    AttrKind::Binary => {
                        if rng.random_bool(0.08) {
                            flag = !flag;
                        }
                        f64::from(flag)
                    }
                    _ => (log_levels[d] + 0.5 * state).exp(),
                };
                if !rng.random_bool(*miss_rate) {
                    values[(t, d)] = v;
                    mask[(t, d)] = true;
                }
            }
            if (0..t_len).all(|t| !mask[(t, d)]) {
                let t = rng.random_range(0..t_len);
                values[(t, d)] = match kind {
                    AttrKind::Binary => f64::from(flag),
                    _ => log_levels[d].exp(),
                };
                mask[(t, d)] = true;
            }
        }
        sequences.push(Sequence::new(format!("user{i:04}"), values, mask)?);
    }
    HeterogeneousDataset::new(schema, sequences)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// `ok`, or `failed: <message>`.
    pub status: String,
    pub wall_ms: u64,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub error: Option<MeanStd>,
    pub xcorr: Option<MeanStd>,
    pub xcorr_continuous: Option<MeanStd>,
}

/// Written as `manifest.json` in the run directory, also when a stage
/// fails partway (the failing stage records its error).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub preset: String,
    pub seeds: BTreeMap<String, u64>,
    pub config_sha256: String,
    pub data_source: String,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<ArtifactRecord>,
    pub metrics: BTreeMap<String, MethodSummary>,
}

pub fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| ShivaeError::data(format!("cannot serialize manifest: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| ShivaeError::data(format!("cannot write {}: {e}", path.display())))
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ShivaeError::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| ShivaeError::data(format!("bad manifest {}: {e}", path.display())))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| ShivaeError::data(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode_like(hasher.finalize().as_slice()))
}

mod hex {
    use std::fmt::Write;

    pub fn encode_like(bytes: &[u8]) -> String {
        let mut out = String::with_capacity(bytes.len() * 2);
        for b in bytes {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Run one stage, recording its wall time and outcome plus the
/// checksums of the artifacts it produced.
fn stage<T>(
    manifest: &mut RunManifest,
    out: &Path,
    name: &str,
    body: impl FnOnce(&mut Vec<String>) -> Result<(T, Vec<PathBuf>)>,
) -> Result<T> {
    let t0 = Instant::now();
    let mut notes = Vec::new();
    let result = body(&mut notes);
    let wall_ms = t0.elapsed().as_millis() as u64;
    match result {
        Ok((value, paths)) => {
            for p in paths {
                let rel = p.strip_prefix(out).unwrap_or(&p).display().to_string();
                manifest.artifacts.push(ArtifactRecord { path: rel, sha256: sha256_file(&p)? });
            }
            manifest.stages.push(StageRecord {
                name: name.to_string(),
                status: "ok".to_string(),
                wall_ms,
                notes,
            });
            Ok(value)
        }
        Err(e) => {
            manifest.stages.push(StageRecord {
                name: name.to_string(),
                status: format!("failed: {e}"),
                wall_ms,
                notes,
            });
            Err(e)
        }
    }
}

/// Dataset restricted to the given sequence indices, optionally with an
/// overlay applied to hide evaluation cells.
fn subset(
    ds: &HeterogeneousDataset,
    indices: &[usize],
    overlay: Option<&MaskOverlay>,
) -> Result<HeterogeneousDataset> {
    let mut sequences = Vec::with_capacity(indices.len());
    for &i in indices {
        let seq = match overlay {
            Some(ov) => ds.sequences[i].with_hidden(&ov.per_seq[i])?,
            None => ds.sequences[i].clone(),
        };
        sequences.push(seq);
    }
    HeterogeneousDataset::new(ds.schema.clone(), sequences)
}

/// Build the registry of imputation methods for one trained model. The
/// mean baseline is fitted on the masked training split so it never
/// sees evaluation cells.
pub fn build_registry(
    checkpoint: Option<&Checkpoint>,
    masked_train: Option<&HeterogeneousDataset>,
    samples: usize,
) -> Result<ImputerRegistry> {
    let mut registry = ImputerRegistry::new();
    registry.register(Box::new(LocfImputer))?;
    if let Some(train_ds) = masked_train {
        registry.register(Box::new(MeanImputer::fit(train_ds)?))?;
    }
    if let Some(cp) = checkpoint {
        registry.register(Box::new(ShiVaeImputer::from_checkpoint(cp, samples, false)?))?;
    }
    Ok(registry)
}

/// Turn per-sequence imputation outputs into a fully observed dataset
/// with the original ids, suitable for writing to disk.
pub fn completed_dataset(
    schema: &[AttributeSchema],
    inputs: &HeterogeneousDataset,
    results: &[ImputationResult],
) -> Result<HeterogeneousDataset> {
    if inputs.sequences.len() != results.len() {
        return Err(ShivaeError::data("imputation result count does not match the dataset"));
    }
    let sequences = inputs
        .sequences
        .iter()
        .zip(results)
        .map(|(seq, res)| Sequence::fully_observed(seq.id.clone(), res.completed.clone()))
        .collect();
    HeterogeneousDataset::new(schema.to_vec(), sequences)
}

/// Execute every stage under `out` and write `manifest.json` there,
/// whether or not all stages succeed.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out)
        .map_err(|e| ShivaeError::data(format!("cannot create {}: {e}", out.display())))?;

    let cfg_json = serde_json::to_string_pretty(cfg)
        .map_err(|e| ShivaeError::config(format!("cannot serialize config: {e}")))?;
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, &cfg_json)
        .map_err(|e| ShivaeError::data(format!("cannot write {}: {e}", cfg_path.display())))?;

    let mut seeds = BTreeMap::new();
    seeds.insert("root".to_string(), cfg.seed);
    seeds.insert("datagen".to_string(), derive_seed(cfg.seed, SUB_DATAGEN));
    seeds.insert("mask".to_string(), derive_seed(cfg.seed, SUB_MASK));
    seeds.insert("train".to_string(), derive_seed(cfg.seed, SUB_TRAIN));
    seeds.insert("impute".to_string(), derive_seed(cfg.seed, SUB_IMPUTE));

    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        preset: cfg.preset.clone(),
        seeds,
        config_sha256: {
            let mut hasher = Sha256::new();
            hasher.update(cfg_json.as_bytes());
            hex::encode_like(hasher.finalize().as_slice())
        },
        data_source: String::new(),
        stages: Vec::new(),
        artifacts: vec![ArtifactRecord {
            path: "config.json".to_string(),
            sha256: sha256_file(&cfg_path)?,
        }],
        metrics: BTreeMap::new(),
    };

    let result = run_stages(cfg, out, &mut manifest);
    write_manifest(&manifest, &out.join("manifest.json"))?;
    result.map(|()| manifest)
}

fn run_stages(cfg: &ExperimentConfig, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    // data: generate or load, then persist the canonical copy
    let ds = stage(manifest, out, "data", |notes| {
        let source = build_dataset(cfg)?;
        notes.extend(source.notes);
        let dir = out.join("data");
        write_dataset(&source.dataset, &dir)?;
        Ok((
            (source.dataset, source.description),
            vec![dir.join("data.csv"), dir.join("schema.json")],
        ))
    })?;
    let (ds, description) = ds;
    manifest.data_source = description;

    // mask: independent burst overlays
    let suite = stage(manifest, out, "mask", |_| {
        let spec = BurstSpec::new(cfg.mask_rate, cfg.num_masks, derive_seed(cfg.seed, SUB_MASK));
        let suite = generate_mask_suite(&ds, &spec)?;
        let dir = out.join("masks");
        let mut paths = Vec::new();
        for (r, overlay) in suite.overlays.iter().enumerate() {
            let path = dir.join(format!("mask_r{r:02}.csv"));
            write_overlay(overlay, &ds, &path)?;
            paths.push(path);
        }
        Ok((suite, paths))
    })?;

    // train: one model per mask replicate; identical training seed, so
    // replicate spread comes from the masks alone
    let train_seed = derive_seed(cfg.seed, SUB_TRAIN);
    let (checkpoints, split) = stage(manifest, out, "train", |notes| {
        let dir = out.join("checkpoints");
        std::fs::create_dir_all(&dir)
            .map_err(|e| ShivaeError::data(format!("cannot create {}: {e}", dir.display())))?;
        let mut checkpoints = Vec::new();
        let mut split = None;
        let mut paths = Vec::new();
        for (r, overlay) in suite.overlays.iter().enumerate() {
            let train_cfg = TrainConfig { seed: train_seed, ..cfg.train.clone() };
            let outcome = train(&ds, Some(overlay), &train_cfg)?;
            if let Some(reason) = &outcome.aborted {
                notes.push(format!("replicate {r}: training aborted early: {reason}"));
            }
            let path = dir.join(format!("ckpt_r{r:02}.json"));
            save_checkpoint(&outcome.final_checkpoint, &path)?;
            paths.push(path);
            checkpoints.push(outcome.final_checkpoint);
            split.get_or_insert(outcome.split);
        }
        let split = split.expect("at least one replicate");
        Ok(((checkpoints, split), paths))
    })?;

    // impute: complete the held-out test split with every method
    let impute_seed = derive_seed(cfg.seed, SUB_IMPUTE);
    let completed = stage(manifest, out, "impute", |_| {
        let mut paths = Vec::new();
        // method -> replicate -> per-sequence completed values
        let mut completed: BTreeMap<String, Vec<Vec<Array2<f64>>>> = BTreeMap::new();
        for (r, overlay) in suite.overlays.iter().enumerate() {
            let masked_train = subset(&ds, &split.train, Some(overlay))?;
            let test_ds = subset(&ds, &split.test, None)?;
            let test_overlay = MaskOverlay {
                per_seq: split.test.iter().map(|&i| overlay.per_seq[i].clone()).collect(),
            };
            let registry = build_registry(Some(&checkpoints[r]), Some(&masked_train), cfg.samples)?;
            for method in &cfg.methods {
                let imputer = registry.get(method)?;
                let results = impute_dataset(
                    imputer,
                    &test_ds,
                    Some(&test_overlay),
                    derive_seed(impute_seed, r as u64),
                )?;
                let out_ds = completed_dataset(&ds.schema, &test_ds, &results)?;
                let dir = out.join("imputed").join(format!("{method}_r{r:02}"));
                write_dataset(&out_ds, &dir)?;
                paths.push(dir.join("data.csv"));
                paths.push(dir.join("schema.json"));
                completed
                    .entry(method.clone())
                    .or_default()
                    .push(results.into_iter().map(|res| res.completed).collect());
            }
        }
        Ok((completed, paths))
    })?;

    // evaluate: score hidden cells of the test split
    let reports = stage(manifest, out, "evaluate", |_| {
        let mut reports = BTreeMap::new();
        for (method, by_replicate) in &completed {
            let mut replicates = Vec::new();
            for (r, arrays) in by_replicate.iter().enumerate() {
                let truth: Vec<&Sequence> = split.test.iter().map(|&i| &ds.sequences[i]).collect();
                let hidden: Vec<&Array2<bool>> =
                    split.test.iter().map(|&i| &suite.overlays[r].per_seq[i]).collect();
                let arrays_ref: Vec<&Array2<f64>> = arrays.iter().collect();
                replicates.push(evaluate_replicate(&ds.schema, &truth, &arrays_ref, &hidden)?);
            }
            reports.insert(method.clone(), aggregate(&ds.schema, replicates)?);
        }
        let dir = out.join("report");
        std::fs::create_dir_all(&dir)
            .map_err(|e| ShivaeError::data(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join("metrics.json");
        let text = serde_json::to_string_pretty(&reports)
            .map_err(|e| ShivaeError::data(format!("cannot serialize metrics: {e}")))?;
        std::fs::write(&path, text)
            .map_err(|e| ShivaeError::data(format!("cannot write {}: {e}", path.display())))?;
        Ok((reports, vec![path]))
    })?;
    for (method, report) in &reports {
        manifest.metrics.insert(
            method.clone(),
            MethodSummary {
                error: report.error,
                xcorr: report.xcorr,
                xcorr_continuous: report.xcorr_continuous,
            },
        );
    }

    // report: tables and charts
    stage(manifest, out, "report", |_| {
        let paths = render_report(&out.join("report").join("metrics.json"), &out.join("report"))?;
        Ok(((), paths))
    })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Standalone evaluation over files
// ---------------------------------------------------------------------------

/// Score imputed datasets on disk against a ground-truth dataset and a
/// directory of mask overlays. Imputed runs live in subdirectories
/// named `<method>_r<NN>`; sequences are matched to the truth by id, so
/// imputing only a subset (for example the test split) is fine.
pub fn evaluate_run(
    truth_dir: &Path,
    imputed_dir: &Path,
    mask_dir: &Path,
    out_dir: &Path,
) -> Result<BTreeMap<String, MetricReport>> {
    let truth = read_dataset(truth_dir, None)?;

    let mut mask_paths: Vec<PathBuf> = std::fs::read_dir(mask_dir)
        .map_err(|e| ShivaeError::data(format!("cannot read {}: {e}", mask_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("mask_r") && n.ends_with(".csv"))
        })
        .collect();
    mask_paths.sort();
    if mask_paths.is_empty() {
        return Err(ShivaeError::data(format!(
            "no mask_r*.csv files in {}",
            mask_dir.display()
        )));
    }
    let overlays: Vec<MaskOverlay> =
        mask_paths.iter().map(|p| read_overlay(p, &truth)).collect::<Result<_>>()?;

    // collect <method>_r<NN> run directories
    let mut runs: BTreeMap<String, BTreeMap<usize, PathBuf>> = BTreeMap::new();
    for entry in std::fs::read_dir(imputed_dir)
        .map_err(|e| ShivaeError::data(format!("cannot read {}: {e}", imputed_dir.display())))?
    {
        let path = entry
            .map_err(|e| ShivaeError::data(format!("cannot read {}: {e}", imputed_dir.display())))?
            .path();
        if !path.is_dir() {
            continue;
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let Some(pos) = name.rfind("_r") else { continue };
        let Ok(replicate) = name[pos + 2..].parse::<usize>() else { continue };
        runs.entry(name[..pos].to_string()).or_default().insert(replicate, path);
    }
    if runs.is_empty() {
        return Err(ShivaeError::data(format!(
            "no <method>_r<NN> directories in {}",
            imputed_dir.display()
        )));
    }

    let mut reports = BTreeMap::new();
    for (method, by_replicate) in runs {
        let mut replicates = Vec::new();
        for r in 0..overlays.len() {
            let dir = by_replicate.get(&r).ok_or_else(|| {
                ShivaeError::data(format!(
                    "method '{method}' is missing replicate {r} ({} masks present)",
                    overlays.len()
                ))
            })?;
            let imputed = read_dataset(dir, None)?;
            if imputed.schema != truth.schema {
                return Err(ShivaeError::data(format!(
                    "{}: schema does not match the ground truth",
                    dir.display()
                )));
            }
            replicates.push(score_files(&truth, &imputed, &overlays[r], dir)?);
        }
        reports.insert(method, aggregate(&truth.schema, replicates)?);
    }

    std::fs::create_dir_all(out_dir)
        .map_err(|e| ShivaeError::data(format!("cannot create {}: {e}", out_dir.display())))?;
    let path = out_dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&reports)
        .map_err(|e| ShivaeError::data(format!("cannot serialize metrics: {e}")))?;
    std::fs::write(&path, text)
        .map_err(|e| ShivaeError::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(reports)
}

fn score_files(
    truth: &HeterogeneousDataset,
    imputed: &HeterogeneousDataset,
    overlay: &MaskOverlay,
    dir: &Path,
) -> Result<ReplicateMetrics> {
    let mut truth_refs = Vec::new();
    let mut completed = Vec::new();
    let mut hidden = Vec::new();
    for seq in &imputed.sequences {
        let idx = truth
            .sequences
            .iter()
            .position(|s| s.id == seq.id)
            .ok_or_else(|| {
                ShivaeError::data(format!(
                    "{}: sequence '{}' is not in the ground truth",
                    dir.display(),
                    seq.id
                ))
            })?;
        if !seq.mask.iter().all(|&m| m) {
            return Err(ShivaeError::data(format!(
                "{}: sequence '{}' still has missing cells",
                dir.display(),
                seq.id
            )));
        }
        truth_refs.push(&truth.sequences[idx]);
        completed.push(&seq.values);
        hidden.push(&overlay.per_seq[idx]);
    }
    evaluate_replicate(&truth.schema, &truth_refs, &completed, &hidden)
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Render `summary.csv`, `per_attr.csv`, and bar charts from a
/// `metrics.json` written by the evaluate stage. Returns the paths of
/// everything produced.
pub fn render_report(metrics_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(metrics_path).map_err(|e| {
        ShivaeError::data(format!("cannot read {}: {e}", metrics_path.display()))
    })?;
    let reports: BTreeMap<String, MetricReport> = serde_json::from_str(&text)
        .map_err(|e| ShivaeError::data(format!("bad metrics file: {e}")))?;
    if reports.is_empty() {
        return Err(ShivaeError::data("metrics file holds no methods"));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| ShivaeError::data(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut produced = Vec::new();

    let mut summary = String::from(
        "method,error_mean,error_std,xcorr_mean,xcorr_std,xcorr_continuous_mean,xcorr_continuous_std\n",
    );
    for (method, report) in &reports {
        summary.push_str(&format!(
            "{method},{},{},{},{},{},{}\n",
            csv_opt(report.error.map(|m| m.mean)),
            csv_opt(report.error.map(|m| m.std)),
            csv_opt(report.xcorr.map(|m| m.mean)),
            csv_opt(report.xcorr.map(|m| m.std)),
            csv_opt(report.xcorr_continuous.map(|m| m.mean)),
            csv_opt(report.xcorr_continuous.map(|m| m.std)),
        ));
    }
    let path = out_dir.join("summary.csv");
    std::fs::write(&path, summary)
        .map_err(|e| ShivaeError::data(format!("cannot write {}: {e}", path.display())))?;
    produced.push(path);

    let mut per_attr =
        String::from("method,attribute,error_mean,error_std,xcorr_mean,xcorr_std\n");
    for (method, report) in &reports {
        for (d, name) in report.attr_names.iter().enumerate() {
            per_attr.push_str(&format!(
                "{method},{name},{},{},{},{}\n",
                csv_opt(report.per_attr_err[d].map(|m| m.mean)),
                csv_opt(report.per_attr_err[d].map(|m| m.std)),
                csv_opt(report.per_attr_phi[d].map(|m| m.mean)),
                csv_opt(report.per_attr_phi[d].map(|m| m.std)),
            ));
        }
    }
    let path = out_dir.join("per_attr.csv");
    std::fs::write(&path, per_attr)
        .map_err(|e| ShivaeError::data(format!("cannot write {}: {e}", path.display())))?;
    produced.push(path);

    let error_bars: Vec<(String, Option<MeanStd>)> =
        reports.iter().map(|(m, r)| (m.clone(), r.error)).collect();
    let path = out_dir.join("error.svg");
    std::fs::write(&path, svg_bar_chart("Average imputation error on hidden cells", &error_bars))
        .map_err(|e| ShivaeError::data(format!("cannot write {}: {e}", path.display())))?;
    produced.push(path);

    let xcorr_bars: Vec<(String, Option<MeanStd>)> =
        reports.iter().map(|(m, r)| (m.clone(), r.xcorr)).collect();
    let path = out_dir.join("xcorr.svg");
    std::fs::write(
        &path,
        svg_bar_chart("Average burst cross-correlation on hidden cells", &xcorr_bars),
    )
    .map_err(|e| ShivaeError::data(format!("cannot write {}: {e}", path.display())))?;
    produced.push(path);

    Ok(produced)
}

/// Minimal grouped bar chart with mean bars and std whiskers.
fn svg_bar_chart(title: &str, entries: &[(String, Option<MeanStd>)]) -> String {
    let (width, height) = (560.0, 360.0);
    let (left, right, top, bottom) = (70.0, 20.0, 50.0, 60.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let mut y_max = f64::EPSILON;
    let mut y_min = 0.0f64;
    for (_, m) in entries {
        if let Some(m) = m {
            y_max = y_max.max(m.mean + m.std);
            y_min = y_min.min(m.mean - m.std);
        }
    }
    let span = (y_max - y_min).max(f64::EPSILON) * 1.1;
    let y_of = |v: f64| top + plot_h - (v - y_min) / span * plot_h;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        width / 2.0
    );
    // axes and horizontal grid lines
    for i in 0..=4 {
        let v = y_min + span * f64::from(i) / 4.0;
        let y = y_of(v);
        svg.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>\n",
            width - right,
            left - 6.0,
            y + 4.0
        ));
    }
    let colors = ["#4878a8", "#b85c5c", "#6aa066", "#9370a8", "#c8963c"];
    let slot = plot_w / entries.len() as f64;
    let bar_w = slot * 0.55;
    for (i, (name, m)) in entries.iter().enumerate() {
        let x_center = left + slot * (i as f64 + 0.5);
        match m {
            Some(m) => {
                let y_top = y_of(m.mean.max(0.0));
                let y_zero = y_of(m.mean.min(0.0).max(y_min));
                svg.push_str(&format!(
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar_w:.1}\" height=\"{:.1}\" \
                     fill=\"{}\"/>\n",
                    x_center - bar_w / 2.0,
                    y_top.min(y_zero),
                    (y_zero - y_top).abs().max(0.5),
                    colors[i % colors.len()],
                ));
                if m.std > 0.0 {
                    let (y_lo, y_hi) = (y_of(m.mean - m.std), y_of(m.mean + m.std));
                    svg.push_str(&format!(
                        "<line x1=\"{x_center:.1}\" y1=\"{y_lo:.1}\" x2=\"{x_center:.1}\" \
                         y2=\"{y_hi:.1}\" stroke=\"black\"/>\n"
                    ));
                }
                svg.push_str(&format!(
                    "<text x=\"{x_center:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>\n",
                    y_of(m.mean + m.std) - 6.0,
                    m.mean
                ));
            }
            None => {
                svg.push_str(&format!(
                    "<text x=\"{x_center:.1}\" y=\"{:.1}\" text-anchor=\"middle\" \
                     fill=\"#888\">n/a</text>\n",
                    top + plot_h / 2.0
                ));
            }
        }
        svg.push_str(&format!(
            "<text x=\"{x_center:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{name}</text>\n",
            height - bottom + 20.0
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n</svg>\n",
        y_of(y_min.min(0.0)),
        width - right,
        y_of(y_min.min(0.0)),
    ));
    svg
}

/// Re-exported suite type for callers of the mask stage.
pub type BurstMaskSuite = MaskSuite;
