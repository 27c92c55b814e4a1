//! Loader for ICU time-series data laid out one CSV per patient with
//! hourly rows over a fixed 48-hour stay and 35 named vital-sign and
//! lab columns. The dataset itself is license-gated and not bundled;
//! a synthetic stand-in with the same schema supports end-to-end tests.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{AttrKind, AttributeSchema, HeterogeneousDataset, Sequence};
use crate::error::{Result, ShivaeError};
use crate::synth::derive_seed;

/// Fixed stay length: hourly samples over 48 hours.
pub const PHYSIONET_SEQ_LEN: usize = 48;

/// The 35 monitored variables. Mechanical ventilation is the one
/// binary flag; everything else is treated as real-valued.
const VARIABLE_NAMES: [&str; 35] = [
    "Albumin", "ALP", "ALT", "AST", "Bilirubin", "BUN", "Creatinine", "DiasABP", "FiO2", "GCS",
    "Glucose", "HCO3", "HCT", "HR", "K", "Lactate", "Mg", "MAP", "MechVent", "Na", "NIDiasABP",
    "NIMAP", "NISysABP", "PaCO2", "PaO2", "pH", "Platelets", "RespRate", "SaO2", "SysABP", "Temp",
    "TroponinT", "Urine", "WBC", "Weight",
];

/// Schema of the 35-variable ICU layout.
pub fn physionet_schema() -> Vec<AttributeSchema> {
    VARIABLE_NAMES
        .iter()
        .map(|&name| {
            if name == "MechVent" {
                AttributeSchema::binary(name)
            } else {
                AttributeSchema::real(name)
            }
        })
        .collect()
}

/// A loaded dataset plus non-fatal notes (padding, sparse files).
#[derive(Debug)]
pub struct PhysionetLoad {
    pub dataset: HeterogeneousDataset,
    pub warnings: Vec<String>,
}

/// Read every `*.csv` in `dir` as one patient sequence. Files must have
/// an `hour` column with strictly increasing integer hours below 48;
/// remaining columns must be schema variables. Absent hours and absent
/// columns load as missing; files shorter than 48 hours are padded with
/// a warning.
pub fn load_physionet_format(dir: &Path) -> Result<PhysionetLoad> {
    let schema = physionet_schema();
    let mut paths: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| ShivaeError::data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ShivaeError::data(format!(
            "no patient CSV files found in {}",
            dir.display()
        )));
    }

    let mut warnings = Vec::new();
    let mut sequences = Vec::with_capacity(paths.len());
    for path in &paths {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("patient")
            .to_string();
        let seq = load_patient_file(path, &id, &schema, &mut warnings)?;
        sequences.push(seq);
    }
    let dataset = HeterogeneousDataset::new(schema, sequences)?;
    Ok(PhysionetLoad { dataset, warnings })
}

fn load_patient_file(
    path: &Path,
    id: &str,
    schema: &[AttributeSchema],
    warnings: &mut Vec<String>,
) -> Result<Sequence> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| ShivaeError::data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| ShivaeError::data(format!("cannot read header of {}: {e}", path.display())))?
        .clone();
    let mut cols = headers.iter();
    if cols.next() != Some("hour") {
        return Err(ShivaeError::data(format!(
            "{}: first column must be 'hour'",
            path.display()
        )));
    }
    // map each remaining file column to its schema attribute
    let mut col_attr = Vec::new();
    for name in cols {
        let d = schema.iter().position(|a| a.name == name).ok_or_else(|| {
            ShivaeError::data(format!("{}: unknown column '{name}'", path.display()))
        })?;
        if col_attr.contains(&d) {
            return Err(ShivaeError::data(format!(
                "{}: column '{name}' appears twice",
                path.display()
            )));
        }
        col_attr.push(d);
    }

    let mut values = Array2::from_elem((PHYSIONET_SEQ_LEN, schema.len()), f64::NAN);
    let mut mask = Array2::from_elem((PHYSIONET_SEQ_LEN, schema.len()), false);
    let mut last_hour: Option<usize> = None;
    let mut filled_rows = 0usize;
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            ShivaeError::data(format!("{} row {}: {e}", path.display(), row_idx + 2))
        })?;
        let hour_text = record.get(0).unwrap_or_default();
        let hour_f: f64 = hour_text.parse().map_err(|_| {
            ShivaeError::data(format!(
                "{} row {}: unreadable hour '{hour_text}'",
                path.display(),
                row_idx + 2
            ))
        })?;
        if hour_f.fract() != 0.0 {
            return Err(ShivaeError::data(format!(
                "{} row {}: hour {hour_f} is not on the hourly grid; resample first",
                path.display(),
                row_idx + 2
            )));
        }
        let hour = hour_f as usize;
        if hour_f < 0.0 || hour >= PHYSIONET_SEQ_LEN {
            return Err(ShivaeError::data(format!(
                "{} row {}: hour {hour_f} outside 0..{}",
                path.display(),
                row_idx + 2,
                PHYSIONET_SEQ_LEN - 1
            )));
        }
        if let Some(prev) = last_hour {
            if hour <= prev {
                return Err(ShivaeError::data(format!(
                    "{} row {}: hour {hour} repeats or goes backwards",
                    path.display(),
                    row_idx + 2
                )));
            }
        }
        last_hour = Some(hour);
        filled_rows += 1;
        for (k, &d) in col_attr.iter().enumerate() {
            let cell = record.get(k + 1).unwrap_or_default().trim();
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                ShivaeError::data(format!(
                    "{} row {}: unreadable value '{cell}' for {}",
                    path.display(),
                    row_idx + 2,
                    schema[d].name
                ))
            })?;
            values[(hour, d)] = v;
            mask[(hour, d)] = true;
        }
    }
    if filled_rows < PHYSIONET_SEQ_LEN {
        warnings.push(format!(
            "{id}: {filled_rows} hourly rows; padded to {PHYSIONET_SEQ_LEN} with missing values"
        ));
    }
    Sequence::new(id, values, mask)
}

/// Write a dataset in the per-patient layout read back by
/// [`load_physionet_format`]. The schema must match the bundled one.
pub fn write_physionet_format(ds: &HeterogeneousDataset, dir: &Path) -> Result<()> {
    let expected = physionet_schema();
    if ds.schema != expected {
        return Err(ShivaeError::data(
            "dataset schema does not match the 35-variable layout",
        ));
    }
    std::fs::create_dir_all(dir)
        .map_err(|e| ShivaeError::data(format!("cannot create {}: {e}", dir.display())))?;
    for seq in &ds.sequences {
        let path = dir.join(format!("{}.csv", seq.id));
        let mut writer = csv::Writer::from_path(&path)
            .map_err(|e| ShivaeError::data(format!("cannot write {}: {e}", path.display())))?;
        let mut header = vec!["hour".to_string()];
        header.extend(VARIABLE_NAMES.iter().map(|s| s.to_string()));
        writer
            .write_record(&header)
            .map_err(|e| ShivaeError::data(format!("{}: {e}", path.display())))?;
        for t in 0..seq.len() {
            let mut row = vec![t.to_string()];
            for d in 0..seq.num_attrs() {
                row.push(if seq.mask[(t, d)] {
                    format!("{}", seq.values[(t, d)])
                } else {
                    String::new()
                });
            }
            writer
                .write_record(&row)
                .map_err(|e| ShivaeError::data(format!("{}: {e}", path.display())))?;
        }
        writer
            .flush()
            .map_err(|e| ShivaeError::data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

/// Minimum observations per attribute column in the stand-in; see the
/// top-up note in [`synthetic_standin`].
const MIN_OBS_PER_COLUMN: usize = 25;

/// Synthetic stand-in with the ICU schema: smooth per-variable dynamics
/// from a stationary AR(1) latent, a persistent ventilation flag, and
/// attribute-specific missing rates. Every column keeps at least
/// [`MIN_OBS_PER_COLUMN`] observations so burst masking stays feasible
/// at any target rate. Deterministic given the seed.
pub fn synthetic_standin(num_patients: usize, seed: u64) -> Result<HeterogeneousDataset> {
    if num_patients == 0 {
        return Err(ShivaeError::config("stand-in needs at least one patient"));
    }
    let schema = physionet_schema();
    let d_len = schema.len();
    // per-attribute level, scale, and missing rate, fixed by the seed
    let mut attr_rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0));
    let levels: Vec<f64> = (0..d_len).map(|_| attr_rng.random_range(20.0..120.0)).collect();
    let scales: Vec<f64> = (0..d_len).map(|_| attr_rng.random_range(2.0..15.0)).collect();
    let miss_rates: Vec<f64> = (0..d_len).map(|_| attr_rng.random_range(0.1..0.45)).collect();

    let mut sequences = Vec::with_capacity(num_patients);
    for p in 0..num_patients {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 1 + p as u64));
        let mut values = Array2::from_elem((PHYSIONET_SEQ_LEN, d_len), f64::NAN);
        let mut mask = Array2::from_elem((PHYSIONET_SEQ_LEN, d_len), false);
        for (d, attr) in schema.iter().enumerate() {
            let mut state: f64 = StandardNormal.sample(&mut rng);
            let mut vent = rng.random_bool(0.3);
            let mut traj = [0.0f64; PHYSIONET_SEQ_LEN];
            let mut obs = [false; PHYSIONET_SEQ_LEN];
            for t in 0..PHYSIONET_SEQ_LEN {
                let eps: f64 = StandardNormal.sample(&mut rng);
                state = 0.9 * state + (1.0f64 - 0.81).sqrt() * eps;
                traj[t] = match attr.kind {
                    AttrKind::Binary => {
                        // sticky regime switches
                        if rng.random_bool(0.1) {
                            vent = !vent;
                        }
                        f64::from(vent)
                    }
                    _ => levels[d] + scales[d] * state,
                };
                obs[t] = !rng.random_bool(miss_rates[d]);
            }
            // Top up sparse columns to MIN_OBS_PER_COLUMN observations.
            // A band of +/- 2 points around any burst-mask target rate
            // spans at least one whole hidden-cell count once
            // 0.04 * n_obs >= 1, so this keeps every rate reachable.
            let mut n_obs = obs.iter().filter(|&&o| o).count();
            while n_obs < MIN_OBS_PER_COLUMN {
                let t = rng.random_range(0..PHYSIONET_SEQ_LEN);
                if !obs[t] {
                    obs[t] = true;
                    n_obs += 1;
                }
            }
            for t in 0..PHYSIONET_SEQ_LEN {
                if obs[t] {
                    values[(t, d)] = traj[t];
                    mask[(t, d)] = true;
                }
            }
        }
        sequences.push(Sequence::new(format!("patient{p:05}"), values, mask)?);
    }
    HeterogeneousDataset::new(schema, sequences)
}
