//! Datasets: the clinical CSV table, volume files, leakage-safe
//! patient-level splitting, and synthetic generation.
//!
//! CSV layout: UTF-8, comma-separated, header
//! `patient_id,label,volume_ref,<feature...>`. Empty cells are missing
//! values — absence is explicit, never a sentinel number. `volume_ref`
//! paths resolve relative to the CSV's directory.

pub mod synthetic;
pub mod volume;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use volume::{RawVolume, Volume};

/// One labeled sample. Feature values align with the dataset's
/// `feature_names`; `None` marks a missing value.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub patient_id: String,
    pub label: u8,
    pub features: Vec<Option<f64>>,
    /// Normalized voxels, when this record has an image.
    pub volume: Option<Volume>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    /// Shared dims of every present volume; `None` when no record has one.
    pub volume_dims: Option<(usize, usize, usize)>,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Mean and population std of one feature over records where it is
    /// present. `None` when no record carries the feature.
    pub fn feature_mean_std(&self, feature: usize) -> Option<(f64, f64)> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter_map(|r| r.features.get(feature).copied().flatten())
            .collect();
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some((mean, var.sqrt()))
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }
}

// ── CSV ─────────────────────────────────────────────────────────────────────

/// Load a clinical CSV whose feature columns must match `schema` in order.
/// Referenced volumes are read and z-scored.
pub fn load_clinical_csv(path: &Path, schema: &[String]) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(format!("{}: empty file, expected a header row", path.display())))?;
    let mut expected = vec!["patient_id".to_string(), "label".to_string(), "volume_ref".to_string()];
    expected.extend(schema.iter().cloned());
    let got: Vec<&str> = split_row(header);
    for (i, want) in expected.iter().enumerate() {
        match got.get(i) {
            Some(g) if *g == want => {}
            Some(g) => {
                return Err(Error::format(format!(
                    "{}: header column {} is '{}', expected '{}'",
                    path.display(),
                    i + 1,
                    g,
                    want
                )))
            }
            None => {
                return Err(Error::format(format!(
                    "{}: missing column '{}'",
                    path.display(),
                    want
                )))
            }
        }
    }
    if got.len() > expected.len() {
        return Err(Error::format(format!(
            "{}: unexpected extra column '{}'",
            path.display(),
            got[expected.len()]
        )));
    }

    let mut records = Vec::new();
    let mut volume_dims: Option<(usize, usize, usize)> = None;
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 2; // 1-based, after the header
        if line.is_empty() {
            continue;
        }
        let cells = split_row(line);
        if cells.len() != expected.len() {
            return Err(Error::data(format!(
                "{}: line {}: {} cells, expected {}",
                path.display(),
                lineno,
                cells.len(),
                expected.len()
            )));
        }
        let patient_id = cells[0].to_string();
        if patient_id.is_empty() {
            return Err(Error::data(format!(
                "{}: line {}: empty patient_id",
                path.display(),
                lineno
            )));
        }
        let label = match cells[1] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::data(format!(
                    "{}: line {}: label '{}' is not 0 or 1",
                    path.display(),
                    lineno,
                    other
                )))
            }
        };
        let vol = if cells[2].is_empty() {
            None
        } else {
            let vpath = dir.join(cells[2]);
            let raw = RawVolume::read(&vpath)?;
            let v = raw.normalize();
            match volume_dims {
                None => volume_dims = Some(v.dims()),
                Some(d) if d != v.dims() => {
                    return Err(Error::data(format!(
                        "{}: line {}: volume dims {:?} differ from earlier {:?}",
                        path.display(),
                        lineno,
                        v.dims(),
                        d
                    )))
                }
                Some(_) => {}
            }
            Some(v)
        };
        let mut features = Vec::with_capacity(schema.len());
        for (ci, cell) in cells[3..].iter().enumerate() {
            if cell.is_empty() {
                features.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::data(format!(
                        "{}: line {}: cannot parse '{}' in column '{}' as a number",
                        path.display(),
                        lineno,
                        cell,
                        schema[ci]
                    ))
                })?;
                features.push(Some(v));
            }
        }
        records.push(SampleRecord { patient_id, label, features, volume: vol });
    }
    Ok(Dataset { feature_names: schema.to_vec(), volume_dims, records })
}

fn split_row(line: &str) -> Vec<&str> {
    line.strip_suffix('\r').unwrap_or(line).split(',').collect()
}

/// Write a dataset as CSV plus one `.mmv` file per raw volume, into
/// `csv_path`'s directory. `raw` must align with the records; normalized
/// voxels are not written back, only the raw payloads the caller provides.
pub fn save_csv_dataset(
    csv_path: &Path,
    ds: &Dataset,
    raw: &[Option<RawVolume>],
) -> Result<()> {
    if raw.len() != ds.records.len() {
        return Err(Error::input(format!(
            "{} raw volumes for {} records",
            raw.len(),
            ds.records.len()
        )));
    }
    let dir = csv_path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut out = String::new();
    out.push_str("patient_id,label,volume_ref");
    for name in &ds.feature_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, (rec, rv)) in ds.records.iter().zip(raw).enumerate() {
        let vol_name = match rv {
            Some(rv) => {
                let name = format!("vol_{:05}.mmv", i);
                rv.write(&dir.join(&name))?;
                name
            }
            None => String::new(),
        };
        write!(out, "{},{},{}", rec.patient_id, rec.label, vol_name).unwrap();
        for f in &rec.features {
            match f {
                // f64 Display round-trips exactly.
                Some(v) => write!(out, ",{}", v).unwrap(),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    std::fs::write(csv_path, out)?;
    Ok(())
}

// ── Patient-level splitting ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        for (name, f) in [("train", train), ("val", val), ("test", test)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::input(format!("{} fraction {} outside [0,1]", name, f)));
            }
        }
        if (train + val + test - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!(
                "split fractions sum to {}, expected 1",
                train + val + test
            )));
        }
        Ok(SplitSpec { train, val, test, seed })
    }
}

/// Partition records by patient so every record of a patient lands in the
/// same partition. Unique patients (in first-appearance order) are shuffled
/// with the split seed, then cut at floor(n*train) and floor(n*val); the
/// remainder is test.
pub fn patient_split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let mut patients: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for r in &ds.records {
        if seen.insert(r.patient_id.as_str()) {
            patients.push(&r.patient_id);
        }
    }
    let wanted = [spec.train, spec.val, spec.test].iter().filter(|&&f| f > 0.0).count();
    if patients.len() < wanted {
        return Err(Error::input(format!(
            "{} unique patients cannot fill {} non-empty partitions",
            patients.len(),
            wanted
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    patients.shuffle(&mut rng);
    let n = patients.len();
    let n_train = (n as f64 * spec.train).floor() as usize;
    let n_val = (n as f64 * spec.val).floor() as usize;
    let train_set: HashSet<&str> = patients[..n_train].iter().copied().collect();
    let val_set: HashSet<&str> = patients[n_train..n_train + n_val].iter().copied().collect();
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    for r in &ds.records {
        let slot = if train_set.contains(r.patient_id.as_str()) {
            0
        } else if val_set.contains(r.patient_id.as_str()) {
            1
        } else {
            2
        };
        parts[slot].push(r.clone());
    }
    let mk = |records: Vec<SampleRecord>| Dataset {
        feature_names: ds.feature_names.clone(),
        volume_dims: ds.volume_dims,
        records,
    };
    let [tr, va, te] = parts;
    Ok((mk(tr), mk(va), mk(te)))
}
