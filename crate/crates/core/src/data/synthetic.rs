//! Synthetic task generator: label-correlated modalities with controllable
//! separation and missingness, for smoke tests and benchmarks.
//!
//! Per sample (label alternates 0,1,0,1,… so classes stay balanced):
//! - ordinal features draw from N(label * separation, 1);
//! - categorical features take value 1 with probability
//!   0.5 + (label ? +1 : -1) * separation/2 (clamped to [0,1]);
//! - volumes are unit Gaussian noise plus a centered spherical blob of
//!   intensity label * separation, radius min(dims)/4;
//! - each modality is independently missing with its configured rate.
//!
//! The same seed always reproduces the same dataset.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::ModalityKind;

use super::volume::RawVolume;
use super::{Dataset, SampleRecord};

#[derive(Clone, Debug)]
pub struct SyntheticModality {
    pub name: String,
    pub kind: ModalityKind,
    /// Class separation: mean shift (ordinal), probability gap (categorical),
    /// or blob intensity (image). Must be finite and >= 0.
    pub separation: f64,
    /// Probability the modality is missing on a given sample, in [0,1].
    pub missing_rate: f64,
}

impl SyntheticModality {
    pub fn new(name: &str, kind: ModalityKind, separation: f64) -> Self {
        SyntheticModality {
            name: name.to_string(),
            kind,
            separation,
            missing_rate: 0.0,
        }
    }

    pub fn with_missing_rate(mut self, rate: f64) -> Self {
        self.missing_rate = rate;
        self
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTaskConfig {
    pub n_samples: usize,
    pub modalities: Vec<SyntheticModality>,
}

impl SyntheticTaskConfig {
    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::input("cannot generate an empty dataset"));
        }
        if self.modalities.is_empty() {
            return Err(Error::input("synthetic task needs at least one modality"));
        }
        let mut images = 0;
        for (i, m) in self.modalities.iter().enumerate() {
            if m.name.is_empty() {
                return Err(Error::input(format!("modality {} has an empty name", i)));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::input(format!("duplicate modality name '{}'", m.name)));
            }
            if !m.separation.is_finite() || m.separation < 0.0 {
                return Err(Error::input(format!(
                    "modality '{}': separation {} must be finite and >= 0",
                    m.name, m.separation
                )));
            }
            if !(0.0..=1.0).contains(&m.missing_rate) {
                return Err(Error::input(format!(
                    "modality '{}': missing rate {} outside [0,1]",
                    m.name, m.missing_rate
                )));
            }
            match m.kind {
                ModalityKind::Categorical { vocab } if vocab < 2 => {
                    return Err(Error::input(format!(
                        "modality '{}': categorical vocab {} must be >= 2",
                        m.name, vocab
                    )))
                }
                ModalityKind::Image { .. } => images += 1,
                _ => {}
            }
        }
        if images > 1 {
            return Err(Error::input("at most one image modality is supported"));
        }
        Ok(())
    }
}

/// Generate a dataset with normalized volumes, ready for training.
pub fn generate(cfg: &SyntheticTaskConfig, seed: u64) -> Result<Dataset> {
    generate_with_raw(cfg, seed).map(|(ds, _)| ds)
}

/// Like [`generate`] but also returns the raw (un-normalized) volumes so
/// the dataset can be written to disk via
/// [`save_csv_dataset`](super::save_csv_dataset).
pub fn generate_with_raw(
    cfg: &SyntheticTaskConfig,
    seed: u64,
) -> Result<(Dataset, Vec<Option<RawVolume>>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feature_names: Vec<String> = cfg
        .modalities
        .iter()
        .filter(|m| !matches!(m.kind, ModalityKind::Image { .. }))
        .map(|m| m.name.clone())
        .collect();
    let mut records = Vec::with_capacity(cfg.n_samples);
    let mut raws = Vec::with_capacity(cfg.n_samples);
    let mut volume_dims = None;
    for i in 0..cfg.n_samples {
        let label = (i % 2) as u8;
        let mut features = Vec::with_capacity(feature_names.len());
        let mut volume = None;
        let mut raw_vol = None;
        for m in &cfg.modalities {
            let missing = rng.gen::<f64>() < m.missing_rate;
            match m.kind {
                ModalityKind::Ordinal => {
                    if missing {
                        features.push(None);
                    } else {
                        let noise: f64 = rng.sample(StandardNormal);
                        features.push(Some(label as f64 * m.separation + noise));
                    }
                }
                ModalityKind::Categorical { .. } => {
                    if missing {
                        features.push(None);
                    } else {
                        let delta = if label == 1 { m.separation } else { -m.separation };
                        let p_one = (0.5 + delta / 2.0).clamp(0.0, 1.0);
                        features.push(Some((rng.gen::<f64>() < p_one) as u8 as f64));
                    }
                }
                ModalityKind::Image { dims } => {
                    if missing {
                        continue;
                    }
                    let raw = blob_volume(dims, label as f64 * m.separation, &mut rng)?;
                    volume_dims = Some(dims);
                    volume = Some(raw.normalize());
                    raw_vol = Some(raw);
                }
            }
        }
        let mut patient_id = String::new();
        write!(patient_id, "p{:05}", i).unwrap();
        records.push(SampleRecord { patient_id, label, features, volume });
        raws.push(raw_vol);
    }
    let ds = Dataset { feature_names, volume_dims, records };
    Ok((ds, raws))
}

/// Unit Gaussian noise plus a centered sphere of extra intensity.
fn blob_volume(
    dims: (usize, usize, usize),
    intensity: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RawVolume> {
    let (d, h, w) = dims;
    let center = ((d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let radius = d.min(h).min(w) as f64 / 4.0;
    let r2 = radius * radius;
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let dz = z as f64 - center.0;
                let dy = y as f64 - center.1;
                let dx = x as f64 - center.2;
                let noise: f64 = rng.sample(StandardNormal);
                let inside = dz * dz + dy * dy + dx * dx <= r2;
                let v = noise + if inside { intensity } else { 0.0 };
                data.push(v as f32);
            }
        }
    }
    RawVolume::new((d as u32, h as u32, w as u32), data)
}

// ── Presets ─────────────────────────────────────────────────────────────────

/// Named task configurations used by the command-line tools.
///
/// - `separable`: clinical-only, strongly separated — a sanity task any
///   healthy model should near-solve.
/// - `trimodal`: one 16x16x16 image plus four ordinals and one categorical,
///   with every modality individually informative.
pub fn preset(name: &str) -> Result<SyntheticTaskConfig> {
    match name {
        "separable" => Ok(SyntheticTaskConfig {
            n_samples: 240,
            modalities: vec![
                SyntheticModality::new("marker0", ModalityKind::Ordinal, 3.0),
                SyntheticModality::new("marker1", ModalityKind::Ordinal, 3.0),
                SyntheticModality::new("marker2", ModalityKind::Ordinal, 3.0),
                SyntheticModality::new("marker3", ModalityKind::Ordinal, 3.0),
                SyntheticModality::new("cohort", ModalityKind::Categorical { vocab: 2 }, 0.9),
            ],
        }),
        "trimodal" => Ok(SyntheticTaskConfig {
            n_samples: 240,
            modalities: vec![
                SyntheticModality::new(
                    "scan",
                    ModalityKind::Image { dims: (16, 16, 16) },
                    2.5,
                ),
                SyntheticModality::new("marker0", ModalityKind::Ordinal, 1.2),
                SyntheticModality::new("marker1", ModalityKind::Ordinal, 1.2),
                SyntheticModality::new("marker2", ModalityKind::Ordinal, 1.2),
                SyntheticModality::new("marker3", ModalityKind::Ordinal, 1.2),
                SyntheticModality::new("cohort", ModalityKind::Categorical { vocab: 2 }, 0.8),
            ],
        }),
        other => Err(Error::config(format!(
            "unknown synthetic preset '{}', expected 'separable' or 'trimodal'",
            other
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_clinical_csv, save_csv_dataset};

    fn ord(name: &str, sep: f64) -> SyntheticModality {
        SyntheticModality::new(name, ModalityKind::Ordinal, sep)
    }

    #[test]
    fn same_seed_reproduces_the_dataset() {
        let cfg = preset("trimodal").unwrap();
        let a = generate(&cfg, 42).unwrap();
        let b = generate(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = generate(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_alternate_and_balance() {
        let cfg = SyntheticTaskConfig { n_samples: 10, modalities: vec![ord("a", 1.0)] };
        let ds = generate(&cfg, 0).unwrap();
        let labels = ds.labels();
        assert_eq!(labels, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn ordinal_class_means_track_separation() {
        let cfg = SyntheticTaskConfig { n_samples: 4000, modalities: vec![ord("a", 2.0)] };
        let ds = generate(&cfg, 5).unwrap();
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for r in &ds.records {
            sums[r.label as usize] += r.features[0].unwrap();
            counts[r.label as usize] += 1;
        }
        let m0 = sums[0] / counts[0] as f64;
        let m1 = sums[1] / counts[1] as f64;
        assert!(m0.abs() < 0.15, "class-0 mean {m0}");
        assert!((m1 - 2.0).abs() < 0.15, "class-1 mean {m1}");
    }

    #[test]
    fn categorical_frequencies_track_separation() {
        let cfg = SyntheticTaskConfig {
            n_samples: 6000,
            modalities: vec![SyntheticModality::new(
                "c",
                ModalityKind::Categorical { vocab: 2 },
                0.6,
            )],
        };
        let ds = generate(&cfg, 9).unwrap();
        let mut ones = [0.0f64; 2];
        let mut counts = [0.0f64; 2];
        for r in &ds.records {
            ones[r.label as usize] += r.features[0].unwrap();
            counts[r.label as usize] += 1.0;
        }
        assert!((ones[0] / counts[0] - 0.2).abs() < 0.05);
        assert!((ones[1] / counts[1] - 0.8).abs() < 0.05);
    }

    #[test]
    fn missingness_matches_the_rate() {
        let cfg = SyntheticTaskConfig {
            n_samples: 4000,
            modalities: vec![ord("a", 1.0).with_missing_rate(0.3)],
        };
        let ds = generate(&cfg, 3).unwrap();
        let missing = ds.records.iter().filter(|r| r.features[0].is_none()).count();
        let rate = missing as f64 / ds.len() as f64;
        assert!((rate - 0.3).abs() < 0.05, "missing rate {rate}");

        let all = SyntheticTaskConfig {
            n_samples: 50,
            modalities: vec![ord("a", 1.0).with_missing_rate(1.0)],
        };
        let ds = generate(&all, 3).unwrap();
        assert!(ds.records.iter().all(|r| r.features[0].is_none()));

        let none = SyntheticTaskConfig {
            n_samples: 50,
            modalities: vec![ord("a", 1.0).with_missing_rate(0.0)],
        };
        let ds = generate(&none, 3).unwrap();
        assert!(ds.records.iter().all(|r| r.features[0].is_some()));
    }

    #[test]
    fn blob_raises_in_sphere_intensity_for_positives() {
        let cfg = SyntheticTaskConfig {
            n_samples: 60,
            modalities: vec![SyntheticModality::new(
                "scan",
                ModalityKind::Image { dims: (16, 16, 16) },
                2.0,
            )],
        };
        let (ds, raws) = generate_with_raw(&cfg, 11).unwrap();
        let mut deltas = [Vec::new(), Vec::new()];
        for (rec, raw) in ds.records.iter().zip(&raws) {
            let raw = raw.as_ref().unwrap();
            let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0f64, 0, 0.0f64, 0);
            let r2 = 16.0f64 / 4.0 * (16.0 / 4.0);
            let c = 15.0 / 2.0;
            let mut idx = 0;
            for z in 0..16 {
                for y in 0..16 {
                    for x in 0..16 {
                        let dz = z as f64 - c;
                        let dy = y as f64 - c;
                        let dx = x as f64 - c;
                        if dz * dz + dy * dy + dx * dx <= r2 {
                            in_sum += raw.data[idx] as f64;
                            in_n += 1;
                        } else {
                            out_sum += raw.data[idx] as f64;
                            out_n += 1;
                        }
                        idx += 1;
                    }
                }
            }
            deltas[rec.label as usize].push(in_sum / in_n as f64 - out_sum / out_n as f64);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&deltas[0]).abs() < 0.1, "label-0 delta {}", mean(&deltas[0]));
        assert!((mean(&deltas[1]) - 2.0).abs() < 0.1, "label-1 delta {}", mean(&deltas[1]));
    }

    #[test]
    fn zero_separation_is_label_independent() {
        let cfg = SyntheticTaskConfig { n_samples: 2000, modalities: vec![ord("a", 0.0)] };
        let ds = generate(&cfg, 17).unwrap();
        let scores: Vec<f64> = ds.records.iter().map(|r| r.features[0].unwrap()).collect();
        let auc = crate::metrics::auc(&scores, &ds.labels()).unwrap().unwrap();
        assert!((auc - 0.5).abs() < 0.05, "feature auc {auc}");
    }

    #[test]
    fn generated_dataset_roundtrips_through_csv() {
        let cfg = SyntheticTaskConfig {
            n_samples: 8,
            modalities: vec![
                SyntheticModality::new("scan", ModalityKind::Image { dims: (4, 5, 6) }, 1.5)
                    .with_missing_rate(0.4),
                ord("a", 1.0).with_missing_rate(0.25),
                SyntheticModality::new("c", ModalityKind::Categorical { vocab: 2 }, 0.5),
            ],
        };
        let (ds, raws) = generate_with_raw(&cfg, 23).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("synth.csv");
        save_csv_dataset(&csv, &ds, &raws).unwrap();
        let back = load_clinical_csv(&csv, &ds.feature_names).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn config_validation_catches_bad_inputs() {
        let empty = SyntheticTaskConfig { n_samples: 0, modalities: vec![ord("a", 1.0)] };
        assert!(generate(&empty, 0).is_err());

        let dup = SyntheticTaskConfig {
            n_samples: 4,
            modalities: vec![ord("a", 1.0), ord("a", 2.0)],
        };
        assert!(generate(&dup, 0).is_err());

        let neg = SyntheticTaskConfig { n_samples: 4, modalities: vec![ord("a", -1.0)] };
        assert!(generate(&neg, 0).is_err());

        let two_images = SyntheticTaskConfig {
            n_samples: 4,
            modalities: vec![
                SyntheticModality::new("s1", ModalityKind::Image { dims: (4, 4, 4) }, 1.0),
                SyntheticModality::new("s2", ModalityKind::Image { dims: (4, 4, 4) }, 1.0),
            ],
        };
        assert!(generate(&two_images, 0).is_err());

        let bad_rate = SyntheticTaskConfig {
            n_samples: 4,
            modalities: vec![ord("a", 1.0).with_missing_rate(1.5)],
        };
        assert!(generate(&bad_rate, 0).is_err());
    }

    #[test]
    fn presets_resolve_and_unknown_names_fail() {
        assert!(preset("separable").is_ok());
        let tri = preset("trimodal").unwrap();
        assert!(tri
            .modalities
            .iter()
            .any(|m| matches!(m.kind, ModalityKind::Image { .. })));
        assert!(matches!(preset("nope"), Err(Error::Config(_))));
    }
}
