//! Plain-text run configuration: one `key = value` per line, `#` comment
//! lines, comma-separated lists. Unknown and duplicate keys are errors so a
//! typo never silently falls back to a default.

use std::collections::HashSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use crate::checkpoint::parse_spec_token;
use crate::data::synthetic::preset;
use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::model::ModalitySpec;
use crate::train::TrainConfig;

/// Environment variable that overrides `out_dir` from any config file.
pub const OUT_DIR_ENV: &str = "MODMIX_OUT_DIR";

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub d: usize,
    pub h: usize,
    pub scale_full_dim: bool,
    pub channel_widths: Vec<usize>,
    pub encoder_layers: usize,
    pub modalities: Vec<ModalitySpec>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    /// Clinical CSV on disk; loaded with the model's modality schema.
    Csv(PathBuf),
    /// Named built-in synthetic task.
    Preset(String),
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seeds model initialization and training stochasticity.
    pub seed: u64,
    pub source: DataSource,
    pub split: SplitSpec,
    /// Overrides the preset's sample count when set.
    pub n_samples: Option<usize>,
    /// Seeds synthetic data generation, independently of `seed`.
    pub synth_seed: u64,
    pub out_dir: PathBuf,
}

/// `out_dir` after applying the environment override, if any.
pub fn effective_out_dir(cfg: &RunConfig) -> PathBuf {
    out_dir_with(cfg, std::env::var_os(OUT_DIR_ENV))
}

fn out_dir_with(cfg: &RunConfig, env: Option<OsString>) -> PathBuf {
    match env {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.out_dir.clone(),
    }
}

/// Parse a config file; relative paths inside it resolve against its parent
/// directory.
pub fn parse_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_str(&text, base)
}

pub fn parse_str(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let mut seen: HashSet<String> = HashSet::new();

    let mut d = 32usize;
    let mut h = 4usize;
    let mut scale_full_dim = false;
    let mut channel_widths = vec![4, 8, 16, 32];
    let mut encoder_layers = 1usize;
    let mut modalities: Option<Vec<ModalitySpec>> = None;

    let mut train = TrainConfig::default();
    let mut seed = 0u64;
    let mut split_seed = 0u64;
    let mut synth_seed = 0u64;
    let mut split_fracs = (0.7f64, 0.15f64, 0.15f64);
    let mut dataset_csv: Option<PathBuf> = None;
    let mut preset_name: Option<String> = None;
    let mut n_samples: Option<usize> = None;
    let mut out_dir = base_dir.to_path_buf();
    let mut p_drop_overrides: Vec<(String, f64)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {line_no}: expected 'key = value', got '{line}'"))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {line_no}: empty key")));
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::config(format!("line {line_no}: duplicate key '{key}'")));
        }

        match key {
            "d" => d = parse_num(key, value)?,
            "h" => h = parse_num(key, value)?,
            "scale_full_dim" => scale_full_dim = parse_bool(key, value)?,
            "channel_widths" => channel_widths = parse_list(key, value)?,
            "encoder_layers" => encoder_layers = parse_num(key, value)?,
            "modalities" => {
                let mut specs = Vec::new();
                for token in value.split(',') {
                    specs.push(parse_spec_token(token.trim())?);
                }
                if specs.is_empty() {
                    return Err(Error::config("key 'modalities' lists no modalities"));
                }
                modalities = Some(specs);
            }
            "epochs" => train.epochs = parse_num(key, value)?,
            "batch_size" => {
                train.batch_size = parse_num(key, value)?;
                if train.batch_size == 0 {
                    return Err(Error::config("key 'batch_size' must be at least 1"));
                }
            }
            "lr" => {
                train.lr = parse_float(key, value)?;
                if !(train.lr > 0.0) {
                    return Err(Error::config(format!(
                        "key 'lr' must be positive, got {value}"
                    )));
                }
            }
            "aux_loss_weight" => {
                train.aux_loss_weight = parse_float(key, value)?;
                if train.aux_loss_weight < 0.0 {
                    return Err(Error::config(format!(
                        "key 'aux_loss_weight' must be non-negative, got {value}"
                    )));
                }
            }
            "noise_sigma" => {
                train.noise_sigma = parse_float(key, value)?;
                if train.noise_sigma < 0.0 {
                    return Err(Error::config(format!(
                        "key 'noise_sigma' must be non-negative, got {value}"
                    )));
                }
            }
            "flip_axis" => {
                train.flip_axis = if value == "none" {
                    None
                } else {
                    let axis: usize = parse_num(key, value)?;
                    if axis > 2 {
                        return Err(Error::config(format!(
                            "key 'flip_axis' must be 0, 1, 2, or none, got {value}"
                        )));
                    }
                    Some(axis)
                };
            }
            "seed" => seed = parse_num(key, value)?,
            "split_seed" => split_seed = parse_num(key, value)?,
            "synth_seed" => synth_seed = parse_num(key, value)?,
            "split" => {
                let parts: Vec<f64> = parse_list(key, value)?;
                if parts.len() != 3 {
                    return Err(Error::config(format!(
                        "key 'split' needs three comma-separated fractions, got '{value}'"
                    )));
                }
                split_fracs = (parts[0], parts[1], parts[2]);
            }
            "dataset_csv" => dataset_csv = Some(base_dir.join(value)),
            "preset" => {
                preset(value)?; // reject unknown names at parse time
                preset_name = Some(value.to_string());
            }
            "n_samples" => {
                let n: usize = parse_num(key, value)?;
                if n == 0 {
                    return Err(Error::config("key 'n_samples' must be at least 1"));
                }
                n_samples = Some(n);
            }
            "out_dir" => out_dir = base_dir.join(value),
            _ if key.starts_with("p_drop.") => {
                let name = &key["p_drop.".len()..];
                if name.is_empty() {
                    return Err(Error::config(format!(
                        "line {line_no}: key '{key}' names no modality"
                    )));
                }
                let p = parse_float(key, value)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::config(format!(
                        "key '{key}' must lie in [0,1], got {value}"
                    )));
                }
                p_drop_overrides.push((name.to_string(), p));
            }
            _ => {
                return Err(Error::config(format!("line {line_no}: unknown key '{key}'")));
            }
        }
    }

    let source = match (dataset_csv, preset_name) {
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "keys 'dataset_csv' and 'preset' are mutually exclusive",
            ))
        }
        (Some(path), None) => DataSource::Csv(path),
        (None, Some(name)) => DataSource::Preset(name),
        (None, None) => {
            return Err(Error::config(
                "config needs a data source: either 'dataset_csv' or 'preset'",
            ))
        }
    };
    let modalities = match (&source, modalities) {
        (_, Some(specs)) => specs,
        (DataSource::Preset(name), None) => {
            // A preset knows its own schema; spell it out only to override.
            preset(name)?
                .modalities
                .iter()
                .map(|m| ModalitySpec::new(m.name.clone(), m.kind))
                .collect()
        }
        (DataSource::Csv(_), None) => {
            return Err(Error::config(
                "key 'modalities' is required when loading a CSV dataset",
            ))
        }
    };
    for (name, _) in &p_drop_overrides {
        if !modalities.iter().any(|m| &m.name == name) {
            return Err(Error::config(format!(
                "key 'p_drop.{name}' targets no declared modality"
            )));
        }
    }
    train.p_drop_overrides = p_drop_overrides;
    train.seed = seed;
    let split = SplitSpec::new(split_fracs.0, split_fracs.1, split_fracs.2, split_seed)
        .map_err(|e| Error::config(format!("key 'split': {e}")))?;

    Ok(RunConfig {
        model: ModelConfig { d, h, scale_full_dim, channel_widths, encoder_layers, modalities },
        train,
        seed,
        source,
        split,
        n_samples,
        synth_seed,
        out_dir,
    })
}

fn parse_num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key '{key}' has invalid value '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "key '{key}' must be true or false, got '{value}'"
        ))),
    }
}

fn parse_float(key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse_num(key, value)?;
    if !v.is_finite() {
        return Err(Error::config(format!("key '{key}' must be finite, got '{value}'")));
    }
    Ok(v)
}

fn parse_list<N: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<N>> {
    value.split(',').map(|item| parse_num(key, item.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModalityKind;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_str(text, Path::new("/cfg"))
    }

    #[test]
    fn minimal_preset_config_uses_defaults() {
        let cfg = parse("preset = separable\n").unwrap();
        assert_eq!(cfg.model.d, 32);
        assert_eq!(cfg.model.h, 4);
        assert!(!cfg.model.scale_full_dim);
        assert_eq!(cfg.model.channel_widths, vec![4, 8, 16, 32]);
        assert_eq!(cfg.model.encoder_layers, 1);
        assert_eq!(cfg.source, DataSource::Preset("separable".into()));
        assert_eq!(cfg.train.epochs, TrainConfig::default().epochs);
        assert_eq!(cfg.seed, 0);
        assert!(cfg.n_samples.is_none());
        assert_eq!(cfg.out_dir, PathBuf::from("/cfg"));
        // The preset's schema fills in the modalities.
        assert_eq!(cfg.model.modalities.len(), 5);
    }

    #[test]
    fn every_key_parses_and_lands() {
        let text = "\
# full configuration
d = 16
h = 2
scale_full_dim = true
channel_widths = 2, 4, 8, 8
encoder_layers = 2
modalities = scan:image:16x16x16:p=0.25, age:ordinal, apoe:categorical:3

epochs = 7
batch_size = 4
lr = 0.002
aux_loss_weight = 0.5
noise_sigma = 0.05
flip_axis = 2
p_drop.age = 0.75

seed = 11
split_seed = 12
synth_seed = 13
split = 0.5, 0.25, 0.25
dataset_csv = data/train.csv
out_dir = runs/a
";
        let cfg = parse(text).unwrap();
        assert_eq!(cfg.model.d, 16);
        assert_eq!(cfg.model.h, 2);
        assert!(cfg.model.scale_full_dim);
        assert_eq!(cfg.model.channel_widths, vec![2, 4, 8, 8]);
        assert_eq!(cfg.model.encoder_layers, 2);
        assert_eq!(cfg.model.modalities.len(), 3);
        assert_eq!(cfg.model.modalities[0].name, "scan");
        assert!((cfg.model.modalities[0].p_drop - 0.25).abs() < 1e-12);
        assert!(matches!(
            cfg.model.modalities[2].kind,
            ModalityKind::Categorical { vocab: 3 }
        ));
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.batch_size, 4);
        assert!((cfg.train.lr - 0.002).abs() < 1e-15);
        assert!((cfg.train.aux_loss_weight - 0.5).abs() < 1e-15);
        assert!((cfg.train.noise_sigma - 0.05).abs() < 1e-15);
        assert_eq!(cfg.train.flip_axis, Some(2));
        assert_eq!(cfg.train.p_drop_overrides, vec![("age".to_string(), 0.75)]);
        assert_eq!(cfg.train.seed, 11);
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.synth_seed, 13);
        assert_eq!(cfg.source, DataSource::Csv(PathBuf::from("/cfg/data/train.csv")));
        assert_eq!(cfg.out_dir, PathBuf::from("/cfg/runs/a"));
    }

    #[test]
    fn unknown_and_duplicate_keys_are_named_with_lines() {
        let err = parse("preset = separable\nbogus = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("bogus"), "{err}");

        let err = parse("seed = 1\nseed = 2\npreset = separable\n").unwrap_err();
        assert!(err.to_string().contains("duplicate key 'seed'"), "{err}");
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn missing_equals_sign_reports_the_line() {
        let err = parse("preset = separable\nnot a pair\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn data_source_must_be_exactly_one() {
        let err = parse("").unwrap_err();
        assert!(err.to_string().contains("data source"), "{err}");

        let err =
            parse("preset = separable\ndataset_csv = x.csv\nmodalities = a:ordinal\n").unwrap_err();
        assert!(err.to_string().contains("mutually exclusive"), "{err}");
    }

    #[test]
    fn csv_source_requires_modalities() {
        let err = parse("dataset_csv = x.csv\n").unwrap_err();
        assert!(err.to_string().contains("modalities"), "{err}");
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(parse("preset = nope\n").is_err());
    }

    #[test]
    fn p_drop_override_must_target_a_declared_modality() {
        let err = parse("preset = separable\np_drop.ghost = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("p_drop.ghost"), "{err}");

        let cfg = parse("preset = separable\np_drop.marker0 = 0.25\n").unwrap();
        assert_eq!(cfg.train.p_drop_overrides, vec![("marker0".to_string(), 0.25)]);
    }

    #[test]
    fn flip_axis_accepts_none_and_rejects_oob() {
        let cfg = parse("preset = separable\nflip_axis = none\n").unwrap();
        assert_eq!(cfg.train.flip_axis, None);
        let err = parse("preset = separable\nflip_axis = 3\n").unwrap_err();
        assert!(err.to_string().contains("flip_axis"), "{err}");
    }

    #[test]
    fn bad_numbers_name_the_key_and_value() {
        let err = parse("preset = separable\nlr = fast\n").unwrap_err();
        assert!(err.to_string().contains("'lr'"), "{err}");
        assert!(err.to_string().contains("'fast'"), "{err}");
        let err = parse("preset = separable\nlr = 0\n").unwrap_err();
        assert!(err.to_string().contains("positive"), "{err}");
    }

    #[test]
    fn bad_split_fractions_are_a_config_error() {
        let err = parse("preset = separable\nsplit = 0.5, 0.2, 0.2\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("split"), "{err}");
    }

    #[test]
    fn comments_blanks_and_crlf_are_tolerated() {
        let cfg = parse("# header\r\n\r\n  preset = separable  \r\n# tail\n").unwrap();
        assert_eq!(cfg.source, DataSource::Preset("separable".into()));
    }

    #[test]
    fn out_dir_env_override_wins_when_set() {
        let cfg = parse("preset = separable\nout_dir = runs/a\n").unwrap();
        assert_eq!(
            out_dir_with(&cfg, Some(OsString::from("/elsewhere"))),
            PathBuf::from("/elsewhere")
        );
        assert_eq!(out_dir_with(&cfg, Some(OsString::new())), PathBuf::from("/cfg/runs/a"));
        assert_eq!(out_dir_with(&cfg, None), PathBuf::from("/cfg/runs/a"));
    }

    #[test]
    fn config_files_parse_from_disk_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "preset = trimodal\nout_dir = out\n").unwrap();
        let cfg = parse_file(&path).unwrap();
        assert_eq!(cfg.out_dir, dir.path().join("out"));
        assert_eq!(cfg.source, DataSource::Preset("trimodal".into()));
    }
}
