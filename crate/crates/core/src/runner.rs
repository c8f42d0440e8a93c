//! End-to-end workflows behind the CLI: train a model from a config, score
//! a dataset under missing-modality scenarios, sweep drop probabilities,
//! generate synthetic datasets, and verify gradients. Every report these
//! produce is byte-identical for identical inputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::data::synthetic::{generate, generate_with_raw, preset};
use crate::data::{load_clinical_csv, patient_split, save_csv_dataset, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck::{self, CheckReport};
use crate::metrics::{auc, binary_metrics, confusion};
use crate::model::{MixerModel, ModalityKind, ModalitySpec};
use crate::train::{fit, predict_dataset, LossReport};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.csv";
pub const DATASET_FILE: &str = "dataset.csv";

/// Decision threshold for turning class-1 probabilities into labels.
pub const THRESHOLD: f64 = 0.5;

// ── Scenarios ───────────────────────────────────────────────────────────────

/// A named evaluation condition: which modalities are forced missing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scenario {
    pub label: String,
    pub missing: Vec<String>,
}

impl Scenario {
    pub fn full() -> Self {
        Scenario { label: "full".to_string(), missing: Vec::new() }
    }

    /// `"full"` keeps everything; otherwise a comma-separated list of
    /// modalities to hide. The label echoes the token as typed.
    pub fn parse(token: &str) -> Result<Self> {
        let token = token.trim();
        if token.is_empty() {
            return Err(Error::input("empty scenario token"));
        }
        if token == "full" {
            return Ok(Scenario::full());
        }
        let missing: Vec<String> = token
            .split(',')
            .map(|m| m.trim().to_string())
            .filter(|m| !m.is_empty())
            .collect();
        if missing.is_empty() {
            return Err(Error::input(format!("scenario '{token}' names no modalities")));
        }
        Ok(Scenario { label: token.to_string(), missing })
    }
}

// ── Shared plumbing ─────────────────────────────────────────────────────────

fn feature_schema(specs: &[ModalitySpec]) -> Vec<String> {
    specs
        .iter()
        .filter(|s| !matches!(s.kind, ModalityKind::Image { .. }))
        .map(|s| s.name.clone())
        .collect()
}

fn load_source(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.source {
        DataSource::Csv(path) => load_clinical_csv(path, &feature_schema(&cfg.model.modalities)),
        DataSource::Preset(name) => {
            let mut task = preset(name)?;
            if let Some(n) = cfg.n_samples {
                task.n_samples = n;
            }
            generate(&task, cfg.synth_seed)
        }
    }
}

fn build_model(cfg: &RunConfig, seed: u64) -> Result<MixerModel<f32>> {
    MixerModel::new(
        cfg.model.modalities.clone(),
        cfg.model.d,
        cfg.model.h,
        cfg.model.scale_full_dim,
        &cfg.model.channel_widths,
        cfg.model.encoder_layers,
        seed,
    )
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "NA".to_string(),
    }
}

/// A scenario label echoes user input and may contain commas; quote it when
/// it would otherwise break the row.
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn metric_cells(scores: &[f64], labels: &[u8]) -> Result<String> {
    let counts = confusion(scores, labels, THRESHOLD)?;
    let m = binary_metrics(&counts);
    let area = auc(scores, labels)?;
    Ok(format!(
        "{},{},{},{},{}",
        fmt_opt(m.accuracy),
        fmt_opt(m.sensitivity),
        fmt_opt(m.specificity),
        fmt_opt(area),
        scores.len()
    ))
}

// ── Train ───────────────────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub report_path: PathBuf,
    pub reports: Vec<LossReport>,
    /// Best validation AUC seen, if a validation set existed.
    pub best_val_auc: Option<f64>,
}

fn train_report_csv(modalities: &[ModalitySpec], reports: &[LossReport]) -> String {
    let mut out = String::from("epoch,loss_total,loss_final");
    for m in modalities {
        let _ = write!(out, ",loss_aux_{}", m.name);
    }
    out.push_str(",val_auc,val_accuracy\n");
    for r in reports {
        let _ = write!(out, "{},{},{}", r.epoch, r.total, r.final_loss);
        for a in &r.aux_losses {
            let _ = write!(out, ",{a}");
        }
        let _ = writeln!(out, ",{},{}", fmt_opt(r.val_auc), fmt_opt(r.val_accuracy));
    }
    out
}

/// Split the configured dataset, fit a model, and write the best checkpoint
/// plus a per-epoch loss report into `out_dir`.
pub fn run_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    ensure_dir(out_dir)?;
    let ds = load_source(cfg)?;
    let (train_ds, val_ds, _test_ds) = patient_split(&ds, &cfg.split)?;
    let model = build_model(cfg, cfg.seed)?;
    let result = fit(model, &train_ds, &val_ds, &cfg.train)?;

    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&result.best, &checkpoint_path)?;
    let report_path = out_dir.join(TRAIN_REPORT_FILE);
    let report = train_report_csv(&cfg.model.modalities, &result.reports);
    std::fs::write(&report_path, report)?;

    let best_val_auc = result
        .reports
        .iter()
        .filter_map(|r| r.val_auc)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    Ok(TrainOutcome {
        checkpoint_path,
        report_path,
        reports: result.reports,
        best_val_auc,
    })
}

// ── Eval ────────────────────────────────────────────────────────────────────

pub const EVAL_HEADER: &str = "scenario,accuracy,sensitivity,specificity,auc,n";

/// Score one dataset under one scenario; returns a two-line CSV report.
pub fn run_eval(checkpoint_path: &Path, dataset_csv: &Path, scenario: &Scenario) -> Result<String> {
    let model = checkpoint::load(checkpoint_path)?;
    let ds = load_clinical_csv(dataset_csv, &feature_schema(model.specs()))?;
    if ds.is_empty() {
        return Err(Error::input(format!("{}: no records to evaluate", dataset_csv.display())));
    }
    let (scores, _) = predict_dataset(&model, &ds, &scenario.missing)?;
    let labels = ds.labels();
    Ok(format!(
        "{EVAL_HEADER}\n{},{}\n",
        csv_field(&scenario.label),
        metric_cells(&scores, &labels)?
    ))
}

// ── Sweep ───────────────────────────────────────────────────────────────────

pub const SWEEP_HEADER: &str = "p,scenario,accuracy,sensitivity,specificity,auc,n";

/// For each drop probability, train a model with that probability on every
/// modality, then score the held-out test partition under each scenario.
/// Models are trained serially; row order is `ps`-major, scenario-minor.
pub fn run_sweep(cfg: &RunConfig, ps: &[f64], scenarios: &[Scenario]) -> Result<String> {
    if ps.is_empty() {
        return Err(Error::input("sweep needs at least one drop probability"));
    }
    if scenarios.is_empty() {
        return Err(Error::input("sweep needs at least one scenario"));
    }
    for &p in ps {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::input(format!("drop probability {p} lies outside [0,1]")));
        }
    }
    let ds = load_source(cfg)?;
    let (train_ds, val_ds, test_ds) = patient_split(&ds, &cfg.split)?;
    if test_ds.is_empty() {
        return Err(Error::input("sweep needs a non-empty test partition"));
    }
    let test_labels = test_ds.labels();

    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for (i, &p) in ps.iter().enumerate() {
        let mut train_cfg = cfg.train.clone();
        train_cfg.p_drop_overrides =
            cfg.model.modalities.iter().map(|m| (m.name.clone(), p)).collect();
        // Distinct initialization per sweep point, still a pure function of
        // the configured seed.
        let seed = cfg.seed ^ (i as u64);
        train_cfg.seed = seed;
        let model = build_model(cfg, seed)?;
        let result = fit(model, &train_ds, &val_ds, &train_cfg)?;
        for scenario in scenarios {
            let (scores, _) = predict_dataset(&result.best, &test_ds, &scenario.missing)?;
            let _ = writeln!(
                out,
                "{p},{},{}",
                csv_field(&scenario.label),
                metric_cells(&scores, &test_labels)?
            );
        }
    }
    Ok(out)
}

// ── Synthetic datasets ──────────────────────────────────────────────────────

/// Generate the configured synthetic task and write it as a CSV dataset
/// (plus volume files) into `out_dir`. The config's data source must be a
/// preset.
pub fn run_synth(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    let name = match &cfg.source {
        DataSource::Preset(name) => name,
        DataSource::Csv(_) => {
            return Err(Error::config(
                "synthetic generation needs 'preset', not 'dataset_csv'",
            ))
        }
    };
    let mut task = preset(name)?;
    if let Some(n) = cfg.n_samples {
        task.n_samples = n;
    }
    let (ds, raw) = generate_with_raw(&task, cfg.synth_seed)?;
    ensure_dir(out_dir)?;
    let csv_path = out_dir.join(DATASET_FILE);
    save_csv_dataset(&csv_path, &ds, &raw)?;
    Ok(csv_path)
}

// ── Gradient checks ─────────────────────────────────────────────────────────

/// One line per check: PASS/FAIL, name, worst relative error, tolerance.
pub fn format_check_reports(reports: &[CheckReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(
            out,
            "{} {:<22} max_rel_err={:.3e} tol={:.0e}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.tolerance
        );
    }
    out
}

pub fn run_gradcheck(d: usize, h: usize, seed: u64) -> Result<Vec<CheckReport>> {
    gradcheck::run_all(d, h, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_str;

    fn small_cfg(dir: &Path, extra: &str) -> RunConfig {
        let text = format!(
            "preset = separable\nn_samples = 24\nd = 8\nh = 2\nepochs = 1\nbatch_size = 8\n\
             split = 0.6, 0.2, 0.2\n{extra}"
        );
        parse_str(&text, dir).unwrap()
    }

    #[test]
    fn scenario_tokens_parse_or_fail_loudly() {
        assert_eq!(Scenario::parse("full").unwrap(), Scenario::full());
        let s = Scenario::parse("scan, cohort").unwrap();
        assert_eq!(s.missing, vec!["scan".to_string(), "cohort".to_string()]);
        assert_eq!(s.label, "scan, cohort");
        assert!(Scenario::parse("").is_err());
        assert!(Scenario::parse(" , ").is_err());
    }

    #[test]
    fn synth_train_eval_pipeline_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path(), "");
        let csv = run_synth(&cfg, dir.path()).unwrap();
        assert!(csv.exists());

        // Retarget the config at the CSV we just wrote.
        let mut csv_cfg = small_cfg(dir.path(), "");
        csv_cfg.source = DataSource::Csv(csv.clone());
        let out = run_train(&csv_cfg, dir.path()).unwrap();
        assert!(out.checkpoint_path.exists());
        assert!(out.report_path.exists());
        assert_eq!(out.reports.len(), 1);
        let report = std::fs::read_to_string(&out.report_path).unwrap();
        let header = report.lines().next().unwrap();
        assert_eq!(
            header,
            "epoch,loss_total,loss_final,loss_aux_marker0,loss_aux_marker1,\
             loss_aux_marker2,loss_aux_marker3,loss_aux_cohort,val_auc,val_accuracy"
        );
        assert_eq!(report.lines().count(), 2);

        let eval = run_eval(&out.checkpoint_path, &csv, &Scenario::full()).unwrap();
        let mut lines = eval.lines();
        assert_eq!(lines.next().unwrap(), EVAL_HEADER);
        let row = lines.next().unwrap();
        assert!(row.starts_with("full,"), "{row}");
        assert!(row.ends_with(",24"), "{row}");
    }

    #[test]
    fn train_outputs_are_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path(), "");
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let out_a = run_train(&cfg, &a).unwrap();
        let out_b = run_train(&cfg, &b).unwrap();
        assert_eq!(
            std::fs::read(&out_a.report_path).unwrap(),
            std::fs::read(&out_b.report_path).unwrap()
        );
        assert_eq!(
            std::fs::read(&out_a.checkpoint_path).unwrap(),
            std::fs::read(&out_b.checkpoint_path).unwrap()
        );
    }

    #[test]
    fn eval_sees_forced_missing_modalities() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path(), "");
        let out = run_train(&cfg, dir.path()).unwrap();
        let csv = run_synth(&cfg, &dir.path().join("data")).unwrap();

        let full = run_eval(&out.checkpoint_path, &csv, &Scenario::full()).unwrap();
        let hidden =
            run_eval(&out.checkpoint_path, &csv, &Scenario::parse("marker0,marker1").unwrap())
                .unwrap();
        assert!(hidden.lines().nth(1).unwrap().starts_with("\"marker0,marker1\","));
        // Same dataset, same model: only the scenario column and metrics may
        // differ, and both reports carry exactly one data row.
        assert_eq!(full.lines().count(), 2);
        assert_eq!(hidden.lines().count(), 2);

        let err = run_eval(&out.checkpoint_path, &csv, &Scenario::parse("ghost").unwrap());
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn sweep_emits_one_row_per_p_and_scenario() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path(), "");
        let scenarios =
            vec![Scenario::full(), Scenario::parse("marker0").unwrap()];
        let report = run_sweep(&cfg, &[0.0, 0.5], &scenarios).unwrap();
        let lines: Vec<&str> = report.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert_eq!(lines.len(), 1 + 2 * 2);
        assert!(lines[1].starts_with("0,full,"), "{}", lines[1]);
        assert!(lines[2].starts_with("0,marker0,"), "{}", lines[2]);
        assert!(lines[3].starts_with("0.5,full,"), "{}", lines[3]);
        assert!(lines[4].starts_with("0.5,marker0,"), "{}", lines[4]);

        let again = run_sweep(&cfg, &[0.0, 0.5], &scenarios).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn sweep_rejects_bad_probabilities_and_empty_lists() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path(), "");
        assert!(matches!(run_sweep(&cfg, &[], &[Scenario::full()]), Err(Error::Input(_))));
        assert!(matches!(run_sweep(&cfg, &[0.5], &[]), Err(Error::Input(_))));
        assert!(matches!(run_sweep(&cfg, &[1.5], &[Scenario::full()]), Err(Error::Input(_))));
    }

    #[test]
    fn synth_requires_a_preset_source() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(dir.path(), "");
        cfg.source = DataSource::Csv(dir.path().join("x.csv"));
        assert!(matches!(run_synth(&cfg, dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn check_report_lines_are_one_per_check() {
        let reports = vec![
            CheckReport { name: "alpha".into(), max_rel_err: 1e-9, tolerance: 1e-4 },
            CheckReport { name: "beta".into(), max_rel_err: 0.5, tolerance: 1e-4 },
        ];
        let text = format_check_reports(&reports);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("PASS alpha"));
        assert!(lines[1].starts_with("FAIL beta"));
    }

    #[test]
    fn comma_bearing_scenario_labels_stay_one_csv_field() {
        assert_eq!(csv_field("full"), "full");
        assert_eq!(csv_field("scan,cohort"), "\"scan,cohort\"");
        assert_eq!(csv_field("a\"b"), "\"a\"\"b\"");
    }
}
