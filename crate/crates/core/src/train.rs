//! Training: Adam, the combined final + auxiliary loss, volume
//! augmentation, batch assembly from datasets, and the fit loop with
//! best-validation-AUC model selection.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::volume::DEGENERATE_STD;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{
    sample_drop_mask, Cell, MixerModel, ModalityBatch, ModalityKind, ModalitySpec, Mode, Value,
};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

// ── Adam ────────────────────────────────────────────────────────────────────

/// Bias-corrected Adam. Moment buffers appear lazily per parameter name and
/// keep their shapes forever; the step counter advances once per [`Adam::step_visit`].
pub struct Adam<T: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One optimizer step over whatever parameters `visit` walks. Every
    /// visited parameter must have a gradient in `grads` of matching length.
    pub fn step_visit(
        &mut self,
        grads: &HashMap<String, Vec<T>>,
        visit: impl FnOnce(&mut dyn FnMut(String, &mut Tensor<T>)),
    ) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::fromf(self.beta1), T::fromf(self.beta2));
        let (nb1, nb2) = (T::fromf(1.0 - self.beta1), T::fromf(1.0 - self.beta2));
        let (ic1, ic2) = (T::fromf(1.0 / c1), T::fromf(1.0 / c2));
        let (lr, eps) = (T::fromf(self.lr), T::fromf(self.eps));
        let mut first_err: Option<Error> = None;
        visit(&mut |name, param| {
            if first_err.is_some() {
                return;
            }
            let n = param.numel();
            let grad = match grads.get(&name) {
                Some(g) if g.len() == n => g,
                Some(g) => {
                    first_err = Some(Error::state(format!(
                        "gradient for '{}' has {} elements, parameter has {}",
                        name,
                        g.len(),
                        n
                    )));
                    return;
                }
                None => {
                    first_err = Some(Error::state(format!("no gradient for parameter '{}'", name)));
                    return;
                }
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            if m.len() != n {
                first_err = Some(Error::state(format!(
                    "parameter '{}' changed size: moments have {}, parameter has {}",
                    name,
                    m.len(),
                    n
                )));
                return;
            }
            let data = match param.data_mut() {
                Ok(d) => d,
                Err(e) => {
                    first_err = Some(e);
                    return;
                }
            };
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + nb1 * g;
                v[i] = b2 * v[i] + nb2 * g * g;
                let mhat = m[i] * ic1;
                let vhat = v[i] * ic2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        first_err.map_or(Ok(()), Err)
    }

    pub fn step_model(
        &mut self,
        model: &mut MixerModel<T>,
        grads: &HashMap<String, Vec<T>>,
    ) -> Result<()> {
        self.step_visit(grads, |f| model.visit_params_mut(f))
    }
}

// ── Loss ────────────────────────────────────────────────────────────────────

/// Final-head cross entropy plus `aux_loss_weight` times the sum of the
/// auxiliary-head cross entropies. Differentiable; returns a scalar tensor.
pub fn compute_total_loss<T: Scalar>(
    final_logits: &Tensor<T>,
    aux_logits: &[Tensor<T>],
    labels: &[usize],
    aux_loss_weight: f64,
) -> Result<Tensor<T>> {
    let mut total = final_logits.cross_entropy(labels)?;
    if aux_loss_weight != 0.0 {
        for aux in aux_logits {
            let scaled = aux.cross_entropy(labels)?.mul_scalar(T::fromf(aux_loss_weight))?;
            total = total.add(&scaled)?;
        }
    }
    Ok(total)
}

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub aux_loss_weight: f64,
    /// Flip axis for volume augmentation (0 = depth, 1 = height, 2 = width);
    /// `None` disables flipping.
    pub flip_axis: Option<usize>,
    pub noise_sigma: f64,
    /// Per-modality overrides of the drop probability used during training.
    pub p_drop_overrides: Vec<(String, f64)>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 2,
            lr: 5e-4,
            aux_loss_weight: 1.0,
            flip_axis: Some(1),
            noise_sigma: 0.01,
            p_drop_overrides: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if let Some(axis) = self.flip_axis {
            if axis > 2 {
                return Err(Error::config(format!("flip_axis {} outside 0..=2", axis)));
            }
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !self.aux_loss_weight.is_finite() {
            return Err(Error::config("aux_loss_weight must be finite"));
        }
        Ok(())
    }
}

// ── Augmentation ────────────────────────────────────────────────────────────

/// Volume augmentation: each volume independently flips along `flip_axis`
/// with probability 1/2, then gets N(0, noise_sigma^2) added per voxel.
/// Clinical cells pass through untouched.
pub fn augment(
    batch: &ModalityBatch,
    flip_axis: Option<usize>,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ModalityBatch> {
    let mut out = batch.clone();
    for row in &mut out.cells {
        for cell in row {
            let Some(Value::Volume(vol)) = &mut cell.value else { continue };
            if !cell.available {
                continue;
            }
            if let Some(axis) = flip_axis {
                if rng.gen::<f64>() < 0.5 {
                    *vol = vol.flipped(axis)?;
                }
            }
            if noise_sigma > 0.0 {
                for v in vol.data_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v += (noise_sigma * n) as f32;
                }
            }
        }
    }
    Ok(out)
}

// ── Batch assembly ──────────────────────────────────────────────────────────

/// Build model cells for the given record indices, mapping modality specs
/// onto dataset columns by name (image modalities use the record's volume).
pub fn batch_from_records(
    ds: &Dataset,
    idxs: &[usize],
    specs: &[ModalitySpec],
) -> Result<(ModalityBatch, Vec<usize>)> {
    let mut columns = Vec::with_capacity(specs.len());
    for spec in specs {
        match spec.kind {
            ModalityKind::Image { .. } => columns.push(None),
            _ => match ds.feature_index(&spec.name) {
                Some(i) => columns.push(Some(i)),
                None => {
                    return Err(Error::input(format!(
                        "modality '{}' is not a column of the dataset",
                        spec.name
                    )))
                }
            },
        }
    }
    let mut cells = Vec::with_capacity(idxs.len());
    let mut labels = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let rec = ds
            .records
            .get(i)
            .ok_or_else(|| Error::input(format!("record index {} out of range", i)))?;
        let mut row = Vec::with_capacity(specs.len());
        for (spec, col) in specs.iter().zip(&columns) {
            let cell = match (spec.kind, col) {
                (ModalityKind::Image { .. }, _) => match &rec.volume {
                    Some(v) => Cell::present(Value::Volume(v.clone())),
                    None => Cell::missing(),
                },
                (ModalityKind::Ordinal, Some(c)) => match rec.features[*c] {
                    Some(v) => Cell::present(Value::Ordinal(v)),
                    None => Cell::missing(),
                },
                (ModalityKind::Categorical { vocab }, Some(c)) => match rec.features[*c] {
                    Some(v) => {
                        if v.fract() != 0.0 || v < 0.0 || v >= vocab as f64 {
                            return Err(Error::data(format!(
                                "record '{}': value {} for categorical '{}' is not an integer in 0..{}",
                                rec.patient_id, v, spec.name, vocab
                            )));
                        }
                        Cell::present(Value::Categorical(v as usize))
                    }
                    None => Cell::missing(),
                },
                _ => unreachable!("clinical columns resolved above"),
            };
            row.push(cell);
        }
        cells.push(row);
        labels.push(rec.label as usize);
    }
    Ok((ModalityBatch { cells }, labels))
}

// ── Fit ─────────────────────────────────────────────────────────────────────

/// One epoch's summary. `total` decomposes as
/// `final_loss + aux_loss_weight * sum(aux_losses)` (per batch, before
/// averaging, to within float tolerance).
#[derive(Clone, Debug)]
pub struct LossReport {
    pub epoch: usize,
    pub total: f64,
    pub final_loss: f64,
    /// Mean auxiliary loss per modality, in spec order.
    pub aux_losses: Vec<f64>,
    pub val_auc: Option<f64>,
    pub val_accuracy: Option<f64>,
}

pub struct FitResult<T: Scalar> {
    /// Model state after the last epoch.
    pub model: MixerModel<T>,
    /// The epoch snapshot with the highest validation AUC (earliest epoch on
    /// ties); equals `model` when no validation AUC was ever available.
    pub best: MixerModel<T>,
    pub reports: Vec<LossReport>,
}

const EVAL_CHUNK: usize = 64;

/// Scores (probability of class 1) and predicted labels for a whole dataset,
/// evaluated in chunks.
pub fn predict_dataset<T: Scalar>(
    model: &MixerModel<T>,
    ds: &Dataset,
    force_missing: &[String],
) -> Result<(Vec<f64>, Vec<u8>)> {
    for name in force_missing {
        if !model.specs().iter().any(|s| &s.name == name) {
            return Err(Error::input(format!("unknown modality '{}' in missing list", name)));
        }
    }
    let mut scores = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    let idxs: Vec<usize> = (0..ds.len()).collect();
    for chunk in idxs.chunks(EVAL_CHUNK) {
        let (mut batch, _) = batch_from_records(ds, chunk, model.specs())?;
        if !force_missing.is_empty() {
            for row in &mut batch.cells {
                for (spec, cell) in model.specs().iter().zip(row) {
                    if force_missing.contains(&spec.name) {
                        *cell = Cell::missing();
                    }
                }
            }
        }
        let preds = model.predict(&batch)?;
        scores.extend(preds.probs.iter().map(|p| p[1]));
        labels.extend(preds.labels);
    }
    Ok((scores, labels))
}

/// Train `model` on `train`, selecting the best epoch by validation AUC.
///
/// Ordinal normalization statistics are fitted from the training split
/// before the first epoch. An empty validation set is allowed; model
/// selection then falls back to the final epoch.
pub fn fit<T: Scalar>(
    mut model: MixerModel<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::input("cannot fit on an empty training set"));
    }
    for (name, p) in &cfg.p_drop_overrides {
        model.set_p_drop(name, *p)?;
    }
    fit_ordinal_stats(&mut model, train)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut best: Option<(f64, MixerModel<T>)> = None;
    let mut reports = Vec::with_capacity(cfg.epochs);
    let n = train.len();
    let param_names: Vec<String> = {
        let mut names = Vec::new();
        model.visit_params(&mut |name, _| names.push(name));
        names
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);

        let mut sums = EpochSums::new(model.specs().len());
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = batch_from_records(train, chunk, model.specs())?;
            let batch = augment(&batch, cfg.flip_axis, cfg.noise_sigma, &mut rng)?;
            let mask = sample_drop_mask(model.specs(), chunk.len(), &mut rng);

            let tape = Tape::new();
            let out = model.forward(&tape, &batch, Mode::Train { keep: &mask })?;
            let final_ce = out.final_logits.cross_entropy(&labels)?;
            let mut total = final_ce.clone();
            let mut aux_ces = Vec::with_capacity(out.aux_logits.len());
            for aux in &out.aux_logits {
                let ce = aux.cross_entropy(&labels)?;
                aux_ces.push(ce.item().tof());
                if cfg.aux_loss_weight != 0.0 {
                    total = total.add(&ce.mul_scalar(T::fromf(cfg.aux_loss_weight))?)?;
                }
            }
            total.backward()?;

            let mut grads: HashMap<String, Vec<T>> = HashMap::with_capacity(param_names.len());
            model.visit_params(&mut |name, t| {
                let g = tape
                    .grad_of(t)
                    .unwrap_or_else(|| vec![T::zero(); t.numel()]);
                grads.insert(name, g);
            });
            adam.step_model(&mut model, &grads)?;

            sums.add(chunk.len(), total.item().tof(), final_ce.item().tof(), &aux_ces);
        }

        let (val_auc, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (scores, pred_labels) = predict_dataset(&model, val, &[])?;
            let truth = val.labels();
            let auc = metrics::auc(&scores, &truth)?;
            let correct = pred_labels.iter().zip(&truth).filter(|(p, t)| p == t).count();
            (auc, Some(correct as f64 / truth.len() as f64))
        };
        if let Some(auc) = val_auc {
            // Strict > keeps the earliest epoch on ties.
            if best.as_ref().map_or(true, |(b, _)| auc > *b) {
                best = Some((auc, model.clone()));
            }
        }
        reports.push(sums.report(epoch, val_auc, val_accuracy));
    }

    let best_model = best.map(|(_, m)| m).unwrap_or_else(|| model.clone());
    Ok(FitResult { model, best: best_model, reports })
}

/// Fit z-score statistics for every ordinal modality from the training data.
fn fit_ordinal_stats<T: Scalar>(model: &mut MixerModel<T>, train: &Dataset) -> Result<()> {
    let specs: Vec<ModalitySpec> = model.specs().to_vec();
    for spec in &specs {
        if !matches!(spec.kind, ModalityKind::Ordinal) {
            continue;
        }
        let col = train.feature_index(&spec.name).ok_or_else(|| {
            Error::input(format!("modality '{}' is not a column of the dataset", spec.name))
        })?;
        let (mean, std) = train.feature_mean_std(col).ok_or_else(|| {
            Error::data(format!(
                "ordinal feature '{}' has no training values to normalize",
                spec.name
            ))
        })?;
        if std < DEGENERATE_STD {
            return Err(Error::data(format!(
                "ordinal feature '{}' is constant in the training data",
                spec.name
            )));
        }
        model.set_ordinal_stats(&spec.name, mean, std)?;
    }
    Ok(())
}

struct EpochSums {
    samples: usize,
    total: f64,
    final_loss: f64,
    aux: Vec<f64>,
}

impl EpochSums {
    fn new(n_modalities: usize) -> Self {
        EpochSums { samples: 0, total: 0.0, final_loss: 0.0, aux: vec![0.0; n_modalities] }
    }

    fn add(&mut self, batch_len: usize, total: f64, final_loss: f64, aux: &[f64]) {
        let w = batch_len as f64;
        self.samples += batch_len;
        self.total += total * w;
        self.final_loss += final_loss * w;
        for (acc, a) in self.aux.iter_mut().zip(aux) {
            *acc += a * w;
        }
    }

    fn report(&self, epoch: usize, val_auc: Option<f64>, val_accuracy: Option<f64>) -> LossReport {
        let n = self.samples.max(1) as f64;
        LossReport {
            epoch,
            total: self.total / n,
            final_loss: self.final_loss / n,
            aux_losses: self.aux.iter().map(|a| a / n).collect(),
            val_auc,
            val_accuracy,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{self, SyntheticModality, SyntheticTaskConfig};
    use crate::data::volume::Volume;

    fn params_of<T: Scalar>(model: &MixerModel<T>) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        model.visit_params(&mut |n, t| out.push((n, t.to_vec())));
        out
    }

    // ── Adam ────────────────────────────────────────────────────────────

    #[test]
    fn adam_single_step_closed_form() {
        let mut adam = Adam::<f64>::new(5e-4);
        let mut theta = Tensor::<f64>::from_vec(&[1], vec![0.0]).unwrap();
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        adam.step_visit(&grads, |f| f("w".to_string(), &mut theta)).unwrap();
        // mhat = vhat = 1 after one unit-gradient step, so the update is
        // exactly -lr / (1 + eps).
        let expected = -5e-4 / (1.0 + 1e-8);
        assert!((theta.data()[0] - expected).abs() < 1e-18, "{}", theta.data()[0]);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut adam = Adam::<f32>::new(1e-3);
        let mut theta = Tensor::<f32>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), vec![0.0f32; 3]);
        adam.step_visit(&grads, |f| f("w".to_string(), &mut theta)).unwrap();
        assert_eq!(theta.to_vec(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut adam = Adam::<f32>::new(2e-3);
            let mut theta = Tensor::<f32>::from_vec(&[2], vec![0.3, -0.7]).unwrap();
            for step in 0..10 {
                let mut grads = HashMap::new();
                grads.insert("w".to_string(), vec![0.1 * step as f32, -0.2]);
                adam.step_visit(&grads, |f| f("w".to_string(), &mut theta)).unwrap();
            }
            theta.to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn adam_missing_or_misshapen_gradient_is_a_state_error() {
        let mut adam = Adam::<f32>::new(1e-3);
        let mut theta = Tensor::<f32>::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let empty = HashMap::new();
        let err = adam.step_visit(&empty, |f| f("w".to_string(), &mut theta)).unwrap_err();
        assert!(matches!(err, Error::State(_)));

        let mut grads = HashMap::new();
        grads.insert("w".to_string(), vec![1.0f32; 3]);
        let err = adam.step_visit(&grads, |f| f("w".to_string(), &mut theta)).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn adam_counts_steps_not_parameters() {
        let mut adam = Adam::<f32>::new(1e-3);
        let mut a = Tensor::<f32>::zeros(&[1]);
        let mut b = Tensor::<f32>::zeros(&[1]);
        let mut grads = HashMap::new();
        grads.insert("a".to_string(), vec![1.0f32]);
        grads.insert("b".to_string(), vec![1.0f32]);
        adam.step_visit(&grads, |f| {
            f("a".to_string(), &mut a);
            f("b".to_string(), &mut b);
        })
        .unwrap();
        assert_eq!(adam.steps_taken(), 1);
        // Both parameters moved by the same single-step amount.
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    }

    // ── Loss ────────────────────────────────────────────────────────────

    #[test]
    fn total_loss_decomposes() {
        // Uniform logits give cross entropy exactly ln 2 per head.
        let logits = Tensor::<f64>::zeros(&[2, 2]);
        let labels = [0usize, 1];
        let aux = vec![logits.clone(), logits.clone()];
        let ln2 = std::f64::consts::LN_2;

        let total = compute_total_loss(&logits, &aux, &labels, 1.0).unwrap();
        assert!((total.item() - 3.0 * ln2).abs() < 1e-12);

        let total = compute_total_loss(&logits, &aux, &labels, 0.0).unwrap();
        assert!((total.item() - ln2).abs() < 1e-12);

        let total = compute_total_loss(&logits, &[], &labels, 1.0).unwrap();
        assert!((total.item() - ln2).abs() < 1e-12);

        let total = compute_total_loss(&logits, &aux, &labels, 0.25).unwrap();
        assert!((total.item() - 1.5 * ln2).abs() < 1e-12);
    }

    // ── Augmentation ────────────────────────────────────────────────────

    fn volume_batch(vol: Volume) -> ModalityBatch {
        ModalityBatch {
            cells: vec![vec![
                Cell::present(Value::Volume(vol)),
                Cell::present(Value::Ordinal(3.0)),
            ]],
        }
    }

    fn test_volume(dims: (usize, usize, usize), seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2;
        let data: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() - 0.5).collect();
        Volume::from_normalized(dims, data).unwrap()
    }

    #[test]
    fn augment_disabled_is_identity() {
        let batch = volume_batch(test_volume((4, 5, 6), 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&batch, None, 0.0, &mut rng).unwrap();
        let (Value::Volume(a), Value::Volume(b)) = (
            batch.cells[0][0].value.as_ref().unwrap(),
            out.cells[0][0].value.as_ref().unwrap(),
        ) else {
            panic!()
        };
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn augment_without_noise_flips_or_keeps_exactly() {
        let vol = test_volume((4, 5, 6), 2);
        let batch = volume_batch(vol.clone());
        let flipped = vol.flipped(1).unwrap();
        let mut seen_flip = false;
        let mut seen_keep = false;
        for seed in 0..32 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&batch, Some(1), 0.0, &mut rng).unwrap();
            let Some(Value::Volume(v)) = &out.cells[0][0].value else { panic!() };
            if v.data() == vol.data() {
                seen_keep = true;
            } else if v.data() == flipped.data() {
                seen_flip = true;
            } else {
                panic!("augmented volume is neither original nor flipped");
            }
            // Clinical cell untouched either way.
            assert!(matches!(out.cells[0][1].value, Some(Value::Ordinal(v)) if v == 3.0));
        }
        assert!(seen_flip && seen_keep);
    }

    #[test]
    fn augment_noise_std_concentrates() {
        // 50*50*40 = 100_000 voxels.
        let vol = test_volume((50, 50, 40), 3);
        let batch = volume_batch(vol.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = augment(&batch, None, 0.01, &mut rng).unwrap();
        let Some(Value::Volume(v)) = &out.cells[0][0].value else { panic!() };
        let deltas: Vec<f64> = v
            .data()
            .iter()
            .zip(vol.data())
            .map(|(a, b)| (*a - *b) as f64)
            .collect();
        let n = deltas.len() as f64;
        let mean = deltas.iter().sum::<f64>() / n;
        let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((0.0098..=0.0102).contains(&std), "noise std {std}");
    }

    #[test]
    fn augment_skips_missing_volumes() {
        let vol = test_volume((4, 4, 4), 4);
        let mut batch = volume_batch(vol.clone());
        batch.cells[0][0].available = false;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&batch, Some(0), 0.5, &mut rng).unwrap();
        let Some(Value::Volume(v)) = &out.cells[0][0].value else { panic!() };
        assert_eq!(v.data(), vol.data());
    }

    // ── Batch assembly ──────────────────────────────────────────────────

    fn clinical_dataset() -> Dataset {
        let cfg = SyntheticTaskConfig {
            n_samples: 12,
            modalities: vec![
                SyntheticModality::new("age", ModalityKind::Ordinal, 1.0),
                SyntheticModality::new("apoe", ModalityKind::Categorical { vocab: 2 }, 0.5),
            ],
        };
        synthetic::generate(&cfg, 5).unwrap()
    }

    fn clinical_specs() -> Vec<ModalitySpec> {
        vec![
            ModalitySpec::new("age", ModalityKind::Ordinal),
            ModalitySpec::new("apoe", ModalityKind::Categorical { vocab: 2 }),
        ]
    }

    #[test]
    fn batch_assembly_maps_columns_by_name() {
        let ds = clinical_dataset();
        let (batch, labels) = batch_from_records(&ds, &[0, 3], &clinical_specs()).unwrap();
        assert_eq!(batch.batch_size(), 2);
        assert_eq!(labels, vec![0, 1]);
        assert!(matches!(batch.cells[0][0].value, Some(Value::Ordinal(_))));
        assert!(matches!(batch.cells[0][1].value, Some(Value::Categorical(_))));
    }

    #[test]
    fn batch_assembly_rejects_unknown_modality() {
        let ds = clinical_dataset();
        let specs = vec![ModalitySpec::new("mystery", ModalityKind::Ordinal)];
        assert!(matches!(
            batch_from_records(&ds, &[0], &specs),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn batch_assembly_validates_categorical_values() {
        let mut ds = clinical_dataset();
        ds.records[0].features[1] = Some(0.5);
        let err = batch_from_records(&ds, &[0], &clinical_specs()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));

        ds.records[0].features[1] = Some(5.0);
        let err = batch_from_records(&ds, &[0], &clinical_specs()).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    // ── Fit ─────────────────────────────────────────────────────────────

    fn tiny_model(seed: u64) -> MixerModel<f32> {
        MixerModel::new(clinical_specs(), 16, 2, false, &[4, 8, 16, 16], 1, seed).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_model_bitwise() {
        let ds = clinical_dataset();
        let model = tiny_model(3);
        let before = params_of(&model);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = fit(model, &ds, &Dataset::default(), &cfg).unwrap();
        let after = params_of(&out.model);
        assert_eq!(before.len(), after.len());
        for ((n1, a), (n2, b)) in before.iter().zip(&after) {
            assert_eq!(n1, n2);
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(out.reports.is_empty());
    }

    #[test]
    fn fixed_seed_fixes_the_loss_trajectory() {
        let ds = clinical_dataset();
        let cfg = TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::default() };
        let run = || {
            let out = fit(tiny_model(3), &ds, &Dataset::default(), &cfg).unwrap();
            out.reports.iter().map(|r| (r.total, r.final_loss)).collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn separable_task_reaches_train_accuracy() {
        let cfg = SyntheticTaskConfig {
            n_samples: 200,
            modalities: vec![
                SyntheticModality::new("x0", ModalityKind::Ordinal, 3.0),
                SyntheticModality::new("x1", ModalityKind::Ordinal, 3.0),
            ],
        };
        let ds = synthetic::generate(&cfg, 1).unwrap();
        let specs = vec![
            ModalitySpec::new("x0", ModalityKind::Ordinal).with_p_drop(0.25),
            ModalitySpec::new("x1", ModalityKind::Ordinal).with_p_drop(0.25),
        ];
        let model = MixerModel::<f32>::new(specs, 16, 2, false, &[4, 8, 16, 16], 1, 2).unwrap();
        let tc = TrainConfig { epochs: 20, batch_size: 8, ..TrainConfig::default() };
        let out = fit(model, &ds, &Dataset::default(), &tc).unwrap();
        let (_, pred) = predict_dataset(&out.model, &ds, &[]).unwrap();
        let truth = ds.labels();
        let acc = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64
            / truth.len() as f64;
        assert!(acc >= 0.95, "train accuracy {acc}");
        assert!(
            out.reports.last().unwrap().total < out.reports[0].total,
            "loss did not decrease"
        );
    }

    #[test]
    fn report_rows_decompose_per_epoch() {
        let ds = clinical_dataset();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 5, // uneven last batch exercises the weighting
            aux_loss_weight: 0.5,
            ..TrainConfig::default()
        };
        let out = fit(tiny_model(3), &ds, &Dataset::default(), &cfg).unwrap();
        assert_eq!(out.reports.len(), 2);
        for r in &out.reports {
            let aux_sum: f64 = r.aux_losses.iter().sum();
            assert!(
                (r.total - (r.final_loss + 0.5 * aux_sum)).abs() < 1e-5,
                "epoch {}: total {} vs {} + 0.5*{}",
                r.epoch,
                r.total,
                r.final_loss,
                aux_sum
            );
        }
    }

    #[test]
    fn validation_tracks_best_auc_snapshot() {
        let cfg = SyntheticTaskConfig {
            n_samples: 80,
            modalities: vec![SyntheticModality::new("x0", ModalityKind::Ordinal, 3.0)],
        };
        let train = synthetic::generate(&cfg, 2).unwrap();
        let val = synthetic::generate(&cfg, 3).unwrap();
        let specs = vec![ModalitySpec::new("x0", ModalityKind::Ordinal).with_p_drop(0.0)];
        let model = MixerModel::<f32>::new(specs, 16, 2, false, &[4, 8, 16, 16], 1, 4).unwrap();
        let tc = TrainConfig { epochs: 5, batch_size: 8, ..TrainConfig::default() };
        let out = fit(model, &train, &val, &tc).unwrap();
        let best_reported = out
            .reports
            .iter()
            .filter_map(|r| r.val_auc)
            .fold(f64::MIN, f64::max);
        let (scores, _) = predict_dataset(&out.best, &val, &[]).unwrap();
        let auc = metrics::auc(&scores, &val.labels()).unwrap().unwrap();
        assert!((auc - best_reported).abs() < 1e-12, "best {auc} vs reported {best_reported}");
    }

    #[test]
    fn empty_train_set_is_an_input_error() {
        let ds = clinical_dataset();
        let empty = Dataset { feature_names: ds.feature_names.clone(), ..Dataset::default() };
        let out = fit(tiny_model(0), &empty, &Dataset::default(), &TrainConfig::default());
        assert!(matches!(out, Err(Error::Input(_))));
    }

    #[test]
    fn ordinal_stats_come_from_the_training_split() {
        let ds = clinical_dataset();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = fit(tiny_model(0), &ds, &Dataset::default(), &cfg).unwrap();
        let col = ds.feature_index("age").unwrap();
        let want = ds.feature_mean_std(col).unwrap();
        assert_eq!(out.model.ordinal_stats("age").unwrap(), Some(want));
    }

    #[test]
    fn constant_ordinal_feature_is_a_data_error() {
        let mut ds = clinical_dataset();
        for r in &mut ds.records {
            r.features[0] = Some(42.0);
        }
        let err = match fit(tiny_model(0), &ds, &Dataset::default(), &TrainConfig::default()) {
            Err(e) => e,
            Ok(_) => panic!("constant feature was accepted"),
        };
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("age"), "{err}");
    }

    #[test]
    fn p_drop_overrides_reach_the_model() {
        let ds = clinical_dataset();
        let cfg = TrainConfig {
            epochs: 0,
            p_drop_overrides: vec![("age".to_string(), 0.9)],
            ..TrainConfig::default()
        };
        let out = fit(tiny_model(0), &ds, &Dataset::default(), &cfg).unwrap();
        assert_eq!(out.model.specs()[0].p_drop, 0.9);
        assert_eq!(out.model.specs()[1].p_drop, crate::model::DEFAULT_P_DROP);
    }

    #[test]
    fn gradients_reach_the_first_embedder_at_depth_six() {
        let specs: Vec<ModalitySpec> = (0..6)
            .map(|i| ModalitySpec::new(format!("m{i}"), ModalityKind::Ordinal))
            .collect();
        let mut model = MixerModel::<f32>::new(specs, 16, 2, false, &[4, 8, 16, 16], 1, 9).unwrap();
        for i in 0..6 {
            model.set_ordinal_stats(&format!("m{i}"), 0.0, 1.0).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cells: Vec<Vec<Cell>> = (0..4)
            .map(|_| {
                (0..6)
                    .map(|_| Cell::present(Value::Ordinal(rng.gen::<f64>() * 2.0 - 1.0)))
                    .collect()
            })
            .collect();
        let batch = ModalityBatch { cells };
        let keep = crate::model::DropMask { keep: vec![vec![true; 6]; 4] };
        let labels = [0usize, 1, 0, 1];

        let tape = Tape::new();
        let out = model.forward(&tape, &batch, Mode::Train { keep: &keep }).unwrap();
        let total =
            compute_total_loss(&out.final_logits, &out.aux_logits, &labels, 1.0).unwrap();
        total.backward().unwrap();
        let mut norm = 0.0f64;
        model.visit_params(&mut |name, t| {
            if name.starts_with("embed.m0.") {
                if let Some(g) = tape.grad_of(t) {
                    norm += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                }
            }
        });
        assert!(norm.sqrt() > 1e-8, "first-modality embedder gradient norm {}", norm.sqrt());
    }

    #[test]
    fn predict_dataset_rejects_unknown_missing_names() {
        let ds = clinical_dataset();
        let model = tiny_model(0);
        let err = predict_dataset(&model, &ds, &["ghost".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }
}
