//! The full classifier: a learned query row runs through one mixing block
//! per modality (in declared order), each block injecting that modality's
//! embedding — or a zero embedding when the value is unavailable or dropped.
//! Auxiliary heads read the query after every injection; the final head
//! reads it after the last.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::MixerBlock;
use crate::data::volume::Volume;
use crate::embed::{CategoricalEmbedder, Embedder, ImageEncoder, OrdinalEmbedder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{concat_rows, Tape, Tensor};
use crate::LEAKY_SLOPE;

// ── Modality declarations ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModalityKind {
    Categorical { vocab: usize },
    Ordinal,
    Image { dims: (usize, usize, usize) },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: ModalityKind,
    /// Probability that training zeroes this modality's embedding.
    pub p_drop: f64,
}

pub const DEFAULT_P_DROP: f64 = 0.5;

impl ModalitySpec {
    pub fn new(name: impl Into<String>, kind: ModalityKind) -> Self {
        ModalitySpec { name: name.into(), kind, p_drop: DEFAULT_P_DROP }
    }

    pub fn with_p_drop(mut self, p: f64) -> Self {
        self.p_drop = p;
        self
    }
}

// ── Batches ─────────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum Value {
    Categorical(usize),
    Ordinal(f64),
    Volume(Volume),
}

/// One modality entry for one sample. When `available` is false the value
/// is a placeholder and is never read.
#[derive(Clone, Debug, Default)]
pub struct Cell {
    pub available: bool,
    pub value: Option<Value>,
}

impl Cell {
    pub fn present(value: Value) -> Self {
        Cell { available: true, value: Some(value) }
    }

    pub fn missing() -> Self {
        Cell { available: false, value: None }
    }
}

/// Per-sample, per-modality cells; rows are samples in modality spec order.
#[derive(Clone, Debug, Default)]
pub struct ModalityBatch {
    pub cells: Vec<Vec<Cell>>,
}

impl ModalityBatch {
    pub fn batch_size(&self) -> usize {
        self.cells.len()
    }
}

/// Pre-sampled keep/drop decisions for one training batch:
/// `keep[sample][modality]`.
#[derive(Clone, Debug)]
pub struct DropMask {
    pub keep: Vec<Vec<bool>>,
}

/// Draw modality-dropout decisions, independently per sample and modality
/// (sample-major draw order). An entry is dropped with that modality's
/// p_drop.
pub fn sample_drop_mask(
    specs: &[ModalitySpec],
    batch_size: usize,
    rng: &mut impl Rng,
) -> DropMask {
    let keep = (0..batch_size)
        .map(|_| specs.iter().map(|s| rng.gen::<f64>() >= s.p_drop).collect())
        .collect();
    DropMask { keep }
}

#[derive(Clone, Copy)]
pub enum Mode<'a> {
    Train { keep: &'a DropMask },
    Eval,
}

// ── Heads ───────────────────────────────────────────────────────────────────

/// Two dense layers: d -> d with leaky ReLU, then d -> 2 logits.
#[derive(Clone)]
pub struct DenseHead<T: Scalar> {
    w1: Tensor<T>,
    b1: Tensor<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
}

impl<T: Scalar> DenseHead<T> {
    fn new(d: usize, rng: &mut impl Rng) -> Self {
        DenseHead {
            w1: Tensor::uniform_init(&[d, d], d, rng),
            b1: Tensor::zeros(&[d]),
            w2: Tensor::uniform_init(&[d, 2], d, rng),
            b2: Tensor::zeros(&[2]),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.w1.watch(tape)?)?
            .add_bias(&self.b1.watch(tape)?)?
            .leaky_relu(T::fromf(LEAKY_SLOPE))?
            .matmul(&self.w2.watch(tape)?)?
            .add_bias(&self.b2.watch(tape)?)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

// ── Model ───────────────────────────────────────────────────────────────────

pub struct ForwardOut<T: Scalar> {
    /// (batch x 2) logits from the final head.
    pub final_logits: Tensor<T>,
    /// One (batch x 2) logit tensor per modality, read right after that
    /// modality's injection. Training-only signal; prediction ignores them.
    pub aux_logits: Vec<Tensor<T>>,
}

pub struct Predictions {
    /// Class probabilities per sample.
    pub probs: Vec<[f64; 2]>,
    /// Argmax labels; ties go to 0.
    pub labels: Vec<u8>,
}

#[derive(Clone)]
pub struct MixerModel<T: Scalar> {
    d: usize,
    h: usize,
    scale_full_dim: bool,
    channel_widths: Vec<usize>,
    encoder_layers: usize,
    specs: Vec<ModalitySpec>,
    query: Tensor<T>,
    embedders: Vec<Embedder<T>>,
    mixers: Vec<MixerBlock<T>>,
    aux_heads: Vec<DenseHead<T>>,
    final_head: DenseHead<T>,
}

impl<T: Scalar> MixerModel<T> {
    pub fn new(
        specs: Vec<ModalitySpec>,
        d: usize,
        h: usize,
        scale_full_dim: bool,
        channel_widths: &[usize],
        encoder_layers: usize,
        seed: u64,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::config("a model needs at least one modality"));
        }
        for (i, s) in specs.iter().enumerate() {
            // Names reach config files and checkpoints, so keep them token-shaped.
            if s.name.is_empty()
                || !s.name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
            {
                return Err(Error::config(format!(
                    "modality name '{}' must be non-empty and use only letters, digits, or '_'",
                    s.name
                )));
            }
            if !(0.0..=1.0).contains(&s.p_drop) {
                return Err(Error::config(format!(
                    "modality '{}' has p_drop {} outside [0,1]",
                    s.name, s.p_drop
                )));
            }
            if specs[..i].iter().any(|prev| prev.name == s.name) {
                return Err(Error::config(format!("duplicate modality name '{}'", s.name)));
            }
        }
        if d == 0 || h == 0 || d % h != 0 {
            return Err(Error::config(format!(
                "model dimension {} must be a positive multiple of head count {}",
                d, h
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query = Tensor::uniform_init(&[1, d], d, &mut rng);
        let mut embedders = Vec::with_capacity(specs.len());
        let mut mixers = Vec::with_capacity(specs.len());
        let mut aux_heads = Vec::with_capacity(specs.len());
        for spec in &specs {
            let embedder = match &spec.kind {
                ModalityKind::Categorical { vocab } => {
                    Embedder::Categorical(CategoricalEmbedder::new(*vocab, d, &mut rng)?)
                }
                ModalityKind::Ordinal => Embedder::Ordinal(OrdinalEmbedder::new(d, &mut rng)),
                ModalityKind::Image { dims } => Embedder::Image(ImageEncoder::new(
                    d,
                    h,
                    *dims,
                    channel_widths,
                    encoder_layers,
                    scale_full_dim,
                    &mut rng,
                )?),
            };
            embedders.push(embedder);
            mixers.push(MixerBlock::new(d, h, scale_full_dim, &mut rng)?);
            aux_heads.push(DenseHead::new(d, &mut rng));
        }
        let final_head = DenseHead::new(d, &mut rng);
        Ok(MixerModel {
            d,
            h,
            scale_full_dim,
            channel_widths: channel_widths.to_vec(),
            encoder_layers,
            specs,
            query,
            embedders,
            mixers,
            aux_heads,
            final_head,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn scale_full_dim(&self) -> bool {
        self.scale_full_dim
    }

    pub fn channel_widths(&self) -> &[usize] {
        &self.channel_widths
    }

    pub fn encoder_layers(&self) -> usize {
        self.encoder_layers
    }

    pub fn specs(&self) -> &[ModalitySpec] {
        &self.specs
    }

    fn spec_index(&self, name: &str) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::input(format!("unknown modality '{name}'")))
    }

    /// Install z-score statistics for an ordinal modality.
    pub fn set_ordinal_stats(&mut self, name: &str, mean: f64, std: f64) -> Result<()> {
        let i = self.spec_index(name)?;
        match &mut self.embedders[i] {
            Embedder::Ordinal(e) => e.set_stats(mean, std),
            _ => Err(Error::input(format!("modality '{name}' is not ordinal"))),
        }
    }

    pub fn ordinal_stats(&self, name: &str) -> Result<Option<(f64, f64)>> {
        let i = self.spec_index(name)?;
        match &self.embedders[i] {
            Embedder::Ordinal(e) => Ok(e.stats()),
            _ => Err(Error::input(format!("modality '{name}' is not ordinal"))),
        }
    }

    pub fn set_p_drop(&mut self, name: &str, p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(format!("p_drop {} outside [0,1]", p)));
        }
        let i = self.spec_index(name)?;
        self.specs[i].p_drop = p;
        Ok(())
    }

    fn embed_cell(&self, tape: &Tape<T>, m: usize, cell: &Cell) -> Result<Tensor<T>> {
        let spec = &self.specs[m];
        let value = cell.value.as_ref().ok_or_else(|| {
            Error::input(format!(
                "modality '{}' is marked available but carries no value",
                spec.name
            ))
        })?;
        match (&self.embedders[m], value) {
            (Embedder::Categorical(e), Value::Categorical(i)) => e.embed(tape, *i),
            (Embedder::Ordinal(e), Value::Ordinal(v)) => e.embed(tape, *v),
            (Embedder::Image(enc), Value::Volume(vol)) => {
                if let ModalityKind::Image { dims } = spec.kind {
                    if vol.dims() != dims {
                        return Err(Error::input(format!(
                            "modality '{}' expects volumes of {:?}, got {:?}",
                            spec.name,
                            dims,
                            vol.dims()
                        )));
                    }
                }
                enc.encode(tape, &vol.to_tensor())
            }
            _ => Err(Error::input(format!(
                "value type does not match modality '{}'",
                spec.name
            ))),
        }
    }

    /// Run the cascade over a batch. Every sample starts from the shared
    /// learned query; a modality is injected when it is available and (in
    /// training) the drop mask keeps it, and injected as a zero embedding
    /// otherwise.
    pub fn forward(&self, tape: &Tape<T>, batch: &ModalityBatch, mode: Mode) -> Result<ForwardOut<T>> {
        let b = batch.batch_size();
        if b == 0 {
            return Err(Error::input("empty batch"));
        }
        if let Mode::Train { keep } = mode {
            if keep.keep.len() != b || keep.keep.iter().any(|r| r.len() != self.specs.len()) {
                return Err(Error::contract(
                    "drop mask dimensions do not match the batch",
                ));
            }
        }
        let mut final_rows = Vec::with_capacity(b);
        let mut aux_rows: Vec<Vec<Tensor<T>>> = (0..self.specs.len()).map(|_| Vec::new()).collect();
        for (s, cells) in batch.cells.iter().enumerate() {
            if cells.len() != self.specs.len() {
                return Err(Error::input(format!(
                    "sample {} has {} modality cells, model declares {}",
                    s,
                    cells.len(),
                    self.specs.len()
                )));
            }
            let mut q = self.query.watch(tape)?;
            for (m, cell) in cells.iter().enumerate() {
                let kept = match mode {
                    Mode::Eval => cell.available,
                    Mode::Train { keep } => cell.available && keep.keep[s][m],
                };
                let e = if kept {
                    self.embed_cell(tape, m, cell)?
                } else {
                    Tensor::zeros(&[1, self.d])
                };
                q = self.mixers[m].forward(tape, &q, &e)?;
                aux_rows[m].push(self.aux_heads[m].forward(tape, &q)?);
            }
            final_rows.push(self.final_head.forward(tape, &q)?);
        }
        let final_refs: Vec<&Tensor<T>> = final_rows.iter().collect();
        let mut aux_logits = Vec::with_capacity(self.specs.len());
        for rows in &aux_rows {
            let refs: Vec<&Tensor<T>> = rows.iter().collect();
            aux_logits.push(concat_rows(&refs)?);
        }
        Ok(ForwardOut { final_logits: concat_rows(&final_refs)?, aux_logits })
    }

    /// Eval-mode class probabilities and labels. Auxiliary heads play no
    /// part here.
    pub fn predict(&self, batch: &ModalityBatch) -> Result<Predictions> {
        let tape = Tape::new();
        let out = self.forward(&tape, batch, Mode::Eval)?;
        let data = out.final_logits.data();
        let mut probs = Vec::with_capacity(batch.batch_size());
        let mut labels = Vec::with_capacity(batch.batch_size());
        for row in data.chunks_exact(2) {
            let p = softmax2(row[0].tof(), row[1].tof());
            labels.push(if p[1] > p[0] { 1 } else { 0 });
            probs.push(p);
        }
        Ok(Predictions { probs, labels })
    }

    /// Every learnable parameter, in a canonical order that is identical
    /// for `visit_params` and `visit_params_mut`.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f("query".to_string(), &self.query);
        for (i, spec) in self.specs.iter().enumerate() {
            self.embedders[i].visit(&format!("embed.{}", spec.name), f);
            self.mixers[i].visit(&format!("mixer.{}", spec.name), f);
            self.aux_heads[i].visit(&format!("aux.{}", spec.name), f);
        }
        self.final_head.visit("final", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f("query".to_string(), &mut self.query);
        let specs = self.specs.clone();
        for (i, spec) in specs.iter().enumerate() {
            self.embedders[i].visit_mut(&format!("embed.{}", spec.name), f);
            self.mixers[i].visit_mut(&format!("mixer.{}", spec.name), f);
            self.aux_heads[i].visit_mut(&format!("aux.{}", spec.name), f);
        }
        self.final_head.visit_mut("final", f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    #[cfg(test)]
    pub(crate) fn mixer(&self, m: usize) -> &MixerBlock<T> {
        &self.mixers[m]
    }

    #[cfg(test)]
    pub(crate) fn head(&self, m: Option<usize>) -> &DenseHead<T> {
        match m {
            Some(i) => &self.aux_heads[i],
            None => &self.final_head,
        }
    }
}

/// Numerically stable two-class softmax in f64.
pub fn softmax2(a: f64, b: f64) -> [f64; 2] {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let z = ea + eb;
    [ea / z, eb / z]
}
