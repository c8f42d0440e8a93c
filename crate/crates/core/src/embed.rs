//! Modality embedders: lookup tables for categorical codes, affine maps for
//! ordinal measurements, and a small convolutional/transformer encoder for
//! 3-d image volumes. Each produces a (1 x d) embedding row per sample.

use rand::Rng;

use crate::attention::MultiHeadAttention;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{concat_rows, Tape, Tensor};
use crate::{LEAKY_SLOPE, LN_EPS};

// ── Categorical ─────────────────────────────────────────────────────────────

/// Learned (vocab x d) lookup table.
#[derive(Clone)]
pub struct CategoricalEmbedder<T: Scalar> {
    table: Tensor<T>,
    vocab: usize,
}

impl<T: Scalar> CategoricalEmbedder<T> {
    pub fn new(vocab: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::config("categorical vocabulary must be non-empty"));
        }
        Ok(CategoricalEmbedder { table: Tensor::uniform_init(&[vocab, d], d, rng), vocab })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Row `index` of the table; gradient reaches that row only.
    pub fn embed(&self, tape: &Tape<T>, index: usize) -> Result<Tensor<T>> {
        self.table.watch(tape)?.lookup_row(index)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.table"), &self.table);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.table"), &mut self.table);
    }
}

// ── Ordinal ─────────────────────────────────────────────────────────────────

/// Affine map of a z-scored scalar measurement into d dimensions. The
/// normalization statistics come from the training split and live with the
/// embedder so they serialize alongside the weights.
#[derive(Clone)]
pub struct OrdinalEmbedder<T: Scalar> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    stats: Option<(f64, f64)>,
}

impl<T: Scalar> OrdinalEmbedder<T> {
    pub fn new(d: usize, rng: &mut impl Rng) -> Self {
        OrdinalEmbedder {
            weight: Tensor::uniform_init(&[1, d], 1, rng),
            bias: Tensor::zeros(&[1, d]),
            stats: None,
        }
    }

    pub fn stats(&self) -> Option<(f64, f64)> {
        self.stats
    }

    /// Install normalization statistics. The std must be positive and
    /// finite; degenerate features must be rejected upstream with a clearer
    /// message than this one.
    pub fn set_stats(&mut self, mean: f64, std: f64) -> Result<()> {
        if !mean.is_finite() || !std.is_finite() || std <= 0.0 {
            return Err(Error::data(format!(
                "ordinal normalization needs finite mean and positive std, got ({mean}, {std})"
            )));
        }
        self.stats = Some((mean, std));
        Ok(())
    }

    /// weight * (value - mean)/std + bias. A value equal to the mean maps
    /// to the bias vector exactly.
    pub fn embed(&self, tape: &Tape<T>, value: f64) -> Result<Tensor<T>> {
        let (mean, std) = self
            .stats
            .ok_or_else(|| Error::state("ordinal embedder used before fitting statistics"))?;
        let z = T::fromf((value - mean) / std);
        let w = self.weight.watch(tape)?;
        let b = self.bias.watch(tape)?;
        w.mul_scalar(z)?.add(&b)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

// ── Image encoder ───────────────────────────────────────────────────────────

/// Conv layer plus channel-wise layer normalization (normalizing across
/// channels per voxel, which stays meaningful at batch size 1).
#[derive(Clone)]
struct ConvUnit<T: Scalar> {
    kernel: Tensor<T>,
    bias: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
}

impl<T: Scalar> ConvUnit<T> {
    fn new(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        ConvUnit {
            kernel: Tensor::uniform_init(&[cout, cin, k, k, k], cin * k * k * k, rng),
            bias: Tensor::zeros(&[cout]),
            gamma: Tensor::full(&[cout], T::one()),
            beta: Tensor::zeros(&[cout]),
        }
    }

    /// conv -> channel norm. The activation is the caller's business since
    /// the residual block omits it after its second conv.
    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
        let y = x.conv3d(&self.kernel.watch(tape)?, &self.bias.watch(tape)?, stride)?;
        channel_layer_norm(tape, &y, &self.gamma, &self.beta)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.kernel"), &self.kernel);
        f(format!("{prefix}.bias"), &self.bias);
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.kernel"), &mut self.kernel);
        f(format!("{prefix}.bias"), &mut self.bias);
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Normalize a (1 x C x D x H x W) activation across its channel axis at
/// every voxel.
fn channel_layer_norm<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    let voxels = s[0] * s[2] * s[3] * s[4];
    let moved = x.permute(&[0, 2, 3, 4, 1])?;
    let rows = moved.reshape(&[voxels, s[1]])?;
    let normed = rows.layer_norm(&gamma.watch(tape)?, &beta.watch(tape)?, T::fromf(LN_EPS))?;
    normed
        .reshape(&[s[0], s[2], s[3], s[4], s[1]])?
        .permute(&[0, 4, 1, 2, 3])
}

/// Down-sampling residual block: stride-2 conv -> norm -> activation ->
/// stride-1 conv -> norm, added to a stride-2 1x1x1 projection shortcut.
#[derive(Clone)]
struct ResidualBlock<T: Scalar> {
    conv1: ConvUnit<T>,
    conv2: ConvUnit<T>,
    shortcut: ConvUnit<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        ResidualBlock {
            conv1: ConvUnit::new(cin, cout, 3, rng),
            conv2: ConvUnit::new(cout, cout, 3, rng),
            shortcut: ConvUnit::new(cin, cout, 1, rng),
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut main = self.conv1.forward(tape, x, 2)?;
        main = main.leaky_relu(T::fromf(LEAKY_SLOPE))?;
        main = self.conv2.forward(tape, &main, 1)?;
        let short = x.conv3d(
            &self.shortcut.kernel.watch(tape)?,
            &self.shortcut.bias.watch(tape)?,
            2,
        )?;
        main.add(&short)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        f(format!("{prefix}.shortcut.kernel"), &self.shortcut.kernel);
        f(format!("{prefix}.shortcut.bias"), &self.shortcut.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        f(format!("{prefix}.shortcut.kernel"), &mut self.shortcut.kernel);
        f(format!("{prefix}.shortcut.bias"), &mut self.shortcut.bias);
    }
}

/// Pre-normed transformer encoder layer over patch tokens: self-attention
/// and a 2x-wide feed-forward, both residual.
#[derive(Clone)]
struct EncoderLayer<T: Scalar> {
    ln1_gamma: Tensor<T>,
    ln1_beta: Tensor<T>,
    attn: MultiHeadAttention<T>,
    ln2_gamma: Tensor<T>,
    ln2_beta: Tensor<T>,
    ff_w1: Tensor<T>,
    ff_b1: Tensor<T>,
    ff_w2: Tensor<T>,
    ff_b2: Tensor<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    fn new(width: usize, heads: usize, scale_full_dim: bool, rng: &mut impl Rng) -> Result<Self> {
        Ok(EncoderLayer {
            ln1_gamma: Tensor::full(&[width], T::one()),
            ln1_beta: Tensor::zeros(&[width]),
            attn: MultiHeadAttention::new(width, heads, scale_full_dim, rng)?,
            ln2_gamma: Tensor::full(&[width], T::one()),
            ln2_beta: Tensor::zeros(&[width]),
            ff_w1: Tensor::uniform_init(&[width, 2 * width], width, rng),
            ff_b1: Tensor::zeros(&[2 * width]),
            ff_w2: Tensor::uniform_init(&[2 * width, width], 2 * width, rng),
            ff_b2: Tensor::zeros(&[width]),
        })
    }

    fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let eps = T::fromf(LN_EPS);
        let xn = x.layer_norm(&self.ln1_gamma.watch(tape)?, &self.ln1_beta.watch(tape)?, eps)?;
        let x1 = x.add(&self.attn.forward(tape, &xn, &xn, &xn)?)?;
        let x1n = x1.layer_norm(&self.ln2_gamma.watch(tape)?, &self.ln2_beta.watch(tape)?, eps)?;
        let h = x1n
            .matmul(&self.ff_w1.watch(tape)?)?
            .add_bias(&self.ff_b1.watch(tape)?)?
            .relu()?
            .matmul(&self.ff_w2.watch(tape)?)?
            .add_bias(&self.ff_b2.watch(tape)?)?;
        x1.add(&h)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.ln1_gamma"), &self.ln1_gamma);
        f(format!("{prefix}.ln1_beta"), &self.ln1_beta);
        self.attn.visit(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.ln2_gamma"), &self.ln2_gamma);
        f(format!("{prefix}.ln2_beta"), &self.ln2_beta);
        f(format!("{prefix}.ff_w1"), &self.ff_w1);
        f(format!("{prefix}.ff_b1"), &self.ff_b1);
        f(format!("{prefix}.ff_w2"), &self.ff_w2);
        f(format!("{prefix}.ff_b2"), &self.ff_b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.ln1_gamma"), &mut self.ln1_gamma);
        f(format!("{prefix}.ln1_beta"), &mut self.ln1_beta);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.ln2_gamma"), &mut self.ln2_gamma);
        f(format!("{prefix}.ln2_beta"), &mut self.ln2_beta);
        f(format!("{prefix}.ff_w1"), &mut self.ff_w1);
        f(format!("{prefix}.ff_b1"), &mut self.ff_b1);
        f(format!("{prefix}.ff_w2"), &mut self.ff_w2);
        f(format!("{prefix}.ff_b2"), &mut self.ff_b2);
    }
}

/// 3-d volume encoder: a two-layer stride-1 stem, four stride-2 residual
/// blocks (16x spatial reduction), learned positional embeddings over the
/// surviving patch grid, transformer encoder layers over the patch tokens,
/// mean pooling, and a linear projection to d.
///
/// Positional embeddings are learned per flattened patch index, so one
/// trained encoder accepts exactly one input volume shape.
#[derive(Clone)]
pub struct ImageEncoder<T: Scalar> {
    dims: (usize, usize, usize),
    widths: Vec<usize>,
    patches: usize,
    stem: Vec<ConvUnit<T>>,
    blocks: Vec<ResidualBlock<T>>,
    pos_embed: Tensor<T>,
    layers: Vec<EncoderLayer<T>>,
    proj_w: Tensor<T>,
    proj_b: Tensor<T>,
}

fn half(n: usize) -> usize {
    // Output extent of a stride-2 conv with kernel 3 (or 1x1x1 shortcut)
    // and symmetric padding: ceil(n/2).
    (n - 1) / 2 + 1
}

impl<T: Scalar> ImageEncoder<T> {
    pub fn new(
        d: usize,
        heads: usize,
        dims: (usize, usize, usize),
        widths: &[usize],
        encoder_layers: usize,
        scale_full_dim: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        for n in [dims.0, dims.1, dims.2] {
            if n < 16 {
                return Err(Error::shape(format!(
                    "volume extent {} is too small for the 16x spatial reduction",
                    n
                )));
            }
        }
        if widths.len() != 4 || widths.iter().any(|&w| w == 0) {
            return Err(Error::config(format!(
                "image encoder needs 4 positive channel widths, got {:?}",
                widths
            )));
        }
        let token_width = widths[3];
        if token_width % heads != 0 {
            return Err(Error::config(format!(
                "final channel width {} is not divisible by {} attention heads",
                token_width, heads
            )));
        }
        let stem = vec![ConvUnit::new(1, widths[0], 3, rng), ConvUnit::new(widths[0], widths[0], 3, rng)];
        let mut blocks = Vec::with_capacity(4);
        let mut cin = widths[0];
        for &w in widths {
            blocks.push(ResidualBlock::new(cin, w, rng));
            cin = w;
        }
        let mut grid = dims;
        for _ in 0..4 {
            grid = (half(grid.0), half(grid.1), half(grid.2));
        }
        let patches = grid.0 * grid.1 * grid.2;
        let pos_embed = Tensor::uniform_init(&[patches, token_width], token_width, rng);
        let mut layers = Vec::with_capacity(encoder_layers);
        for _ in 0..encoder_layers {
            layers.push(EncoderLayer::new(token_width, heads, scale_full_dim, rng)?);
        }
        Ok(ImageEncoder {
            dims,
            widths: widths.to_vec(),
            patches,
            stem,
            blocks,
            pos_embed,
            layers,
            proj_w: Tensor::uniform_init(&[token_width, d], token_width, rng),
            proj_b: Tensor::zeros(&[d]),
        })
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn encoder_layers(&self) -> usize {
        self.layers.len()
    }

    /// Encode a (b x 1 x D x H x W) batch to (b x d). Volumes are inputs,
    /// not parameters, so the batch must be untracked.
    pub fn encode(&self, tape: &Tape<T>, volumes: &Tensor<T>) -> Result<Tensor<T>> {
        if volumes.is_tracked() {
            return Err(Error::contract("image batches must be untracked input tensors"));
        }
        let s = volumes.shape();
        if s.len() != 5 || s[1] != 1 || (s[2], s[3], s[4]) != self.dims {
            return Err(Error::shape(format!(
                "expected volume batch (b,1,{},{},{}), got {:?}",
                self.dims.0, self.dims.1, self.dims.2, s
            )));
        }
        let b = s[0];
        if b == 0 {
            return Err(Error::input("empty volume batch"));
        }
        let vox = self.dims.0 * self.dims.1 * self.dims.2;
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let sample = Tensor::from_vec(
                &[1, 1, self.dims.0, self.dims.1, self.dims.2],
                volumes.data()[i * vox..(i + 1) * vox].to_vec(),
            )?;
            rows.push(self.encode_one(tape, &sample)?);
        }
        let refs: Vec<&Tensor<T>> = rows.iter().collect();
        concat_rows(&refs)
    }

    fn encode_one(&self, tape: &Tape<T>, sample: &Tensor<T>) -> Result<Tensor<T>> {
        let slope = T::fromf(LEAKY_SLOPE);
        let mut x = sample.clone();
        for unit in &self.stem {
            x = unit.forward(tape, &x, 1)?.leaky_relu(slope)?;
        }
        for block in &self.blocks {
            x = block.forward(tape, &x)?;
        }
        // (1, C, d, h, w) -> (patches, C) tokens in depth-major voxel order.
        let c = *self.widths.last().unwrap();
        let tokens = x.permute(&[0, 2, 3, 4, 1])?.reshape(&[self.patches, c])?;
        let mut t = tokens.add(&self.pos_embed.watch(tape)?)?;
        for layer in &self.layers {
            t = layer.forward(tape, &t)?;
        }
        let pooled = t.mean_rows()?;
        pooled
            .matmul(&self.proj_w.watch(tape)?)?
            .add_bias(&self.proj_b.watch(tape)?)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, unit) in self.stem.iter().enumerate() {
            unit.visit(&format!("{prefix}.stem{i}"), f);
        }
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("{prefix}.block{i}"), f);
        }
        f(format!("{prefix}.pos_embed"), &self.pos_embed);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.enc{i}"), f);
        }
        f(format!("{prefix}.proj_w"), &self.proj_w);
        f(format!("{prefix}.proj_b"), &self.proj_b);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, unit) in self.stem.iter_mut().enumerate() {
            unit.visit_mut(&format!("{prefix}.stem{i}"), f);
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("{prefix}.block{i}"), f);
        }
        f(format!("{prefix}.pos_embed"), &mut self.pos_embed);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.enc{i}"), f);
        }
        f(format!("{prefix}.proj_w"), &mut self.proj_w);
        f(format!("{prefix}.proj_b"), &mut self.proj_b);
    }
}

// ── Dispatch over the three kinds ───────────────────────────────────────────

#[derive(Clone)]
pub enum Embedder<T: Scalar> {
    Categorical(CategoricalEmbedder<T>),
    Ordinal(OrdinalEmbedder<T>),
    Image(ImageEncoder<T>),
}

impl<T: Scalar> Embedder<T> {
    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        match self {
            Embedder::Categorical(e) => e.visit(prefix, f),
            Embedder::Ordinal(e) => e.visit(prefix, f),
            Embedder::Image(e) => e.visit(prefix, f),
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            Embedder::Categorical(e) => e.visit_mut(prefix, f),
            Embedder::Ordinal(e) => e.visit_mut(prefix, f),
            Embedder::Image(e) => e.visit_mut(prefix, f),
        }
    }
}
