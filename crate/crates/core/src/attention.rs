//! Scaled dot-product attention, multi-head attention, and the mixing block
//! that injects one modality embedding into the running query.
//!
//! All projections are bias-free on purpose: a zero embedding then projects
//! to zero keys and values, the attention output is exactly zero, and the
//! residual makes the whole cross-attention sublayer an exact identity.
//! That is what lets "modality missing" be represented by a zero embedding
//! with no approximation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{concat_cols, Tape, Tensor};
use crate::LN_EPS;

/// Softmax over keys of Q·Kᵀ/√scale_dim, times V. Q is (n_q x d_k),
/// K and V are (n_k x d_k)/(n_k x d_v). Every output row is a convex
/// combination of V's rows.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale_dim: usize,
) -> Result<Tensor<T>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::shape(format!(
            "attention inputs must be 2-d, got {:?}/{:?}/{:?}",
            qs, ks, vs
        )));
    }
    if ks[0] == 0 {
        return Err(Error::contract("attention with no keys"));
    }
    if qs[1] != ks[1] {
        return Err(Error::shape(format!(
            "query width {} does not match key width {}",
            qs[1], ks[1]
        )));
    }
    if ks[0] != vs[0] {
        return Err(Error::shape(format!(
            "{} keys with {} value rows",
            ks[0], vs[0]
        )));
    }
    if scale_dim == 0 {
        return Err(Error::input("scale_dim must be positive"));
    }
    let kt = k.permute(&[1, 0])?;
    let scale = T::fromf(1.0 / (scale_dim as f64).sqrt());
    let scores = q.matmul(&kt)?.mul_scalar(scale)?;
    let weights = scores.softmax_lastaxis()?;
    weights.matmul(v)
}

// ── Multi-head attention ────────────────────────────────────────────────────

/// Bias-free multi-head attention: per-head (d x d_h) query/key/value
/// projections, concatenated heads, and a (d x d) output projection.
#[derive(Clone)]
pub struct MultiHeadAttention<T: Scalar> {
    d: usize,
    h: usize,
    d_h: usize,
    scale_dim: usize,
    wq: Vec<Tensor<T>>,
    wk: Vec<Tensor<T>>,
    wv: Vec<Tensor<T>>,
    wo: Tensor<T>,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn head_dim(&self) -> usize {
        self.d_h
    }

    /// `scale_full_dim` switches the attention temperature from the per-head
    /// width d/h to the full model width d.
    pub fn new(d: usize, h: usize, scale_full_dim: bool, rng: &mut impl Rng) -> Result<Self> {
        if d == 0 || h == 0 {
            return Err(Error::config(format!(
                "model dimension {} and head count {} must be positive",
                d, h
            )));
        }
        if d % h != 0 {
            return Err(Error::config(format!(
                "model dimension {} is not divisible by head count {}",
                d, h
            )));
        }
        let d_h = d / h;
        let mut wq = Vec::with_capacity(h);
        let mut wk = Vec::with_capacity(h);
        let mut wv = Vec::with_capacity(h);
        for _ in 0..h {
            wq.push(Tensor::uniform_init(&[d, d_h], d, rng));
            wk.push(Tensor::uniform_init(&[d, d_h], d, rng));
            wv.push(Tensor::uniform_init(&[d, d_h], d, rng));
        }
        let wo = Tensor::uniform_init(&[d, d], d, rng);
        Ok(MultiHeadAttention {
            d,
            h,
            d_h,
            scale_dim: if scale_full_dim { d } else { d_h },
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn heads(&self) -> usize {
        self.h
    }

    /// Attend from `q` to `k_src`/`v_src` (all with d columns).
    pub fn forward(
        &self,
        tape: &Tape<T>,
        q: &Tensor<T>,
        k_src: &Tensor<T>,
        v_src: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        for (t, what) in [(q, "query"), (k_src, "key source"), (v_src, "value source")] {
            if t.shape().len() != 2 || t.shape()[1] != self.d {
                return Err(Error::shape(format!(
                    "{} shape {:?} does not match model width {}",
                    what,
                    t.shape(),
                    self.d
                )));
            }
        }
        let mut heads = Vec::with_capacity(self.h);
        for i in 0..self.h {
            let qh = q.matmul(&self.wq[i].watch(tape)?)?;
            let kh = k_src.matmul(&self.wk[i].watch(tape)?)?;
            let vh = v_src.matmul(&self.wv[i].watch(tape)?)?;
            heads.push(scaled_dot_attention(&qh, &kh, &vh, self.scale_dim)?);
        }
        let refs: Vec<&Tensor<T>> = heads.iter().collect();
        let cat = concat_cols(&refs)?;
        cat.matmul(&self.wo.watch(tape)?)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for i in 0..self.h {
            f(format!("{prefix}.wq{i}"), &self.wq[i]);
            f(format!("{prefix}.wk{i}"), &self.wk[i]);
            f(format!("{prefix}.wv{i}"), &self.wv[i]);
        }
        f(format!("{prefix}.wo"), &self.wo);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for i in 0..self.h {
            f(format!("{prefix}.wq{i}"), &mut self.wq[i]);
            f(format!("{prefix}.wk{i}"), &mut self.wk[i]);
            f(format!("{prefix}.wv{i}"), &mut self.wv[i]);
        }
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

// ── Mixing block ────────────────────────────────────────────────────────────

/// One stage of the modality cascade. The query self-attends (a fixed linear
/// map for a single-token query, but it keeps the block uniform), then
/// cross-attends into the modality embedding; both sublayers are pre-normed
/// and residual. Input and output shapes are identical so blocks chain.
#[derive(Clone)]
pub struct MixerBlock<T: Scalar> {
    ln1_gamma: Tensor<T>,
    ln1_beta: Tensor<T>,
    ln2_gamma: Tensor<T>,
    ln2_beta: Tensor<T>,
    self_attn: MultiHeadAttention<T>,
    cross_attn: MultiHeadAttention<T>,
}

impl<T: Scalar> MixerBlock<T> {
    pub fn new(d: usize, h: usize, scale_full_dim: bool, rng: &mut impl Rng) -> Result<Self> {
        Ok(MixerBlock {
            ln1_gamma: Tensor::full(&[d], T::one()),
            ln1_beta: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::full(&[d], T::one()),
            ln2_beta: Tensor::zeros(&[d]),
            self_attn: MultiHeadAttention::new(d, h, scale_full_dim, rng)?,
            cross_attn: MultiHeadAttention::new(d, h, scale_full_dim, rng)?,
        })
    }

    /// First sublayer: q + self_attn(LN1(q)) with LN1(q) as query, key, and
    /// value source.
    pub fn after_self_attention(&self, tape: &Tape<T>, q: &Tensor<T>) -> Result<Tensor<T>> {
        let qn = q.layer_norm(
            &self.ln1_gamma.watch(tape)?,
            &self.ln1_beta.watch(tape)?,
            T::fromf(LN_EPS),
        )?;
        let sa = self.self_attn.forward(tape, &qn, &qn, &qn)?;
        q.add(&sa)
    }

    /// Full block: the self-attention sublayer, then cross-attention from
    /// the normalized query into the embedding `e`. With e = 0 the second
    /// sublayer contributes exactly zero.
    pub fn forward(&self, tape: &Tape<T>, q: &Tensor<T>, e: &Tensor<T>) -> Result<Tensor<T>> {
        let x1 = self.after_self_attention(tape, q)?;
        let qn = x1.layer_norm(
            &self.ln2_gamma.watch(tape)?,
            &self.ln2_beta.watch(tape)?,
            T::fromf(LN_EPS),
        )?;
        let mixed = self.cross_attn.forward(tape, &qn, e, e)?;
        x1.add(&mixed)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.ln1_gamma"), &self.ln1_gamma);
        f(format!("{prefix}.ln1_beta"), &self.ln1_beta);
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        f(format!("{prefix}.ln2_gamma"), &self.ln2_gamma);
        f(format!("{prefix}.ln2_beta"), &self.ln2_beta);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.ln1_gamma"), &mut self.ln1_gamma);
        f(format!("{prefix}.ln1_beta"), &mut self.ln1_beta);
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        f(format!("{prefix}.ln2_gamma"), &mut self.ln2_gamma);
        f(format!("{prefix}.ln2_beta"), &mut self.ln2_beta);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), f);
    }
}
