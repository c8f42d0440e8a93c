//! Tensors with taped reverse-mode differentiation.
//!
//! A `Tape` records every differentiable operation as a node: the operation
//! kind, the ids of tracked inputs, and whatever forward values the backward
//! pass needs (saved cheaply as `Rc` clones of the forward buffers). Node ids
//! are assigned in execution order, so the node list is already topologically
//! sorted and the backward pass is a single reverse walk. Gradients for a
//! value used in several places accumulate additively.
//!
//! Tensors are flat row-major buffers plus a shape. A tensor is either
//! untracked (plain data: inputs, constants) or tracked (carries a tape id).
//! Operations whose inputs are all untracked produce untracked outputs and
//! record nothing.

pub(crate) mod kernels;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use kernels::ConvDims;

pub type NodeId = usize;

/// Tracked input slot: `None` means the input was a plain constant and no
/// gradient flows into it.
type In = Option<NodeId>;

// ── Operation records ───────────────────────────────────────────────────────

enum Op<T: Scalar> {
    Leaf,
    Add {
        a: In,
        b: In,
    },
    MulScalar {
        x: In,
        c: T,
    },
    AddBias {
        x: In,
        bias: In,
        rows: usize,
        cols: usize,
    },
    LeakyRelu {
        x: In,
        slope: T,
        input: Rc<Vec<T>>,
    },
    Matmul {
        a: In,
        b: In,
        m: usize,
        k: usize,
        n: usize,
        a_data: Rc<Vec<T>>,
        b_data: Rc<Vec<T>>,
    },
    Softmax {
        x: In,
        rows: usize,
        cols: usize,
        out: Rc<Vec<T>>,
    },
    LayerNorm {
        x: In,
        gamma: In,
        beta: In,
        rows: usize,
        cols: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        gamma_data: Rc<Vec<T>>,
    },
    CrossEntropy {
        logits: In,
        rows: usize,
        cols: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Conv3d {
        x: In,
        kernel: In,
        bias: In,
        dims: ConvDims,
        x_data: Rc<Vec<T>>,
        kernel_data: Rc<Vec<T>>,
    },
    Permute {
        x: In,
        axes: Vec<usize>,
        in_shape: Vec<usize>,
    },
    Reshape {
        x: In,
    },
    ConcatRows {
        parts: Vec<(In, usize)>,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<(In, usize)>,
        rows: usize,
    },
    MeanRows {
        x: In,
        rows: usize,
        cols: usize,
    },
    LookupRow {
        table: In,
        index: usize,
        cols: usize,
        vocab: usize,
    },
}

// ── Tape ────────────────────────────────────────────────────────────────────

struct TapeInner<T: Scalar> {
    ops: Vec<Op<T>>,
    lens: Vec<usize>,
    grads: Vec<Option<Vec<T>>>,
    // Leaf node per watched buffer, keyed by buffer address. Watching the
    // same parameter twice must reuse one leaf so its gradients accumulate.
    leaves: HashMap<usize, NodeId>,
    done: bool,
}

pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                ops: Vec::new(),
                lens: Vec::new(),
                grads: Vec::new(),
                leaves: HashMap::new(),
                done: false,
            })),
        }
    }

    /// Number of recorded nodes. Every recorded op appends exactly one.
    pub fn len(&self) -> usize {
        self.inner.borrow().ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<T>, len: usize) -> Result<NodeId> {
        let mut inner = self.inner.borrow_mut();
        if inner.done {
            return Err(Error::contract("tape already consumed by backward"));
        }
        let id = inner.ops.len();
        inner.ops.push(op);
        inner.lens.push(len);
        Ok(id)
    }

    /// Gradient of the scalar last passed to `backward` with respect to `t`,
    /// where `t` is either a tensor tracked on this tape or the original
    /// buffer that was watched. `None` before backward has run. A tracked
    /// tensor the loss does not depend on reports a zero gradient.
    pub fn grad_of(&self, t: &Tensor<T>) -> Option<Vec<T>> {
        let inner = self.inner.borrow();
        if !inner.done {
            return None;
        }
        let id = match &t.node {
            Some(tr) => {
                if !Rc::ptr_eq(&tr.tape.inner, &self.inner) {
                    return None;
                }
                tr.id
            }
            None => *inner.leaves.get(&buf_key(&t.data))?,
        };
        Some(match &inner.grads[id] {
            Some(g) => g.clone(),
            None => vec![T::zero(); inner.lens[id]],
        })
    }
}

fn buf_key<T>(data: &Rc<Vec<T>>) -> usize {
    Rc::as_ptr(data) as usize
}

// ── Tensor ──────────────────────────────────────────────────────────────────

struct Tracked<T: Scalar> {
    tape: Tape<T>,
    id: NodeId,
}

impl<T: Scalar> Clone for Tracked<T> {
    fn clone(&self) -> Self {
        Tracked { tape: self.tape.clone(), id: self.id }
    }
}

pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    node: Option<Tracked<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: self.node.clone(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Rc::new(data), node: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Rc::new(vec![T::zero(); numel]), node: None }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: Rc::new(vec![v]), node: None }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Rc::new(vec![v; numel]), node: None }
    }

    /// Seeded uniform init over ±sqrt(1/fan_in). Draws happen in f64 so the
    /// random stream is identical no matter the scalar type.
    pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl rand::Rng) -> Self {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::fromf((rng.gen::<f64>() * 2.0 - 1.0) * bound))
            .collect();
        Tensor { shape: shape.to_vec(), data: Rc::new(data), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// First element; the usual accessor for scalar results.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Replace the underlying buffer in place (shape must be preserved).
    /// Used by the optimizer; the tensor must be untracked.
    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        if self.node.is_some() {
            return Err(Error::contract("cannot overwrite a tracked tensor"));
        }
        if data.len() != self.data.len() {
            return Err(Error::shape(format!(
                "buffer length {} does not match tensor of {} elements",
                data.len(),
                self.data.len()
            )));
        }
        *Rc::make_mut(&mut self.data) = data;
        Ok(())
    }

    /// Mutable view of the buffer for in-place parameter updates.
    pub fn data_mut(&mut self) -> Result<&mut [T]> {
        if self.node.is_some() {
            return Err(Error::contract("cannot mutate a tracked tensor"));
        }
        Ok(Rc::make_mut(&mut self.data).as_mut_slice())
    }

    /// Address of the underlying buffer; two parameters are the same
    /// parameter exactly when their buffers are the same allocation.
    pub fn buffer_id(&self) -> usize {
        buf_key(&self.data)
    }

    /// Register this buffer as a differentiable leaf on `tape`. Watching the
    /// same buffer again returns the same leaf.
    pub fn watch(&self, tape: &Tape<T>) -> Result<Tensor<T>> {
        if self.node.is_some() {
            return Err(Error::contract("tensor is already tracked on a tape"));
        }
        let key = buf_key(&self.data);
        let existing = tape.inner.borrow().leaves.get(&key).copied();
        let id = match existing {
            Some(id) => id,
            None => {
                let id = tape.push(Op::Leaf, self.data.len())?;
                tape.inner.borrow_mut().leaves.insert(key, id);
                id
            }
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: Some(Tracked { tape: tape.clone(), id }),
        })
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        let tr = self.node.as_ref()?;
        tr.tape.grad_of(self)
    }

    fn id(&self) -> In {
        self.node.as_ref().map(|t| t.id)
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "{} must be 2-d, got shape {:?}",
                what, self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    // ── Recorded operations ─────────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != rhs.shape {
            return Err(Error::shape(format!(
                "add requires equal shapes, got {:?} and {:?}",
                self.shape, rhs.shape
            )));
        }
        let tape = common_tape(&[self, rhs])?;
        let data: Vec<T> = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| *a + *b).collect();
        record(tape, self.shape.clone(), data, |_| Op::Add { a: self.id(), b: rhs.id() })
    }

    pub fn mul_scalar(&self, c: T) -> Result<Tensor<T>> {
        let tape = common_tape(&[self])?;
        let data: Vec<T> = self.data.iter().map(|v| *v * c).collect();
        record(tape, self.shape.clone(), data, |_| Op::MulScalar { x: self.id(), c })
    }

    /// Broadcast-add a length-`cols` bias vector to every row of a 2-d tensor.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("add_bias input")?;
        if bias.shape != [cols] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match row width {}",
                bias.shape, cols
            )));
        }
        let tape = common_tape(&[self, bias])?;
        let mut data = self.to_vec();
        for r in 0..rows {
            for j in 0..cols {
                data[r * cols + j] += bias.data[j];
            }
        }
        record(tape, self.shape.clone(), data, |_| Op::AddBias {
            x: self.id(),
            bias: bias.id(),
            rows,
            cols,
        })
    }

    pub fn leaky_relu(&self, slope: T) -> Result<Tensor<T>> {
        let tape = common_tape(&[self])?;
        let data: Vec<T> = self
            .data
            .iter()
            .map(|v| if *v > T::zero() { *v } else { slope * *v })
            .collect();
        record(tape, self.shape.clone(), data, |_| Op::LeakyRelu {
            x: self.id(),
            slope,
            input: Rc::clone(&self.data),
        })
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        self.leaky_relu(T::zero())
    }

    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2("matmul lhs")?;
        let (k2, n) = rhs.dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let tape = common_tape(&[self, rhs])?;
        let data = kernels::mm(&self.data, &rhs.data, m, k, n);
        record(tape, vec![m, n], data, |_| Op::Matmul {
            a: self.id(),
            b: rhs.id(),
            m,
            k,
            n,
            a_data: Rc::clone(&self.data),
            b_data: Rc::clone(&rhs.data),
        })
    }

    /// Softmax over the trailing axis.
    pub fn softmax_lastaxis(&self) -> Result<Tensor<T>> {
        if self.shape.is_empty() {
            return Err(Error::shape("softmax requires at least one axis".to_string()));
        }
        let cols = *self.shape.last().unwrap();
        if cols == 0 {
            return Err(Error::shape("softmax over an empty axis".to_string()));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("softmax input contains a non-finite value"));
        }
        let rows = self.data.len() / cols;
        let tape = common_tape(&[self])?;
        let data = kernels::softmax_rows(&self.data, rows, cols);
        let out = Rc::new(data);
        let shape = self.shape.clone();
        record_rc(tape, shape, Rc::clone(&out), |_| Op::Softmax {
            x: self.id(),
            rows,
            cols,
            out,
        })
    }

    /// Row-wise layer normalization of a 2-d tensor with per-column affine
    /// parameters.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("layer_norm input")?;
        if cols == 0 {
            return Err(Error::shape("layer_norm over an empty axis".to_string()));
        }
        if gamma.shape != [cols] || beta.shape != [cols] {
            return Err(Error::shape(format!(
                "layer_norm affine shapes {:?}/{:?} do not match width {}",
                gamma.shape, beta.shape, cols
            )));
        }
        let tape = common_tape(&[self, gamma, beta])?;
        let (y, xhat, inv_std) =
            kernels::layer_norm_rows(&self.data, &gamma.data, &beta.data, eps, rows, cols);
        record(tape, self.shape.clone(), y, |_| Op::LayerNorm {
            x: self.id(),
            gamma: gamma.id(),
            beta: beta.id(),
            rows,
            cols,
            xhat,
            inv_std,
            gamma_data: Rc::clone(&gamma.data),
        })
    }

    /// Mean over rows of per-class negative log likelihood under softmax.
    /// Logits are (batch x classes); labels index classes.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("cross_entropy logits")?;
        if cols < 2 {
            return Err(Error::shape(format!(
                "cross_entropy needs at least 2 classes, got {}",
                cols
            )));
        }
        if labels.len() != rows {
            return Err(Error::input(format!(
                "{} labels for {} logit rows",
                labels.len(),
                rows
            )));
        }
        if rows == 0 {
            return Err(Error::input("cross_entropy over an empty batch".to_string()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::input(format!(
                "label {} out of range for {} classes",
                bad, cols
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("cross_entropy logits contain a non-finite value"));
        }
        let tape = common_tape(&[self])?;
        let probs = kernels::softmax_rows(&self.data, rows, cols);
        let mut loss = T::zero();
        for (r, &lbl) in labels.iter().enumerate() {
            let xrow = &self.data[r * cols..(r + 1) * cols];
            let mut mx = xrow[0];
            for v in xrow {
                if *v > mx {
                    mx = *v;
                }
            }
            let mut sum = T::zero();
            for v in xrow {
                sum += (*v - mx).exp();
            }
            loss += mx + sum.ln() - xrow[lbl];
        }
        loss = loss / T::fromf(rows as f64);
        record(tape, vec![1], vec![loss], |_| Op::CrossEntropy {
            logits: self.id(),
            rows,
            cols,
            labels: labels.to_vec(),
            probs,
        })
    }

    /// 3-d convolution over (batch, channels, depth, height, width) input
    /// with a cubic odd-sized kernel, symmetric padding k/2, stride 1 or 2.
    pub fn conv3d(&self, kernel: &Tensor<T>, bias: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
        if self.shape.len() != 5 {
            return Err(Error::shape(format!(
                "conv3d input must be 5-d (b,c,d,h,w), got {:?}",
                self.shape
            )));
        }
        if kernel.shape.len() != 5 {
            return Err(Error::shape(format!(
                "conv3d kernel must be 5-d (out,in,k,k,k), got {:?}",
                kernel.shape
            )));
        }
        let (batch, cin) = (self.shape[0], self.shape[1]);
        let din = (self.shape[2], self.shape[3], self.shape[4]);
        let (cout, kcin) = (kernel.shape[0], kernel.shape[1]);
        let k = kernel.shape[2];
        if kernel.shape[3] != k || kernel.shape[4] != k {
            return Err(Error::shape(format!(
                "conv3d kernel must be cubic, got {:?}",
                kernel.shape
            )));
        }
        if k % 2 == 0 || k == 0 {
            return Err(Error::shape(format!("conv3d kernel extent must be odd, got {}", k)));
        }
        if kcin != cin {
            return Err(Error::shape(format!(
                "kernel expects {} input channels, input has {}",
                kcin, cin
            )));
        }
        if bias.shape != [cout] {
            return Err(Error::shape(format!(
                "conv3d bias shape {:?} does not match {} output channels",
                bias.shape, cout
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::input(format!("conv3d stride must be 1 or 2, got {}", stride)));
        }
        let pad = k / 2;
        let dout = (
            ConvDims::out_extent(din.0, k, stride, pad),
            ConvDims::out_extent(din.1, k, stride, pad),
            ConvDims::out_extent(din.2, k, stride, pad),
        );
        let dims = ConvDims { batch, cin, cout, k, stride, pad, din, dout };
        let tape = common_tape(&[self, kernel, bias])?;
        let data = kernels::conv3d_fwd(&self.data, &kernel.data, &bias.data, &dims);
        record(tape, vec![batch, cout, dout.0, dout.1, dout.2], data, |_| Op::Conv3d {
            x: self.id(),
            kernel: kernel.id(),
            bias: bias.id(),
            dims,
            x_data: Rc::clone(&self.data),
            kernel_data: Rc::clone(&kernel.data),
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let nd = self.shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::input(format!(
                "axes {:?} are not a permutation of 0..{}",
                axes, nd
            )));
        }
        let tape = common_tape(&[self])?;
        let data = kernels::permute_data(&self.data, &self.shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        record(tape, out_shape, data, |_| Op::Permute {
            x: self.id(),
            axes: axes.to_vec(),
            in_shape: self.shape.clone(),
        })
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({})",
                self.shape,
                self.data.len(),
                new_shape,
                numel
            )));
        }
        let tape = common_tape(&[self])?;
        record(tape, new_shape.to_vec(), self.to_vec(), |_| Op::Reshape { x: self.id() })
    }

    /// Mean over rows: (n x c) -> (1 x c).
    pub fn mean_rows(&self) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("mean_rows input")?;
        if rows == 0 {
            return Err(Error::shape("mean_rows over zero rows".to_string()));
        }
        let tape = common_tape(&[self])?;
        let inv = T::fromf(rows as f64).recip();
        let mut data = vec![T::zero(); cols];
        for r in 0..rows {
            for j in 0..cols {
                data[j] += self.data[r * cols + j];
            }
        }
        for v in data.iter_mut() {
            *v = *v * inv;
        }
        record(tape, vec![1, cols], data, |_| Op::MeanRows { x: self.id(), rows, cols })
    }

    /// Row `index` of a (vocab x d) table as a (1 x d) tensor.
    pub fn lookup_row(&self, index: usize) -> Result<Tensor<T>> {
        let (vocab, cols) = self.dims2("lookup table")?;
        if index >= vocab {
            return Err(Error::input(format!(
                "row index {} out of range for table with {} rows",
                index, vocab
            )));
        }
        let tape = common_tape(&[self])?;
        let data = self.data[index * cols..(index + 1) * cols].to_vec();
        record(tape, vec![1, cols], data, |_| Op::LookupRow {
            table: self.id(),
            index,
            cols,
            vocab,
        })
    }

    /// Seed d(self)/d(everything) and walk the tape backward. `self` must be
    /// a tracked scalar; gradients become queryable afterwards.
    pub fn backward(&self) -> Result<()> {
        let tr = self
            .node
            .as_ref()
            .ok_or_else(|| Error::contract("backward on an untracked tensor"))?;
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape
            )));
        }
        let mut inner = tr.tape.inner.borrow_mut();
        if inner.done {
            return Err(Error::contract("backward already ran on this tape"));
        }
        inner.done = true;
        let n = inner.ops.len();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[tr.id] = Some(vec![T::one()]);
        for id in (0..=tr.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backprop(&inner.ops[id], &g, &mut grads);
            grads[id] = Some(g);
        }
        inner.grads = grads;
        Ok(())
    }
}

/// Stack 2-d tensors with equal column counts on top of each other.
pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::input("concat_rows of zero tensors".to_string()));
    }
    let (_, cols) = parts[0].dims2("concat_rows part")?;
    let mut rows = 0usize;
    let mut meta = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.dims2("concat_rows part")?;
        if c != cols {
            return Err(Error::shape(format!(
                "concat_rows widths differ: {} vs {}",
                cols, c
            )));
        }
        rows += r;
        meta.push((p.id(), r));
    }
    let tape = common_tape(parts)?;
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    record(tape, vec![rows, cols], data, |_| Op::ConcatRows { parts: meta, cols })
}

/// Concatenate 2-d tensors with equal row counts side by side.
pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::input("concat_cols of zero tensors".to_string()));
    }
    let (rows, _) = parts[0].dims2("concat_cols part")?;
    let mut cols = 0usize;
    let mut meta = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.dims2("concat_cols part")?;
        if r != rows {
            return Err(Error::shape(format!(
                "concat_cols heights differ: {} vs {}",
                rows, r
            )));
        }
        cols += c;
        meta.push((p.id(), c));
    }
    let tape = common_tape(parts)?;
    let mut data = vec![T::zero(); rows * cols];
    let mut off = 0usize;
    for p in parts {
        let c = p.shape[1];
        for r in 0..rows {
            data[r * cols + off..r * cols + off + c]
                .copy_from_slice(&p.data[r * c..(r + 1) * c]);
        }
        off += c;
    }
    record(tape, vec![rows, cols], data, |_| Op::ConcatCols { parts: meta, rows })
}

// ── Recording helpers ───────────────────────────────────────────────────────

/// The single tape shared by every tracked input, if any. Mixing tapes is a
/// caller bug.
fn common_tape<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Option<Tape<T>>> {
    let mut found: Option<&Tape<T>> = None;
    for t in inputs {
        if let Some(tr) = &t.node {
            match found {
                None => found = Some(&tr.tape),
                Some(f) => {
                    if !Rc::ptr_eq(&f.inner, &tr.tape.inner) {
                        return Err(Error::contract(
                            "operation mixes tensors from different tapes",
                        ));
                    }
                }
            }
        }
    }
    Ok(found.cloned())
}

fn record<T: Scalar>(
    tape: Option<Tape<T>>,
    shape: Vec<usize>,
    data: Vec<T>,
    make: impl FnOnce(&Tape<T>) -> Op<T>,
) -> Result<Tensor<T>> {
    record_rc(tape, shape, Rc::new(data), make)
}

fn record_rc<T: Scalar>(
    tape: Option<Tape<T>>,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    make: impl FnOnce(&Tape<T>) -> Op<T>,
) -> Result<Tensor<T>> {
    let node = match tape {
        None => None,
        Some(tape) => {
            let op = make(&tape);
            let id = tape.push(op, data.len())?;
            Some(Tracked { tape, id })
        }
    };
    Ok(Tensor { shape, data, node })
}

// ── Backward dispatch ───────────────────────────────────────────────────────

fn acc_vec<T: Scalar>(slot: &mut Option<Vec<T>>, v: Vec<T>) {
    match slot {
        None => *slot = Some(v),
        Some(dst) => {
            for (d, s) in dst.iter_mut().zip(v) {
                *d += s;
            }
        }
    }
}

fn acc_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], input: In, v: Vec<T>) {
    if let Some(id) = input {
        acc_vec(&mut grads[id], v);
    }
}

fn backprop<T: Scalar>(op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            acc_slot(grads, *a, g.to_vec());
            acc_slot(grads, *b, g.to_vec());
        }
        Op::MulScalar { x, c } => {
            acc_slot(grads, *x, g.iter().map(|v| *v * *c).collect());
        }
        Op::AddBias { x, bias, rows, cols } => {
            acc_slot(grads, *x, g.to_vec());
            if bias.is_some() {
                let mut db = vec![T::zero(); *cols];
                for r in 0..*rows {
                    for j in 0..*cols {
                        db[j] += g[r * cols + j];
                    }
                }
                acc_slot(grads, *bias, db);
            }
        }
        Op::LeakyRelu { x, slope, input } => {
            let v = input
                .iter()
                .zip(g)
                .map(|(xv, gv)| if *xv > T::zero() { *gv } else { *slope * *gv })
                .collect();
            acc_slot(grads, *x, v);
        }
        Op::Matmul { a, b, m, k, n, a_data, b_data } => {
            if a.is_some() {
                acc_slot(grads, *a, kernels::mm_nt(g, b_data, *m, *n, *k));
            }
            if b.is_some() {
                acc_slot(grads, *b, kernels::mm_tn(a_data, g, *m, *k, *n));
            }
        }
        Op::Softmax { x, rows, cols, out } => {
            acc_slot(grads, *x, kernels::softmax_rows_vjp(out, g, *rows, *cols));
        }
        Op::LayerNorm { x, gamma, beta, rows, cols, xhat, inv_std, gamma_data } => {
            let lg = kernels::layer_norm_rows_vjp(g, xhat, inv_std, gamma_data, *rows, *cols);
            acc_slot(grads, *x, lg.dx);
            acc_slot(grads, *gamma, lg.dgamma);
            acc_slot(grads, *beta, lg.dbeta);
        }
        Op::CrossEntropy { logits, rows, cols, labels, probs } => {
            if logits.is_some() {
                let scale = g[0] / T::fromf(*rows as f64);
                let mut dl = vec![T::zero(); rows * cols];
                for (r, &lbl) in labels.iter().enumerate() {
                    for j in 0..*cols {
                        let onehot = if j == lbl { T::one() } else { T::zero() };
                        dl[r * cols + j] = scale * (probs[r * cols + j] - onehot);
                    }
                }
                acc_slot(grads, *logits, dl);
            }
        }
        Op::Conv3d { x, kernel, bias, dims, x_data, kernel_data } => {
            let cg = kernels::conv3d_vjp(
                g,
                x_data,
                kernel_data,
                dims,
                x.is_some(),
                kernel.is_some(),
                bias.is_some(),
            );
            if let Some(dx) = cg.dx {
                acc_slot(grads, *x, dx);
            }
            if let Some(dk) = cg.dkern {
                acc_slot(grads, *kernel, dk);
            }
            if let Some(db) = cg.dbias {
                acc_slot(grads, *bias, db);
            }
        }
        Op::Permute { x, axes, in_shape } => {
            if x.is_some() {
                let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
                let inv = kernels::inverse_axes(axes);
                acc_slot(grads, *x, kernels::permute_data(g, &out_shape, &inv));
            }
        }
        Op::Reshape { x } => {
            acc_slot(grads, *x, g.to_vec());
        }
        Op::ConcatRows { parts, cols } => {
            let mut off = 0usize;
            for (input, rows) in parts {
                let len = rows * cols;
                if input.is_some() {
                    acc_slot(grads, *input, g[off..off + len].to_vec());
                }
                off += len;
            }
        }
        Op::ConcatCols { parts, rows } => {
            let total: usize = parts.iter().map(|(_, c)| c).sum();
            let mut off = 0usize;
            for (input, c) in parts {
                if input.is_some() {
                    let mut part = vec![T::zero(); rows * c];
                    for r in 0..*rows {
                        part[r * c..(r + 1) * c]
                            .copy_from_slice(&g[r * total + off..r * total + off + c]);
                    }
                    acc_slot(grads, *input, part);
                }
                off += c;
            }
        }
        Op::MeanRows { x, rows, cols } => {
            if x.is_some() {
                let inv = T::fromf(*rows as f64).recip();
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..*rows {
                    for j in 0..*cols {
                        dx[r * cols + j] = g[j] * inv;
                    }
                }
                acc_slot(grads, *x, dx);
            }
        }
        Op::LookupRow { table, index, cols, vocab } => {
            if table.is_some() {
                let mut dt = vec![T::zero(); vocab * cols];
                dt[index * cols..(index + 1) * cols].copy_from_slice(g);
                acc_slot(grads, *table, dt);
            }
        }
    }
}
