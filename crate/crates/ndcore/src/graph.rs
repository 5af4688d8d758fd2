//! Per-step computation tape.
//!
//! Every forward op appends a node holding its output value plus whatever it
//! needs to run backward. Nodes are created in topological order, so the
//! backward sweep is a single reverse pass over the node list. A graph is
//! built for one forward/backward pair and then dropped.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use crate::error::{NdError, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-12;
/// Variance epsilon for batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm mode.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Weight of the current batch in the exponential running average.
    pub momentum: T,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::lit(0.1),
        }
    }
}

/// Identifies layer kinds, for reporting and fault injection.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    MaxPool2,
    LeakyRelu,
    BatchNorm,
    Linear,
    Softmax,
    Sigmoid,
    CrossEntropy,
    BinaryCrossEntropy,
    MeanEntropy,
    GradReverse,
}

impl OpKind {
    pub const ALL: [OpKind; 11] = [
        OpKind::Conv2d,
        OpKind::MaxPool2,
        OpKind::LeakyRelu,
        OpKind::BatchNorm,
        OpKind::Linear,
        OpKind::Softmax,
        OpKind::Sigmoid,
        OpKind::CrossEntropy,
        OpKind::BinaryCrossEntropy,
        OpKind::MeanEntropy,
        OpKind::GradReverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Linear => "linear",
            OpKind::Softmax => "softmax",
            OpKind::Sigmoid => "sigmoid",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::BinaryCrossEntropy => "binary_cross_entropy",
            OpKind::MeanEntropy => "mean_entropy",
            OpKind::GradReverse => "grad_reverse",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = NdError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| NdError::invalid("op kind", format!("unknown layer '{s}'")))
    }
}

/// Flips the sign of `kind`'s backward pass, or clears the fault with
/// `None`. Fails unless built with the `fault-injection` feature.
pub fn inject_fault(kind: Option<OpKind>) -> Result<()> {
    #[cfg(feature = "fault-injection")]
    {
        fault::set(kind);
        Ok(())
    }
    #[cfg(not(feature = "fault-injection"))]
    {
        let _ = kind;
        Err(NdError::invalid(
            "inject_fault",
            "built without the fault-injection feature",
        ))
    }
}

#[cfg(feature = "fault-injection")]
pub mod fault {
    //! Test-build switch that flips the sign of one layer's backward pass.
    use std::sync::Mutex;

    use super::OpKind;

    static FLIPPED: Mutex<Option<OpKind>> = Mutex::new(None);

    pub fn set(kind: Option<OpKind>) {
        *FLIPPED.lock().unwrap() = kind;
    }

    pub(crate) fn is_flipped(kind: OpKind) -> bool {
        *FLIPPED.lock().unwrap() == Some(kind)
    }
}

#[cfg(feature = "fault-injection")]
fn fault_sign<T: Scalar>(kind: OpKind) -> T {
    if fault::is_flipped(kind) {
        -T::one()
    } else {
        T::one()
    }
}

#[cfg(not(feature = "fault-injection"))]
#[inline(always)]
fn fault_sign<T: Scalar>(_kind: OpKind) -> T {
    T::one()
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    LeakyRelu {
        x: Var,
        alpha: T,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: Mode,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    CrossEntropy {
        p: Var,
        labels: Vec<usize>,
    },
    BinaryCrossEntropy {
        p: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
    MeanEntropy {
        p: Var,
    },
    GradReverse {
        x: Var,
        lambda: T,
    },
    ScaleRows {
        x: Var,
        scale: Vec<T>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Reshape {
        x: Var,
    },
    DotConst {
        x: Var,
        w: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of every node after a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Records forward operations for one reverse-mode sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_with(value, op, needs_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    /// An input whose gradient is tracked (used by the gradient checker).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// Copies a parameter's current value onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        self.push_with(value, Op::Param(id), true)
    }

    /// 2-D cross-correlation. `x` is `[B, C, H, W]`, `w` is `[O, C, kh, kw]`,
    /// `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(NdError::shape(
                OP,
                "4-d input and weights",
                format!("input {xs:?}, weights {ws:?}"),
            ));
        }
        if stride == 0 {
            return Err(NdError::invalid(OP, "stride must be at least 1"));
        }
        let (batch, chans, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_c, kh, kw) = (ws[0], ws[2], ws[3]);
        if ws[1] != chans {
            return Err(NdError::shape(
                OP,
                format!("{chans} weight input channels"),
                format!("{}", ws[1]),
            ));
        }
        if bs != [out_c] {
            return Err(NdError::shape(
                OP,
                format!("bias [{out_c}]"),
                format!("{bs:?}"),
            ));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(NdError::shape(
                OP,
                format!(
                    "kernel within padded input {}x{}",
                    h + 2 * pad,
                    wd + 2 * pad
                ),
                format!("kernel {kh}x{kw}"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let ck = chans * kh * kw;
        let hw = oh * ow;

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut col = vec![T::zero(); ck * hw];
        let mut out = vec![T::zero(); batch * out_c * hw];
        for n in 0..batch {
            let img = &xv[n * chans * h * wd..(n + 1) * chans * h * wd];
            im2col(img, chans, h, wd, kh, kw, stride, pad, oh, ow, &mut col);
            let o = &mut out[n * out_c * hw..(n + 1) * out_c * hw];
            for (c, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.fill(bv[c]);
            }
            gemm(out_c, ck, hw, wv, false, &col, false, o, T::one());
        }
        let value = Tensor::new(vec![batch, out_c, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &[x, w, b],
        ))
    }

    /// 2x2 max pooling with stride 2. Odd trailing rows/columns are padded
    /// with negative infinity, so they never win unless the window is all pad.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(NdError::shape("maxpool2", "4-d input", format!("{xs:?}")));
        }
        let (batch, chans, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(batch * chans * oh * ow);
        let mut argmax = Vec::with_capacity(batch * chans * oh * ow);
        for plane in 0..batch * chans {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = base + (2 * oy) * w + 2 * ox;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                            if iy < h && ix < w {
                                let idx = base + iy * w + ix;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let value = Tensor::new(vec![batch, chans, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { alpha * v });
        self.push(value, Op::LeakyRelu { x, alpha }, &[x])
    }

    /// Batch normalization over axis 1 of a `[B, F]` or `[B, C, ...]` tensor,
    /// reducing over the batch and any trailing spatial axes.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(NdError::shape(OP, "at least 2-d input", format!("{xs:?}")));
        }
        let (batch, chans) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.value(gamma).shape() != [chans] || self.value(beta).shape() != [chans] {
            return Err(NdError::shape(
                OP,
                format!("scale and shift of shape [{chans}]"),
                format!(
                    "{:?} and {:?}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        if stats.mean.len() != chans || stats.var.len() != chans {
            return Err(NdError::shape(
                OP,
                format!("{chans} running statistics"),
                format!("{}", stats.mean.len()),
            ));
        }
        if mode == Mode::Train && batch < 2 {
            return Err(NdError::invalid(
                OP,
                format!("training mode needs a batch of at least 2, got {batch}"),
            ));
        }
        let xv = self.value(x).data();
        let m = batch * spatial;
        let eps = T::lit(BN_EPS);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); chans];
                let mut var = vec![T::zero(); chans];
                for n in 0..batch {
                    for c in 0..chans {
                        let s = &xv[(n * chans + c) * spatial..(n * chans + c + 1) * spatial];
                        mean[c] += s.iter().copied().sum::<T>();
                    }
                }
                let mf = T::from_usize(m).unwrap();
                mean.iter_mut().for_each(|v| *v /= mf);
                for n in 0..batch {
                    for c in 0..chans {
                        let s = &xv[(n * chans + c) * spatial..(n * chans + c + 1) * spatial];
                        var[c] += s.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= mf);
                let mom = stats.momentum;
                let unbias = mf / (mf - T::one());
                for c in 0..chans {
                    stats.mean[c] = (T::one() - mom) * stats.mean[c] + mom * mean[c];
                    stats.var[c] = (T::one() - mom) * stats.var[c] + mom * var[c] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for n in 0..batch {
            for c in 0..chans {
                let off = (n * chans + c) * spatial;
                for i in off..off + spatial {
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            &[x, gamma, beta],
        ))
    }

    /// Affine map `x W + b` with `x: [B, F]`, `W: [F, O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(NdError::shape(
                OP,
                format!("input [B, {}]", ws.first().copied().unwrap_or(0)),
                format!("input {xs:?}, weights {ws:?}"),
            ));
        }
        let (batch, fin, fout) = (xs[0], ws[0], ws[1]);
        if self.value(b).shape() != [fout] {
            return Err(NdError::shape(
                OP,
                format!("bias [{fout}]"),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(batch * fout);
        for _ in 0..batch {
            out.extend_from_slice(bv);
        }
        gemm(
            batch,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            T::one(),
        );
        let value = Tensor::new(vec![batch, fout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Row-wise softmax of a `[B, R]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(NdError::shape("softmax", "2-d input", format!("{xs:?}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..xv.rows() {
            out.extend(softmax_row(xv.row(i)));
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    /// Mean negative log-likelihood of `labels` under row probabilities `p`.
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let pv = self.value(p);
        if pv.shape().len() != 2 || pv.rows() != labels.len() {
            return Err(NdError::shape(
                OP,
                format!("[{}, R] probabilities", labels.len()),
                format!("{:?}", pv.shape()),
            ));
        }
        let r = pv.row_len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= r) {
            return Err(NdError::invalid(
                OP,
                format!("label {bad} outside [0, {r})"),
            ));
        }
        let n = T::from_usize(labels.len()).unwrap();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -clamp_prob(pv.row(i)[l]).ln())
            .sum::<T>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                p,
                labels: labels.to_vec(),
            },
            &[p],
        ))
    }

    /// Weighted mean binary cross-entropy. `p` holds one probability per row
    /// (`[B]` or `[B, 1]`); `targets` are 1 for source and 0 for target.
    pub fn binary_cross_entropy(
        &mut self,
        p: Var,
        targets: &[T],
        weights: Option<&[T]>,
    ) -> Result<Var> {
        const OP: &str = "binary_cross_entropy";
        let pv = self.value(p);
        if pv.len() != targets.len() || pv.rows() != targets.len() {
            return Err(NdError::shape(
                OP,
                format!("{} probabilities", targets.len()),
                format!("{:?}", pv.shape()),
            ));
        }
        let weights = match weights {
            Some(w) if w.len() != targets.len() => {
                return Err(NdError::shape(
                    OP,
                    format!("{} weights", targets.len()),
                    format!("{}", w.len()),
                ));
            }
            Some(w) => w.to_vec(),
            None => vec![T::one(); targets.len()],
        };
        let n = T::from_usize(targets.len()).unwrap();
        let loss = pv
            .data()
            .iter()
            .zip(targets)
            .zip(&weights)
            .map(|((&q, &y), &w)| {
                let q = clamp_prob(q);
                -w * (y * q.ln() + (T::one() - y) * (T::one() - q).ln())
            })
            .sum::<T>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy {
                p,
                targets: targets.to_vec(),
                weights,
            },
            &[p],
        ))
    }

    /// Mean over rows of the Shannon entropy `-Σ p ln p`, with `0 ln 0 = 0`.
    pub fn mean_entropy(&mut self, p: Var) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape().len() != 2 {
            return Err(NdError::shape(
                "mean_entropy",
                "2-d probabilities",
                format!("{:?}", pv.shape()),
            ));
        }
        let n = T::from_usize(pv.rows()).unwrap();
        let h = (0..pv.rows()).map(|i| entropy(pv.row(i))).sum::<T>() / n;
        Ok(self.push(Tensor::scalar(h), Op::MeanEntropy { p }, &[p]))
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: T) -> Result<Var> {
        if lambda < T::zero() {
            return Err(NdError::invalid(
                "grad_reverse",
                "lambda must be non-negative",
            ));
        }
        let value = self.value(x).clone();
        Ok(self.push(value, Op::GradReverse { x, lambda }, &[x]))
    }

    /// Multiplies row `i` by the constant `scale[i]`.
    pub fn scale_rows(&mut self, x: Var, scale: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != scale.len() {
            return Err(NdError::shape(
                "scale_rows",
                format!("{} rows", scale.len()),
                format!("{:?}", xv.shape()),
            ));
        }
        let n = xv.row_len();
        let mut out = xv.data().to_vec();
        for (row, &s) in out.chunks_mut(n.max(1)).zip(scale) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::ScaleRows {
                x,
                scale: scale.to_vec(),
            },
            &[x],
        ))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(NdError::invalid(
                "slice_rows",
                format!("range {start}..{end} for {} rows", xv.rows()),
            ));
        }
        let n = xv.row_len();
        let mut shape = xv.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::new(shape, xv.data()[start * n..end * n].to_vec())?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NdError::shape(
                "add",
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (rows, n) = (self.value(x).rows(), self.value(x).row_len());
        self.reshape(x, vec![rows, n])
    }

    /// Scalar `Σ x ⊙ w` for a constant `w`.
    pub fn dot_const(&mut self, x: Var, w: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != w.len() {
            return Err(NdError::shape(
                "dot_const",
                format!("{} elements", xv.len()),
                format!("{}", w.len()),
            ));
        }
        let s = xv.data().iter().zip(w).map(|(&a, &b)| a * b).sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, w: w.to_vec() }, &[x]))
    }

    /// Backpropagates from the scalar `loss`. Parameter gradients are added
    /// into `store`; all node gradients are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NdError::shape(
                "backward",
                "scalar loss",
                format!("{:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backward_node(node, &g, &mut grads, store);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        store: &mut ParamStore<T>,
    ) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let pg = store.get_mut(*id).grad.data_mut();
                pg.iter_mut().zip(gd).for_each(|(a, &b)| *a += b);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let sign = fault_sign::<T>(OpKind::Conv2d);
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let (batch, chans, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (out_c, kh, kw) = (ws[0], ws[2], ws[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let (ck, hw) = (chans * kh * kw, oh * ow);
                if self.needs(*w) {
                    // Columns are rebuilt per sample rather than kept on the tape.
                    let xv = self.value(*x).data();
                    let mut dw = vec![T::zero(); out_c * ck];
                    let mut col = vec![T::zero(); ck * hw];
                    for n in 0..batch {
                        let img = &xv[n * chans * h * wd..(n + 1) * chans * h * wd];
                        im2col(img, chans, h, wd, kh, kw, *stride, *pad, oh, ow, &mut col);
                        let go = &gd[n * out_c * hw..(n + 1) * out_c * hw];
                        gemm(out_c, hw, ck, go, false, &col, true, &mut dw, T::one());
                    }
                    dw.iter_mut().for_each(|v| *v *= sign);
                    accumulate(grads, *w, ws, dw);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); out_c];
                    for n in 0..batch {
                        for (c, dbc) in db.iter_mut().enumerate() {
                            let off = (n * out_c + c) * hw;
                            *dbc += gd[off..off + hw].iter().copied().sum::<T>();
                        }
                    }
                    db.iter_mut().for_each(|v| *v *= sign);
                    accumulate(grads, *b, &[out_c], db);
                }
                if self.needs(*x) {
                    let wv = self.value(*w).data();
                    let mut dx = vec![T::zero(); batch * chans * h * wd];
                    let mut dcol = vec![T::zero(); ck * hw];
                    for n in 0..batch {
                        let go = &gd[n * out_c * hw..(n + 1) * out_c * hw];
                        gemm(ck, out_c, hw, wv, true, go, false, &mut dcol, T::zero());
                        let dimg = &mut dx[n * chans * h * wd..(n + 1) * chans * h * wd];
                        col2im(&dcol, chans, h, wd, kh, kw, *stride, *pad, oh, ow, dimg);
                    }
                    dx.iter_mut().for_each(|v| *v *= sign);
                    accumulate(grads, *x, xs, dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let sign = fault_sign::<T>(OpKind::MaxPool2);
                let xs = self.value(*x).shape();
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&idx, &gv) in argmax.iter().zip(gd) {
                    dx[idx] += sign * gv;
                }
                accumulate(grads, *x, xs, dx);
            }
            Op::LeakyRelu { x, alpha } => {
                let sign = fault_sign::<T>(OpKind::LeakyRelu);
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| sign * if v > T::zero() { gv } else { *alpha * gv })
                    .collect();
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let sign = fault_sign::<T>(OpKind::BatchNorm);
                let xs = self.value(*x).shape();
                let (batch, chans) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); chans];
                let mut dbeta = vec![T::zero(); chans];
                for n in 0..batch {
                    for c in 0..chans {
                        let off = (n * chans + c) * spatial;
                        for i in off..off + spatial {
                            dgamma[c] += gd[i] * xhat[i];
                            dbeta[c] += gd[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    match mode {
                        Mode::Eval => {
                            for n in 0..batch {
                                for c in 0..chans {
                                    let off = (n * chans + c) * spatial;
                                    for i in off..off + spatial {
                                        dx[i] = sign * gd[i] * gv[c] * inv_std[c];
                                    }
                                }
                            }
                        }
                        Mode::Train => {
                            // dx = inv_std / m * (m * dxhat - Σ dxhat - xhat Σ dxhat xhat), dxhat = g * gamma
                            let m = T::from_usize(batch * spatial).unwrap();
                            for c in 0..chans {
                                let k = gv[c] * inv_std[c] / m;
                                for n in 0..batch {
                                    let off = (n * chans + c) * spatial;
                                    for i in off..off + spatial {
                                        dx[i] =
                                            sign * k * (m * gd[i] - dbeta[c] - xhat[i] * dgamma[c]);
                                    }
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, xs, dx);
                }
                dgamma.iter_mut().for_each(|v| *v *= sign);
                dbeta.iter_mut().for_each(|v| *v *= sign);
                accumulate(grads, *gamma, &[chans], dgamma);
                accumulate(grads, *beta, &[chans], dbeta);
            }
            Op::Linear { x, w, b } => {
                let sign = fault_sign::<T>(OpKind::Linear);
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let (batch, fin, fout) = (xs[0], ws[0], ws[1]);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); batch * fin];
                    gemm(
                        batch,
                        fout,
                        fin,
                        gd,
                        false,
                        self.value(*w).data(),
                        true,
                        &mut dx,
                        T::zero(),
                    );
                    dx.iter_mut().for_each(|v| *v *= sign);
                    accumulate(grads, *x, xs, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); fin * fout];
                    gemm(
                        fin,
                        batch,
                        fout,
                        self.value(*x).data(),
                        true,
                        gd,
                        false,
                        &mut dw,
                        T::zero(),
                    );
                    dw.iter_mut().for_each(|v| *v *= sign);
                    accumulate(grads, *w, ws, dw);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); fout];
                    for row in gd.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += sign * v);
                    }
                    accumulate(grads, *b, &[fout], db);
                }
            }
            Op::Softmax { x } => {
                let sign = fault_sign::<T>(OpKind::Softmax);
                let p = &node.value;
                let r = p.row_len();
                let mut dx = vec![T::zero(); p.len()];
                for i in 0..p.rows() {
                    let pr = p.row(i);
                    let gr = &gd[i * r..(i + 1) * r];
                    let dot = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..r {
                        dx[i * r + j] = sign * pr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, p.shape(), dx);
            }
            Op::Sigmoid { x } => {
                let sign = fault_sign::<T>(OpKind::Sigmoid);
                let y = &node.value;
                let dx = y
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&s, &gv)| sign * gv * s * (T::one() - s))
                    .collect();
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::CrossEntropy { p, labels } => {
                let sign = fault_sign::<T>(OpKind::CrossEntropy);
                let pv = self.value(*p);
                let r = pv.row_len();
                let n = T::from_usize(labels.len()).unwrap();
                let mut dp = vec![T::zero(); pv.len()];
                for (i, &l) in labels.iter().enumerate() {
                    dp[i * r + l] = -sign * gd[0] / (n * clamp_prob(pv.row(i)[l]));
                }
                accumulate(grads, *p, pv.shape(), dp);
            }
            Op::BinaryCrossEntropy {
                p,
                targets,
                weights,
            } => {
                let sign = fault_sign::<T>(OpKind::BinaryCrossEntropy);
                let pv = self.value(*p);
                let n = T::from_usize(targets.len()).unwrap();
                let dp = pv
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&q, &y), &w)| {
                        let q = clamp_prob(q);
                        sign * gd[0] * w / n * ((T::one() - y) / (T::one() - q) - y / q)
                    })
                    .collect();
                accumulate(grads, *p, pv.shape(), dp);
            }
            Op::MeanEntropy { p } => {
                let sign = fault_sign::<T>(OpKind::MeanEntropy);
                let pv = self.value(*p);
                let n = T::from_usize(pv.rows()).unwrap();
                let dp = pv
                    .data()
                    .iter()
                    .map(|&q| {
                        if q > T::zero() {
                            -sign * gd[0] * (q.ln() + T::one()) / n
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(grads, *p, pv.shape(), dp);
            }
            Op::GradReverse { x, lambda } => {
                let sign = fault_sign::<T>(OpKind::GradReverse);
                let dx = gd.iter().map(|&v| -sign * *lambda * v).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::ScaleRows { x, scale } => {
                let n = g.row_len().max(1);
                let mut dx = gd.to_vec();
                for (row, &s) in dx.chunks_mut(n).zip(scale) {
                    row.iter_mut().for_each(|v| *v *= s);
                }
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let n = xv.row_len();
                let mut dx = vec![T::zero(); xv.len()];
                dx[start * n..start * n + gd.len()].copy_from_slice(gd);
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.shape(), gd.to_vec());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.shape(), gd.to_vec());
                }
            }
            Op::Scale { x, c } => {
                accumulate(grads, *x, g.shape(), gd.iter().map(|&v| v * *c).collect());
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, self.value(*x).shape(), gd.to_vec());
            }
            Op::DotConst { x, w } => {
                accumulate(
                    grads,
                    *x,
                    self.value(*x).shape(),
                    w.iter().map(|&v| v * gd[0]).collect(),
                );
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            existing
                .data_mut()
                .iter_mut()
                .zip(&data)
                .for_each(|(a, &b)| *a += b);
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape matches node"));
        }
    }
}

#[inline]
fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::lit(PROB_EPS);
    p.max(eps).min(T::one() - eps)
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Softmax of one row, computed with max subtraction.
pub fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().copied().sum::<T>();
    exps.into_iter().map(|e| e / total).collect()
}

/// Shannon entropy in nats with the convention `0 ln 0 = 0`.
pub fn entropy<T: Scalar>(p: &[T]) -> T {
    p.iter()
        .filter(|&&q| q > T::zero())
        .map(|&q| -q * q.ln())
        .sum::<T>()
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    img: &[T],
    chans: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let hw = oh * ow;
    for c in 0..chans {
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((c * kh + i) * kw + j) * hw..][..hw];
                let (lo, hi) = valid_range(j, pad, stride, w, ow);
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = (oy * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &img[(c * h + iy as usize) * w..][..w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let first = lo * stride + j - pad;
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (k, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[first + k * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + j - pad`
/// lies inside `[0, w)`.
fn valid_range(j: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if j >= pad {
        0
    } else {
        (pad - j).div_ceil(stride)
    };
    let hi = if w + pad <= j {
        0
    } else {
        ((w + pad - j - 1) / stride + 1).min(ow)
    };
    (lo.min(ow), hi.max(lo.min(ow)))
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    chans: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    img: &mut [T],
) {
    let hw = oh * ow;
    for c in 0..chans {
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((c * kh + i) * kw + j) * hw..][..hw];
                let (lo, hi) = valid_range(j, pad, stride, w, ow);
                if lo >= hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * h + iy as usize) * w..][..w];
                    let src = &row[oy * ow + lo..oy * ow + hi];
                    let first = lo * stride + j - pad;
                    for (k, &v) in src.iter().enumerate() {
                        dst[first + k * stride] += v;
                    }
                }
            }
        }
    }
}

/// `c = op(a) * op(b) + beta * c` on row-major slices, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    beta: T,
) {
    let av = if trans_a {
        ArrayView2::from_shape((m, k).strides((1, m)), a)
    } else {
        ArrayView2::from_shape((m, k), a)
    }
    .expect("gemm lhs shape");
    let bv = if trans_b {
        ArrayView2::from_shape((k, n).strides((1, k)), b)
    } else {
        ArrayView2::from_shape((k, n), b)
    }
    .expect("gemm rhs shape");
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm output shape");
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}
