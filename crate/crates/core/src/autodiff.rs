//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive executed through it, in execution
//! order, together with whatever the primitive needs to compute its
//! vector-Jacobian product. [`Graph::backward`] consumes the tape and sweeps
//! it once in reverse. Reductions always run in row-major order, so two
//! sweeps over identical inputs produce bit-identical gradients.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_index_map, broadcast_shape, col2im, conv_out_dim, gemm, im2col, reduce_to_shape,
    Scalar, Tensor, CLAMP_EPS,
};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div {
        num: Var,
        den: Var,
    },
    Scale(Var, T),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d(Box<ConvSaved<T>>),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    BroadcastTo(Var),
    Reshape(Var),
    BatchNorm(Box<BnSaved<T>>),
    ChannelScale {
        x: Var,
        gate: Var,
    },
    LogSoftmax(Var),
    WeightedNll {
        logp: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
        total: T,
    },
}

struct ConvSaved<T> {
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    /// Per-sample im2col matrices, concatenated.
    cols: Vec<T>,
}

struct BnSaved<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Batch statistics were used (gradient flows through mean and variance).
    train: bool,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct RunningStatUpdate<T: Scalar> {
    pub key: String,
    pub mean: Vec<T>,
    /// Unbiased variance over the normalized axes.
    pub var: Vec<T>,
}

/// The recording tape. Single-writer; create one per forward/backward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    params: RefCell<BTreeMap<String, Var>>,
    stat_updates: RefCell<Vec<RunningStatUpdate<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            params: RefCell::new(BTreeMap::new()),
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    /// A graph that never tracks gradients and saves no backward state.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Register a named parameter as a leaf. Registering the same name twice
    /// returns the same handle, so shared weights accumulate one gradient.
    pub fn param(&self, name: &str, value: &Tensor<T>, requires_grad: bool) -> Var {
        if let Some(&v) = self.params.borrow().get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), requires_grad);
        self.params.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn record_running_stats(&self, update: RunningStatUpdate<T>) {
        self.stat_updates.borrow_mut().push(update);
    }

    pub fn take_running_stats(&self) -> Vec<RunningStatUpdate<T>> {
        std::mem::take(&mut *self.stat_updates.borrow_mut())
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op, ta.shape(), tb.shape())?;
        let data = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let ma = broadcast_index_map(ta.shape(), &shape);
            let mb = broadcast_index_map(tb.shape(), &shape);
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect()
        };
        Ok((Tensor::from_parts(shape, data), self.any_grad(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Division with the divisor's magnitude floored at `CLAMP_EPS`.
    pub fn div(&self, num: Var, den: Var) -> Result<Var> {
        let (out, rg) = self.binary("div", num, den, |x, y| x / clamp_den(y))?;
        Ok(self.push(out, Op::Div { num, den }, rg))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn exp(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    /// Natural log of `max(x, CLAMP_EPS)`.
    pub fn log(&self, x: Var) -> Var {
        let eps = T::from_f64(CLAMP_EPS);
        let out = self.value(x).map(|v| v.max(eps).ln());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Log(x), rg)
    }

    // ---- reductions and reshaping ----------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let t = self.value(x);
        let total = t.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let n = T::from_f64(t.numel() as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total / n), Op::Mean(x), rg)
    }

    pub fn broadcast_to(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let out_shape = broadcast_shape("broadcast_to", t.shape(), shape)?;
        if out_shape != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let map = broadcast_index_map(t.shape(), shape);
        let data = map.iter().map(|&i| t.data()[i]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::BroadcastTo(x),
            rg,
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            false,
            false,
            m,
            n,
            k,
            T::one(),
            ta.data(),
            tb.data(),
            T::zero(),
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `x · wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (n, fin, fout) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [fout] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: tw.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(tb.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            false,
            true,
            n,
            fout,
            fin,
            T::one(),
            tx.data(),
            tw.data(),
            beta,
            &mut out,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::from_parts(vec![n, fout], out),
            Op::Linear { x, w, b },
            rg,
        ))
    }

    /// 2-D convolution of `x: [N, C, H, W]` with `w: [O, C, k, k]`, zero
    /// padding `pad` on every side.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: tx.shape().to_vec(),
            rhs: tw.shape().to_vec(),
        };
        if tx.rank() != 4
            || tw.rank() != 4
            || tx.shape()[1] != tw.shape()[1]
            || tw.shape()[2] != tw.shape()[3]
        {
            return Err(mismatch());
        }
        let (n, c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (o, k) = (tw.shape()[0], tw.shape()[2]);
        let (oh, ow) = match (
            conv_out_dim(h, k, stride, pad),
            conv_out_dim(wd, k, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(mismatch()),
        };
        let tb = match b {
            Some(b) => {
                let tb = self.value(b);
                if tb.shape() != [o] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: tw.shape().to_vec(),
                        rhs: tb.shape().to_vec(),
                    });
                }
                Some(tb)
            }
            None => None,
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        let ckk = c * k * k;
        let spatial = oh * ow;
        let keep_cols = rg && self.any_grad(&[w]);
        let mut saved = if keep_cols {
            vec![T::zero(); n * ckk * spatial]
        } else {
            Vec::new()
        };
        let mut scratch = if keep_cols {
            Vec::new()
        } else {
            vec![T::zero(); ckk * spatial]
        };
        let mut out = vec![T::zero(); n * o * spatial];
        for s in 0..n {
            let img = &tx.data()[s * c * h * wd..(s + 1) * c * h * wd];
            let cols: &mut [T] = if keep_cols {
                &mut saved[s * ckk * spatial..(s + 1) * ckk * spatial]
            } else {
                &mut scratch
            };
            im2col(img, c, h, wd, k, stride, pad, oh, ow, cols);
            let dst = &mut out[s * o * spatial..(s + 1) * o * spatial];
            if let Some(tb) = &tb {
                for (ch, plane) in dst.chunks_mut(spatial).enumerate() {
                    plane.fill(tb.data()[ch]);
                }
            }
            let beta = if tb.is_some() { T::one() } else { T::zero() };
            gemm(
                false,
                false,
                o,
                spatial,
                ckk,
                T::one(),
                tw.data(),
                cols,
                beta,
                dst,
            );
        }
        let saved = Box::new(ConvSaved {
            x,
            w,
            b,
            stride,
            pad,
            cols: saved,
        });
        Ok(self.push(
            Tensor::from_parts(vec![n, o, oh, ow], out),
            Op::Conv2d(saved),
            rg,
        ))
    }

    /// Max pooling with a square window; no padding. Ties go to the first
    /// position in row-major window order.
    pub fn max_pool2d(&self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        let bad = || Error::InvalidShape {
            op: "max_pool2d",
            shape: tx.shape().to_vec(),
            reason: format!("window {kernel} stride {stride} does not fit"),
        };
        if tx.rank() != 4 {
            return Err(bad());
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (oh, ow) = match (
            conv_out_dim(h, kernel, stride, 0),
            conv_out_dim(w, kernel, stride, 0),
        ) {
            (Some(a), Some(b)) if kernel > 0 => (a, b),
            _ => return Err(bad()),
        };
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if tx.data()[idx] > tx.data()[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(tx.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        let argmax = if rg { argmax } else { Vec::new() };
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    /// Adaptive average pooling of `[N, C, H, W]` to `[N, C, out_h, out_w]`
    /// with bins `[floor(i·H/out), ceil((i+1)·H/out))`.
    pub fn adaptive_avg_pool2d(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::InvalidShape {
                op: "adaptive_avg_pool2d",
                shape: tx.shape().to_vec(),
                reason: format!("cannot pool to {out_h}x{out_w}"),
            });
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in tx.data().chunks(h * w) {
            for oy in 0..out_h {
                let (y0, y1) = adaptive_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = adaptive_bin(ox, w, out_w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += plane[y * w + xx];
                        }
                    }
                    out.push(acc / T::from_f64(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, out_h, out_w], out),
            Op::AdaptiveAvgPool { x, out_h, out_w },
            rg,
        ))
    }

    // ---- normalization and gating -----------------------------------------

    /// Batch norm over `[N, C, H, W]` using batch statistics. Returns the
    /// output plus the batch mean and unbiased variance per channel.
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let tx = self.value(x);
        let (n, c, spatial) = bn_dims(&tx, &self.value(gamma), &self.value(beta))?;
        let count = n * spatial;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for s in 0..n {
                for &v in &tx.data()[(s * c + ch) * spatial..(s * c + ch + 1) * spatial] {
                    acc += v;
                }
            }
            mean[ch] = acc / T::from_f64(count as f64);
            let mut sq = T::zero();
            for s in 0..n {
                for &v in &tx.data()[(s * c + ch) * spatial..(s * c + ch + 1) * spatial] {
                    let d = v - mean[ch];
                    sq += d * d;
                }
            }
            var[ch] = sq / T::from_f64(count as f64);
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let out = self.bn_apply(x, gamma, beta, &tx, &mean, &inv_std, true, n, c, spatial);
        let unbiased = if count > 1 {
            let f = T::from_f64(count as f64 / (count - 1) as f64);
            var.iter().map(|&v| v * f).collect()
        } else {
            var.clone()
        };
        Ok((out, mean, unbiased))
    }

    /// Batch norm with fixed statistics: an affine map per channel.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, spatial) = bn_dims(&tx, &self.value(gamma), &self.value(beta))?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm_eval",
                lhs: tx.shape().to_vec(),
                rhs: vec![running_mean.len()],
            });
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        Ok(self.bn_apply(
            x,
            gamma,
            beta,
            &tx,
            running_mean,
            &inv_std,
            false,
            n,
            c,
            spatial,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        tx: &Tensor<T>,
        mean: &[T],
        inv_std: &[T],
        train: bool,
        n: usize,
        c: usize,
        spatial: usize,
    ) -> Var {
        let (tg, tb) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); tx.numel()];
        let mut out = vec![T::zero(); tx.numel()];
        for s in 0..n {
            for ch in 0..c {
                let range = (s * c + ch) * spatial..(s * c + ch + 1) * spatial;
                for i in range {
                    let h = (tx.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * tg.data()[ch] + tb.data()[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let saved = Box::new(BnSaved {
            x,
            gamma,
            beta,
            xhat: if rg { xhat } else { Vec::new() },
            inv_std: inv_std.to_vec(),
            train,
        });
        self.push(
            Tensor::from_parts(tx.shape().to_vec(), out),
            Op::BatchNorm(saved),
            rg,
        )
    }

    /// `x[n, c, ..] * gate[n, c]`: per-sample, per-channel scaling.
    pub fn channel_scale(&self, x: Var, gate: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gate));
        if tx.rank() < 2 || tg.shape() != &tx.shape()[..2] {
            return Err(Error::ShapeMismatch {
                op: "channel_scale",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let spatial: usize = tx.shape()[2..].iter().product();
        let mut out = tx.data().to_vec();
        for (plane, &g) in out.chunks_mut(spatial).zip(tg.data()) {
            for v in plane {
                *v *= g;
            }
        }
        let rg = self.any_grad(&[x, gate]);
        Ok(self.push(
            Tensor::from_parts(tx.shape().to_vec(), out),
            Op::ChannelScale { x, gate },
            rg,
        ))
    }

    // ---- classification ---------------------------------------------------

    /// Row-wise log-softmax of a `[N, C]` tensor.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "log_softmax",
                shape: tx.shape().to_vec(),
                reason: "expected [N, C]".into(),
            });
        }
        let cols = tx.shape()[1];
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(cols) {
            out.extend(log_softmax_row(row));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(tx.shape().to_vec(), out),
            Op::LogSoftmax(x),
            rg,
        ))
    }

    /// `-Σᵢ w[yᵢ]·logp[i, yᵢ] / Σᵢ w[yᵢ]`.
    pub fn weighted_nll(&self, logp: Var, labels: &[usize], weights: &[T]) -> Result<Var> {
        let tl = self.value(logp);
        if tl.rank() != 2 || tl.shape()[0] != labels.len() || tl.shape()[1] != weights.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_nll",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len(), weights.len()],
            });
        }
        let classes = weights.len();
        let mut total = T::zero();
        let mut acc = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            total += weights[y];
            acc += weights[y] * tl.data()[i * classes + y];
        }
        let loss = -acc / total;
        let rg = self.any_grad(&[logp]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedNll {
                logp,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                total,
            },
            rg,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.into_inner();
        let params = self.params.into_inner();
        let loss_node = &nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            // Keep non-leaf gradients only until consumed.
        }
        let mut leaves = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                leaves.insert(id, Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        let by_name = params
            .into_iter()
            .filter_map(|(name, v)| leaves.get(&v.0).map(|g| (name, g.clone())))
            .collect();
        Ok(Gradients { leaves, by_name })
    }
}

/// Gradients of every gradient-requiring leaf, by handle and by parameter name.
#[derive(Debug, Default)]
pub struct Gradients<T: Scalar = f32> {
    leaves: HashMap<usize, Tensor<T>>,
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.by_name
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, contrib: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let out_shape = node.value.shape();
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &v in [a, b] {
                if rg(v) {
                    accumulate(
                        grads,
                        nodes,
                        v,
                        reduce_to_shape(g, val(v).shape(), out_shape),
                    );
                }
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                accumulate(
                    grads,
                    nodes,
                    *a,
                    reduce_to_shape(g, val(*a).shape(), out_shape),
                );
            }
            if rg(*b) {
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                accumulate(
                    grads,
                    nodes,
                    *b,
                    reduce_to_shape(&neg, val(*b).shape(), out_shape),
                );
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let ma = broadcast_index_map(ta.shape(), out_shape);
            let mb = broadcast_index_map(tb.shape(), out_shape);
            if rg(*a) {
                let full: Vec<T> = g
                    .iter()
                    .zip(&mb)
                    .map(|(&gi, &j)| gi * tb.data()[j])
                    .collect();
                accumulate(
                    grads,
                    nodes,
                    *a,
                    reduce_to_shape(&full, ta.shape(), out_shape),
                );
            }
            if rg(*b) {
                let full: Vec<T> = g
                    .iter()
                    .zip(&ma)
                    .map(|(&gi, &i)| gi * ta.data()[i])
                    .collect();
                accumulate(
                    grads,
                    nodes,
                    *b,
                    reduce_to_shape(&full, tb.shape(), out_shape),
                );
            }
        }
        Op::Div { num, den } => {
            let (tn, td) = (val(*num), val(*den));
            let mn = broadcast_index_map(tn.shape(), out_shape);
            let md = broadcast_index_map(td.shape(), out_shape);
            if rg(*num) {
                let full: Vec<T> = g
                    .iter()
                    .zip(&md)
                    .map(|(&gi, &j)| gi / clamp_den(td.data()[j]))
                    .collect();
                accumulate(
                    grads,
                    nodes,
                    *num,
                    reduce_to_shape(&full, tn.shape(), out_shape),
                );
            }
            if rg(*den) {
                let eps = T::from_f64(CLAMP_EPS);
                let full: Vec<T> = g
                    .iter()
                    .zip(mn.iter().zip(&md))
                    .map(|(&gi, (&i, &j))| {
                        let d = td.data()[j];
                        if d.abs() < eps {
                            T::zero()
                        } else {
                            -gi * tn.data()[i] / (d * d)
                        }
                    })
                    .collect();
                accumulate(
                    grads,
                    nodes,
                    *den,
                    reduce_to_shape(&full, td.shape(), out_shape),
                );
            }
        }
        Op::Scale(x, c) => accumulate(grads, nodes, *x, g.iter().map(|&v| v * *c).collect()),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if rg(*a) {
                let mut ga = vec![T::zero(); m * k];
                gemm(
                    false,
                    true,
                    m,
                    k,
                    n,
                    T::one(),
                    g,
                    tb.data(),
                    T::zero(),
                    &mut ga,
                );
                accumulate(grads, nodes, *a, ga);
            }
            if rg(*b) {
                let mut gb = vec![T::zero(); k * n];
                gemm(
                    true,
                    false,
                    k,
                    n,
                    m,
                    T::one(),
                    ta.data(),
                    g,
                    T::zero(),
                    &mut gb,
                );
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Linear { x, w, b } => {
            let (tx, tw) = (val(*x), val(*w));
            let (n, fin, fout) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
            if rg(*x) {
                let mut gx = vec![T::zero(); n * fin];
                gemm(
                    false,
                    false,
                    n,
                    fin,
                    fout,
                    T::one(),
                    g,
                    tw.data(),
                    T::zero(),
                    &mut gx,
                );
                accumulate(grads, nodes, *x, gx);
            }
            if rg(*w) {
                let mut gw = vec![T::zero(); fout * fin];
                gemm(
                    true,
                    false,
                    fout,
                    fin,
                    n,
                    T::one(),
                    g,
                    tx.data(),
                    T::zero(),
                    &mut gw,
                );
                accumulate(grads, nodes, *w, gw);
            }
            if let Some(b) = b {
                if rg(*b) {
                    let mut gb = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, nodes, *b, gb);
                }
            }
        }
        Op::Conv2d(saved) => {
            let ConvSaved {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } = saved.as_ref();
            let (tx, tw) = (val(*x), val(*w));
            let (n, c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
            let (o, k) = (tw.shape()[0], tw.shape()[2]);
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let spatial = oh * ow;
            let ckk = c * k * k;
            if rg(*w) {
                let mut gw = vec![T::zero(); o * ckk];
                for s in 0..n {
                    let gs = &g[s * o * spatial..(s + 1) * o * spatial];
                    let cs = &cols[s * ckk * spatial..(s + 1) * ckk * spatial];
                    gemm(
                        false,
                        true,
                        o,
                        ckk,
                        spatial,
                        T::one(),
                        gs,
                        cs,
                        T::one(),
                        &mut gw,
                    );
                }
                accumulate(grads, nodes, *w, gw);
            }
            if let Some(b) = b {
                if rg(*b) {
                    let mut gb = vec![T::zero(); o];
                    for s in 0..n {
                        for (ch, acc) in gb.iter_mut().enumerate() {
                            for &v in &g[(s * o + ch) * spatial..(s * o + ch + 1) * spatial] {
                                *acc += v;
                            }
                        }
                    }
                    accumulate(grads, nodes, *b, gb);
                }
            }
            if rg(*x) {
                let mut gx = vec![T::zero(); tx.numel()];
                let mut dcols = vec![T::zero(); ckk * spatial];
                for s in 0..n {
                    let gs = &g[s * o * spatial..(s + 1) * o * spatial];
                    gemm(
                        true,
                        false,
                        ckk,
                        spatial,
                        o,
                        T::one(),
                        tw.data(),
                        gs,
                        T::zero(),
                        &mut dcols,
                    );
                    let img = &mut gx[s * c * h * wd..(s + 1) * c * h * wd];
                    col2im(&dcols, c, h, wd, k, *stride, *pad, oh, ow, img);
                }
                accumulate(grads, nodes, *x, gx);
            }
        }
        Op::MaxPool { x, argmax } => {
            let mut gx = vec![T::zero(); val(*x).numel()];
            for (&gi, &src) in g.iter().zip(argmax) {
                gx[src] += gi;
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::AdaptiveAvgPool { x, out_h, out_w } => {
            let tx = val(*x);
            let (h, w) = (tx.shape()[2], tx.shape()[3]);
            let mut gx = vec![T::zero(); tx.numel()];
            for (plane, gp) in gx.chunks_mut(h * w).zip(g.chunks(out_h * out_w)) {
                for oy in 0..*out_h {
                    let (y0, y1) = adaptive_bin(oy, h, *out_h);
                    for ox in 0..*out_w {
                        let (x0, x1) = adaptive_bin(ox, w, *out_w);
                        let share =
                            gp[oy * out_w + ox] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                plane[y * w + xx] += share;
                            }
                        }
                    }
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::Sum(x) => accumulate(grads, nodes, *x, vec![g[0]; val(*x).numel()]),
        Op::Mean(x) => {
            let n = val(*x).numel();
            accumulate(grads, nodes, *x, vec![g[0] / T::from_f64(n as f64); n]);
        }
        Op::Relu(x) => {
            let gx = g
                .iter()
                .zip(val(*x).data())
                .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                .collect();
            accumulate(grads, nodes, *x, gx);
        }
        Op::Sigmoid(x) => {
            let gx = g
                .iter()
                .zip(node.value.data())
                .map(|(&gi, &y)| gi * y * (T::one() - y))
                .collect();
            accumulate(grads, nodes, *x, gx);
        }
        Op::Exp(x) => {
            let gx = g
                .iter()
                .zip(node.value.data())
                .map(|(&gi, &y)| gi * y)
                .collect();
            accumulate(grads, nodes, *x, gx);
        }
        Op::Log(x) => {
            let eps = T::from_f64(CLAMP_EPS);
            let gx = g
                .iter()
                .zip(val(*x).data())
                .map(|(&gi, &xi)| if xi < eps { T::zero() } else { gi / xi })
                .collect();
            accumulate(grads, nodes, *x, gx);
        }
        Op::BroadcastTo(x) => {
            accumulate(
                grads,
                nodes,
                *x,
                reduce_to_shape(g, val(*x).shape(), out_shape),
            );
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, g.to_vec()),
        Op::BatchNorm(saved) => {
            let BnSaved {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } = saved.as_ref();
            let tx = val(*x);
            let tg = val(*gamma);
            let (n, c) = (tx.shape()[0], tx.shape()[1]);
            let spatial = tx.numel() / (n * c);
            let count = T::from_f64((n * spatial) as f64);
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for s in 0..n {
                for ch in 0..c {
                    for i in (s * c + ch) * spatial..(s * c + ch + 1) * spatial {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            if rg(*gamma) {
                accumulate(grads, nodes, *gamma, sum_gx.clone());
            }
            if rg(*beta) {
                accumulate(grads, nodes, *beta, sum_g.clone());
            }
            if rg(*x) {
                let mut gx = vec![T::zero(); tx.numel()];
                for s in 0..n {
                    for ch in 0..c {
                        let scale = tg.data()[ch] * inv_std[ch];
                        for i in (s * c + ch) * spatial..(s * c + ch + 1) * spatial {
                            gx[i] = if *train {
                                scale * (g[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
                accumulate(grads, nodes, *x, gx);
            }
        }
        Op::ChannelScale { x, gate } => {
            let (tx, tg) = (val(*x), val(*gate));
            let spatial = tx.numel() / tg.numel();
            if rg(*x) {
                let mut gx = g.to_vec();
                for (plane, &gv) in gx.chunks_mut(spatial).zip(tg.data()) {
                    for v in plane {
                        *v *= gv;
                    }
                }
                accumulate(grads, nodes, *x, gx);
            }
            if rg(*gate) {
                let gg = g
                    .chunks(spatial)
                    .zip(tx.data().chunks(spatial))
                    .map(|(gp, xp)| {
                        gp.iter()
                            .zip(xp)
                            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                    })
                    .collect();
                accumulate(grads, nodes, *gate, gg);
            }
        }
        Op::LogSoftmax(x) => {
            let cols = out_shape[1];
            let mut gx = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(cols).zip(node.value.data().chunks(cols)) {
                let total = gr.iter().fold(T::zero(), |acc, &v| acc + v);
                gx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| gi - yi.exp() * total));
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::WeightedNll {
            logp,
            labels,
            weights,
            total,
        } => {
            let classes = weights.len();
            let mut gl = vec![T::zero(); labels.len() * classes];
            for (i, &y) in labels.iter().enumerate() {
                gl[i * classes + y] = -g[0] * weights[y] / *total;
            }
            accumulate(grads, nodes, *logp, gl);
        }
    }
}

fn clamp_den<T: Scalar>(d: T) -> T {
    let eps = T::from_f64(CLAMP_EPS);
    if d.abs() < eps {
        if d < T::zero() {
            -eps
        } else {
            eps
        }
    } else {
        d
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_softmax_row<T: Scalar>(row: &[T]) -> impl Iterator<Item = T> + '_ {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
    let lse = max + sum.ln();
    row.iter().map(move |&v| v - lse)
}

fn adaptive_bin(i: usize, size: usize, out: usize) -> (usize, usize) {
    let start = i * size / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end)
}

fn bn_dims<T: Scalar>(
    tx: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    if tx.rank() < 2 {
        return Err(Error::InvalidShape {
            op: "batch_norm",
            shape: tx.shape().to_vec(),
            reason: "expected [N, C, ...]".into(),
        });
    }
    let (n, c) = (tx.shape()[0], tx.shape()[1]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: tx.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    Ok((n, c, tx.numel() / (n * c)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[3.0, -1.5, 2.0, 7.0]));
        let out = g.matmul(i, m).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, -1.5, 2.0, 7.0]);
    }

    #[test]
    fn relu_definition() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(g.value(g.relu(x)).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_of_ones_is_window_sum() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), vec![1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[9.0; 4]);
    }

    #[test]
    fn unit_conv_is_identity_on_one_channel() {
        let g = Graph::<f32>::new();
        let data: Vec<f32> = (0..20).map(|i| i as f32 * 0.5 - 3.0).collect();
        let x = g.constant(Tensor::new(&[1, 1, 4, 5], data.clone()).unwrap());
        let w = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[2, 3], 0.7), true);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[1], vec![3.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_operation_and_shapes() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(
            err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 2]"),
            "{err}"
        );
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn log_and_div_clamp_instead_of_nan() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[3], vec![0.0, -1.0, 1.0]).unwrap(), true);
        let l = g.log(x);
        assert!(g.value(l).all_finite());
        let d = g.div(x, x).unwrap();
        assert!(g.value(d).all_finite());
        let s = g.sum(l);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().all_finite());
    }

    #[test]
    fn broadcasting_add_reduces_gradient() {
        let g = Graph::<f64>::new();
        let a = g.leaf(Tensor::ones(&[2, 3]), true);
        let b = g.leaf(Tensor::ones(&[3]), true);
        let c = g.add(a, b).unwrap();
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let g = Graph::<f32>::inference();
        let x = g.leaf(Tensor::ones(&[2]), true);
        assert!(!g.requires_grad(x));
    }

    #[test]
    fn shared_param_registers_once() {
        let g = Graph::<f32>::new();
        let w = Tensor::full(&[1], 2.0);
        let a = g.param("w", &w, true);
        let b = g.param("w", &w, true);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[4.0]);
    }
}
