//! Differentiable primitives. Each forward method records an [`Op`] holding
//! exactly what its backward rule needs; `backward_op` dispatches on it.

use std::rc::Rc;

use super::graph::{accumulate, Graph, Var};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

type Parent = Option<usize>;

pub const BN_MOMENTUM: f64 = 0.9;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelReduce {
    Max,
    /// Population standard deviation (divides by C).
    Std,
}

/// Border handling for "same" convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample (`dcb|abcd|cba`).
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    mode: PadMode,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.k / 2
    }
    fn hp(&self) -> usize {
        self.h + 2 * self.pad()
    }
    fn wp(&self) -> usize {
        self.w + 2 * self.pad()
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add {
        a: Parent,
        b: Parent,
    },
    Sub {
        a: Parent,
        b: Parent,
    },
    Mul {
        a: Parent,
        b: Parent,
        av: Rc<Tensor<T>>,
        bv: Rc<Tensor<T>>,
    },
    Div {
        a: Parent,
        b: Parent,
        av: Rc<Tensor<T>>,
        bv: Rc<Tensor<T>>,
    },
    Maximum {
        a: Parent,
        b: Parent,
        pick_a: Vec<bool>,
    },
    Scale {
        a: Parent,
        c: T,
    },
    Offset {
        a: Parent,
    },
    Sqrt {
        a: Parent,
        out: Rc<Tensor<T>>,
    },
    Sum {
        a: Parent,
        n: usize,
    },
    Mean {
        a: Parent,
        n: usize,
    },
    Reshape {
        a: Parent,
    },
    Act {
        a: Parent,
        kind: Activation,
        out: Rc<Tensor<T>>,
    },
    Linear {
        x: Parent,
        w: Parent,
        b: Parent,
        xv: Rc<Tensor<T>>,
        wv: Rc<Tensor<T>>,
        rows: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Parent,
        b: Parent,
        av: Rc<Tensor<T>>,
        bv: Rc<Tensor<T>>,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax {
        a: Parent,
        out: Rc<Tensor<T>>,
        cols: usize,
    },
    Attention {
        q: Parent,
        k: Parent,
        v: Parent,
        qv: Rc<Tensor<T>>,
        kv: Rc<Tensor<T>>,
        vv: Rc<Tensor<T>>,
        probs: Vec<T>,
        scale: T,
        dims: (usize, usize, usize),
    },
    Conv2d {
        x: Parent,
        w: Parent,
        b: Parent,
        padded: Vec<T>,
        wv: Rc<Tensor<T>>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Parent,
        gamma: Parent,
        beta: Parent,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        gv: Rc<Tensor<T>>,
        dims: (usize, usize, usize),
        train: bool,
    },
    LayerNorm {
        x: Parent,
        gamma: Parent,
        beta: Parent,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        gv: Rc<Tensor<T>>,
        d: usize,
    },
    ChannelReduce {
        x: Parent,
        kind: ChannelReduce,
        xv: Rc<Tensor<T>>,
        out: Rc<Tensor<T>>,
        argmax: Vec<u32>,
    },
    Concat {
        parts: Vec<(Parent, usize)>,
        n: usize,
        hw: usize,
    },
    Gather {
        x: Parent,
        idx: Rc<Vec<usize>>,
        src_len: usize,
    },
    ContextBroadcast {
        x: Parent,
        dims: (usize, usize, usize),
    },
    ScaleChannels {
        x: Parent,
        s: Parent,
        xv: Rc<Tensor<T>>,
        sv: Rc<Tensor<T>>,
        dims: (usize, usize, usize),
    },
    ScalePixels {
        x: Parent,
        s: Parent,
        xv: Rc<Tensor<T>>,
        sv: Rc<Tensor<T>>,
        dims: (usize, usize, usize),
    },
    ChannelProject {
        x: Parent,
        weights: Rc<Tensor<T>>,
        dims: (usize, usize, usize),
    },
}

// ---------------------------------------------------------------------------
// dense kernels

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    // narrow outputs fit in registers
    match n {
        16 => return gemm_nn_narrow::<T, 16>(a, b, out, m, k),
        32 => return gemm_nn_narrow::<T, 32>(a, b, out, m, k),
        64 => return gemm_nn_narrow::<T, 64>(a, b, out, m, k),
        _ => {}
    }
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[p,n] += a[m,p]^T * b[m,n]
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let brow = &b[i * n..(i + 1) * n];
        for (q, &av) in arow.iter().enumerate() {
            let orow = &mut out[q * n..(q + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Adds one 3x3 cross-correlation output row; `rows` holds the three padded
/// input rows of width `wp`.
fn conv3_row<T: Real>(out: &mut [T], rows: &[T], wp: usize, kern: &[T]) {
    let wd = out.len();
    let tap = |r: usize, dx: usize| &rows[r * wp + dx..r * wp + dx + wd];
    let (a0, a1, a2) = (tap(0, 0), tap(0, 1), tap(0, 2));
    let (b0, b1, b2) = (tap(1, 0), tap(1, 1), tap(1, 2));
    let (c0, c1, c2) = (tap(2, 0), tap(2, 1), tap(2, 2));
    let k = &kern[..9];
    for x in 0..wd {
        let a = k[0] * a0[x] + k[1] * a1[x] + k[2] * a2[x];
        let b = k[3] * b0[x] + k[4] * b1[x] + k[5] * b2[x];
        let c = k[6] * c0[x] + k[7] * c1[x] + k[8] * c2[x];
        out[x] = out[x] + (a + b + c);
    }
}

/// One window of `softmax(q k^T * scale) v`: `att` receives the `t x t`
/// probabilities, `out` the `t x c` result.
fn attend_window<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    (t, c, scale): (usize, usize, T),
    att: &mut [T],
    out: &mut [T],
    kt: &mut Vec<T>,
) {
    // scaled K^T, so each logit row is a sum of c contiguous axpys
    kt.resize(c * t, T::zero());
    for j in 0..t {
        for ci in 0..c {
            kt[ci * t + j] = k[j * c + ci] * scale;
        }
    }
    for i in 0..t {
        let row = &mut att[i * t..(i + 1) * t];
        row.iter_mut().for_each(|x| *x = T::zero());
        gemm_nn(&q[i * c..(i + 1) * c], kt, row, 1, c, t);
        softmax_in_place(row);
        gemm_nn(row, v, &mut out[i * c..(i + 1) * c], 1, t, c);
    }
}

fn gemm_nn_narrow<T: Real, const N: usize>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize) {
    for i in 0..m {
        weighted_rows::<T, N>(&mut out[i * N..(i + 1) * N], &a[i * k..(i + 1) * k], b);
    }
}

/// `out += sum_j w[j] * rows[j]` with the accumulator held in registers.
fn weighted_rows<T: Real, const C: usize>(out: &mut [T], w: &[T], rows: &[T]) {
    let mut acc = [T::zero(); C];
    acc.copy_from_slice(&out[..C]);
    for (&p, vrow) in w.iter().zip(rows.chunks_exact(C)) {
        for l in 0..C {
            acc[l] = acc[l] + p * vrow[l];
        }
    }
    out[..C].copy_from_slice(&acc);
}

/// Numerically stable softmax of one row, in place.
fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total = total + *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let mut bt = Vec::new();
    gemm_nt_buffered(a, b, out, m, k, n, &mut bt);
}

/// [`gemm_nt`] transposing through a caller-owned scratch buffer.
pub(crate) fn gemm_nt_buffered<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    bt: &mut Vec<T>,
) {
    bt.resize(k * n, T::zero());
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_nn(a, bt, out, m, k, n);
}

/// Maps a possibly out-of-range coordinate onto `0..n` under `mode`.
pub(crate) fn pad_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (n as isize - 1);
            let mut r = i.rem_euclid(period);
            if r >= n as isize {
                r = period - r;
            }
            Some(r as usize)
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn rank4<T: Real>(op: &'static str, v: &Var<T>) -> Result<(usize, usize, usize, usize)> {
    match v.shape()[..] {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::invalid(
            op,
            format!("expected N x C x H x W input, got {:?}", v.shape()),
        )),
    }
}

fn map<T: Real>(a: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    a.iter().map(|&v| f(v)).collect()
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

// ---------------------------------------------------------------------------
// forward

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let out = Tensor::from_parts(
            a.shape().to_vec(),
            zip_map(a.data(), b.data(), |x, y| x + y),
        );
        let track = self.tracks(&[a, b]);
        Ok(self.push(out, track, || Op::Add { a: a.id, b: b.id }))
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a, b)?;
        let out = Tensor::from_parts(
            a.shape().to_vec(),
            zip_map(a.data(), b.data(), |x, y| x - y),
        );
        let track = self.tracks(&[a, b]);
        Ok(self.push(out, track, || Op::Sub { a: a.id, b: b.id }))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let out = Tensor::from_parts(
            a.shape().to_vec(),
            zip_map(a.data(), b.data(), |x, y| x * y),
        );
        let track = self.tracks(&[a, b]);
        Ok(self.push(out, track, || Op::Mul {
            a: a.id,
            b: b.id,
            av: a.value.clone(),
            bv: b.value.clone(),
        }))
    }

    pub fn div(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("div", a, b)?;
        let out = Tensor::from_parts(
            a.shape().to_vec(),
            zip_map(a.data(), b.data(), |x, y| x / y),
        );
        let track = self.tracks(&[a, b]);
        Ok(self.push(out, track, || Op::Div {
            a: a.id,
            b: b.id,
            av: a.value.clone(),
            bv: b.value.clone(),
        }))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("maximum", a, b)?;
        let pick_a: Vec<bool> = a.data().iter().zip(b.data()).map(|(x, y)| x >= y).collect();
        let out = Tensor::from_parts(
            a.shape().to_vec(),
            zip_map(a.data(), b.data(), |x, y| if x >= y { x } else { y }),
        );
        let track = self.tracks(&[a, b]);
        Ok(self.push(out, track, || Op::Maximum {
            a: a.id,
            b: b.id,
            pick_a,
        }))
    }

    pub fn scale(&mut self, a: &Var<T>, c: T) -> Var<T> {
        let out = Tensor::from_parts(a.shape().to_vec(), map(a.data(), |x| x * c));
        let track = self.tracks(&[a]);
        self.push(out, track, || Op::Scale { a: a.id, c })
    }

    pub fn add_scalar(&mut self, a: &Var<T>, c: T) -> Var<T> {
        let out = Tensor::from_parts(a.shape().to_vec(), map(a.data(), |x| x + c));
        let track = self.tracks(&[a]);
        self.push(out, track, || Op::Offset { a: a.id })
    }

    /// Square root. The derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: &Var<T>) -> Var<T> {
        let out = Rc::new(Tensor::from_parts(
            a.shape().to_vec(),
            map(a.data(), |x| x.max(T::zero()).sqrt()),
        ));
        let track = self.tracks(&[a]);
        let saved = out.clone();
        self.push_shared(out, track, || Op::Sqrt {
            a: a.id,
            out: saved,
        })
    }

    pub fn sum(&mut self, a: &Var<T>) -> Var<T> {
        let s = a.data().iter().copied().sum();
        let track = self.tracks(&[a]);
        let n = a.value.numel();
        self.push(Tensor::scalar(s), track, || Op::Sum { a: a.id, n })
    }

    pub fn mean(&mut self, a: &Var<T>) -> Var<T> {
        let n = a.value.numel();
        let s: T = a.data().iter().copied().sum();
        let track = self.tracks(&[a]);
        self.push(Tensor::scalar(s / T::from_usize(n).unwrap()), track, || {
            Op::Mean { a: a.id, n }
        })
    }

    pub fn reshape(&mut self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = a.value.reshape(shape)?;
        let track = self.tracks(&[a]);
        Ok(self.push(out, track, || Op::Reshape { a: a.id }))
    }

    pub fn activation(&mut self, a: &Var<T>, kind: Activation) -> Var<T> {
        let values = match kind {
            Activation::Relu => map(a.data(), |x| x.max(T::zero())),
            Activation::Tanh => map(a.data(), |x| x.tanh()),
            Activation::Sigmoid => map(a.data(), sigmoid),
        };
        let out = Rc::new(Tensor::from_parts(a.shape().to_vec(), values));
        let track = self.tracks(&[a]);
        let saved = out.clone();
        self.push_shared(out, track, || Op::Act {
            a: a.id,
            kind,
            out: saved,
        })
    }

    pub fn relu(&mut self, a: &Var<T>) -> Var<T> {
        self.activation(a, Activation::Relu)
    }

    pub fn tanh(&mut self, a: &Var<T>) -> Var<T> {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: &Var<T>) -> Var<T> {
        self.activation(a, Activation::Sigmoid)
    }

    /// Plain 2-D matrix product `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.value.rank() != 2 || b.value.rank() != 2 {
            return Err(Error::invalid(
                "matmul",
                format!("expected matrices, got {:?} and {:?}", a.shape(), b.shape()),
            ));
        }
        self.linear(a, b, None)
    }

    /// Applies `x * w (+ b)` over the last axis of `x`; leading axes are rows.
    pub fn linear(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::shape("linear", xs, ws));
        }
        let (k, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if b.shape() != [n] {
                return Err(Error::shape("linear bias", b.shape(), &[n]));
            }
        }
        let rows = x.value.numel() / k;
        let mut out = match b {
            Some(b) => {
                let mut o = Vec::with_capacity(rows * n);
                for _ in 0..rows {
                    o.extend_from_slice(b.data());
                }
                o
            }
            None => vec![T::zero(); rows * n],
        };
        gemm_nn(x.data(), w.data(), &mut out, rows, k, n);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n;
        let track = match b {
            Some(b) => self.tracks(&[x, w, b]),
            None => self.tracks(&[x, w]),
        };
        Ok(
            self.push(Tensor::from_parts(shape, out), track, || Op::Linear {
                x: x.id,
                w: w.id,
                b: b.and_then(|b| b.id),
                xv: x.value.clone(),
                wv: w.value.clone(),
                rows,
                k,
                n,
            }),
        )
    }

    /// Batched product `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: &Var<T>, b: &Var<T>, trans_b: bool) -> Result<Var<T>> {
        let (as_, bs) = (a.shape(), b.shape());
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(Error::shape("bmm", as_, bs));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (bk, n) = if trans_b {
            (bs[2], bs[1])
        } else {
            (bs[1], bs[2])
        };
        if bk != k {
            return Err(Error::shape("bmm", as_, bs));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let mut scratch = Vec::new();
        for i in 0..batch {
            let ab = &a.data()[i * m * k..(i + 1) * m * k];
            let bb = &b.data()[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt_buffered(ab, bb, ob, m, k, n, &mut scratch);
            } else {
                gemm_nn(ab, bb, ob, m, k, n);
            }
        }
        let track = self.tracks(&[a, b]);
        Ok(
            self.push(Tensor::from_parts(vec![batch, m, n], out), track, || {
                Op::Bmm {
                    a: a.id,
                    b: b.id,
                    av: a.value.clone(),
                    bv: b.value.clone(),
                    batch,
                    m,
                    k,
                    n,
                    trans_b,
                }
            }),
        )
    }

    /// Softmax over the last axis, with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let cols = *a
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("softmax_rows", "scalar input"))?;
        let mut out = a.data().to_vec();
        if cols > 0 {
            out.chunks_mut(cols).for_each(softmax_in_place);
        }
        let out = Rc::new(Tensor::from_parts(a.shape().to_vec(), out));
        let track = self.tracks(&[a]);
        let saved = out.clone();
        Ok(self.push_shared(out, track, || Op::Softmax {
            a: a.id,
            out: saved,
            cols,
        }))
    }

    /// `softmax(Q K^T * scale) V` independently per leading index of
    /// `[B, T, C]` inputs. Same result as the bmm/softmax chain, but the
    /// `T x T` probabilities are only kept when a gradient is recorded.
    pub fn attention(&mut self, q: &Var<T>, k: &Var<T>, v: &Var<T>, scale: T) -> Result<Var<T>> {
        let (b, t, c) = match q.shape()[..] {
            [b, t, c] => (b, t, c),
            _ => return Err(Error::shape("attention", q.shape(), &[0, 0, 0])),
        };
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(Error::shape(
                "attention",
                q.shape(),
                if k.shape() != q.shape() {
                    k.shape()
                } else {
                    v.shape()
                },
            ));
        }
        let track = self.tracks(&[q, k, v]);
        let mut probs = if track {
            vec![T::zero(); b * t * t]
        } else {
            Vec::new()
        };
        let mut scratch = vec![T::zero(); t * t];
        let mut kt = Vec::new();
        let mut out = vec![T::zero(); b * t * c];
        for i in 0..b {
            let span = i * t * c..(i + 1) * t * c;
            let att = if track {
                &mut probs[i * t * t..(i + 1) * t * t]
            } else {
                &mut scratch[..]
            };
            attend_window(
                &q.data()[span.clone()],
                &k.data()[span.clone()],
                &v.data()[span.clone()],
                (t, c, scale),
                att,
                &mut out[span],
                &mut kt,
            );
        }
        Ok(
            self.push(Tensor::from_parts(vec![b, t, c], out), track, || {
                Op::Attention {
                    q: q.id,
                    k: k.id,
                    v: v.id,
                    qv: q.value.clone(),
                    kv: k.value.clone(),
                    vv: v.value.clone(),
                    probs,
                    scale,
                    dims: (b, t, c),
                }
            }),
        )
    }

    /// "Same" 2-D cross-correlation (no kernel flip), stride 1.
    pub fn conv2d(
        &mut self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        mode: PadMode,
    ) -> Result<Var<T>> {
        let (n, cin, h, wd) = rank4("conv2d", x)?;
        let ws = w.shape();
        if ws.len() != 4 || ws[1] != cin {
            return Err(Error::shape("conv2d (input vs weight)", x.shape(), ws));
        }
        let (cout, k) = (ws[0], ws[2]);
        if ws[3] != k || k % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be square with odd size, got {ws:?}"),
            ));
        }
        if h == 0 || wd == 0 {
            return Err(Error::invalid("conv2d", "empty spatial extent"));
        }
        if let Some(b) = b {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d bias", b.shape(), &[cout]));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            k,
            mode,
        };
        let padded = pad_input(x.data(), &geom);
        let (hp, wp) = (geom.hp(), geom.wp());
        let wdata = w.data();
        let mut out = vec![T::zero(); n * cout * h * wd];
        // one output row at a time, one input channel's k rows at a time,
        // so the working set stays in L1
        for ni in 0..n {
            for y in 0..h {
                for co in 0..cout {
                    let start = ((ni * cout + co) * h + y) * wd;
                    let bv = b.map_or(T::zero(), |b| b.data()[co]);
                    out[start..start + wd].iter_mut().for_each(|v| *v = bv);
                }
                for ci in 0..cin {
                    let src = &padded[(ni * cin + ci) * hp * wp..(ni * cin + ci + 1) * hp * wp];
                    for co in 0..cout {
                        let start = ((ni * cout + co) * h + y) * wd;
                        let orow = &mut out[start..start + wd];
                        let kern = &wdata[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
                        if k == 3 {
                            conv3_row(orow, &src[y * wp..(y + 3) * wp], wp, kern);
                            continue;
                        }
                        for ky in 0..k {
                            let row = &src[(y + ky) * wp..(y + ky + 1) * wp];
                            for kx in 0..k {
                                let wv = kern[ky * k + kx];
                                for (o, &s) in orow.iter_mut().zip(&row[kx..kx + wd]) {
                                    *o = *o + wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        let track = match b {
            Some(b) => self.tracks(&[x, w, b]),
            None => self.tracks(&[x, w]),
        };
        Ok(
            self.push(Tensor::from_parts(vec![n, cout, h, wd], out), track, || {
                Op::Conv2d {
                    x: x.id,
                    w: w.id,
                    b: b.and_then(|b| b.id),
                    padded,
                    wv: w.value.clone(),
                    geom,
                }
            }),
        )
    }

    /// Batch normalization over `N x H x W` per channel. In train mode the
    /// updated running statistics are returned alongside the output.
    pub fn batchnorm2d(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        running: &BatchNormState<T>,
        mode: NormMode,
    ) -> Result<(Var<T>, Option<BatchNormState<T>>)> {
        let (n, c, h, w) = rank4("batchnorm2d", x)?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("batchnorm2d", gamma.shape(), &[c]));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape(
                "batchnorm2d running stats",
                &[running.mean.len()],
                &[c],
            ));
        }
        let hw = h * w;
        let m = n * hw;
        let train = mode == NormMode::Train;
        if train && m < 2 {
            return Err(Error::DegenerateBatch(m));
        }
        let eps = T::lit(NORM_EPS);
        let xd = x.data();
        let mut mean = running.mean.clone();
        let mut var = running.var.clone();
        let mut updated = None;
        if train {
            let mf = T::from_usize(m).unwrap();
            let mut new_state = running.clone();
            let mom = T::lit(BN_MOMENTUM);
            for ci in 0..c {
                let mut s = T::zero();
                for ni in 0..n {
                    s = s + xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                        .iter()
                        .copied()
                        .sum();
                }
                let mu = s / mf;
                let mut ss = T::zero();
                for ni in 0..n {
                    for &v in &xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                        ss = ss + (v - mu) * (v - mu);
                    }
                }
                mean[ci] = mu;
                var[ci] = ss / mf;
                let unbiased = ss / T::from_usize(m - 1).unwrap();
                new_state.mean[ci] = mom * running.mean[ci] + (T::one() - mom) * mu;
                new_state.var[ci] = mom * running.var[ci] + (T::one() - mom) * unbiased;
            }
            updated = Some(new_state);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let track = self.tracks(&[x, gamma, beta]);
        // normalized activations are only needed by the backward pass
        let mut xhat = if track {
            vec![T::zero(); xd.len()]
        } else {
            Vec::new()
        };
        let mut out = vec![T::zero(); xd.len()];
        let (gd, bd) = (gamma.data(), beta.data());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let (mu, is, ga, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                for (o, &v) in out[base..base + hw].iter_mut().zip(&xd[base..base + hw]) {
                    *o = ga * ((v - mu) * is) + be;
                }
                if track {
                    for (xh, &v) in xhat[base..base + hw].iter_mut().zip(&xd[base..base + hw]) {
                        *xh = (v - mu) * is;
                    }
                }
            }
        }
        let var = self.push(Tensor::from_parts(x.shape().to_vec(), out), track, || {
            Op::BatchNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                gv: gamma.value.clone(),
                dims: (n, c, hw),
                train,
            }
        });
        Ok((var, updated))
    }

    /// Standardizes each row over the last axis, then applies a per-feature
    /// scale and shift.
    pub fn layer_norm(&mut self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape("layer_norm", gamma.shape(), &[d]));
        }
        let eps = T::lit(NORM_EPS);
        let df = T::from_usize(d).unwrap();
        let xd = x.data();
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        let (gd, bd) = (gamma.data(), beta.data());
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        let track = self.tracks(&[x, gamma, beta]);
        Ok(
            self.push(Tensor::from_parts(x.shape().to_vec(), out), track, || {
                Op::LayerNorm {
                    x: x.id,
                    gamma: gamma.id,
                    beta: beta.id,
                    xhat,
                    inv_std,
                    gv: gamma.value.clone(),
                    d,
                }
            }),
        )
    }

    /// Per-pixel reduction across channels: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn channel_reduce(&mut self, x: &Var<T>, kind: ChannelReduce) -> Result<Var<T>> {
        let (n, c, h, w) = rank4("channel_reduce", x)?;
        if c == 0 {
            return Err(Error::invalid("channel_reduce", "no channels"));
        }
        let hw = h * w;
        let xd = x.data();
        let mut out = vec![T::zero(); n * hw];
        let mut argmax = Vec::new();
        match kind {
            // plane-by-plane sweeps; per pixel the arithmetic order is the
            // plain channel loop's
            ChannelReduce::Max => {
                argmax = vec![0u32; n * hw];
                for ni in 0..n {
                    let best = &mut out[ni * hw..(ni + 1) * hw];
                    let arg = &mut argmax[ni * hw..(ni + 1) * hw];
                    best.copy_from_slice(&xd[ni * c * hw..(ni * c + 1) * hw]);
                    for ci in 1..c {
                        let plane = &xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        for ((b, a), &v) in best.iter_mut().zip(arg.iter_mut()).zip(plane) {
                            if v > *b {
                                *b = v;
                                *a = ci as u32;
                            }
                        }
                    }
                }
            }
            ChannelReduce::Std => {
                let cf = T::from_usize(c).unwrap();
                let mut mu = vec![T::zero(); hw];
                for ni in 0..n {
                    let planes = &xd[ni * c * hw..(ni + 1) * c * hw];
                    mu.iter_mut().for_each(|m| *m = T::zero());
                    for plane in planes.chunks_exact(hw.max(1)) {
                        mu.iter_mut().zip(plane).for_each(|(m, &v)| *m = *m + v);
                    }
                    mu.iter_mut().for_each(|m| *m = *m / cf);
                    let ss = &mut out[ni * hw..(ni + 1) * hw];
                    for plane in planes.chunks_exact(hw.max(1)) {
                        for ((acc, &m), &v) in ss.iter_mut().zip(&mu).zip(plane) {
                            let d = v - m;
                            *acc = *acc + d * d;
                        }
                    }
                    ss.iter_mut().for_each(|v| *v = (*v / cf).sqrt());
                }
            }
        }
        let out = Rc::new(Tensor::from_parts(vec![n, 1, h, w], out));
        let track = self.tracks(&[x]);
        let saved = out.clone();
        Ok(self.push_shared(out, track, || Op::ChannelReduce {
            x: x.id,
            kind,
            xv: x.value.clone(),
            out: saved,
            argmax,
        }))
    }

    /// Stacks `N x Ci x H x W` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "nothing to concatenate"))?;
        let (n, _, h, w) = rank4("concat_channels", first)?;
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, ph, pw) = rank4("concat_channels", p)?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape("concat_channels", first.shape(), p.shape()));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for ni in 0..n {
            for p in parts {
                let pc = p.shape()[1];
                out.extend_from_slice(&p.data()[ni * pc * hw..(ni + 1) * pc * hw]);
            }
        }
        let track = self.tracks(parts);
        let meta: Vec<(Parent, usize)> = parts.iter().map(|p| (p.id, p.shape()[1])).collect();
        Ok(self.push(
            Tensor::from_parts(vec![n, total_c, h, w], out),
            track,
            || Op::Concat { parts: meta, n, hw },
        ))
    }

    /// `out[i] = x[idx[i]]`. Indices may repeat; the backward pass
    /// scatter-adds.
    pub fn gather(&mut self, x: &Var<T>, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<T>> {
        if numel(shape) != idx.len() {
            return Err(Error::invalid(
                "gather",
                format!("{} indices for output shape {shape:?}", idx.len()),
            ));
        }
        let src_len = x.value.numel();
        if idx.iter().any(|&i| i >= src_len) {
            return Err(Error::invalid("gather", "index out of range"));
        }
        let xd = x.data();
        let out: Vec<T> = idx.iter().map(|&i| xd[i]).collect();
        let track = self.tracks(&[x]);
        Ok(
            self.push(Tensor::from_parts(shape.to_vec(), out), track, || {
                Op::Gather {
                    x: x.id,
                    idx,
                    src_len,
                }
            }),
        )
    }

    /// Parameter-free token mixing over `[B, tokens, D]`:
    /// `out_n = x_n / 2 + mean(x) / 2` within each batch entry.
    pub fn context_broadcast(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let (b, t, d) = match x.shape()[..] {
            [b, t, d] if t > 0 => (b, t, d),
            _ => {
                return Err(Error::invalid(
                    "context_broadcast",
                    format!("expected [B, tokens >= 1, D], got {:?}", x.shape()),
                ))
            }
        };
        let out = context_mix(x.data(), b, t, d);
        let track = self.tracks(&[x]);
        Ok(
            self.push(Tensor::from_parts(x.shape().to_vec(), out), track, || {
                Op::ContextBroadcast {
                    x: x.id,
                    dims: (b, t, d),
                }
            }),
        )
    }

    /// `x[N,C,H,W] * s[N,C]` broadcast over space.
    pub fn scale_channels(&mut self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = rank4("scale_channels", x)?;
        if s.shape() != [n, c] {
            return Err(Error::shape("scale_channels", x.shape(), s.shape()));
        }
        let hw = h * w;
        let mut out = x.data().to_vec();
        for (plane, &sv) in out.chunks_mut(hw.max(1)).zip(s.data()) {
            plane.iter_mut().for_each(|v| *v = *v * sv);
        }
        let track = self.tracks(&[x, s]);
        Ok(
            self.push(Tensor::from_parts(x.shape().to_vec(), out), track, || {
                Op::ScaleChannels {
                    x: x.id,
                    s: s.id,
                    xv: x.value.clone(),
                    sv: s.value.clone(),
                    dims: (n, c, hw),
                }
            }),
        )
    }

    /// `x[N,C,H,W] * s[N,1,H,W]` broadcast over channels.
    pub fn scale_pixels(&mut self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = rank4("scale_pixels", x)?;
        if s.shape() != [n, 1, h, w] {
            return Err(Error::shape("scale_pixels", x.shape(), s.shape()));
        }
        let hw = h * w;
        let mut out = x.data().to_vec();
        let sd = s.data();
        for ni in 0..n {
            let sp = &sd[ni * hw..(ni + 1) * hw];
            for ci in 0..c {
                let plane = &mut out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for (v, &f) in plane.iter_mut().zip(sp) {
                    *v = *v * f;
                }
            }
        }
        let track = self.tracks(&[x, s]);
        Ok(
            self.push(Tensor::from_parts(x.shape().to_vec(), out), track, || {
                Op::ScalePixels {
                    x: x.id,
                    s: s.id,
                    xv: x.value.clone(),
                    sv: s.value.clone(),
                    dims: (n, c, hw),
                }
            }),
        )
    }

    /// `out[n,c] = sum_hw weights[c,h,w] * x[n,c,h,w]` with constant weights.
    pub fn channel_project(&mut self, x: &Var<T>, weights: Rc<Tensor<T>>) -> Result<Var<T>> {
        let (n, c, h, w) = rank4("channel_project", x)?;
        if weights.shape() != [c, h, w] {
            return Err(Error::shape("channel_project", x.shape(), weights.shape()));
        }
        let hw = h * w;
        let xd = x.data();
        let wd = weights.data();
        let mut out = vec![T::zero(); n * c];
        for ni in 0..n {
            for ci in 0..c {
                let xs = &xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                let ws = &wd[ci * hw..(ci + 1) * hw];
                out[ni * c + ci] = xs.iter().zip(ws).map(|(&a, &b)| a * b).sum();
            }
        }
        let track = self.tracks(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), track, || {
            Op::ChannelProject {
                x: x.id,
                weights,
                dims: (n, c, hw),
            }
        }))
    }
}

fn context_mix<T: Real>(x: &[T], b: usize, t: usize, d: usize) -> Vec<T> {
    let half = T::lit(0.5);
    let scale = half / T::from_usize(t).unwrap();
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        let block = &x[bi * t * d..(bi + 1) * t * d];
        let mut colsum = vec![T::zero(); d];
        for row in block.chunks(d) {
            colsum.iter_mut().zip(row).for_each(|(s, &v)| *s = *s + v);
        }
        let shift: Vec<T> = colsum.iter().map(|&s| s * scale).collect();
        let oblock = &mut out[bi * t * d..(bi + 1) * t * d];
        for (orow, row) in oblock.chunks_mut(d).zip(block.chunks(d)) {
            for j in 0..d {
                orow[j] = half * row[j] + shift[j];
            }
        }
    }
    out
}

fn pad_input<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.pad() as isize;
    let (hp, wp) = (g.hp(), g.wp());
    let rows: Vec<Option<usize>> = (0..hp)
        .map(|y| pad_index(y as isize - p, g.h, g.mode))
        .collect();
    let cols: Vec<Option<usize>> = (0..wp)
        .map(|c| pad_index(c as isize - p, g.w, g.mode))
        .collect();
    let mut out = vec![T::zero(); g.n * g.cin * hp * wp];
    for plane in 0..g.n * g.cin {
        let src = &x[plane * g.h * g.w..(plane + 1) * g.h * g.w];
        let dst = &mut out[plane * hp * wp..(plane + 1) * hp * wp];
        for (y, ry) in rows.iter().enumerate() {
            let Some(sy) = ry else { continue };
            for (c, rc) in cols.iter().enumerate() {
                if let Some(sx) = rc {
                    dst[y * wp + c] = src[sy * g.w + sx];
                }
            }
        }
    }
    out
}

/// Folds a gradient over the padded input back onto the original pixels.
fn unpad_grad<T: Real>(dp: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.pad() as isize;
    let (hp, wp) = (g.hp(), g.wp());
    let rows: Vec<Option<usize>> = (0..hp)
        .map(|y| pad_index(y as isize - p, g.h, g.mode))
        .collect();
    let cols: Vec<Option<usize>> = (0..wp)
        .map(|c| pad_index(c as isize - p, g.w, g.mode))
        .collect();
    let mut out = vec![T::zero(); g.n * g.cin * g.h * g.w];
    for plane in 0..g.n * g.cin {
        let src = &dp[plane * hp * wp..(plane + 1) * hp * wp];
        let dst = &mut out[plane * g.h * g.w..(plane + 1) * g.h * g.w];
        for (y, ry) in rows.iter().enumerate() {
            let Some(sy) = ry else { continue };
            for (c, rc) in cols.iter().enumerate() {
                if let Some(sx) = rc {
                    dst[sy * g.w + sx] = dst[sy * g.w + sx] + src[y * wp + c];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// backward

pub(crate) fn backward_op<T: Real>(op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            accumulate(grads, *a, || g.to_vec());
            accumulate(grads, *b, || g.to_vec());
        }
        Op::Sub { a, b } => {
            accumulate(grads, *a, || g.to_vec());
            accumulate(grads, *b, || map(g, |v| -v));
        }
        Op::Mul { a, b, av, bv } => {
            accumulate(grads, *a, || zip_map(g, bv.data(), |d, y| d * y));
            accumulate(grads, *b, || zip_map(g, av.data(), |d, x| d * x));
        }
        Op::Div { a, b, av, bv } => {
            accumulate(grads, *a, || zip_map(g, bv.data(), |d, y| d / y));
            accumulate(grads, *b, || {
                g.iter()
                    .zip(av.data())
                    .zip(bv.data())
                    .map(|((&d, &x), &y)| -d * x / (y * y))
                    .collect()
            });
        }
        Op::Maximum { a, b, pick_a } => {
            accumulate(grads, *a, || {
                g.iter()
                    .zip(pick_a)
                    .map(|(&d, &p)| if p { d } else { T::zero() })
                    .collect()
            });
            accumulate(grads, *b, || {
                g.iter()
                    .zip(pick_a)
                    .map(|(&d, &p)| if p { T::zero() } else { d })
                    .collect()
            });
        }
        Op::Scale { a, c } => accumulate(grads, *a, || map(g, |d| d * *c)),
        Op::Offset { a } => accumulate(grads, *a, || g.to_vec()),
        Op::Sqrt { a, out } => accumulate(grads, *a, || {
            zip_map(g, out.data(), |d, y| {
                if y > T::zero() {
                    d / (y + y)
                } else {
                    T::zero()
                }
            })
        }),
        Op::Sum { a, n } => accumulate(grads, *a, || vec![g[0]; *n]),
        Op::Mean { a, n } => accumulate(grads, *a, || vec![g[0] / T::from_usize(*n).unwrap(); *n]),
        Op::Reshape { a } => accumulate(grads, *a, || g.to_vec()),
        Op::Act { a, kind, out } => accumulate(grads, *a, || {
            let f: fn(T, T) -> T = match kind {
                Activation::Relu => |d, y| if y > T::zero() { d } else { T::zero() },
                Activation::Tanh => |d, y| d * (T::one() - y * y),
                Activation::Sigmoid => |d, y| d * y * (T::one() - y),
            };
            zip_map(g, out.data(), f)
        }),
        Op::Linear {
            x,
            w,
            b,
            xv,
            wv,
            rows,
            k,
            n,
        } => {
            let (rows, k, n) = (*rows, *k, *n);
            accumulate(grads, *x, || {
                let mut dx = vec![T::zero(); rows * k];
                gemm_nt(g, wv.data(), &mut dx, rows, n, k);
                dx
            });
            accumulate(grads, *w, || {
                let mut dw = vec![T::zero(); k * n];
                gemm_tn(xv.data(), g, &mut dw, rows, k, n);
                dw
            });
            accumulate(grads, *b, || {
                let mut db = vec![T::zero(); n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(s, &v)| *s = *s + v);
                }
                db
            });
        }
        Op::Bmm {
            a,
            b,
            av,
            bv,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            accumulate(grads, *a, || {
                let mut da = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    let gb = &g[i * m * n..(i + 1) * m * n];
                    let bb = &bv.data()[i * k * n..(i + 1) * k * n];
                    let out = &mut da[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        gemm_nn(gb, bb, out, m, n, k);
                    } else {
                        gemm_nt(gb, bb, out, m, n, k);
                    }
                }
                da
            });
            accumulate(grads, *b, || {
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let gb = &g[i * m * n..(i + 1) * m * n];
                    let ab = &av.data()[i * m * k..(i + 1) * m * k];
                    let out = &mut db[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        gemm_tn(gb, ab, out, m, n, k);
                    } else {
                        gemm_tn(ab, gb, out, m, k, n);
                    }
                }
                db
            });
        }
        Op::Softmax { a, out, cols } => accumulate(grads, *a, || {
            let mut dx = vec![T::zero(); g.len()];
            for ((drow, grow), yrow) in dx
                .chunks_mut(*cols)
                .zip(g.chunks(*cols))
                .zip(out.data().chunks(*cols))
            {
                let dot: T = grow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                for j in 0..*cols {
                    drow[j] = yrow[j] * (grow[j] - dot);
                }
            }
            dx
        }),
        Op::Attention {
            q,
            k,
            v,
            qv,
            kv,
            vv,
            probs,
            scale,
            dims: (b, t, c),
        } => {
            let (b, t, c) = (*b, *t, *c);
            accumulate(grads, *v, || {
                let mut dv = vec![T::zero(); b * t * c];
                for i in 0..b {
                    let att = &probs[i * t * t..(i + 1) * t * t];
                    gemm_tn(
                        att,
                        &g[i * t * c..(i + 1) * t * c],
                        &mut dv[i * t * c..(i + 1) * t * c],
                        t,
                        t,
                        c,
                    );
                }
                dv
            });
            if q.is_none() && k.is_none() {
                return;
            }
            // d(logits) = scale * att * (d(att) - rowdot(d(att), att))
            let mut dl = vec![T::zero(); b * t * t];
            let mut scratch = Vec::new();
            for i in 0..b {
                let att = &probs[i * t * t..(i + 1) * t * t];
                let dli = &mut dl[i * t * t..(i + 1) * t * t];
                gemm_nt_buffered(
                    &g[i * t * c..(i + 1) * t * c],
                    &vv.data()[i * t * c..(i + 1) * t * c],
                    dli,
                    t,
                    c,
                    t,
                    &mut scratch,
                );
                for (drow, arow) in dli.chunks_mut(t.max(1)).zip(att.chunks(t.max(1))) {
                    let dot: T = drow.iter().zip(arow).map(|(&d, &a)| d * a).sum();
                    for (d, &a) in drow.iter_mut().zip(arow) {
                        *d = *scale * a * (*d - dot);
                    }
                }
            }
            accumulate(grads, *q, || {
                let mut dq = vec![T::zero(); b * t * c];
                for i in 0..b {
                    gemm_nn(
                        &dl[i * t * t..(i + 1) * t * t],
                        &kv.data()[i * t * c..(i + 1) * t * c],
                        &mut dq[i * t * c..(i + 1) * t * c],
                        t,
                        t,
                        c,
                    );
                }
                dq
            });
            accumulate(grads, *k, || {
                let mut dk = vec![T::zero(); b * t * c];
                for i in 0..b {
                    gemm_tn(
                        &dl[i * t * t..(i + 1) * t * t],
                        &qv.data()[i * t * c..(i + 1) * t * c],
                        &mut dk[i * t * c..(i + 1) * t * c],
                        t,
                        t,
                        c,
                    );
                }
                dk
            });
        }
        Op::Conv2d {
            x,
            w,
            b,
            padded,
            wv,
            geom,
        } => conv_backward(g, grads, *x, *w, *b, padded, wv, geom),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            gv,
            dims,
            train,
        } => {
            let (n, c, hw) = *dims;
            let m = T::from_usize(n * hw).unwrap();
            accumulate(grads, *beta, || {
                let mut db = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        db[ci] = db[ci]
                            + g[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                                .iter()
                                .copied()
                                .sum();
                    }
                }
                db
            });
            accumulate(grads, *gamma, || {
                let mut dg = vec![T::zero(); c];
                for ni in 0..n {
                    for (ci, dgc) in dg.iter_mut().enumerate() {
                        let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                        *dgc = *dgc
                            + g[r.clone()]
                                .iter()
                                .zip(&xhat[r])
                                .map(|(&d, &xh)| d * xh)
                                .sum();
                    }
                }
                dg
            });
            accumulate(grads, *x, || {
                let gd = gv.data();
                let mut dx = vec![T::zero(); g.len()];
                for ci in 0..c {
                    let scale = gd[ci] * inv_std[ci];
                    if !*train {
                        for ni in 0..n {
                            let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                            for i in r {
                                dx[i] = g[i] * scale;
                            }
                        }
                        continue;
                    }
                    let mut sd = T::zero();
                    let mut sdx = T::zero();
                    for ni in 0..n {
                        for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                            sd = sd + g[i];
                            sdx = sdx + g[i] * xhat[i];
                        }
                    }
                    for ni in 0..n {
                        for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                            dx[i] = scale / m * (m * g[i] - sd - xhat[i] * sdx);
                        }
                    }
                }
                dx
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            gv,
            d,
        } => {
            let d = *d;
            accumulate(grads, *beta, || {
                let mut db = vec![T::zero(); d];
                for row in g.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(s, &v)| *s = *s + v);
                }
                db
            });
            accumulate(grads, *gamma, || {
                let mut dg = vec![T::zero(); d];
                for (row, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] = dg[j] + row[j] * xr[j];
                    }
                }
                dg
            });
            accumulate(grads, *x, || {
                let gd = gv.data();
                let df = T::from_usize(d).unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for (r, ((drow, grow), xr)) in dx
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(xhat.chunks(d))
                    .enumerate()
                {
                    let mut sd = T::zero();
                    let mut sdx = T::zero();
                    for j in 0..d {
                        let dxh = grow[j] * gd[j];
                        sd = sd + dxh;
                        sdx = sdx + dxh * xr[j];
                    }
                    for j in 0..d {
                        let dxh = grow[j] * gd[j];
                        drow[j] = inv_std[r] / df * (df * dxh - sd - xr[j] * sdx);
                    }
                }
                dx
            });
        }
        Op::ChannelReduce {
            x,
            kind,
            xv,
            out,
            argmax,
        } => accumulate(grads, *x, || {
            let (n, c, h, w) = xv.dims4().expect("rank 4");
            let hw = h * w;
            let xd = xv.data();
            let mut dx = vec![T::zero(); xd.len()];
            match kind {
                ChannelReduce::Max => {
                    for ni in 0..n {
                        for p in 0..hw {
                            let ci = argmax[ni * hw + p] as usize;
                            dx[(ni * c + ci) * hw + p] = g[ni * hw + p];
                        }
                    }
                }
                ChannelReduce::Std => {
                    let cf = T::from_usize(c).unwrap();
                    for ni in 0..n {
                        for p in 0..hw {
                            let s = out.data()[ni * hw + p];
                            if s <= T::zero() {
                                continue;
                            }
                            let mu = (0..c).map(|ci| xd[(ni * c + ci) * hw + p]).sum::<T>() / cf;
                            let f = g[ni * hw + p] / (cf * s);
                            for ci in 0..c {
                                let i = (ni * c + ci) * hw + p;
                                dx[i] = (xd[i] - mu) * f;
                            }
                        }
                    }
                }
            }
            dx
        }),
        Op::Concat { parts, n, hw } => {
            let total: usize = parts.iter().map(|(_, c)| c).sum();
            let mut offset = 0;
            for (p, pc) in parts {
                let off = offset;
                accumulate(grads, *p, || {
                    let mut d = Vec::with_capacity(n * pc * hw);
                    for ni in 0..*n {
                        let start = (ni * total + off) * hw;
                        d.extend_from_slice(&g[start..start + pc * hw]);
                    }
                    d
                });
                offset += pc;
            }
        }
        Op::Gather { x, idx, src_len } => accumulate(grads, *x, || {
            let mut dx = vec![T::zero(); *src_len];
            for (&i, &d) in idx.iter().zip(g) {
                dx[i] = dx[i] + d;
            }
            dx
        }),
        Op::ContextBroadcast { x, dims } => {
            let (b, t, d) = *dims;
            // The mixing matrix is symmetric, so the adjoint is the same map.
            accumulate(grads, *x, || context_mix(g, b, t, d));
        }
        Op::ScaleChannels { x, s, xv, sv, dims } => {
            let (n, c, hw) = *dims;
            accumulate(grads, *x, || {
                let mut dx = g.to_vec();
                for (plane, &f) in dx.chunks_mut(hw.max(1)).zip(sv.data()) {
                    plane.iter_mut().for_each(|v| *v = *v * f);
                }
                dx
            });
            accumulate(grads, *s, || {
                (0..n * c)
                    .map(|i| {
                        g[i * hw..(i + 1) * hw]
                            .iter()
                            .zip(&xv.data()[i * hw..(i + 1) * hw])
                            .map(|(&d, &v)| d * v)
                            .sum()
                    })
                    .collect()
            });
        }
        Op::ScalePixels { x, s, xv, sv, dims } => {
            let (n, c, hw) = *dims;
            accumulate(grads, *x, || {
                let mut dx = g.to_vec();
                for ni in 0..n {
                    let sp = &sv.data()[ni * hw..(ni + 1) * hw];
                    for ci in 0..c {
                        let plane = &mut dx[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        plane.iter_mut().zip(sp).for_each(|(v, &f)| *v = *v * f);
                    }
                }
                dx
            });
            accumulate(grads, *s, || {
                let mut ds = vec![T::zero(); n * hw];
                let xd = xv.data();
                for ni in 0..n {
                    let dst = &mut ds[ni * hw..(ni + 1) * hw];
                    for ci in 0..c {
                        let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                        for ((o, &d), &v) in dst.iter_mut().zip(&g[r.clone()]).zip(&xd[r]) {
                            *o = *o + d * v;
                        }
                    }
                }
                ds
            });
        }
        Op::ChannelProject { x, weights, dims } => {
            let (n, c, hw) = *dims;
            accumulate(grads, *x, || {
                let wd = weights.data();
                let mut dx = vec![T::zero(); n * c * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        let d = g[ni * c + ci];
                        let dst = &mut dx[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        for (o, &wv) in dst.iter_mut().zip(&wd[ci * hw..(ci + 1) * hw]) {
                            *o = d * wv;
                        }
                    }
                }
                dx
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    g: &[T],
    grads: &mut [Option<Vec<T>>],
    x: Parent,
    w: Parent,
    b: Parent,
    padded: &[T],
    wv: &Tensor<T>,
    geom: &ConvGeom,
) {
    let ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        k,
        ..
    } = *geom;
    let (hp, wp) = (geom.hp(), geom.wp());
    accumulate(grads, b, || {
        let mut db = vec![T::zero(); cout];
        for ni in 0..n {
            for co in 0..cout {
                db[co] = db[co]
                    + g[(ni * cout + co) * h * wd..(ni * cout + co + 1) * h * wd]
                        .iter()
                        .copied()
                        .sum();
            }
        }
        db
    });
    accumulate(grads, w, || {
        let mut dw = vec![T::zero(); cout * cin * k * k];
        for ni in 0..n {
            for co in 0..cout {
                let gp = &g[(ni * cout + co) * h * wd..(ni * cout + co + 1) * h * wd];
                for ci in 0..cin {
                    let src = &padded[(ni * cin + ci) * hp * wp..(ni * cin + ci + 1) * hp * wp];
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = T::zero();
                            for y in 0..h {
                                let srow = &src[(y + ky) * wp + kx..(y + ky) * wp + kx + wd];
                                let grow = &gp[y * wd..(y + 1) * wd];
                                acc = acc + grow.iter().zip(srow).map(|(&a, &s)| a * s).sum();
                            }
                            let i = ((co * cin + ci) * k + ky) * k + kx;
                            dw[i] = dw[i] + acc;
                        }
                    }
                }
            }
        }
        dw
    });
    accumulate(grads, x, || {
        let wdata = wv.data();
        let mut dp = vec![T::zero(); n * cin * hp * wp];
        for ni in 0..n {
            for co in 0..cout {
                let gp = &g[(ni * cout + co) * h * wd..(ni * cout + co + 1) * h * wd];
                for ci in 0..cin {
                    let dst = &mut dp[(ni * cin + ci) * hp * wp..(ni * cin + ci + 1) * hp * wp];
                    let kern = &wdata[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = kern[ky * k + kx];
                            for y in 0..h {
                                let drow = &mut dst[(y + ky) * wp + kx..(y + ky) * wp + kx + wd];
                                let grow = &gp[y * wd..(y + 1) * wd];
                                for (o, &d) in drow.iter_mut().zip(grow) {
                                    *o = *o + wv * d;
                                }
                            }
                        }
                    }
                }
            }
        }
        unpad_grad(&dp, geom)
    });
}
