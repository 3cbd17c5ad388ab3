//! Windowed transformer block: per-pixel tokens grouped into `M x M`
//! windows, single-head self-attention, a two-layer MLP and a context
//! broadcast mixing step, all with residual connections.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{pad_index, Graph, PadMode, ParamSet, Real, Tensor, Var};

/// Learned scale/shift applied after per-token standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> NormParams<T> {
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: Tensor::full(&[width], T::one()).with_requires_grad(true),
            beta: Tensor::zeros(&[width]).with_requires_grad(true),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItmParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
    pub norm1: Option<NormParams<T>>,
    pub norm2: Option<NormParams<T>>,
}

pub const MLP_RATIO: usize = 2;

/// `prefix.name`, or just `name` when the prefix is empty.
pub(crate) fn qualified(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn uniform<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound))).with_requires_grad(true)
}

impl<T: Real> ItmParams<T> {
    /// All projection and MLP weights zero; norms (when present) at identity.
    pub fn zeros(channels: usize, pre_norm: bool) -> Self {
        let c = channels;
        let hidden = MLP_RATIO * c;
        let z = |shape: &[usize]| Tensor::zeros(shape).with_requires_grad(true);
        Self {
            wq: z(&[c, c]),
            wk: z(&[c, c]),
            wv: z(&[c, c]),
            mlp_w1: z(&[c, hidden]),
            mlp_b1: z(&[hidden]),
            mlp_w2: z(&[hidden, c]),
            mlp_b2: z(&[c]),
            norm1: pre_norm.then(|| NormParams::identity(c)),
            norm2: pre_norm.then(|| NormParams::identity(c)),
        }
    }

    /// Fan-in scaled uniform weights, zero biases, identity norms.
    pub fn init<R: Rng>(channels: usize, pre_norm: bool, rng: &mut R) -> Self {
        let c = channels;
        let hidden = MLP_RATIO * c;
        let mut p = Self::zeros(c, pre_norm);
        p.wq = uniform(&[c, c], c, rng);
        p.wk = uniform(&[c, c], c, rng);
        p.wv = uniform(&[c, c], c, rng);
        p.mlp_w1 = uniform(&[c, hidden], c, rng);
        p.mlp_w2 = uniform(&[hidden, c], hidden, rng);
        p
    }

    pub fn fields(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("mlp_w1", &self.mlp_w1),
            ("mlp_b1", &self.mlp_b1),
            ("mlp_w2", &self.mlp_w2),
            ("mlp_b2", &self.mlp_b2),
        ];
        if let Some(n) = &self.norm1 {
            out.push(("norm1.gamma", &n.gamma));
            out.push(("norm1.beta", &n.beta));
        }
        if let Some(n) = &self.norm2 {
            out.push(("norm2.gamma", &n.gamma));
            out.push(("norm2.beta", &n.beta));
        }
        out
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = vec![
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("mlp_w1", &mut self.mlp_w1),
            ("mlp_b1", &mut self.mlp_b1),
            ("mlp_w2", &mut self.mlp_w2),
            ("mlp_b2", &mut self.mlp_b2),
        ];
        if let Some(n) = &mut self.norm1 {
            out.push(("norm1.gamma", &mut n.gamma));
            out.push(("norm1.beta", &mut n.beta));
        }
        if let Some(n) = &mut self.norm2 {
            out.push(("norm2.gamma", &mut n.gamma));
            out.push(("norm2.beta", &mut n.beta));
        }
        out
    }

    pub fn bind(&self, g: &mut Graph<T>, prefix: &str) -> ItmVars<T> {
        let mut p = |name: &str, t: &Tensor<T>| g.param(&qualified(prefix, name), t);
        ItmVars {
            wq: p("wq", &self.wq),
            wk: p("wk", &self.wk),
            wv: p("wv", &self.wv),
            mlp_w1: p("mlp_w1", &self.mlp_w1),
            mlp_b1: p("mlp_b1", &self.mlp_b1),
            mlp_w2: p("mlp_w2", &self.mlp_w2),
            mlp_b2: p("mlp_b2", &self.mlp_b2),
            norm1: self
                .norm1
                .as_ref()
                .map(|n| (p("norm1.gamma", &n.gamma), p("norm1.beta", &n.beta))),
            norm2: self
                .norm2
                .as_ref()
                .map(|n| (p("norm2.gamma", &n.gamma), p("norm2.beta", &n.beta))),
        }
    }
}

impl<T: Real> ParamSet<T> for ItmParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (name, t) in self.fields() {
            f(name, t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (name, t) in self.fields_mut() {
            f(name, t);
        }
    }
}

/// [`ItmParams`] bound into a graph.
#[derive(Debug, Clone)]
pub struct ItmVars<T> {
    pub wq: Var<T>,
    pub wk: Var<T>,
    pub wv: Var<T>,
    pub mlp_w1: Var<T>,
    pub mlp_b1: Var<T>,
    pub mlp_w2: Var<T>,
    pub mlp_b2: Var<T>,
    pub norm1: Option<(Var<T>, Var<T>)>,
    pub norm2: Option<(Var<T>, Var<T>)>,
}

/// Layout of the window partition for one feature-map size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    pub window: usize,
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Windows along each axis after padding up to a multiple of `window`.
    pub rows: usize,
    pub cols: usize,
}

impl WindowGrid {
    pub fn new(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        window: usize,
    ) -> Result<Self> {
        if window < 1 {
            return Err(Error::invalid(
                "window_partition",
                "window size must be >= 1",
            ));
        }
        Ok(Self {
            window,
            batch,
            channels,
            height,
            width,
            rows: height.div_ceil(window),
            cols: width.div_ceil(window),
        })
    }

    pub fn padded(&self) -> (usize, usize) {
        (self.rows * self.window, self.cols * self.window)
    }

    pub fn num_windows(&self) -> usize {
        self.batch * self.rows * self.cols
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn token_shape(&self) -> [usize; 3] {
        [self.num_windows(), self.tokens_per_window(), self.channels]
    }

    /// Source offsets in the `N x C x H x W` map for every token entry,
    /// reflecting rows/columns that fall in the padding.
    fn partition_indices(&self) -> Vec<usize> {
        let (m, c) = (self.window, self.channels);
        let (h, w) = (self.height, self.width);
        let mut idx = Vec::with_capacity(self.num_windows() * m * m * c);
        for n in 0..self.batch {
            for wy in 0..self.rows {
                for wx in 0..self.cols {
                    for ty in 0..m {
                        let sy = pad_index((wy * m + ty) as isize, h, PadMode::Reflect).unwrap();
                        for tx in 0..m {
                            let sx =
                                pad_index((wx * m + tx) as isize, w, PadMode::Reflect).unwrap();
                            for ch in 0..c {
                                idx.push(((n * c + ch) * h + sy) * w + sx);
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    fn window_origin(&self, win: usize) -> (usize, usize, usize) {
        let per_image = self.rows * self.cols;
        let (n, rest) = (win / per_image, win % per_image);
        (
            n,
            rest / self.cols * self.window,
            rest % self.cols * self.window,
        )
    }

    /// Tokens of windows `range`, copied straight out of `f` (same layout as
    /// the matching slice of [`window_partition`]'s output).
    pub fn gather_windows<T: Real>(&self, f: &[T], range: std::ops::Range<usize>) -> Vec<T> {
        let (m, c) = (self.window, self.channels);
        let (h, w) = (self.height, self.width);
        let mut out = Vec::with_capacity(range.len() * m * m * c);
        for win in range {
            let (n, y0, x0) = self.window_origin(win);
            for ty in 0..m {
                let sy = pad_index((y0 + ty) as isize, h, PadMode::Reflect).unwrap();
                for tx in 0..m {
                    let sx = pad_index((x0 + tx) as isize, w, PadMode::Reflect).unwrap();
                    out.extend((0..c).map(|ch| f[((n * c + ch) * h + sy) * w + sx]));
                }
            }
        }
        out
    }

    /// Writes the in-bounds pixels of windows starting at `first` back into
    /// the `N x C x H x W` buffer `out`.
    pub fn scatter_windows<T: Real>(&self, tokens: &[T], first: usize, out: &mut [T]) {
        let (m, c) = (self.window, self.channels);
        let (h, w) = (self.height, self.width);
        for (i, win) in tokens.chunks(m * m * c).enumerate() {
            let (n, y0, x0) = self.window_origin(first + i);
            for ty in 0..m.min(h - y0) {
                for tx in 0..m.min(w - x0) {
                    let tok = &win[(ty * m + tx) * c..(ty * m + tx + 1) * c];
                    for (ch, &v) in tok.iter().enumerate() {
                        out[((n * c + ch) * h + y0 + ty) * w + x0 + tx] = v;
                    }
                }
            }
        }
    }

    /// Token offsets for every pixel of the cropped `N x C x H x W` map.
    fn merge_indices(&self) -> Vec<usize> {
        let (m, c) = (self.window, self.channels);
        let tokens = m * m;
        let mut idx = Vec::with_capacity(self.batch * c * self.height * self.width);
        for n in 0..self.batch {
            for ch in 0..c {
                for y in 0..self.height {
                    for x in 0..self.width {
                        let win = (n * self.rows + y / m) * self.cols + x / m;
                        let t = (y % m) * m + x % m;
                        idx.push((win * tokens + t) * c + ch);
                    }
                }
            }
        }
        idx
    }
}

/// Splits `F[N,C,H,W]` into `windows x M^2 x C` tokens, reflect-padding the
/// bottom/right edges when `H` or `W` is not a multiple of `M`.
pub fn window_partition<T: Real>(
    g: &mut Graph<T>,
    f: &Var<T>,
    window: usize,
) -> Result<(Var<T>, WindowGrid)> {
    let (n, c, h, w) = f.value().dims4()?;
    let grid = WindowGrid::new(n, c, h, w, window)?;
    let tokens = g.gather(f, Rc::new(grid.partition_indices()), &grid.token_shape())?;
    Ok((tokens, grid))
}

/// Inverse of [`window_partition`]; padding rows/columns are cropped away.
pub fn window_merge<T: Real>(
    g: &mut Graph<T>,
    tokens: &Var<T>,
    grid: &WindowGrid,
) -> Result<Var<T>> {
    if tokens.shape() != grid.token_shape() {
        return Err(Error::shape(
            "window_merge",
            tokens.shape(),
            &grid.token_shape(),
        ));
    }
    g.gather(
        tokens,
        Rc::new(grid.merge_indices()),
        &[grid.batch, grid.channels, grid.height, grid.width],
    )
}

/// `softmax(Q K^T / sqrt(C)) V` per window with `Q = X Wq`, `K = X Wk`,
/// `V = X Wv`. `x` is `windows x tokens x C`.
pub fn self_attention<T: Real>(g: &mut Graph<T>, x: &Var<T>, p: &ItmVars<T>) -> Result<Var<T>> {
    let c = *x.shape().last().unwrap_or(&0);
    let q = g.linear(x, &p.wq, None)?;
    let k = g.linear(x, &p.wk, None)?;
    let v = g.linear(x, &p.wv, None)?;
    g.attention(&q, &k, &v, T::one() / T::from_usize(c).unwrap().sqrt())
}

/// Half of each token plus half the window mean, per feature.
pub fn context_broadcast<T: Real>(g: &mut Graph<T>, x: &Var<T>) -> Result<Var<T>> {
    g.context_broadcast(x)
}

fn mlp<T: Real>(g: &mut Graph<T>, x: &Var<T>, p: &ItmVars<T>) -> Result<Var<T>> {
    let hidden = g.linear(x, &p.mlp_w1, Some(&p.mlp_b1))?;
    let act = g.relu(&hidden);
    g.linear(&act, &p.mlp_w2, Some(&p.mlp_b2))
}

fn maybe_norm<T: Real>(
    g: &mut Graph<T>,
    x: &Var<T>,
    norm: &Option<(Var<T>, Var<T>)>,
) -> Result<Var<T>> {
    match norm {
        Some((gamma, beta)) => g.layer_norm(x, gamma, beta),
        None => Ok(x.clone()),
    }
}

/// Token-level transformer step on `windows x tokens x C`:
/// `X1 = X + attn(norm1(X))`, `X2 = X1 + mlp(norm2(X1))`, `out = broadcast(X2)`.
pub fn itm_tokens<T: Real>(g: &mut Graph<T>, x: &Var<T>, p: &ItmVars<T>) -> Result<Var<T>> {
    let h1 = maybe_norm(g, x, &p.norm1)?;
    let att = self_attention(g, &h1, p)?;
    let x1 = g.add(x, &att)?;
    let h2 = maybe_norm(g, &x1, &p.norm2)?;
    let m = mlp(g, &h2, p)?;
    let x2 = g.add(&x1, &m)?;
    context_broadcast(g, &x2)
}

/// Windows never interact, so an unrecorded pass runs them this many at a
/// time, straight from and back into the feature map.
pub const INFERENCE_CHUNK: usize = 256;

pub fn itm_forward<T: Real>(
    g: &mut Graph<T>,
    f: &Var<T>,
    p: &ItmVars<T>,
    window: usize,
) -> Result<Var<T>> {
    if !g.is_recording() {
        return itm_forward_chunked(g, f, p, window, INFERENCE_CHUNK);
    }
    let (tokens, grid) = window_partition(g, f, window)?;
    let out = itm_tokens(g, &tokens, p)?;
    window_merge(g, &out, &grid)
}

fn itm_forward_chunked<T: Real>(
    g: &mut Graph<T>,
    f: &Var<T>,
    p: &ItmVars<T>,
    window: usize,
    chunk: usize,
) -> Result<Var<T>> {
    let (n, c, h, w) = f.value().dims4()?;
    let grid = WindowGrid::new(n, c, h, w, window)?;
    let [windows, tokens, _] = grid.token_shape();
    let mut out = vec![T::zero(); n * c * h * w];
    for first in (0..windows).step_by(chunk.max(1)) {
        let last = (first + chunk.max(1)).min(windows);
        let x = Tensor::new(
            &[last - first, tokens, c],
            grid.gather_windows(f.data(), first..last),
        )?;
        let x = g.constant(x);
        let y = itm_tokens(g, &x, p)?;
        grid.scatter_windows(y.data(), first, &mut out);
    }
    Ok(g.constant(Tensor::new(&[n, c, h, w], out)?))
}
