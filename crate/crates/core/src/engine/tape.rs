//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Every op appends one node; node indices are therefore a topological order
//! and the reverse pass walks them backwards. Nodes that do not depend on any
//! gradient-requiring leaf are skipped entirely.

use std::sync::Arc;

use super::array::Array;
use super::conv::{self, ConvShape};
use super::linalg::{gemm, jacobi_eigh};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Output-index map for grouped reductions (channel and patch statistics).
#[derive(Debug)]
pub(crate) struct Segments {
    layout: Layout,
    counts: Vec<usize>,
    out_shape: Vec<usize>,
}

#[derive(Debug)]
enum Layout {
    /// Consecutive runs of `inner` elements; run `j` belongs to output `j % outputs`.
    Blocks { inner: usize },
    /// Element `i` belongs to output `pattern[i % pattern.len()]`.
    Tiled { pattern: Vec<usize> },
}

impl Segments {
    fn over_axes(shape: &[usize], axes: &[usize]) -> Segments {
        let keep: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&d| shape[d]).collect();
        let n: usize = shape.iter().product();
        let out_n: usize = out_shape.iter().product();
        if keep.windows(2).all(|w| w[1] == w[0] + 1) {
            let inner = keep.last().map_or(n, |&d| shape[d + 1..].iter().product());
            return Segments {
                layout: Layout::Blocks { inner },
                counts: vec![n / out_n; out_n],
                out_shape,
            };
        }
        let mut pattern = Vec::with_capacity(n);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..n {
            let mut o = 0;
            for &d in &keep {
                o = o * shape[d] + coord[d];
            }
            pattern.push(o);
            for d in (0..shape.len()).rev() {
                coord[d] += 1;
                if coord[d] < shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        Segments {
            layout: Layout::Tiled { pattern },
            counts: vec![n / out_n; out_n],
            out_shape,
        }
    }

    fn patches(shape: &[usize], cell: usize) -> Segments {
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let gh = h.div_ceil(cell);
        let gw = w.div_ceil(cell);
        let mut pattern = Vec::with_capacity(h * w);
        let mut counts = vec![0usize; gh * gw];
        for y in 0..h {
            for x in 0..w {
                let o = (y / cell) * gw + x / cell;
                pattern.push(o);
                counts[o] += b * c;
            }
        }
        Segments {
            layout: Layout::Tiled { pattern },
            counts,
            out_shape: vec![gh, gw],
        }
    }

    /// `Σ f(v, o)` over the elements `v` of each output `o`.
    fn reduce(&self, data: &[f64], f: impl Fn(f64, usize) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.counts.len()];
        match &self.layout {
            Layout::Blocks { inner } => {
                let n = out.len();
                for (j, run) in data.chunks(*inner).enumerate() {
                    let o = j % n;
                    out[o] += run.iter().map(|&v| f(v, o)).sum::<f64>();
                }
            }
            Layout::Tiled { pattern } => {
                for tile in data.chunks(pattern.len()) {
                    for (&v, &o) in tile.iter().zip(pattern) {
                        out[o] += f(v, o);
                    }
                }
            }
        }
        out
    }

    /// `d[i] += f(x[i], owner(i))` for every element.
    fn expand(&self, d: &mut [f64], x: &[f64], f: impl Fn(f64, usize) -> f64) {
        match &self.layout {
            Layout::Blocks { inner } => {
                let n = self.counts.len();
                for (j, (dr, xr)) in d.chunks_mut(*inner).zip(x.chunks(*inner)).enumerate() {
                    let o = j % n;
                    dr.iter_mut().zip(xr).for_each(|(d, &v)| *d += f(v, o));
                }
            }
            Layout::Tiled { pattern } => {
                for (dt, xt) in d.chunks_mut(pattern.len()).zip(x.chunks(pattern.len())) {
                    for ((d, &v), &o) in dt.iter_mut().zip(xt).zip(pattern) {
                        *d += f(v, o);
                    }
                }
            }
        }
    }

    fn means(&self, data: &[f64]) -> Vec<f64> {
        let mut sums = self.reduce(data, |v, _| v);
        sums.iter_mut().zip(&self.counts).for_each(|(s, &c)| *s /= c as f64);
        sums
    }

    /// Biased variances around `means`.
    fn vars(&self, data: &[f64], means: &[f64]) -> Vec<f64> {
        let mut var = self.reduce(data, |v, o| (v - means[o]) * (v - means[o]));
        var.iter_mut().zip(&self.counts).for_each(|(s, &c)| *s /= c as f64);
        var
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    stride: usize,
    pad: usize,
    groups: usize,
}

/// Pooling windows along one spatial axis: `(start, end)` per output position.
type Windows = Vec<(usize, usize)>;

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Reshape(Var),
    Transpose(Var),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AvgPool {
        x: Var,
        rows: Windows,
        cols: Windows,
    },
    Relu(Var),
    ChannelShuffle {
        x: Var,
        groups: usize,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SegmentMean {
        x: Var,
        seg: Arc<Segments>,
    },
    SegmentVar {
        x: Var,
        seg: Arc<Segments>,
        means: Vec<f64>,
    },
    Norm(Var),
    Log(Var),
    KlDiv {
        p: Var,
        log_q: Var,
    },
    SquaredError(Var, Var),
    EigvalsSym {
        g: Var,
        vectors: Vec<f64>,
        min_gap: f64,
    },
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Spectral gap below which eigenvalue gradients are flagged as degenerate.
pub const DEGENERATE_GAP: f64 = 1e-8;
/// Absolute-or-relative tolerance for accepting a matrix as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    /// Set when an eigenvalue gradient was taken across a spectral gap below
    /// [`DEGENERATE_GAP`]; such gradients depend on the arbitrary eigenbasis.
    pub degenerate_spectrum: bool,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` received none.
    pub fn get_or_zeros(&self, v: Var, like: &Array) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(like.shape()))
    }
}

/// A single-threaded recording of array operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn fixed_windows(len: usize, k: usize) -> Windows {
    (0..len / k).map(|i| (i * k, i * k + k)).collect()
}

fn adaptive_windows(len: usize, out: usize) -> Windows {
    (0..out)
        .map(|i| ((i * len) / out, ((i + 1) * len).div_ceil(out)))
        .collect()
}

fn row_softmax(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

fn row_log_softmax(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + src.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Array) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Identity in the forward pass; blocks every gradient in the reverse pass.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad, false)
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op_name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Array::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(value, Op::Shift(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        if shape.is_empty() {
            return Err(Error::shape("flatten", "scalar input"));
        }
        let rest: usize = shape[1..].iter().product();
        let b = shape[0];
        self.reshape(x, &[b, rest])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return Err(Error::shape("transpose", format!("{:?} is not 2-D", v.shape())));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data()[i * c + j];
            }
        }
        let value = Array::new(vec![c, r], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        let value = Array::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// `x·wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.ndim() != 2
            || vw.ndim() != 2
            || vx.shape()[1] != vw.shape()[1]
            || vb.shape() != [vw.shape()[0]]
        {
            return Err(Error::shape(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", vx.shape(), vw.shape(), vb.shape()),
            ));
        }
        let (bsz, din, dout) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
        let mut out = vec![0.0; bsz * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(vb.data());
        }
        gemm(bsz, din, dout, vx.data(), false, vw.data(), true, &mut out, true);
        let value = Array::new(vec![bsz, dout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution without bias. `w: [out, in/groups, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.ndim() != 4 || vw.ndim() != 4 || stride == 0 || groups == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("x {:?}, w {:?}", vx.shape(), vw.shape()),
            ));
        }
        let (b, c, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (o, cg, k, k2) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        if k != k2 || c % groups != 0 || o % groups != 0 || cg != c / groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "x {:?} incompatible with w {:?} at groups={groups}",
                    vx.shape(),
                    vw.shape()
                ),
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let shape = ConvShape {
            b,
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            groups,
            ho,
            wo,
        };
        let out = conv::forward(&shape, vx.data(), vw.data());
        let value = Array::new(vec![b, o, ho, wo], out)?;
        let rg = self.rg(x) || self.rg(w);
        let geom = ConvGeom {
            stride,
            pad,
            groups,
        };
        Ok(self.push(value, Op::Conv2d { x, w, geom }, rg))
    }

    fn pool(&mut self, x: Var, rows: Windows, cols: Windows) -> Result<Var> {
        let vx = self.value(x);
        let (b, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (ho, wo) = (rows.len(), cols.len());
        let mut out = vec![0.0; b * c * ho * wo];
        for bc in 0..b * c {
            let src = &vx.data()[bc * h * w..(bc + 1) * h * w];
            for (i, &(r0, r1)) in rows.iter().enumerate() {
                for (j, &(c0, c1)) in cols.iter().enumerate() {
                    let mut s = 0.0;
                    for y in r0..r1 {
                        for xx in c0..c1 {
                            s += src[y * w + xx];
                        }
                    }
                    out[(bc * ho + i) * wo + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let value = Array::new(vec![b, c, ho, wo], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AvgPool { x, rows, cols }, rg))
    }

    /// Non-overlapping `k×k` average pooling (trailing remainder dropped).
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 4 || k == 0 || vx.shape()[2] < k || vx.shape()[3] < k {
            return Err(Error::shape(
                "avg_pool2d",
                format!("{:?} with kernel {k}", vx.shape()),
            ));
        }
        let rows = fixed_windows(vx.shape()[2], k);
        let cols = fixed_windows(vx.shape()[3], k);
        self.pool(x, rows, cols)
    }

    /// Average pooling to an `oh×ow` output with adaptive windows.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 4 || oh == 0 || ow == 0 || oh > vx.shape()[2] || ow > vx.shape()[3] {
            return Err(Error::shape(
                "adaptive_avg_pool2d",
                format!("{:?} -> {oh}x{ow}", vx.shape()),
            ));
        }
        let rows = adaptive_windows(vx.shape()[2], oh);
        let cols = adaptive_windows(vx.shape()[3], ow);
        self.pool(x, rows, cols)
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        if self.value(x).ndim() != 4 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("{:?}", self.value(x).shape()),
            ));
        }
        self.mean_axes(x, &[2, 3])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Interleaves `groups` channel groups: output channel `j·g + i` is input channel `i·(C/g) + j`.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 4 || groups == 0 || vx.shape()[1] % groups != 0 {
            return Err(Error::shape(
                "channel_shuffle",
                format!("{:?} with {groups} groups", vx.shape()),
            ));
        }
        let (b, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let per = c / groups;
        let plane = h * w;
        let mut out = vec![0.0; vx.len()];
        for bi in 0..b {
            for i in 0..groups {
                for j in 0..per {
                    let src = (bi * c + i * per + j) * plane;
                    let dst = (bi * c + j * groups + i) * plane;
                    out[dst..dst + plane].copy_from_slice(&vx.data()[src..src + plane]);
                }
            }
        }
        let value = Array::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ChannelShuffle { x, groups }, rg))
    }

    /// Gathers rows along the leading axis.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() == 0 || idx.iter().any(|&i| i >= vx.shape()[0]) {
            return Err(Error::shape(
                "select_rows",
                format!("indices {idx:?} out of range for {:?}", vx.shape()),
            ));
        }
        let value = vx.select_rows(idx);
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    fn check_norm_args(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let vx = self.value(x);
        if vx.ndim() != 4 {
            return Err(Error::shape(op, format!("input {:?} is not 4-D", vx.shape())));
        }
        let c = vx.shape()[1];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                op,
                format!(
                    "affine {:?}/{:?} for {c} channels",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        Ok(c)
    }

    fn normalize_channels(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    ) -> Result<Var> {
        let vx = self.value(x);
        let (b, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let plane = h * w;
        let mut out = vec![0.0; vx.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for p in 0..plane {
                    out[off + p] = g[ci] * (vx.data()[off + p] - mean[ci]) * inv_std[ci] + bt[ci];
                }
            }
        }
        let value = Array::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Batch norm with batch statistics. Returns the output with the biased
    /// per-channel batch mean and variance used for normalization.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.check_norm_args("batch_norm", x, gamma, beta)?;
        let seg = Segments::over_axes(self.value(x).shape(), &[0, 2, 3]);
        let mean = seg.means(self.value(x).data());
        let var = seg.vars(self.value(x).data(), &mean);
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.normalize_channels(x, gamma, beta, mean.clone(), inv_std, true)?;
        Ok((out, mean, var))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.check_norm_args("batch_norm", x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize_channels(x, gamma, beta, running_mean.to_vec(), inv_std, false)
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let c = self.check_norm_args("group_norm", x, gamma, beta)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        let vx = self.value(x);
        let (b, h, w) = (vx.shape()[0], vx.shape()[2], vx.shape()[3]);
        let span = (c / groups) * h * w;
        let plane = h * w;
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; b * groups];
        let mut inv_std = vec![0.0; b * groups];
        let mut out = vec![0.0; vx.len()];
        for (s, chunk) in vx.data().chunks(span).enumerate() {
            let m = chunk.iter().sum::<f64>() / span as f64;
            let v = chunk.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / span as f64;
            let is = 1.0 / (v + eps).sqrt();
            mean[s] = m;
            inv_std[s] = is;
            let grp = s % groups;
            for (i, &xv) in chunk.iter().enumerate() {
                let ci = grp * (c / groups) + i / plane;
                out[s * span + i] = gm[ci] * (xv - m) * is + bt[ci];
            }
        }
        let value = Array::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
            },
            rg,
        ))
    }

    fn last_axis(&self, op: &'static str, x: Var) -> Result<usize> {
        let v = self.value(x);
        match v.shape().last() {
            Some(&w) if w > 0 => Ok(w),
            _ => Err(Error::shape(op, format!("{:?} has no last axis", v.shape()))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let w = self.last_axis("softmax", x)?;
        let v = self.value(x);
        let value = Array::new(v.shape().to_vec(), row_softmax(v.data(), w))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let w = self.last_axis("log_softmax", x)?;
        let v = self.value(x);
        let value = Array::new(v.shape().to_vec(), row_log_softmax(v.data(), w))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let value = Array::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    fn check_axes(&self, op: &'static str, x: Var, axes: &[usize]) -> Result<()> {
        let nd = self.value(x).ndim();
        if axes.is_empty() || axes.iter().any(|&a| a >= nd) || self.value(x).is_empty() {
            return Err(Error::shape(
                op,
                format!("axes {axes:?} for {:?}", self.value(x).shape()),
            ));
        }
        Ok(())
    }

    fn segment_mean(&mut self, x: Var, seg: Segments) -> Result<Var> {
        let means = seg.means(self.value(x).data());
        let value = Array::new(seg.out_shape.clone(), means)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::SegmentMean {
                x,
                seg: Arc::new(seg),
            },
            rg,
        ))
    }

    fn segment_var(&mut self, x: Var, seg: Segments) -> Result<Var> {
        let data = self.value(x).data();
        let means = seg.means(data);
        let var = seg.vars(data, &means);
        let value = Array::new(seg.out_shape.clone(), var)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::SegmentVar {
                x,
                seg: Arc::new(seg),
                means,
            },
            rg,
        ))
    }

    /// Mean over `axes`, dropping them.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes("mean_axes", x, axes)?;
        let seg = Segments::over_axes(self.value(x).shape(), axes);
        self.segment_mean(x, seg)
    }

    /// Biased variance over `axes`, dropping them.
    pub fn var_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes("var_axes", x, axes)?;
        let seg = Segments::over_axes(self.value(x).shape(), axes);
        self.segment_var(x, seg)
    }

    fn check_patch(&self, op: &'static str, x: Var, cell: usize) -> Result<()> {
        let v = self.value(x);
        if v.ndim() != 4 || v.is_empty() {
            return Err(Error::shape(op, format!("{:?} is not a 4-D feature map", v.shape())));
        }
        if cell == 0 || cell > v.shape()[2].max(v.shape()[3]) {
            return Err(Error::InvalidArgument(format!(
                "{op}: patch size {cell} outside 1..={}",
                v.shape()[2].max(v.shape()[3])
            )));
        }
        Ok(())
    }

    /// Patch means on a `⌈H/cell⌉×⌈W/cell⌉` grid, reducing over batch, channel
    /// and the pixels of each cell.
    pub fn patch_mean(&mut self, x: Var, cell: usize) -> Result<Var> {
        self.check_patch("patch_mean", x, cell)?;
        let seg = Segments::patches(self.value(x).shape(), cell);
        self.segment_mean(x, seg)
    }

    /// Biased patch variances on the same grid as [`Tape::patch_mean`].
    pub fn patch_var(&mut self, x: Var, cell: usize) -> Result<Var> {
        self.check_patch("patch_var", x, cell)?;
        let seg = Segments::patches(self.value(x).shape(), cell);
        self.segment_var(x, seg)
    }

    /// Euclidean norm of all elements (Frobenius norm for matrices).
    pub fn norm(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).norm());
        let rg = self.rg(x);
        self.push(value, Op::Norm(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.data().iter().any(|&t| t <= 0.0) {
            return Err(Error::InvalidArgument("log of non-positive value".into()));
        }
        let value = v.map(f64::ln);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Log(x), rg))
    }

    /// `Σ p·(ln p − log_q)` with `0·ln 0 = 0`.
    pub fn kl_div(&mut self, p: Var, log_q: Var) -> Result<Var> {
        let (vp, vq) = (self.value(p), self.value(log_q));
        same_shape("kl_div", vp, vq)?;
        let kl = vp
            .data()
            .iter()
            .zip(vq.data())
            .map(|(&pi, &lq)| if pi > 0.0 { pi * (pi.ln() - lq) } else { 0.0 })
            .sum();
        let rg = self.rg(p) || self.rg(log_q);
        Ok(self.push(Array::scalar(kl), Op::KlDiv { p, log_q }, rg))
    }

    /// `Σ (a − b)²`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("squared_error", va, vb)?;
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::scalar(s), Op::SquaredError(a, b), rg))
    }

    /// Ascending eigenvalues of a symmetric matrix.
    pub fn eigvals_sym(&mut self, g: Var) -> Result<Var> {
        let vg = self.value(g);
        if vg.ndim() != 2 || vg.shape()[0] != vg.shape()[1] {
            return Err(Error::shape(
                "eigvals_sym",
                format!("{:?} is not square", vg.shape()),
            ));
        }
        if !vg.all_finite() {
            return Err(Error::NonFinite("eigvals_sym input".into()));
        }
        let n = vg.shape()[0];
        let d = vg.data();
        let scale = d.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mut sym = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (d[i * n + j], d[j * n + i]);
                if (a - b).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidArgument(format!(
                        "eigvals_sym: asymmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
                sym[i * n + j] = 0.5 * (a + b);
            }
        }
        let eig = jacobi_eigh(&sym, n);
        let min_gap = eig
            .values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        let value = Array::from_vec(eig.values);
        let rg = self.rg(g);
        Ok(self.push(
            value,
            Op::EigvalsSym {
                g,
                vectors: eig.vectors,
                min_gap,
            },
            rg,
        ))
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let mut degenerate = false;
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            degenerate |= self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| {
                    Array::new(self.nodes[i].value.shape().to_vec(), d)
                        .expect("gradient shape matches its value")
                })
            })
            .collect();
        Ok(Gradients {
            grads,
            degenerate_spectrum: degenerate,
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    /// Propagates `g` (gradient of this node's output) into its inputs.
    /// Returns whether a degenerate spectrum was encountered.
    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> bool {
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::Shift(x) | Op::Reshape(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                if let Some(d) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if let Some(d) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, vb.data(), true, d, true);
                }
                if let Some(d) = self.acc(grads, *b) {
                    gemm(k, m, n, va.data(), true, g, false, d, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (bsz, din, dout) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                if let Some(d) = self.acc(grads, *x) {
                    gemm(bsz, dout, din, g, false, vw.data(), false, d, true);
                }
                if let Some(d) = self.acc(grads, *w) {
                    gemm(dout, bsz, din, g, true, vx.data(), false, d, true);
                }
                if let Some(d) = self.acc(grads, *b) {
                    for row in g.chunks(dout) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Conv2d { x, w, geom } => self.conv_backward(node, *x, *w, *geom, g, grads),
            Op::AvgPool { x, rows, cols } => {
                let vx = self.value(*x);
                let (b, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let (ho, wo) = (rows.len(), cols.len());
                if let Some(d) = self.acc(grads, *x) {
                    for bc in 0..b * c {
                        for (i, &(r0, r1)) in rows.iter().enumerate() {
                            for (j, &(c0, c1)) in cols.iter().enumerate() {
                                let share =
                                    g[(bc * ho + i) * wo + j] / ((r1 - r0) * (c1 - c0)) as f64;
                                for y in r0..r1 {
                                    for xx in c0..c1 {
                                        d[bc * h * w + y * w + xx] += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for i in 0..d.len() {
                        if vx[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::ChannelShuffle { x, groups } => {
                let s = self.value(*x).shape();
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let per = c / groups;
                if let Some(d) = self.acc(grads, *x) {
                    for bi in 0..b {
                        for i in 0..*groups {
                            for j in 0..per {
                                let src = (bi * c + i * per + j) * plane;
                                let dst = (bi * c + j * groups + i) * plane;
                                for p in 0..plane {
                                    d[src + p] += g[dst + p];
                                }
                            }
                        }
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                let row: usize = self.value(*x).shape()[1..].iter().product();
                if let Some(d) = self.acc(grads, *x) {
                    for (k, &i) in idx.iter().enumerate() {
                        for p in 0..row {
                            d[i * row + p] += g[k * row + p];
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let vx = self.value(*x);
                let s = vx.shape();
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gm = self.value(*gamma).data();
                let n = (b * plane) as f64;
                let xhat = |bi: usize, ci: usize, p: usize| {
                    (vx.data()[(bi * c + ci) * plane + p] - mean[ci]) * inv_std[ci]
                };
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..plane {
                            let dy = g[(bi * c + ci) * plane + p];
                            sum_dy[ci] += dy;
                            sum_dy_xhat[ci] += dy * xhat(bi, ci, p);
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    for bi in 0..b {
                        for ci in 0..c {
                            for p in 0..plane {
                                let i = (bi * c + ci) * plane + p;
                                d[i] += if *train {
                                    gm[ci] * inv_std[ci] / n
                                        * (n * g[i]
                                            - sum_dy[ci]
                                            - xhat(bi, ci, p) * sum_dy_xhat[ci])
                                } else {
                                    g[i] * gm[ci] * inv_std[ci]
                                };
                            }
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *gamma) {
                    d.iter_mut().zip(&sum_dy_xhat).for_each(|(d, s)| *d += s);
                }
                if let Some(d) = self.acc(grads, *beta) {
                    d.iter_mut().zip(&sum_dy).for_each(|(d, s)| *d += s);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
            } => {
                let vx = self.value(*x);
                let s = vx.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let per = c / groups;
                let span = per * plane;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; vx.len()];
                for (seg, chunk) in vx.data().chunks(span).enumerate() {
                    let grp = seg % groups;
                    let (m, is) = (mean[seg], inv_std[seg]);
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for (i, &xv) in chunk.iter().enumerate() {
                        let ci = grp * per + i / plane;
                        let dy = g[seg * span + i];
                        let xh = (xv - m) * is;
                        dgamma[ci] += dy * xh;
                        dbeta[ci] += dy;
                        sum_dxh += dy * gm[ci];
                        sum_dxh_xh += dy * gm[ci] * xh;
                    }
                    let n = span as f64;
                    for (i, &xv) in chunk.iter().enumerate() {
                        let ci = grp * per + i / plane;
                        let dxh = g[seg * span + i] * gm[ci];
                        let xh = (xv - m) * is;
                        dx[seg * span + i] = is / n * (n * dxh - sum_dxh - xh * sum_dxh_xh);
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(&dx).for_each(|(d, s)| *d += s);
                }
                if let Some(d) = self.acc(grads, *gamma) {
                    d.iter_mut().zip(&dgamma).for_each(|(d, s)| *d += s);
                }
                if let Some(d) = self.acc(grads, *beta) {
                    d.iter_mut().zip(&dbeta).for_each(|(d, s)| *d += s);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap();
                if let Some(d) = self.acc(grads, *x) {
                    for r in 0..y.len() / w {
                        let row = r * w..(r + 1) * w;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                        for i in row {
                            d[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap();
                if let Some(d) = self.acc(grads, *x) {
                    for r in 0..y.len() / w {
                        let row = r * w..(r + 1) * w;
                        let gs: f64 = g[row.clone()].iter().sum();
                        for i in row {
                            d[i] += g[i] - y[i].exp() * gs;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::SegmentMean { x, seg } => {
                if let Some(d) = self.acc(grads, *x) {
                    let scale: Vec<f64> = g.iter().zip(&seg.counts).map(|(g, &c)| g / c as f64).collect();
                    let vx = self.value(*x).data();
                    seg.expand(d, vx, |_, o| scale[o]);
                }
            }
            Op::SegmentVar { x, seg, means } => {
                let vx = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    let coef: Vec<f64> = g.iter().zip(&seg.counts).map(|(g, &c)| 2.0 * g / c as f64).collect();
                    seg.expand(d, vx, |v, o| coef[o] * (v - means[o]));
                }
            }
            Op::Norm(x) => {
                let nrm = node.value.item();
                let vx = self.value(*x).data();
                if nrm > 0.0 {
                    if let Some(d) = self.acc(grads, *x) {
                        for i in 0..d.len() {
                            d[i] += g[0] * vx[i] / nrm;
                        }
                    }
                }
            }
            Op::Log(x) => {
                let vx = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for i in 0..d.len() {
                        d[i] += g[i] / vx[i];
                    }
                }
            }
            Op::KlDiv { p, log_q } => {
                let (vp, vq) = (self.value(*p).data(), self.value(*log_q).data());
                if let Some(d) = self.acc(grads, *p) {
                    for i in 0..d.len() {
                        if vp[i] > 0.0 {
                            d[i] += g[0] * (vp[i].ln() + 1.0 - vq[i]);
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *log_q) {
                    for i in 0..d.len() {
                        d[i] -= g[0] * vp[i];
                    }
                }
            }
            Op::SquaredError(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += 2.0 * g[0] * (va[i] - vb[i]);
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for i in 0..d.len() {
                        d[i] -= 2.0 * g[0] * (va[i] - vb[i]);
                    }
                }
            }
            Op::EigvalsSym {
                g: input,
                vectors,
                min_gap,
            } => {
                let n = node.value.len();
                if let Some(d) = self.acc(grads, *input) {
                    for k in 0..n {
                        if g[k] == 0.0 {
                            continue;
                        }
                        for i in 0..n {
                            let vik = vectors[i * n + k];
                            for j in 0..n {
                                d[i * n + j] += g[k] * vik * vectors[j * n + k];
                            }
                        }
                    }
                }
                return *min_gap < DEGENERATE_GAP;
            }
        }
        false
    }

    fn conv_backward(
        &self,
        node: &Node,
        x: Var,
        w: Var,
        geom: ConvGeom,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let (b, c, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (o, k) = (vw.shape()[0], vw.shape()[2]);
        let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
        let shape = ConvShape {
            b,
            c,
            h,
            w: wd,
            o,
            k,
            stride: geom.stride,
            pad: geom.pad,
            groups: geom.groups,
            ho,
            wo,
        };
        let (dx, dw) = conv::backward(&shape, vx.data(), vw.data(), g, self.rg(x), self.rg(w));
        if let (Some(src), Some(d)) = (dw, self.acc(grads, w)) {
            d.iter_mut().zip(&src).for_each(|(d, s)| *d += s);
        }
        if let (Some(src), Some(d)) = (dx, self.acc(grads, x)) {
            d.iter_mut().zip(&src).for_each(|(d, s)| *d += s);
        }
    }
}
