//! Convolution kernels: batched im2col + GEMM, and a direct depthwise path.

use super::linalg::gemm;

/// Column budget of one im2col buffer (images are batched up to this width).
const COL_BUDGET: usize = 1024;

/// Geometry of one bias-free grouped convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvShape {
    fn cg(&self) -> usize {
        self.c / self.groups
    }

    fn og(&self) -> usize {
        self.o / self.groups
    }

    fn ckk(&self) -> usize {
        self.cg() * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    fn depthwise(&self) -> bool {
        self.cg() == 1 && self.og() == 1
    }

    /// Output rows `oy` whose input row `oy·stride + ki − pad` lies inside the map.
    fn valid_rows(&self, ki: usize) -> std::ops::Range<usize> {
        valid(self.ho, self.h, self.stride, self.pad, ki)
    }

    fn valid_cols(&self, kj: usize) -> std::ops::Range<usize> {
        valid(self.wo, self.w, self.stride, self.pad, kj)
    }

    /// 1×1, unit stride, no padding: the input planes are already the columns.
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn images_per_chunk(&self) -> usize {
        (COL_BUDGET / self.plane().max(1)).clamp(1, self.b.max(1))
    }
}

/// Outputs `o < out` with `o·stride + off − pad ∈ [0, len)`.
fn valid(out: usize, len: usize, stride: usize, pad: usize, off: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(off).div_ceil(stride);
    let hi = if len + pad > off {
        ((len + pad - off - 1) / stride + 1).min(out)
    } else {
        0
    };
    lo.min(hi)..hi
}

/// Writes the patches of one image group `x: [cg, h, w]` into columns
/// `[col0, col0 + plane)` of `cols`, whose rows have stride `ld`.
fn im2col(s: &ConvShape, x: &[f64], cols: &mut [f64], ld: usize, col0: usize) {
    let (k, wo, st) = (s.k, s.wo, s.stride);
    for c in 0..s.cg() {
        let xc = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..k {
            let rows = s.valid_rows(ki);
            for kj in 0..k {
                let cols_ok = s.valid_cols(kj);
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld + col0..row * ld + col0 + s.plane()];
                dst[..rows.start * wo].fill(0.0);
                dst[rows.end * wo..].fill(0.0);
                for oy in rows.clone() {
                    dst[oy * wo..oy * wo + cols_ok.start].fill(0.0);
                    dst[oy * wo + cols_ok.end..(oy + 1) * wo].fill(0.0);
                    let src = &xc[(oy * st + ki - s.pad) * s.w..][cols_ok.start * st + kj - s.pad..];
                    let d = &mut dst[oy * wo..(oy + 1) * wo][cols_ok.clone()];
                    d.iter_mut().zip(src.iter().step_by(st)).for_each(|(d, &v)| *d = v);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx: [cg, h, w]`.
fn col2im(s: &ConvShape, cols: &[f64], ld: usize, col0: usize, dx: &mut [f64]) {
    let (k, wo, st) = (s.k, s.wo, s.stride);
    for c in 0..s.cg() {
        let dc = &mut dx[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..k {
            let rows = s.valid_rows(ki);
            for kj in 0..k {
                let cols_ok = s.valid_cols(kj);
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld + col0..row * ld + col0 + s.plane()];
                for oy in rows.clone() {
                    let d = &mut dc[(oy * st + ki - s.pad) * s.w..][cols_ok.start * st + kj - s.pad..];
                    let g = &src[oy * wo..(oy + 1) * wo][cols_ok.clone()];
                    d.iter_mut().step_by(st).zip(g).for_each(|(d, &v)| *d += v);
                }
            }
        }
    }
}

/// `out: [b, o, ho, wo]` for `x: [b, c, h, w]`, `wt: [o, c/groups, k, k]`.
pub(crate) fn forward(s: &ConvShape, x: &[f64], wt: &[f64]) -> Vec<f64> {
    let plane = s.plane();
    let mut out = vec![0.0; s.b * s.o * plane];
    if s.depthwise() {
        let kk = s.k * s.k;
        for bc in 0..s.b * s.c {
            let ch = bc % s.c;
            let xs = &x[bc * s.h * s.w..(bc + 1) * s.h * s.w];
            let ws = &wt[ch * kk..(ch + 1) * kk];
            let dst = &mut out[bc * plane..(bc + 1) * plane];
            for ki in 0..s.k {
                let rows = s.valid_rows(ki);
                for kj in 0..s.k {
                    let cols_ok = s.valid_cols(kj);
                    let wv = ws[ki * s.k + kj];
                    for oy in rows.clone() {
                        let src = &xs[(oy * s.stride + ki - s.pad) * s.w..][cols_ok.start * s.stride + kj - s.pad..];
                        let d = &mut dst[oy * s.wo..(oy + 1) * s.wo][cols_ok.clone()];
                        d.iter_mut().zip(src.iter().step_by(s.stride)).for_each(|(d, &v)| *d += wv * v);
                    }
                }
            }
        }
        return out;
    }
    let (cg, og, ckk) = (s.cg(), s.og(), s.ckk());
    if s.pointwise() {
        for bi in 0..s.b {
            for g in 0..s.groups {
                let xo = (bi * s.c + g * cg) * plane;
                let oo = (bi * s.o + g * og) * plane;
                let ws = &wt[g * og * cg..(g + 1) * og * cg];
                gemm(og, cg, plane, ws, false, &x[xo..xo + cg * plane], false, &mut out[oo..oo + og * plane], false);
            }
        }
        return out;
    }
    let chunk = s.images_per_chunk();
    let mut cols = vec![0.0; ckk * chunk * plane];
    let mut tmp = vec![0.0; og * chunk * plane];
    for g in 0..s.groups {
        let ws = &wt[g * og * ckk..(g + 1) * og * ckk];
        for b0 in (0..s.b).step_by(chunk) {
            let nb = chunk.min(s.b - b0);
            let ld = nb * plane;
            for j in 0..nb {
                let xo = ((b0 + j) * s.c + g * cg) * s.h * s.w;
                im2col(s, &x[xo..xo + cg * s.h * s.w], &mut cols, ld, j * plane);
            }
            gemm(og, ckk, ld, ws, false, &cols, false, &mut tmp, false);
            for j in 0..nb {
                for r in 0..og {
                    let dst = ((b0 + j) * s.o + g * og + r) * plane;
                    out[dst..dst + plane].copy_from_slice(&tmp[r * ld + j * plane..r * ld + (j + 1) * plane]);
                }
            }
        }
    }
    out
}

/// Gradients `(dx, dw)` from the output gradient `gout: [b, o, ho, wo]`;
/// each is computed only when requested.
pub(crate) fn backward(
    s: &ConvShape,
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = s.plane();
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; wt.len()]);
    if s.depthwise() {
        let kk = s.k * s.k;
        for bc in 0..s.b * s.c {
            let ch = bc % s.c;
            let xs = &x[bc * s.h * s.w..(bc + 1) * s.h * s.w];
            let gs = &gout[bc * plane..(bc + 1) * plane];
            for ki in 0..s.k {
                let rows = s.valid_rows(ki);
                for kj in 0..s.k {
                    let cols_ok = s.valid_cols(kj);
                    let widx = ch * kk + ki * s.k + kj;
                    let mut acc = 0.0;
                    for oy in rows.clone() {
                        let base = (oy * s.stride + ki - s.pad) * s.w + cols_ok.start * s.stride + kj - s.pad;
                        let grow = &gs[oy * s.wo..(oy + 1) * s.wo][cols_ok.clone()];
                        acc += grow.iter().zip(xs[base..].iter().step_by(s.stride)).map(|(g, x)| g * x).sum::<f64>();
                        if let Some(dx) = dx.as_mut() {
                            let wv = wt[widx];
                            let d = &mut dx[bc * s.h * s.w + base..(bc + 1) * s.h * s.w];
                            d.iter_mut().step_by(s.stride).zip(grow).for_each(|(d, &g)| *d += wv * g);
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
        return (dx, dw);
    }
    let (cg, og, ckk) = (s.cg(), s.og(), s.ckk());
    if s.pointwise() {
        for bi in 0..s.b {
            for g in 0..s.groups {
                let xo = (bi * s.c + g * cg) * plane;
                let go = &gout[(bi * s.o + g * og) * plane..(bi * s.o + (g + 1) * og) * plane];
                if let Some(dw) = dw.as_mut() {
                    let xs = &x[xo..xo + cg * plane];
                    gemm(og, plane, cg, go, false, xs, true, &mut dw[g * og * cg..(g + 1) * og * cg], true);
                }
                if let Some(dx) = dx.as_mut() {
                    let ws = &wt[g * og * cg..(g + 1) * og * cg];
                    gemm(cg, og, plane, ws, true, go, false, &mut dx[xo..xo + cg * plane], true);
                }
            }
        }
        return (dx, dw);
    }
    let chunk = s.images_per_chunk();
    let mut cols = vec![0.0; ckk * chunk * plane];
    let mut gbuf = vec![0.0; og * chunk * plane];
    for g in 0..s.groups {
        let ws = &wt[g * og * ckk..(g + 1) * og * ckk];
        for b0 in (0..s.b).step_by(chunk) {
            let nb = chunk.min(s.b - b0);
            let ld = nb * plane;
            for j in 0..nb {
                for r in 0..og {
                    let src = ((b0 + j) * s.o + g * og + r) * plane;
                    gbuf[r * ld + j * plane..r * ld + (j + 1) * plane].copy_from_slice(&gout[src..src + plane]);
                }
            }
            if let Some(dw) = dw.as_mut() {
                for j in 0..nb {
                    let xo = ((b0 + j) * s.c + g * cg) * s.h * s.w;
                    im2col(s, &x[xo..xo + cg * s.h * s.w], &mut cols, ld, j * plane);
                }
                gemm(og, ld, ckk, &gbuf, false, &cols, true, &mut dw[g * og * ckk..(g + 1) * og * ckk], true);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(ckk, og, ld, ws, true, &gbuf, false, &mut cols, false);
                for j in 0..nb {
                    let xo = ((b0 + j) * s.c + g * cg) * s.h * s.w;
                    col2im(s, &cols, ld, j * plane, &mut dx[xo..xo + cg * s.h * s.w]);
                }
            }
        }
    }
    (dx, dw)
}
