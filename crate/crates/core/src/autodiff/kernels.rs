//! Slice-level kernels behind the differentiable ops.
//!
//! All maps are NCHW, row-major. Convolutions are cross-correlations with
//! zero padding, matching the usual deep-learning convention.

/// Spatial geometry shared by the plane kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PlaneGeom {
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PlaneGeom {
    pub fn new(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            h,
            w,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
            stride,
            pad,
        })
    }

    #[inline]
    fn in_pos(&self, o: usize, kk: usize) -> Option<usize> {
        let p = o * self.stride + kk;
        if p < self.pad {
            return None;
        }
        Some(p - self.pad)
    }

    /// Output range `[lo, hi)` along x whose input index `ox + kx - pad` is valid (stride 1).
    #[inline]
    fn x_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }
}

/// `out += wv * shift(input)` for one kernel tap `(ky, kx)`.
#[inline]
pub(crate) fn tap_forward(
    out: &mut [f64],
    input: &[f64],
    wv: f64,
    ky: usize,
    kx: usize,
    g: &PlaneGeom,
) {
    if wv == 0.0 {
        return;
    }
    for oy in 0..g.oh {
        let Some(iy) = g.in_pos(oy, ky) else { continue };
        if iy >= g.h {
            continue;
        }
        let out_row = &mut out[oy * g.ow..(oy + 1) * g.ow];
        let in_row = &input[iy * g.w..(iy + 1) * g.w];
        if g.stride == 1 {
            let (lo, hi) = g.x_range(kx);
            if lo >= hi {
                continue;
            }
            let off = lo + kx - g.pad;
            for (o, i) in out_row[lo..hi]
                .iter_mut()
                .zip(&in_row[off..off + (hi - lo)])
            {
                *o += wv * i;
            }
        } else {
            for (ox, o) in out_row.iter_mut().enumerate() {
                if let Some(ix) = g.in_pos(ox, kx) {
                    if ix < g.w {
                        *o += wv * in_row[ix];
                    }
                }
            }
        }
    }
}

/// `dx += wv * shift^T(dy)`, the adjoint of [`tap_forward`] w.r.t. the input.
#[inline]
pub(crate) fn tap_backward_input(
    dx: &mut [f64],
    dy: &[f64],
    wv: f64,
    ky: usize,
    kx: usize,
    g: &PlaneGeom,
) {
    if wv == 0.0 {
        return;
    }
    for oy in 0..g.oh {
        let Some(iy) = g.in_pos(oy, ky) else { continue };
        if iy >= g.h {
            continue;
        }
        let dy_row = &dy[oy * g.ow..(oy + 1) * g.ow];
        let dx_row = &mut dx[iy * g.w..(iy + 1) * g.w];
        if g.stride == 1 {
            let (lo, hi) = g.x_range(kx);
            if lo >= hi {
                continue;
            }
            let off = lo + kx - g.pad;
            for (d, o) in dx_row[off..off + (hi - lo)].iter_mut().zip(&dy_row[lo..hi]) {
                *d += wv * o;
            }
        } else {
            for (ox, o) in dy_row.iter().enumerate() {
                if let Some(ix) = g.in_pos(ox, kx) {
                    if ix < g.w {
                        dx_row[ix] += wv * o;
                    }
                }
            }
        }
    }
}

/// `sum(dy * shift(input))`, the weight gradient for one tap.
#[inline]
pub(crate) fn tap_backward_weight(
    dy: &[f64],
    input: &[f64],
    ky: usize,
    kx: usize,
    g: &PlaneGeom,
) -> f64 {
    let mut acc = 0.0;
    for oy in 0..g.oh {
        let Some(iy) = g.in_pos(oy, ky) else { continue };
        if iy >= g.h {
            continue;
        }
        let dy_row = &dy[oy * g.ow..(oy + 1) * g.ow];
        let in_row = &input[iy * g.w..(iy + 1) * g.w];
        if g.stride == 1 {
            let (lo, hi) = g.x_range(kx);
            if lo >= hi {
                continue;
            }
            let off = lo + kx - g.pad;
            acc += dy_row[lo..hi]
                .iter()
                .zip(&in_row[off..off + (hi - lo)])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        } else {
            for (ox, o) in dy_row.iter().enumerate() {
                if let Some(ix) = g.in_pos(ox, kx) {
                    if ix < g.w {
                        acc += o * in_row[ix];
                    }
                }
            }
        }
    }
    acc
}

#[inline]
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense convolution. `w` is `[co, ci, k, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    n: usize,
    ci: usize,
    co: usize,
    k: usize,
    g: &PlaneGeom,
) {
    let (ip, op) = (g.h * g.w, g.oh * g.ow);
    let pointwise = k == 1 && g.stride == 1 && g.pad == 0;
    for b in 0..n {
        for o in 0..co {
            let out_plane = &mut out[(b * co + o) * op..(b * co + o + 1) * op];
            for i in 0..ci {
                let in_plane = &x[(b * ci + i) * ip..(b * ci + i + 1) * ip];
                let wbase = (o * ci + i) * k * k;
                if pointwise {
                    let wv = w[wbase];
                    if wv != 0.0 {
                        axpy(out_plane, wv, in_plane);
                    }
                    continue;
                }
                for ky in 0..k {
                    for kx in 0..k {
                        tap_forward(out_plane, in_plane, w[wbase + ky * k + kx], ky, kx, g);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    n: usize,
    ci: usize,
    co: usize,
    k: usize,
    g: &PlaneGeom,
) {
    let (ip, op) = (g.h * g.w, g.oh * g.ow);
    let pointwise = k == 1 && g.stride == 1 && g.pad == 0;
    for b in 0..n {
        for o in 0..co {
            let dy_plane = &dy[(b * co + o) * op..(b * co + o + 1) * op];
            for i in 0..ci {
                let in_plane = &x[(b * ci + i) * ip..(b * ci + i + 1) * ip];
                let dx_plane = &mut dx[(b * ci + i) * ip..(b * ci + i + 1) * ip];
                let wbase = (o * ci + i) * k * k;
                if pointwise {
                    dw[wbase] += dot(dy_plane, in_plane);
                    let wv = w[wbase];
                    if wv != 0.0 {
                        axpy(dx_plane, wv, dy_plane);
                    }
                    continue;
                }
                for ky in 0..k {
                    for kx in 0..k {
                        let t = wbase + ky * k + kx;
                        dw[t] += tap_backward_weight(dy_plane, in_plane, ky, kx, g);
                        tap_backward_input(dx_plane, dy_plane, w[t], ky, kx, g);
                    }
                }
            }
        }
    }
}

/// Depthwise convolution. `w` is `[c, 1, k, k]`.
pub(crate) fn depthwise_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    n: usize,
    c: usize,
    k: usize,
    g: &PlaneGeom,
) {
    let (ip, op) = (g.h * g.w, g.oh * g.ow);
    for b in 0..n {
        for ch in 0..c {
            let out_plane = &mut out[(b * c + ch) * op..(b * c + ch + 1) * op];
            let in_plane = &x[(b * c + ch) * ip..(b * c + ch + 1) * ip];
            for ky in 0..k {
                for kx in 0..k {
                    tap_forward(out_plane, in_plane, w[(ch * k + ky) * k + kx], ky, kx, g);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    n: usize,
    c: usize,
    k: usize,
    g: &PlaneGeom,
) {
    let (ip, op) = (g.h * g.w, g.oh * g.ow);
    for b in 0..n {
        for ch in 0..c {
            let dy_plane = &dy[(b * c + ch) * op..(b * c + ch + 1) * op];
            let in_plane = &x[(b * c + ch) * ip..(b * c + ch + 1) * ip];
            let dx_plane = &mut dx[(b * c + ch) * ip..(b * c + ch + 1) * ip];
            for ky in 0..k {
                for kx in 0..k {
                    let t = (ch * k + ky) * k + kx;
                    dw[t] += tap_backward_weight(dy_plane, in_plane, ky, kx, g);
                    tap_backward_input(dx_plane, dy_plane, w[t], ky, kx, g);
                }
            }
        }
    }
}

/// Output extent of the 2x2 average pool; odd extents replicate the last row/column.
pub(crate) fn pooled_extent(e: usize) -> usize {
    e.div_ceil(2)
}

pub(crate) fn avg_pool2_forward(x: &[f64], out: &mut [f64], planes: usize, h: usize, w: usize) {
    let (oh, ow) = (pooled_extent(h), pooled_extent(w));
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = (2 * oy, (2 * oy + 1).min(h - 1));
            for ox in 0..ow {
                let (x0, x1) = (2 * ox, (2 * ox + 1).min(w - 1));
                dst[oy * ow + ox] = 0.25
                    * (src[y0 * w + x0] + src[y0 * w + x1] + src[y1 * w + x0] + src[y1 * w + x1]);
            }
        }
    }
}

pub(crate) fn avg_pool2_backward(dy: &[f64], dx: &mut [f64], planes: usize, h: usize, w: usize) {
    let (oh, ow) = (pooled_extent(h), pooled_extent(w));
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = (2 * oy, (2 * oy + 1).min(h - 1));
            for ox in 0..ow {
                let (x0, x1) = (2 * ox, (2 * ox + 1).min(w - 1));
                let g = 0.25 * src[oy * ow + ox];
                dst[y0 * w + x0] += g;
                dst[y0 * w + x1] += g;
                dst[y1 * w + x0] += g;
                dst[y1 * w + x1] += g;
            }
        }
    }
}
