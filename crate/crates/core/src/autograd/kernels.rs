//! Dense numeric kernels over row-major `f64` slices.
//!
//! Spatial tensors are laid out height-major, channels last: `(H, W, C)`.
//! Convolution kernels are `(kh, kw, C_in, C_out)`.

/// Geometry of a strided 2-D convolution with (possibly asymmetric) zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Builds a geometry with explicit padding on each side.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        (in_h, in_w, cin): (usize, usize, usize),
        (kh, kw, cout): (usize, usize, usize),
        stride: usize,
        (pad_top, pad_left, pad_bottom, pad_right): (usize, usize, usize, usize),
    ) -> Option<Self> {
        let padded_h = in_h + pad_top + pad_bottom;
        let padded_w = in_w + pad_left + pad_right;
        if stride == 0 || padded_h < kh || padded_w < kw {
            return None;
        }
        Some(ConvGeom {
            in_h,
            in_w,
            cin,
            cout,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h: (padded_h - kh) / stride + 1,
            out_w: (padded_w - kw) / stride + 1,
        })
    }

    #[inline]
    fn input_pos(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.in_h && ix < self.in_w).then_some((iy, ix))
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![0.0; g.out_h * g.out_w * cout];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let o = &mut out[(oy * g.out_w + ox) * cout..][..cout];
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let Some((iy, ix)) = g.input_pos(oy, ky, ox, kx) else {
                        continue;
                    };
                    let xrow = &x[(iy * g.in_w + ix) * cin..][..cin];
                    let wbase = (ky * g.kw + kx) * cin * cout;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv != 0.0 {
                            axpy(xv, &w[wbase + ci * cout..][..cout], o);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates gradients of a convolution. `dx` is skipped when `None`.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let (cin, cout) = (g.cin, g.cout);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let d = &dy[(oy * g.out_w + ox) * cout..][..cout];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let Some((iy, ix)) = g.input_pos(oy, ky, ox, kx) else {
                        continue;
                    };
                    let xoff = (iy * g.in_w + ix) * cin;
                    let wbase = (ky * g.kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[xoff + ci];
                        let woff = wbase + ci * cout;
                        if xv != 0.0 {
                            axpy(xv, d, &mut dw[woff..woff + cout]);
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xoff + ci] += dot(d, &w[woff..woff + cout]);
                        }
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for pix in dy.chunks_exact(cout) {
            axpy(1.0, pix, db);
        }
    }
}

/// Transposed convolution whose kernel size equals its stride `k`, so output
/// windows never overlap: `(H, W, cin) -> (k·H, k·W, cout)`.
pub fn deconv_forward(
    x: &[f64],
    (h, w_in, cin): (usize, usize, usize),
    wt: &[f64],
    k: usize,
    cout: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let out_w = w_in * k;
    let mut out = vec![0.0; h * k * out_w * cout];
    for y in 0..h {
        for xc in 0..w_in {
            let xrow = &x[(y * w_in + xc) * cin..][..cin];
            for ky in 0..k {
                for kx in 0..k {
                    let o = &mut out[((y * k + ky) * out_w + xc * k + kx) * cout..][..cout];
                    if let Some(b) = bias {
                        o.copy_from_slice(b);
                    }
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv != 0.0 {
                            axpy(xv, &wt[wbase + ci * cout..][..cout], o);
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn deconv_backward(
    x: &[f64],
    (h, w_in, cin): (usize, usize, usize),
    wt: &[f64],
    k: usize,
    cout: usize,
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let out_w = w_in * k;
    for y in 0..h {
        for xc in 0..w_in {
            let xoff = (y * w_in + xc) * cin;
            for ky in 0..k {
                for kx in 0..k {
                    let d = &dy[((y * k + ky) * out_w + xc * k + kx) * cout..][..cout];
                    let wbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let woff = wbase + ci * cout;
                        let xv = x[xoff + ci];
                        if xv != 0.0 {
                            axpy(xv, d, &mut dw[woff..woff + cout]);
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xoff + ci] += dot(d, &wt[woff..woff + cout]);
                        }
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for pix in dy.chunks_exact(cout) {
            axpy(1.0, pix, db);
        }
    }
}

/// Separable linear resampling: `y[i, j, c] = Σ_r Σ_s rows[i, r] · cols[j, s] · x[r, s, c]`.
pub fn mix_forward(
    x: &[f64],
    (h, w, c): (usize, usize, usize),
    rows: &ndarray::Array2<f64>,
    cols: &ndarray::Array2<f64>,
) -> Vec<f64> {
    let (out_h, out_w) = (rows.nrows(), cols.nrows());
    let mut tmp = vec![0.0; out_h * w * c];
    for i in 0..out_h {
        let t = &mut tmp[i * w * c..][..w * c];
        for r in 0..h {
            let a = rows[[i, r]];
            if a != 0.0 {
                axpy(a, &x[r * w * c..][..w * c], t);
            }
        }
    }
    let mut out = vec![0.0; out_h * out_w * c];
    for i in 0..out_h {
        for j in 0..out_w {
            let o = &mut out[(i * out_w + j) * c..][..c];
            for s in 0..w {
                let a = cols[[j, s]];
                if a != 0.0 {
                    axpy(a, &tmp[(i * w + s) * c..][..c], o);
                }
            }
        }
    }
    out
}

pub fn mix_backward(
    dy: &[f64],
    (h, w, c): (usize, usize, usize),
    rows: &ndarray::Array2<f64>,
    cols: &ndarray::Array2<f64>,
) -> Vec<f64> {
    let (out_h, out_w) = (rows.nrows(), cols.nrows());
    let mut dtmp = vec![0.0; out_h * w * c];
    for i in 0..out_h {
        for j in 0..out_w {
            let d = &dy[(i * out_w + j) * c..][..c];
            for s in 0..w {
                let a = cols[[j, s]];
                if a != 0.0 {
                    axpy(a, d, &mut dtmp[(i * w + s) * c..][..c]);
                }
            }
        }
    }
    let mut dx = vec![0.0; h * w * c];
    for i in 0..out_h {
        let d = &dtmp[i * w * c..][..w * c];
        for r in 0..h {
            let a = rows[[i, r]];
            if a != 0.0 {
                axpy(a, d, &mut dx[r * w * c..][..w * c]);
            }
        }
    }
    dx
}

/// Squash factor `‖v‖ / (1 + ‖v‖²)` so that `squash(v) = factor · v`.
#[inline]
pub fn squash_factor(sq_norm: f64) -> f64 {
    sq_norm.sqrt() / (1.0 + sq_norm)
}

/// Added under the square root wherever the squash Jacobian divides by ‖v‖.
pub const SQUASH_EPS: f64 = 1e-18;

/// Vector–Jacobian product of squash for one vector.
pub fn squash_vjp(v: &[f64], g: &[f64], out: &mut [f64]) {
    let s: f64 = dot(v, v);
    let n = s.sqrt();
    let f = n / (1.0 + s);
    let coef = 1.0 / ((s + SQUASH_EPS).sqrt() * (1.0 + s)) - 2.0 * n / ((1.0 + s) * (1.0 + s));
    let vg = dot(v, g);
    for ((o, &gi), &vi) in out.iter_mut().zip(g).zip(v) {
        *o += f * gi + coef * vg * vi;
    }
}
