//! Raw forward/backward kernels on flat row-major buffers.
//!
//! Everything here is shape-checked by the caller (the tape ops); these
//! functions only index.

/// `c = op(a) · op(b) + beta · c` for row-major operands, where `op(a)` is
/// `m × k` and `op(b)` is `k × n`. A transposed operand is stored with its
/// dimensions swapped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the debug assertions above spell out the extents; every index
    // dgemm touches through these strides lies inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// A 1×1 stride-1 unpadded conv reads its input directly as the column
    /// matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `oj` whose input column `oj·stride + kj − pad` lies
/// inside `0..width`.
fn valid_cols(g: &ConvGeometry, kj: usize) -> std::ops::Range<usize> {
    let pad = g.padding as isize;
    let (s, kj) = (g.stride as isize, kj as isize);
    // Smallest oj with oj·s + kj − pad ≥ 0.
    let lo = ((pad - kj).max(0) + s - 1) / s;
    // Largest oj with oj·s + kj − pad ≤ width − 1, plus one.
    let hi = ((g.width as isize - 1 + pad - kj) / s + 1).clamp(0, g.out_w as isize);
    (lo.min(hi) as usize)..(hi as usize)
}

fn im2col(g: &ConvGeometry, x: &[f64], col: &mut [f64]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let cols = valid_cols(g, kj);
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    let out_row = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii >= g.height as isize || cols.is_empty() {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &xc[ii as usize * g.width..(ii as usize + 1) * g.width];
                    out_row[..cols.start].fill(0.0);
                    out_row[cols.end..].fill(0.0);
                    let first = (cols.start * g.stride + kj) as isize - pad;
                    let first = first as usize;
                    if g.stride == 1 {
                        out_row[cols.clone()].copy_from_slice(&src[first..first + cols.len()]);
                    } else {
                        for (v, &s) in out_row[cols.clone()].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, col: &[f64], dx: &mut [f64]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &col[row * plane..(row + 1) * plane];
                let cols = valid_cols(g, kj);
                if cols.is_empty() {
                    continue;
                }
                let first = ((cols.start * g.stride + kj) as isize - pad) as usize;
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst = &mut dxc[ii as usize * g.width..(ii as usize + 1) * g.width];
                    let src_row = &src[oi * g.out_w + cols.start..oi * g.out_w + cols.end];
                    for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(src_row) {
                        *d += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![0.0; g.batch * g.out_channels * plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * plane]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let cols: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        let ob = &mut out[b * g.out_channels * plane..(b + 1) * g.out_channels * plane];
        gemm(g.out_channels, patch, plane, w, false, cols, false, ob, 0.0);
        for (k, row) in ob.chunks_exact_mut(plane).enumerate() {
            row.iter_mut().for_each(|v| *v += bias[k]);
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let [need_x, need_w, need_b] = need;
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    let mut db = need_b.then(|| vec![0.0; g.out_channels]);
    let mut col = vec![0.0; if g.is_pointwise() { 0 } else { patch * plane }];
    let mut dcol = vec![0.0; if need_x { patch * plane } else { 0 }];
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let db_out = &dout[b * g.out_channels * plane..(b + 1) * g.out_channels * plane];
        if let Some(dw) = dw.as_mut() {
            let cols: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut col);
                &col
            };
            gemm(g.out_channels, plane, patch, db_out, false, cols, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.in_len()..(b + 1) * g.in_len()];
            if g.is_pointwise() {
                gemm(patch, g.out_channels, plane, w, true, db_out, false, dxb, 0.0);
            } else {
                gemm(patch, g.out_channels, plane, w, true, db_out, false, &mut dcol, 0.0);
                col2im(g, &dcol, dxb);
            }
        }
        if let Some(db) = db.as_mut() {
            for (k, row) in db_out.chunks_exact(plane).enumerate() {
                db[k] += row.iter().sum::<f64>();
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Stride-2, 2×2 transposed convolution. Weight layout `[C_in, C_out, 2, 2]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct UpGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

pub(crate) fn conv_transpose2d_forward(
    g: &UpGeometry,
    x: &[f64],
    w: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let (h, wd) = (g.height, g.width);
    let plane = h * wd;
    let taps = g.out_channels * 4;
    let out_plane = 4 * plane;
    let mut out = vec![0.0; g.batch * g.out_channels * out_plane];
    let mut y = vec![0.0; taps * plane];
    for b in 0..g.batch {
        let xb = &x[b * g.in_channels * plane..(b + 1) * g.in_channels * plane];
        gemm(taps, g.in_channels, plane, w, true, xb, false, &mut y, 0.0);
        let ob = &mut out[b * g.out_channels * out_plane..(b + 1) * g.out_channels * out_plane];
        for k in 0..g.out_channels {
            let ok = &mut ob[k * out_plane..(k + 1) * out_plane];
            for tap in 0..4 {
                let (di, dj) = (tap / 2, tap % 2);
                let src = &y[(k * 4 + tap) * plane..(k * 4 + tap + 1) * plane];
                for i in 0..h {
                    let dst_row = (2 * i + di) * 2 * wd;
                    for j in 0..wd {
                        ok[dst_row + 2 * j + dj] = src[i * wd + j] + bias[k];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward(
    g: &UpGeometry,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let (h, wd) = (g.height, g.width);
    let plane = h * wd;
    let taps = g.out_channels * 4;
    let out_plane = 4 * plane;
    let [need_x, need_w, need_b] = need;
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    let mut db = need_b.then(|| vec![0.0; g.out_channels]);
    let mut gathered = vec![0.0; taps * plane];
    for b in 0..g.batch {
        let gb = &dout[b * g.out_channels * out_plane..(b + 1) * g.out_channels * out_plane];
        for k in 0..g.out_channels {
            let gk = &gb[k * out_plane..(k + 1) * out_plane];
            for tap in 0..4 {
                let (di, dj) = (tap / 2, tap % 2);
                let dst = &mut gathered[(k * 4 + tap) * plane..(k * 4 + tap + 1) * plane];
                for i in 0..h {
                    let src_row = (2 * i + di) * 2 * wd;
                    for j in 0..wd {
                        dst[i * wd + j] = gk[src_row + 2 * j + dj];
                    }
                }
            }
        }
        let xb = &x[b * g.in_channels * plane..(b + 1) * g.in_channels * plane];
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.in_channels * plane..(b + 1) * g.in_channels * plane];
            gemm(g.in_channels, taps, plane, w, false, &gathered, false, dxb, 0.0);
        }
        if let Some(dw) = dw.as_mut() {
            gemm(g.in_channels, plane, taps, xb, false, &gathered, true, dw, 1.0);
        }
        if let Some(db) = db.as_mut() {
            for (k, v) in db.iter_mut().enumerate() {
                *v += gathered[k * 4 * plane..(k + 1) * 4 * plane].iter().sum::<f64>();
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// 2×2 max pooling; returns pooled values and the flat input index each one
/// came from (first row-major maximum on ties).
pub(crate) fn max_pool2d_forward(dims: [usize; 4], x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let [b, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}
