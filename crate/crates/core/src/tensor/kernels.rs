// Raw forward/backward kernels over flat row-major buffers.

use super::Scalar;

/// Row-major matrix operand: `rows x cols` as seen by the product, optionally
/// stored transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, transposed: false }
    }

    /// The transpose of a row-major `cols x rows` buffer.
    pub fn t(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, transposed: true }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c (m x n, row-major) = a * b + beta * c`.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(c.len(), a.rows * b.cols);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: extents and strides were checked against the buffer lengths above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad` is in bounds.
fn valid_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let offset = kj as isize - g.padding as isize;
    let lo = if offset >= 0 { 0 } else { (-offset as usize).div_ceil(g.stride) };
    let last = g.width as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { (last as usize / g.stride + 1).min(g.out_w) };
    (lo.min(hi), hi)
}

/// Unfolds one `C x H x W` image into a `(C*kh*kw) x (out_h*out_w)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_span(g, kj);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    dst_row[..lo].fill(T::zero());
                    dst_row[hi..].fill(T::zero());
                    let start = ((lo * g.stride + kj) as isize - pad) as usize;
                    if g.stride == 1 {
                        dst_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (k, d) in dst_row[lo..hi].iter_mut().enumerate() {
                            *d = src[start + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into an image gradient.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_span(g, kj);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let start = ((lo * g.stride + kj) as isize - pad) as usize;
                    let src_row = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(src_row) {
                            *d = *d + v;
                        }
                    } else {
                        for (k, &v) in src_row.iter().enumerate() {
                            let d = &mut dst[start + k * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    kernel: &[T],
    out_channels: usize,
) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_channels * g.col_cols();
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..batch {
        im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols);
        gemm(
            MatRef::new(kernel, out_channels, g.col_rows()),
            MatRef::new(&cols, g.col_rows(), g.col_cols()),
            T::zero(),
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
    out
}

/// Accumulates input and/or kernel gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    kernel: &[T],
    out_channels: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
) {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_channels * g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..batch {
        let dout_n = &dout[n * out_len..(n + 1) * out_len];
        if let Some(dk) = dk.as_deref_mut() {
            im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols);
            gemm(
                MatRef::new(dout_n, out_channels, g.col_cols()),
                MatRef::t(&cols, g.col_cols(), g.col_rows()),
                T::one(),
                dk,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(
                MatRef::t(kernel, g.col_rows(), out_channels),
                MatRef::new(dout_n, out_channels, g.col_cols()),
                T::zero(),
                &mut cols,
            );
            col2im_add(&cols, g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
}

/// Max pooling over `planes` independent `h x w` planes.
///
/// Returns the pooled values and, per output, the flat input index of the
/// winning element (first maximum in row-major window order).
pub(crate) fn maxpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let mut argmax = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = x[best_idx];
                for dy in 0..window {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for dx in 0..window {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax, out_h, out_w)
}

/// Numerically stable softmax of each length-`cols` row.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total = total + *d;
        }
        let inv = T::one() / total;
        for d in dst.iter_mut() {
            *d = *d * inv;
        }
    }
    out
}
