//! Raw numeric kernels shared by the tape's forward and backward passes.

use super::tensor::Scalar;

/// Strided view of a row-major matrix for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [Scalar],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [Scalar], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub fn transposed(data: &'a [Scalar], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `out[m, n] = beta * out + a[m, k] * b[k, n]`, `out` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: Scalar, out: &mut [Scalar]) {
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the caller-facing views above encode the layouts of slices whose
    // lengths were validated against (m, k, n) by the tape ops.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over NHWC input with an HWCF kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub filters: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap of output row `row`.
    #[inline]
    fn for_each_tap(&self, row: usize, mut f: impl FnMut(usize, usize)) {
        let ox = row % self.out_w;
        let oy = (row / self.out_w) % self.out_h;
        let n = row / (self.out_w * self.out_h);
        for ky in 0..self.k_h {
            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
            if iy < 0 || iy >= self.in_h as isize {
                continue;
            }
            for kx in 0..self.k_w {
                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                if ix < 0 || ix >= self.in_w as isize {
                    continue;
                }
                let base_in = ((n * self.in_h + iy as usize) * self.in_w + ix as usize) * self.in_c;
                let base_col = (ky * self.k_w + kx) * self.in_c;
                for c in 0..self.in_c {
                    f(base_col + c, base_in + c);
                }
            }
        }
    }

    pub fn im2col(&self, input: &[Scalar]) -> Vec<Scalar> {
        let patch = self.patch_len();
        let mut cols = vec![0.0; self.out_positions() * patch];
        for (row, dst) in cols.chunks_exact_mut(patch).enumerate() {
            self.for_each_tap(row, |ci, ii| dst[ci] = input[ii]);
        }
        cols
    }

    pub fn col2im_add(&self, cols: &[Scalar], grad_input: &mut [Scalar]) {
        let patch = self.patch_len();
        for (row, src) in cols.chunks_exact(patch).enumerate() {
            self.for_each_tap(row, |ci, ii| grad_input[ii] += src[ci]);
        }
    }
}

/// 2x2 stride-2 max pooling over NHWC; returns values and the flat input index of each max.
pub(crate) fn maxpool2(input: &[Scalar], n: usize, h: usize, w: usize, c: usize) -> (Vec<Scalar>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_i = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = input[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        // strict comparison keeps the first maximum on ties
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (out, arg)
}

/// Row-wise softmax of a `[rows, k]` matrix, computed with max subtraction.
pub(crate) fn softmax_rows(logits: &[Scalar], k: usize) -> Vec<Scalar> {
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = src.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

/// `log softmax(row)[label]` for one row, stable form.
pub(crate) fn log_softmax_at(row: &[Scalar], label: usize) -> Scalar {
    let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<Scalar>().ln();
    row[label] - lse
}

pub(crate) fn logsumexp(values: &[Scalar]) -> Scalar {
    let max = values.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    if max == Scalar::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<Scalar>().ln()
}
