//! Raw float kernels over flat row-major buffers.

use rayon::prelude::*;

/// `c = a' · b' + beta · c` where `a'` is `a` or its transpose (`m x k` after
/// transposition) and likewise for `b'` (`k x n`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices: a is m*k, b is k*n, c is m*n with the strides chosen to match.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output spatial extent, or `None` if the combination admits no output.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        if self.stride == 0 {
            return None;
        }
        let span = |len: usize| {
            let padded = len + 2 * self.padding;
            (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
        };
        match (span(self.height), span(self.width)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Some((h, w)),
            _ => None,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds one image `[C, H, W]` into columns `[C*k*k, Ho*Wo]`.
pub fn im2col(g: &ConvGeometry, img: &[f32], cols: &mut [f32]) {
    let (oh, ow) = g.output_hw().expect("valid geometry");
    let k = g.kernel;
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * g.stride + ky) as isize - g.padding as isize;
                    for x in 0..ow {
                        let ix = (x * g.stride + kx) as isize - g.padding as isize;
                        dst[y * ow + x] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            img[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image gradient.
pub fn col2im(g: &ConvGeometry, cols: &[f32], img: &mut [f32]) {
    let (oh, ow) = g.output_hw().expect("valid geometry");
    let k = g.kernel;
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for x in 0..ow {
                        let ix = (x * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            img[(c * g.height + iy as usize) * g.width + ix as usize] +=
                                src[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. `x` is `[B, C, H, W]`, `w` is `[O, C, k, k]`.
pub fn conv2d_forward(g: &ConvGeometry, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let (oh, ow) = g.output_hw().expect("valid geometry");
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * oh * ow;
    let mut out = vec![0.0; g.batch * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(b, dst)| {
        let mut cols = vec![0.0; g.patch_len() * oh * ow];
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
        gemm(g.out_channels, g.patch_len(), oh * ow, w, false, &cols, false, dst, 0.0);
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
    });
    out
}

/// Returns `(grad_x, grad_w, grad_bias)`.
pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f32],
    w: &[f32],
    grad_out: &[f32],
    need_x: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let (oh, ow) = g.output_hw().expect("valid geometry");
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * oh * ow;
    let patch = g.patch_len();

    let grad_x = need_x.then(|| {
        let mut gx = vec![0.0; g.batch * in_len];
        gx.par_chunks_mut(in_len).enumerate().for_each(|(b, dst)| {
            let mut cols = vec![0.0; patch * oh * ow];
            gemm(
                patch,
                g.out_channels,
                oh * ow,
                w,
                true,
                &grad_out[b * out_len..(b + 1) * out_len],
                false,
                &mut cols,
                0.0,
            );
            col2im(g, &cols, dst);
        });
        gx
    });

    let mut grad_w = vec![0.0; g.out_channels * patch];
    let mut grad_b = vec![0.0; g.out_channels];
    let mut cols = vec![0.0; patch * oh * ow];
    for b in 0..g.batch {
        let go = &grad_out[b * out_len..(b + 1) * out_len];
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
        gemm(g.out_channels, oh * ow, patch, go, false, &cols, true, &mut grad_w, 1.0);
        for (o, chunk) in go.chunks(oh * ow).enumerate() {
            grad_b[o] += chunk.iter().sum::<f32>();
        }
    }
    (grad_x, grad_w, grad_b)
}

/// Max pooling over `[B, C, H, W]`; returns the output and the flat input
/// index that won each window (first maximum in scan order).
pub fn max_pool2d_forward(
    x: &[f32],
    shape: [usize; 4],
    kernel: usize,
    stride: usize,
) -> (Vec<f32>, Vec<usize>) {
    let [b, c, h, w] = shape;
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (y * stride + ky) * w + xo * stride + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}
