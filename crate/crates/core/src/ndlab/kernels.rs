//! Convolution kernels: im2col/col2im around a single-threaded sgemm.
//!
//! All reductions run in a fixed order for a given problem size, so outputs
//! and gradients are bit-reproducible on one machine.

/// Geometry of a square-kernel, zero-padded 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the im2col matrix (`C_in · k · k`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// A 1×1, stride-1 convolution reads its input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn im2col(input: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    let mut cols = vec![0.0f32; g.patch_len() * npix];
    for c in 0..g.in_channels {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column-matrix gradient back onto the input grid.
pub fn col2im(cols: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b` (`beta = 0`) or `c += a · b` (`beta = 1`), with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices that cover every strided access of an
    // m×k, k×n and m×n matrix; the strides are derived from those same dims.
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

/// `out[co, p] = bias[co] + Σ_k weight[co, k] · cols[k, p]`.
pub fn conv_forward(cols: &[f32], weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let (m, k, n) = (g.out_channels, g.patch_len(), g.out_pixels());
    let mut out = vec![0.0f32; m * n];
    gemm(m, k, n, weight, (k as isize, 1), cols, (n as isize, 1), 0.0, &mut out);
    if let Some(bias) = bias {
        for (row, &b) in out.chunks_exact_mut(n).zip(bias) {
            row.iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

/// Accumulates `grad_weight += grad_out · colsᵀ`.
pub fn conv_grad_weight(grad_out: &[f32], cols: &[f32], g: &ConvGeom, grad_weight: &mut [f32]) {
    let (m, k, n) = (g.out_channels, g.out_pixels(), g.patch_len());
    // colsᵀ element (p, r) lives at cols[r * npix + p].
    gemm(
        m,
        k,
        n,
        grad_out,
        (k as isize, 1),
        cols,
        (1, k as isize),
        1.0,
        grad_weight,
    );
}

pub fn conv_grad_bias(grad_out: &[f32], g: &ConvGeom, grad_bias: &mut [f32]) {
    let n = g.out_pixels();
    for (gb, row) in grad_bias.iter_mut().zip(grad_out.chunks_exact(n)) {
        *gb += row.iter().sum::<f32>();
    }
}

/// `weightᵀ · grad_out`, the gradient of the column matrix.
pub fn conv_grad_cols(grad_out: &[f32], weight: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (m, k, n) = (g.patch_len(), g.out_channels, g.out_pixels());
    let mut out = vec![0.0f32; m * n];
    // weightᵀ element (r, co) lives at weight[co * patch + r].
    gemm(
        m,
        k,
        n,
        weight,
        (1, m as isize),
        grad_out,
        (n as isize, 1),
        0.0,
        &mut out,
    );
    out
}
