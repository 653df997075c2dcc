//! Dense loops shared by the differentiable ops.
//!
//! Every kernel accumulates in a fixed order so results are reproducible
//! bit-for-bit across runs.

/// `c[m,n] += a[m,k] * b[k,n]`, all row-major.
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// Row-major transpose of a `rows x cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `c[m,n] += a[m,k] * b[n,k]^T`.
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm(a, &bt, c, m, k, n);
}

/// `c[m,n] += a[k,m]^T * b[k,n]`.
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let at = transpose(a, k, m);
    gemm(&at, b, c, m, k, n);
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the unfolded matrix: one per output pixel across the batch.
    pub fn columns(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds `input[N,C,H,W]` into `[C*kh*kw, N*H'*W']`.
pub fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols = g.columns();
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.patch_len() * cols];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let src = &input[(n * g.in_channels + c) * g.height * g.width..];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..];
                        let base = n * plane + oy * g.out_w;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters `[C*kh*kw, N*H'*W']` back onto `[N,C,H,W]`.
pub fn col2im(cols_data: &[f64], g: &ConvGeometry, input_grad: &mut [f64]) {
    let cols = g.columns();
    let plane = g.out_h * g.out_w;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let dst = &mut input_grad[(n * g.in_channels + c) * g.height * g.width..];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let base = n * plane + oy * g.out_w;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[iy as usize * g.width + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
