//! Dense numeric kernels shared by the tape operations.
//!
//! Convolution is lowered to a matrix product over an im2col buffer so that
//! every inner loop runs over a long contiguous slice.

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent accumulators. Summation order is fixed,
/// so results are reproducible run to run.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

const MR: usize = 4;
const NR: usize = 8;

/// `C[m×n] = A · B[k×n]`, where `A[i][p]` lives at `a[i * si + p * sp]`.
///
/// Works on `MR × NR` tiles of C held in registers. Every element is still
/// accumulated from zero with `p` ascending, so the result does not depend on
/// the tiling.
fn gemm(a: &[f64], si: usize, sp: usize, b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let (mt, nt) = (m - m % MR, n - n % NR);
    let mut panel = vec![0.0; k * MR];
    for i0 in (0..mt).step_by(MR) {
        for (p, dst) in panel.chunks_exact_mut(MR).enumerate() {
            for (r, d) in dst.iter_mut().enumerate() {
                *d = a[(i0 + r) * si + p * sp];
            }
        }
        for j0 in (0..nt).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (brow, ap) in b.chunks_exact(n).zip(panel.chunks_exact(MR)) {
                let bv: &[f64; NR] = brow[j0..j0 + NR].try_into().unwrap();
                for (row, &s) in acc.iter_mut().zip(ap) {
                    for t in 0..NR {
                        row[t] += s * bv[t];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        for i in i0..i0 + MR {
            gemm_edge(a, si, sp, b, &mut c, i, nt..n, k, n);
        }
    }
    for i in mt..m {
        gemm_edge(a, si, sp, b, &mut c, i, 0..n, k, n);
    }
    c
}

/// Row `i` of C over `cols`, accumulated with `p` ascending like the tiles.
#[allow(clippy::too_many_arguments)]
fn gemm_edge(a: &[f64], si: usize, sp: usize, b: &[f64], c: &mut [f64], i: usize, cols: std::ops::Range<usize>, k: usize, n: usize) {
    if cols.is_empty() {
        return;
    }
    let row = &mut c[i * n + cols.start..i * n + cols.end];
    for p in 0..k {
        axpy(a[i * si + p * sp], &b[p * n + cols.start..p * n + cols.end], row);
    }
}

/// `C[m×n] = A[m×k] · B[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, k, 1, b, m, k, n)
}

/// `A[m×k] · B[n×k]ᵀ`
pub(crate) fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `A[k×m]ᵀ · B[k×n]`
pub(crate) fn matmul_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    gemm(a, 1, m, b, m, k, n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds the zero-padded input into a `(cin·k·k) × (oh·ow)` matrix.
fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut cols = Vec::with_capacity(g.rows() * g.cols());
    for ci in 0..g.cin {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        cols.resize(cols.len() + g.ow, 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    cols.extend((0..g.ow).map(|ox| {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        }
                    }));
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let mut input = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let plane = &mut input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let src = &cols[r * ncols..(r + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    input
}

pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(input, g);
    matmul(kernel, &cols, g.cout, g.rows(), g.cols())
}

/// Returns `(d_input, d_kernel)`, each computed only when requested.
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let dkernel = need_kernel.then(|| {
        let cols = im2col(input, g);
        matmul_a_bt(dout, &cols, g.cout, g.cols(), g.rows())
    });
    let dinput = need_input.then(|| {
        let dcols = matmul_at_b(kernel, dout, g.cout, g.rows(), g.cols());
        col2im(&dcols, g)
    });
    (dinput, dkernel)
}
