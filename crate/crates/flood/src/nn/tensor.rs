//! Dense f64 tensors and the handful of kernels (matmul, im2col/col2im) that
//! all network layers are built from.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad network config: {0}")]
    BadConfig(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
}

/// Dense multi-dimensional array with an optional gradient buffer of the same
/// shape (populated for trainable parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    /// Allocate a zeroed gradient buffer (idempotent).
    pub fn with_grad(mut self) -> Self {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().expect("grad just allocated")
    }
}

/// Rows of the register tile in the matmul microkernel.
const MR: usize = 4;
/// Columns of the register tile in the matmul microkernel.
const NR: usize = 8;

/// Shared register-tiled core for `C += op(A) * B`: `a_at(p, i)` returns
/// A[i, p] however A is stored. Full MR x NR tiles keep the accumulator in
/// registers; edge tiles fall back to an axpy loop.
#[inline(always)]
fn matmul_tiled_core(
    c: &mut [f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    a_at: impl Fn(usize, usize) -> f64,
) {
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let bv: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("NR slice");
                for (r, accr) in acc.iter_mut().enumerate() {
                    let av = a_at(p, i + r);
                    for q in 0..NR {
                        accr[q] += av * bv[q];
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for q in 0..NR {
                    crow[q] += accr[q];
                }
            }
            j += NR;
        }
        if j < n {
            for r in 0..MR {
                let crow = &mut c[(i + r) * n..(i + r + 1) * n];
                for p in 0..k {
                    let av = a_at(p, i + r);
                    let brow = &b[p * n..(p + 1) * n];
                    for jj in j..n {
                        crow[jj] += av * brow[jj];
                    }
                }
            }
        }
        i += MR;
    }
    for i in i..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a_at(p, i);
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C[m x n] += A[m x k] * B[k x n].
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    matmul_tiled_core(c, b, m, k, n, |p, i| a[i * k + p]);
}

/// C[m x n] += Aᵀ * B where A is [k x m], B is [k x n].
pub fn matmul_at_b_acc(c: &mut [f64], a: &[f64], b: &[f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    matmul_tiled_core(c, b, m, k, n, |p, i| a[p * m + i]);
}

/// C[m x n] += A * Bᵀ where A is [m x k], B is [n x k].
pub fn matmul_a_bt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] += s;
        }
    }
}

/// Output spatial size of a convolution.
pub fn conv_out_dim(in_dim: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (in_dim + 2 * padding).checked_sub(kernel)?.checked_div(stride).map(|v| v + 1)
}

/// Unfold one image `x` of shape (C, H, W) into columns of shape
/// (C*k*k, OH*OW) for kernel `k`, stride `s`, zero padding `p`.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    cols: &mut [f64],
) {
    let oh = conv_out_dim(h, k, s, p).expect("valid conv geometry");
    let ow = conv_out_dim(w, k, s, p).expect("valid conv geometry");
    let ncols = oh * ow;
    debug_assert_eq!(cols.len(), c * k * k * ncols);
    cols.iter_mut().for_each(|v| *v = 0.0);
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * ncols;
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    // ix = ox*s + kx - p must lie in [0, w)
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = xc[iy * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image of shape
/// (C, H, W). `x` is accumulated into, not overwritten.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    x: &mut [f64],
) {
    let oh = conv_out_dim(h, k, s, p).expect("valid conv geometry");
    let ow = conv_out_dim(w, k, s, p).expect("valid conv geometry");
    let ncols = oh * ow;
    debug_assert_eq!(cols.len(), c * k * k * ncols);
    debug_assert_eq!(x.len(), c * h * w);
    for ch in 0..c {
        let xc = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * ncols;
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            xc[iy * w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
