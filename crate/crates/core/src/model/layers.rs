//! Dense kernels with hand-written adjoints. Activations use the field
//! layout `[channel][time][lat][lon]`, so a spatial convolution over every
//! frame at once is a single GEMM against an im2col matrix.

/// Spatial and temporal extent of an activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn cols(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe buffers of exactly m*k, k*n and m*n
    // elements, checked above in debug builds and by the callers' shapes.
    unsafe {
        matrixmultiply::dgemm(
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

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| silu(v)).collect()
}

/// `dx += dy * silu'(x)`.
pub fn silu_backward(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for ((d, &xi), &g) in dx.iter_mut().zip(x).zip(dy) {
        *d += g * silu_grad(xi);
    }
}

/// 3x3 neighbourhood matrix: row `ci * 9 + tap`, column `t * h * w + p`.
/// Latitude is zero-padded, longitude wraps around.
pub fn im2col3(x: &[f64], ci: usize, d: Dims) -> Vec<f64> {
    let n = d.cols();
    let mut cols = vec![0.0; ci * 9 * n];
    for c in 0..ci {
        for tap in 0..9 {
            let di = tap / 3;
            let dj = tap % 3;
            let row = &mut cols[(c * 9 + tap) * n..(c * 9 + tap + 1) * n];
            for t in 0..d.t {
                let src = &x[(c * d.t + t) * d.plane()..(c * d.t + t + 1) * d.plane()];
                let dst = &mut row[t * d.plane()..(t + 1) * d.plane()];
                for i in 0..d.h {
                    let si = i + di;
                    if si == 0 || si > d.h {
                        continue;
                    }
                    let si = si - 1;
                    for j in 0..d.w {
                        let sj = (j + d.w + dj - 1) % d.w;
                        dst[i * d.w + j] = src[si * d.w + sj];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`], accumulating into `dx`.
pub fn col2im3(cols: &[f64], ci: usize, d: Dims, dx: &mut [f64]) {
    let n = d.cols();
    for c in 0..ci {
        for tap in 0..9 {
            let di = tap / 3;
            let dj = tap % 3;
            let row = &cols[(c * 9 + tap) * n..(c * 9 + tap + 1) * n];
            for t in 0..d.t {
                let dst = &mut dx[(c * d.t + t) * d.plane()..(c * d.t + t + 1) * d.plane()];
                let src = &row[t * d.plane()..(t + 1) * d.plane()];
                for i in 0..d.h {
                    let si = i + di;
                    if si == 0 || si > d.h {
                        continue;
                    }
                    let si = si - 1;
                    for j in 0..d.w {
                        let sj = (j + d.w + dj - 1) % d.w;
                        dst[si * d.w + sj] += src[i * d.w + j];
                    }
                }
            }
        }
    }
}

/// Adds `b[c]` to every column of channel `c`.
pub fn add_bias(y: &mut [f64], b: &[f64], n: usize) {
    for (c, &bc) in b.iter().enumerate() {
        for v in &mut y[c * n..(c + 1) * n] {
            *v += bc;
        }
    }
}

/// `db[c] += sum of dy over channel c`.
pub fn bias_backward(dy: &[f64], n: usize, db: &mut [f64]) {
    for (c, g) in db.iter_mut().enumerate() {
        *g += dy[c * n..(c + 1) * n].iter().sum::<f64>();
    }
}

/// 3x3 convolution: returns output and the im2col matrix for the backward pass.
pub fn conv3_forward(x: &[f64], ci: usize, co: usize, d: Dims, w: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = d.cols();
    let cols = im2col3(x, ci, d);
    let mut y = vec![0.0; co * n];
    gemm(co, ci * 9, n, w, false, &cols, false, &mut y, 0.0);
    add_bias(&mut y, b, n);
    (y, cols)
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv3_backward(
    cols: &[f64],
    ci: usize,
    co: usize,
    d: Dims,
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    need_dx: bool,
) -> Option<Vec<f64>> {
    let n = d.cols();
    let r = ci * 9;
    gemm(co, n, r, dy, false, cols, true, dw, 1.0);
    bias_backward(dy, n, db);
    if !need_dx {
        return None;
    }
    let mut dcols = vec![0.0; r * n];
    gemm(r, co, n, w, true, dy, false, &mut dcols, 0.0);
    let mut dx = vec![0.0; ci * n];
    col2im3(&dcols, ci, d, &mut dx);
    Some(dx)
}

/// Pointwise (1x1) convolution.
pub fn conv1_forward(x: &[f64], ci: usize, co: usize, n: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; co * n];
    gemm(co, ci, n, w, false, x, false, &mut y, 0.0);
    add_bias(&mut y, b, n);
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv1_backward(
    x: &[f64],
    ci: usize,
    co: usize,
    n: usize,
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    gemm(co, n, ci, dy, false, x, true, dw, 1.0);
    bias_backward(dy, n, db);
    let mut dx = vec![0.0; ci * n];
    gemm(ci, co, n, w, true, dy, false, &mut dx, 0.0);
    dx
}

/// Depthwise convolution along time with a 3-tap kernel per channel and
/// zero padding at the window edges.
pub fn tconv_forward(x: &[f64], c: usize, d: Dims, w: &[f64]) -> Vec<f64> {
    let p = d.plane();
    let mut y = vec![0.0; c * d.cols()];
    for ch in 0..c {
        for t in 0..d.t {
            let dst = (ch * d.t + t) * p;
            for tap in 0..3 {
                let src_t = t as isize + tap as isize - 1;
                if src_t < 0 || src_t >= d.t as isize {
                    continue;
                }
                let k = w[ch * 3 + tap];
                let src = (ch * d.t + src_t as usize) * p;
                for q in 0..p {
                    y[dst + q] += k * x[src + q];
                }
            }
        }
    }
    y
}

pub fn tconv_backward(x: &[f64], c: usize, d: Dims, w: &[f64], dy: &[f64], dw: &mut [f64]) -> Vec<f64> {
    let p = d.plane();
    let mut dx = vec![0.0; c * d.cols()];
    for ch in 0..c {
        for t in 0..d.t {
            let out = (ch * d.t + t) * p;
            for tap in 0..3 {
                let src_t = t as isize + tap as isize - 1;
                if src_t < 0 || src_t >= d.t as isize {
                    continue;
                }
                let src = (ch * d.t + src_t as usize) * p;
                let k = w[ch * 3 + tap];
                let mut acc = 0.0;
                for q in 0..p {
                    acc += dy[out + q] * x[src + q];
                    dx[src + q] += k * dy[out + q];
                }
                dw[ch * 3 + tap] += acc;
            }
        }
    }
    dx
}

/// Channel mixing of the per-column mean over the whole window, broadcast
/// back to every frame: `y[:, t] = W mean_t(x)`. Returns `y` and the means.
pub fn window_mean_forward(x: &[f64], c: usize, d: Dims, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = d.plane();
    let mut m = vec![0.0; c * p];
    let inv = 1.0 / d.t as f64;
    for ch in 0..c {
        for t in 0..d.t {
            let src = (ch * d.t + t) * p;
            for q in 0..p {
                m[ch * p + q] += x[src + q] * inv;
            }
        }
    }
    let mut y0 = vec![0.0; c * p];
    gemm(c, c, p, w, false, &m, false, &mut y0, 0.0);
    let mut y = vec![0.0; c * d.cols()];
    for ch in 0..c {
        for t in 0..d.t {
            let dst = (ch * d.t + t) * p;
            y[dst..dst + p].copy_from_slice(&y0[ch * p..(ch + 1) * p]);
        }
    }
    (y, m)
}

/// Backward of [`window_mean_forward`]; `means` is its second output.
pub fn window_mean_backward(means: &[f64], c: usize, d: Dims, w: &[f64], dy: &[f64], dw: &mut [f64]) -> Vec<f64> {
    let p = d.plane();
    let mut dy0 = vec![0.0; c * p];
    for ch in 0..c {
        for t in 0..d.t {
            let src = (ch * d.t + t) * p;
            for q in 0..p {
                dy0[ch * p + q] += dy[src + q];
            }
        }
    }
    gemm(c, p, c, &dy0, false, means, true, dw, 1.0);
    let mut dm = vec![0.0; c * p];
    gemm(c, c, p, w, true, &dy0, false, &mut dm, 0.0);
    let inv = 1.0 / d.t as f64;
    let mut dx = vec![0.0; c * d.cols()];
    for ch in 0..c {
        for t in 0..d.t {
            let dst = (ch * d.t + t) * p;
            for q in 0..p {
                dx[dst + q] = dm[ch * p + q] * inv;
            }
        }
    }
    dx
}

/// Dense layer on a batch of rows: `y[r] = W x[r] + b`, `W` is `out x inp`.
pub fn linear_forward(x: &[f64], rows: usize, inp: usize, out: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    gemm(rows, inp, out, x, false, w, true, &mut y, 0.0);
    for r in 0..rows {
        for (v, bb) in y[r * out..(r + 1) * out].iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    inp: usize,
    out: usize,
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    gemm(out, rows, inp, dy, true, x, false, dw, 1.0);
    for r in 0..rows {
        for (g, d) in db.iter_mut().zip(&dy[r * out..(r + 1) * out]) {
            *g += d;
        }
    }
    let mut dx = vec![0.0; rows * inp];
    gemm(rows, out, inp, dy, false, w, false, &mut dx, 0.0);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv3(x: &[f64], ci: usize, co: usize, d: Dims, w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; co * d.cols()];
        for o in 0..co {
            for t in 0..d.t {
                for i in 0..d.h {
                    for j in 0..d.w {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for di in 0..3 {
                                for dj in 0..3 {
                                    let si = i as isize + di as isize - 1;
                                    if si < 0 || si >= d.h as isize {
                                        continue;
                                    }
                                    let sj = (j as isize + dj as isize - 1).rem_euclid(d.w as isize);
                                    let xv = x[((c * d.t + t) * d.h + si as usize) * d.w + sj as usize];
                                    acc += w[(o * ci + c) * 9 + di * 3 + dj] * xv;
                                }
                            }
                        }
                        y[((o * d.t + t) * d.h + i) * d.w + j] = acc;
                    }
                }
            }
        }
        y
    }

    fn seq(n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * a).sin() * 1.3).tanh()).collect()
    }

    #[test]
    fn conv3_matches_direct_loop() {
        let d = Dims { t: 2, h: 3, w: 4 };
        let (ci, co) = (2, 3);
        let x = seq(ci * d.cols(), 0.7);
        let w = seq(co * ci * 9, 1.9);
        let b = seq(co, 0.3);
        let (y, _) = conv3_forward(&x, ci, co, d, &w, &b);
        let z = naive_conv3(&x, ci, co, d, &w, &b);
        for (a, b) in y.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let d = Dims { t: 3, h: 4, w: 5 };
        let ci = 2;
        let x = seq(ci * d.cols(), 0.37);
        let g = seq(ci * 9 * d.cols(), 1.11);
        let cols = im2col3(&x, ci, d);
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im3(&g, ci, d, &mut dx);
        let rhs: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn tconv_adjoint() {
        let d = Dims { t: 4, h: 2, w: 3 };
        let c = 2;
        let x = seq(c * d.cols(), 0.5);
        let w = seq(c * 3, 2.3);
        let g = seq(c * d.cols(), 0.9);
        let y = tconv_forward(&x, c, d, &w);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut dw = vec![0.0; w.len()];
        let dx = tconv_backward(&x, c, d, &w, &g, &mut dw);
        let rhs: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // The output is linear in w as well.
        let rhs_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn silu_derivative() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn gemm_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T (3x2) stored as a 2x3 buffer, times a 2x1 vector.
        let mut d = [0.0; 3];
        gemm(3, 2, 1, &a, true, &[1.0, 1.0], false, &mut d, 0.0);
        assert_eq!(d, [5.0, 7.0, 9.0]);
    }
}
