//! 3x3 "same" convolution via im2col + GEMM, 2x2 average pooling, and their
//! backward passes. All tensors are single-sample, channel-major
//! `[channels][height][width]`.

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit
/// row/column strides for `a` and `b` so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the debug assertions above spell out the bounds; every caller
    // in this module passes buffers sized from the same dimensions.
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

/// Unrolls 3x3 zero-padded patches: row `ci*9 + ky*3 + kx`, column `y*w + x`.
pub fn im2col(input: &[f64], c_in: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c_in * 9 * hw];
    for ci in 0..c_in {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im(cols: &[f64], c_in: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c_in * hw];
    for ci in 0..c_in {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

/// Forward conv. `weight` is `[c_out][c_in*9]`. Returns `(output, cols)`.
pub fn conv_forward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let c_out = bias.len();
    let hw = h * w;
    let k = c_in * 9;
    let cols = im2col(input, c_in, h, w);
    let mut out = vec![0.0; c_out * hw];
    gemm(c_out, k, hw, weight, (k, 1), &cols, (hw, 1), 0.0, &mut out);
    for (co, &b) in bias.iter().enumerate() {
        out[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += b);
    }
    (out, cols)
}

/// Backward conv. Accumulates into `d_weight`/`d_bias` and returns the
/// input gradient when `need_input_grad`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    d_out: &[f64],
    cols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let c_out = d_bias.len();
    let hw = h * w;
    let k = c_in * 9;
    // dW += dOut · colsᵀ
    gemm(c_out, hw, k, d_out, (hw, 1), cols, (1, hw), 1.0, d_weight);
    for (co, db) in d_bias.iter_mut().enumerate() {
        *db += d_out[co * hw..(co + 1) * hw].iter().sum::<f64>();
    }
    if !need_input_grad {
        return None;
    }
    // dCols = Wᵀ · dOut
    let mut d_cols = vec![0.0; k * hw];
    gemm(k, c_out, hw, weight, (1, k), d_out, (hw, 1), 0.0, &mut d_cols);
    Some(col2im(&d_cols, c_in, h, w))
}

/// 2x2 average pool with stride 2; a trailing odd row/column is dropped.
pub fn avg_pool2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &input[ch * h * w..];
        let dst = &mut out[ch * oh * ow..];
        for y in 0..oh {
            let r0 = &plane[2 * y * w..];
            let r1 = &plane[(2 * y + 1) * w..];
            for x in 0..ow {
                dst[y * ow + x] =
                    0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(d_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut d_in = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &d_out[ch * oh * ow..];
        let plane = &mut d_in[ch * h * w..];
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * src[y * ow + x];
                plane[2 * y * w + 2 * x] = g;
                plane[2 * y * w + 2 * x + 1] = g;
                plane[(2 * y + 1) * w + 2 * x] = g;
                plane[(2 * y + 1) * w + 2 * x + 1] = g;
            }
        }
    }
    d_in
}

/// Per-channel spatial mean.
pub fn global_avg_pool(input: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| input[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}
