//! Raw numeric kernels behind the differentiable ops.

/// `c = beta * c + a * b` where `c` is row-major `m x n`, and `a` (`m x k`)
/// and `b` (`k x n`) are addressed through explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every address dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `(c, h, w)` image into a `(c*9) x (h*w)` matrix of 3x3
/// neighbourhoods with zero padding 1.
pub(crate) fn im2col3(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for di in 0..3 {
            for dj in 0..3 {
                let row = &mut cols[(ci * 9 + di * 3 + dj) * hw..][..hw];
                for i in 0..h {
                    let out = &mut row[i * w..(i + 1) * w];
                    let si = i as isize + di as isize - 1;
                    if si < 0 || si >= h as isize {
                        out.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    match dj {
                        0 => {
                            out[0] = 0.0;
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates a column matrix back into an image.
pub(crate) fn col2im3_add(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for di in 0..3 {
            for dj in 0..3 {
                let row = &cols[(ci * 9 + di * 3 + dj) * hw..][..hw];
                for i in 0..h {
                    let si = i as isize + di as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &row[i * w..(i + 1) * w];
                    let dst = &mut plane[si as usize * w..(si as usize + 1) * w];
                    match dj {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// Row-wise log-softmax of a `rows x cols` matrix.
pub(crate) fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (d, v) in dst.iter_mut().zip(row) {
            *d = v - max - lse;
        }
    }
    out
}
