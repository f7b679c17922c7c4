//! Strided matrix products on flat slices.

/// Strided view of a row-major-or-not matrix held in a flat slice.
#[derive(Clone, Copy)]
pub(crate) struct Strides {
    pub row: usize,
    pub col: usize,
}

pub(crate) const fn row_major(cols: usize) -> Strides {
    Strides { row: cols, col: 1 }
}

pub(crate) const fn transposed(rows: usize) -> Strides {
    Strides { row: 1, col: rows }
}

fn span(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * s.row + (cols - 1) * s.col + 1
    }
}

/// `c <- a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    assert!(a.len() >= span(m, k, sa), "gemm: lhs too short");
    assert!(b.len() >= span(k, n, sb), "gemm: rhs too short");
    assert!(c.len() >= span(m, n, sc), "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the assertions above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}

/// Gather `x: [batch, cin, len]` into rows `(b, t)` and columns `(i, j)`:
/// `col[(b·len + t)·cin·k + i·k + j] = x[b, i, t + (j - k/2)·dilation]`, zero outside.
pub(crate) fn im2col(x: &[f64], batch: usize, cin: usize, len: usize, k: usize, dilation: usize) -> Vec<f64> {
    let width = cin * k;
    let half = (k / 2) as isize;
    let mut col = vec![0.0; batch * len * width];
    for b in 0..batch {
        for i in 0..cin {
            let xrow = &x[(b * cin + i) * len..(b * cin + i + 1) * len];
            for j in 0..k {
                let off = (j as isize - half) * dilation as isize;
                for t in 0..len {
                    let s = t as isize + off;
                    if s >= 0 && (s as usize) < len {
                        col[(b * len + t) * width + i * k + j] = xrow[s as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add `col` back into `dx`.
pub(crate) fn col2im_add(
    col: &[f64],
    dx: &mut [f64],
    batch: usize,
    cin: usize,
    len: usize,
    k: usize,
    dilation: usize,
) {
    let width = cin * k;
    let half = (k / 2) as isize;
    for b in 0..batch {
        for i in 0..cin {
            let row = &mut dx[(b * cin + i) * len..(b * cin + i + 1) * len];
            for j in 0..k {
                let off = (j as isize - half) * dilation as isize;
                for t in 0..len {
                    let s = t as isize + off;
                    if s >= 0 && (s as usize) < len {
                        row[s as usize] += col[(b * len + t) * width + i * k + j];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product() {
        // [1 2; 3 4] · [5; 6] = [17; 39]
        let mut c = vec![0.0; 2];
        gemm(2, 2, 1, &[1.0, 2.0, 3.0, 4.0], row_major(2), &[5.0, 6.0], row_major(1), 0.0, &mut c, row_major(1));
        assert_eq!(c, vec![17.0, 39.0]);
        // transposed lhs
        gemm(2, 2, 1, &[1.0, 3.0, 2.0, 4.0], transposed(2), &[5.0, 6.0], row_major(1), 1.0, &mut c, row_major(1));
        assert_eq!(c, vec![34.0, 78.0]);
    }
}
