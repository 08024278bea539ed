//! Dense kernels shared by the tape and by callers that need plain solves.

use crate::error::TensorError;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `a` is logically `m x k` and `b` is `k x n`; `trans_a`/`trans_b` mean the
/// stored buffers hold the transposes (`k x m` / `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above describe exactly the buffers whose lengths are
    // checked against m, k, n; `c` is a distinct, contiguous m x n buffer.
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

/// LU factorization with partial pivoting of a square row-major matrix.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    /// Factorizes `a` (`n x n`). Pivots smaller than `1e-13` times the largest
    /// entry magnitude are reported as singular.
    pub fn factor(n: usize, a: &[f64]) -> Result<Self, TensorError> {
        assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = scale * 1e-13;
        for col in 0..n {
            let mut piv = col;
            let mut best = lu[col * n + col].abs();
            for r in col + 1..n {
                let v = lu[r * n + col].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if !(best > tol) {
                return Err(TensorError::Singular {
                    column: col,
                    pivot: best,
                });
            }
            if piv != col {
                for c in 0..n {
                    lu.swap(col * n + c, piv * n + c);
                }
                perm.swap(col, piv);
            }
            let d = lu[col * n + col];
            for r in col + 1..n {
                let f = lu[r * n + col] / d;
                lu[r * n + col] = f;
                if f != 0.0 {
                    for c in col + 1..n {
                        lu[r * n + c] -= f * lu[col * n + c];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A X = B` for `B` with `m` columns (row-major `n x m`).
    pub fn solve(&self, b: &[f64], m: usize) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * m..(i + 1) * m].copy_from_slice(&b[p * m..(p + 1) * m]);
        }
        for i in 0..n {
            for k in 0..i {
                let f = self.lu[i * n + k];
                if f != 0.0 {
                    for c in 0..m {
                        x[i * m + c] -= f * x[k * m + c];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let f = self.lu[i * n + k];
                if f != 0.0 {
                    for c in 0..m {
                        x[i * m + c] -= f * x[k * m + c];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..m {
                x[i * m + c] /= d;
            }
        }
        x
    }

    /// Solves `A^T X = B`.
    pub fn solve_transpose(&self, b: &[f64], m: usize) -> Vec<f64> {
        // A = P^T L U, so A^T = U^T L^T P and A^T X = B is solved by
        // U^T y = B, L^T w = y, X = P^T w.
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                let f = self.lu[k * n + i];
                if f != 0.0 {
                    for c in 0..m {
                        y[i * m + c] -= f * y[k * m + c];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..m {
                y[i * m + c] /= d;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let f = self.lu[k * n + i];
                if f != 0.0 {
                    for c in 0..m {
                        y[i * m + c] -= f * y[k * m + c];
                    }
                }
            }
        }
        let mut x = vec![0.0; n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p * m..(p + 1) * m].copy_from_slice(&y[i * m..(i + 1) * m]);
        }
        x
    }
}
