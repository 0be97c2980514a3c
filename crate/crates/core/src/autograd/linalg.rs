use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

use super::Var;

/// `C = alpha * A * B + beta * C` on strided row/column views.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`, each described by its
/// row stride and column stride. Slices must cover every addressed element.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cc: usize, rs: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: bounds of all three views were checked above and `c` does not
    // alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl Var {
    /// Batched matrix product over the last two axes.
    ///
    /// `self` is `[..., m, k]`; `rhs` is either `[..., k, n]` with identical
    /// leading axes, or a plain `[k, n]` matrix shared across the batch.
    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        let a = self.value();
        let b = rhs.value();
        let ra = a.rank();
        let rb = b.rank();
        if ra < 2 || rb < 2 {
            return shape_err(format!("matmul needs rank >= 2: {:?} x {:?}", a.shape(), b.shape()));
        }
        let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
        let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
        let shared = rb == 2;
        if k != k2 || (!shared && a.shape()[..ra - 2] != b.shape()[..rb - 2]) {
            return shape_err(format!("matmul {:?} x {:?}", a.shape(), b.shape()));
        }
        let batch: usize = a.shape()[..ra - 2].iter().product();
        let mut out_shape = a.shape()[..ra - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        if shared {
            gemm(batch * m, k, n, 1.0, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out, (n, 1));
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &a.data()[i * m * k..],
                    (k, 1),
                    &b.data()[i * k * n..],
                    (n, 1),
                    0.0,
                    &mut out[i * m * n..],
                    (n, 1),
                );
            }
        }
        Ok(Var::from_op(
            Tensor::from_parts(out_shape, out),
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, p, _| {
                let (a, b) = (p[0].value(), p[1].value());
                let gd = g.data();
                let ga = p[0].requires_grad().then(|| {
                    // dA = dC * B^T
                    let mut ga = vec![0.0; a.len()];
                    if shared {
                        gemm(batch * m, n, k, 1.0, gd, (n, 1), b.data(), (1, n), 0.0, &mut ga, (k, 1));
                    } else {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                1.0,
                                &gd[i * m * n..],
                                (n, 1),
                                &b.data()[i * k * n..],
                                (1, n),
                                0.0,
                                &mut ga[i * m * k..],
                                (k, 1),
                            );
                        }
                    }
                    Tensor::from_parts(a.shape().to_vec(), ga)
                });
                let gb = p[1].requires_grad().then(|| {
                    // dB = A^T * dC
                    let mut gb = vec![0.0; b.len()];
                    if shared {
                        gemm(k, batch * m, n, 1.0, a.data(), (1, k), gd, (n, 1), 0.0, &mut gb, (n, 1));
                    } else {
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                1.0,
                                &a.data()[i * m * k..],
                                (1, k),
                                &gd[i * m * n..],
                                (n, 1),
                                0.0,
                                &mut gb[i * k * n..],
                                (n, 1),
                            );
                        }
                    }
                    Tensor::from_parts(b.shape().to_vec(), gb)
                });
                vec![ga, gb]
            }),
        ))
    }
}
