//! Independent reference routes for cross-checking the fast paths.
//!
//! Everything here deliberately avoids the three-term recurrence and the
//! sparse kernels: polynomial values come from hypergeometric series or
//! trigonometric identities, operator polynomials from a dense
//! eigendecomposition, and gradients from central finite differences. These
//! are the second route of every dual-route check in the crate.

/// Pochhammer rising factorial `(a)_j = a (a+1) ... (a+j-1)`.
pub fn pochhammer(a: f64, j: usize) -> f64 {
    let mut p = 1.0;
    for t in 0..j {
        p *= a + t as f64;
    }
    p
}

/// Generalized binomial `C(k + a, k) = (a+1)_k / k!`.
pub fn binomial_shifted(a: f64, k: usize) -> f64 {
    pochhammer(a + 1.0, k) / factorial(k)
}

pub fn factorial(k: usize) -> f64 {
    (1..=k).map(|t| t as f64).product()
}

/// Chebyshev via the trigonometric identity `T_k(cos t) = cos(k t)`.
/// Valid for `x` in `[-1, 1]`.
pub fn chebyshev_trig(k: usize, x: f64) -> f64 {
    (k as f64 * x.clamp(-1.0, 1.0).acos()).cos()
}

/// Jacobi polynomial by its terminating hypergeometric series:
/// `P_k^{(a,b)}(x) = C(k+a, k) * 2F1(-k, k+a+b+1; a+1; (1-x)/2)`.
pub fn jacobi_series(k: usize, alpha: f64, beta: f64, x: f64) -> f64 {
    let z = 0.5 * (1.0 - x);
    let mut sum = 0.0;
    for j in 0..=k {
        sum += pochhammer(-(k as f64), j) * pochhammer(k as f64 + alpha + beta + 1.0, j)
            / (pochhammer(alpha + 1.0, j) * factorial(j))
            * z.powi(j as i32);
    }
    binomial_shifted(alpha, k) * sum
}

/// Generalized Laguerre polynomial by its series:
/// `L_k^{(a)}(x) = sum_j (-1)^j C(k+a, k-j) x^j / j!`.
pub fn laguerre_series(k: usize, alpha: f64, x: f64) -> f64 {
    let mut sum = 0.0;
    for j in 0..=k {
        // C(k+a, k-j) = (a+j+1)_{k-j} / (k-j)!
        let coeff = pochhammer(alpha + j as f64 + 1.0, k - j) / factorial(k - j);
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * coeff * x.powi(j as i32) / factorial(j);
    }
    sum
}

/// Meixner polynomial by its terminating series:
/// `M_k(x; b, c) = sum_j (-k)_j (-x)_j / ((b)_j j!) * (1 - 1/c)^j`.
pub fn meixner_series(k: usize, beta: f64, c: f64, x: f64) -> f64 {
    let t = 1.0 - 1.0 / c;
    let mut sum = 0.0;
    for j in 0..=k {
        sum += pochhammer(-(k as f64), j) * pochhammer(-x, j) / (pochhammer(beta, j) * factorial(j))
            * t.powi(j as i32);
    }
    sum
}

/// Krawtchouk polynomial by its terminating series:
/// `K_k(x; p, N) = sum_j (-k)_j (-x)_j / ((-N)_j j!) * p^{-j}`.
pub fn krawtchouk_series(k: usize, p: f64, big_n: usize, x: f64) -> f64 {
    let mut sum = 0.0;
    for j in 0..=k {
        sum += pochhammer(-(k as f64), j) * pochhammer(-x, j)
            / (pochhammer(-(big_n as f64), j) * factorial(j))
            * p.powi(-(j as i32));
    }
    sum
}

/// Row-major dense matrix product: `a` is `n x m`, `b` is `m x p`.
pub fn dense_matmul(a: &[f64], b: &[f64], n: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..p {
                out[i * p + j] += aik * b[k * p + j];
            }
        }
    }
    out
}

/// Eigendecomposition of a dense symmetric matrix by the cyclic Jacobi
/// rotation method. Returns `(eigenvalues, u)` with `u` row-major and the
/// e-th eigenvector in column `e`, so `A = U diag(w) U^T`.
///
/// Intended for the small oracle matrices (`n <= 32`) the test suites use.
pub fn sym_eigen(n: usize, a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut u = vec![0.0; n * n];
    for i in 0..n {
        u[i * n + i] = 1.0;
    }
    if n <= 1 {
        return (m, u);
    }

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let ukp = u[k * n + p];
                    let ukq = u[k * n + q];
                    u[k * n + p] = c * ukp - s * ukq;
                    u[k * n + q] = s * ukp + c * ukq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    (eig, u)
}

/// Central finite difference `df/dx` of a scalar function at `x`.
pub fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with the denominator floored at `floor`, so comparisons
/// near zero degrade to absolute error.
pub fn rel_err(got: f64, want: f64, floor: f64) -> f64 {
    (got - want).abs() / want.abs().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomials_and_factorials() {
        assert_eq!(factorial(0), 1.0);
        assert_eq!(factorial(5), 120.0);
        assert_eq!(binomial_shifted(0.0, 3), 1.0); // C(3, 3)
        assert!((binomial_shifted(2.0, 3) - 10.0).abs() < 1e-12); // C(5, 3)
    }

    #[test]
    fn legendre_series_special_values() {
        // alpha = beta = 0 is Legendre; P_2(x) = (3x^2 - 1) / 2.
        assert!((jacobi_series(2, 0.0, 0.0, 1.0) - 1.0).abs() < 1e-12);
        assert!((jacobi_series(2, 0.0, 0.0, 0.0) + 0.5).abs() < 1e-12);
        assert!((jacobi_series(2, 0.0, 0.0, 0.5) - (3.0 * 0.25 - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn laguerre_series_at_zero_is_binomial() {
        for k in 0..8 {
            assert!((laguerre_series(k, 0.0, 0.0) - 1.0).abs() < 1e-12);
            let want = binomial_shifted(1.5, k);
            assert!((laguerre_series(k, 1.5, 0.0) - want).abs() < 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn chebyshev_trig_quarter_points() {
        assert!((chebyshev_trig(2, 0.5) + 0.5).abs() < 1e-12); // cos(2 pi/3)
        assert!((chebyshev_trig(4, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        let n = 6;
        let mut state = 0xa4093822299f31d0u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = next();
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let (w, u) = sym_eigen(n, &a);
        // U diag(w) U^T == A
        let mut ud = vec![0.0; n * n];
        for i in 0..n {
            for e in 0..n {
                ud[i * n + e] = u[i * n + e] * w[e];
            }
        }
        let mut ut = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                ut[i * n + j] = u[j * n + i];
            }
        }
        let back = dense_matmul(&ud, &ut, n, n, n);
        for (x, y) in back.iter().zip(&a) {
            assert!((x - y).abs() < 1e-10);
        }
        // Orthogonality.
        let gram = dense_matmul(&ut, &u, n, n, n);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[i * n + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn central_difference_of_square() {
        let d = central_difference(|x| x * x, 3.0, 1e-5);
        assert!((d - 6.0).abs() < 1e-9);
    }
}
