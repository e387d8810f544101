use super::{Seed, Tensor};
use crate::error::{Error, Result};

/// Default cap on the 1-norm condition estimate accepted by [`invert`].
pub const DEFAULT_CONDITION_CAP: f64 = 1e8;

/// `a * b` with `f64` accumulation in a fixed order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let bt = b.transpose();
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        let arow = a.row(r);
        for c in 0..n {
            let bcol = &bt.data()[c * k..(c + 1) * k];
            out.push(dot(arow, bcol) as f32);
        }
    }
    let out = Tensor::new(m, n, out)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("matmul".into()));
    }
    Ok(out)
}

/// `aᵀ * b` without materializing the transpose of `a`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    matmul(&a.transpose(), b)
}

/// `a * bᵀ`; both operands are walked along contiguous rows.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        let arow = a.row(r);
        for c in 0..n {
            out.push(dot(arow, b.row(c)) as f32);
        }
    }
    let out = Tensor::new(m, n, out)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("matmul".into()));
    }
    Ok(out)
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += (*x as f64) * (*y as f64);
    }
    acc
}

/// Dense `f64` square matrix helpers used where storage rounding would
/// hurt (inversion, orthogonalization).
pub(crate) mod dense {
    pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let aik = a[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aik * b[k * n + j];
                }
            }
        }
        out
    }

    pub fn transpose(a: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[j * n + i] = a[i * n + j];
            }
        }
        out
    }

    /// Max absolute column sum.
    pub fn norm1(a: &[f64], n: usize) -> f64 {
        (0..n)
            .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Gauss-Jordan with partial pivoting. Returns the inverse and the
    /// smallest pivot magnitude met, or `Err(pivot)` on a zero pivot.
    pub fn invert(a: &[f64], n: usize) -> Result<(Vec<f64>, f64), f64> {
        let mut m = a.to_vec();
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            inv[i * n + i] = 1.0;
        }
        let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut min_pivot = f64::INFINITY;
        for col in 0..n {
            let (piv, pval) = (col..n)
                .map(|r| (r, m[r * n + col].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            min_pivot = min_pivot.min(pval);
            if !(pval > scale * 1e-14) {
                return Err(pval);
            }
            if piv != col {
                for j in 0..n {
                    m.swap(piv * n + j, col * n + j);
                    inv.swap(piv * n + j, col * n + j);
                }
            }
            let d = m[col * n + col];
            for j in 0..n {
                m[col * n + j] /= d;
                inv[col * n + j] /= d;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = m[r * n + col];
                if f == 0.0 {
                    continue;
                }
                for j in 0..n {
                    m[r * n + j] -= f * m[col * n + j];
                    inv[r * n + j] -= f * inv[col * n + j];
                }
            }
        }
        Ok((inv, min_pivot))
    }
}

/// Inverse by Gaussian elimination with partial pivoting, rejecting
/// matrices whose 1-norm condition estimate exceeds [`DEFAULT_CONDITION_CAP`].
pub fn invert(a: &Tensor) -> Result<Tensor> {
    invert_capped(a, DEFAULT_CONDITION_CAP)
}

pub fn invert_capped(a: &Tensor, condition_cap: f64) -> Result<Tensor> {
    let inv = invert_f64(&a.to_f64(), a.rows(), a.cols(), condition_cap)?;
    Tensor::from_f64(a.rows(), a.cols(), &inv)
}

pub(crate) fn invert_f64(a: &[f64], rows: usize, cols: usize, condition_cap: f64) -> Result<Vec<f64>> {
    if rows != cols {
        return Err(Error::Shape {
            op: "invert",
            left: (rows, cols),
            right: (cols, rows),
        });
    }
    let n = rows;
    let (inv, pivot) = dense::invert(a, n).map_err(|pivot| Error::Singular {
        pivot,
        condition: f64::INFINITY,
    })?;
    let condition = dense::norm1(a, n) * dense::norm1(&inv, n);
    if !condition.is_finite() || condition > condition_cap {
        return Err(Error::Singular { pivot, condition });
    }
    Ok(inv)
}

/// Haar-distributed random orthogonal matrix: Q from the QR factorization
/// of an i.i.d. standard normal matrix, with columns flipped so that
/// `diag(R) > 0`.
pub fn qr_orthogonal(n: usize, seed: Seed) -> Tensor {
    assert!(n >= 1, "qr_orthogonal needs n >= 1");
    let mut attempt = 0u64;
    loop {
        let mut rng = seed.derive(attempt).rng();
        let g: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        if let Some(q) = householder_q(&g, n) {
            return Tensor::from_f64(n, n, &q).expect("square buffer");
        }
        attempt += 1;
    }
}

/// Householder QR; returns Q with positive-diagonal sign convention, or
/// `None` if a column collapses to zero.
fn householder_q(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut r = a.to_vec();
    // Accumulate Q explicitly, starting from the identity.
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    let mut signs = vec![1.0; n];
    for k in 0..n {
        let norm = (k..n).map(|i| r[i * n + k].powi(2)).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return None;
        }
        let alpha = if r[k * n + k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| r[i * n + k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            // R <- (I - 2vvᵀ/vᵀv) R on rows k..n
            for j in 0..n {
                let s: f64 = (k..n).map(|i| v[i - k] * r[i * n + j]).sum::<f64>() * 2.0 / vnorm2;
                for i in k..n {
                    r[i * n + j] -= s * v[i - k];
                }
            }
            // Q <- Q (I - 2vvᵀ/vᵀv) on columns k..n
            for i in 0..n {
                let s: f64 = (k..n).map(|j| q[i * n + j] * v[j - k]).sum::<f64>() * 2.0 / vnorm2;
                for j in k..n {
                    q[i * n + j] -= s * v[j - k];
                }
            }
        }
        signs[k] = if r[k * n + k] < 0.0 { -1.0 } else { 1.0 };
    }
    for i in 0..n {
        for j in 0..n {
            q[i * n + j] *= signs[j];
        }
    }
    Some(q)
}

/// Sylvester Hadamard matrix scaled by `1/sqrt(n)`.
pub fn hadamard(n: usize) -> Result<Tensor> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    let scale = 1.0 / (n as f64).sqrt();
    Ok(Tensor::from_fn(n, n, |i, j| {
        // H[i][j] = (-1)^{popcount(i & j)}
        if (i & j).count_ones() % 2 == 0 {
            scale as f32
        } else {
            -scale as f32
        }
    }))
}

/// Explicit Kronecker product `a ⊗ b`.
pub fn kron(a: &Tensor, b: &Tensor) -> Tensor {
    let (p, q) = (a.rows(), b.rows());
    let (pc, qc) = (a.cols(), b.cols());
    Tensor::from_fn(p * q, pc * qc, |r, c| {
        a.get(r / q, c / qc) * b.get(r % q, c % qc)
    })
}

/// `x * (a1 ⊗ a2)` computed per row as `a1ᵀ M a2`, where `M` is the row
/// reshaped to `p x q`.
pub fn kron_apply(a1: &Tensor, a2: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (p, q) = (a1.rows(), a2.rows());
    if a1.cols() != p || a2.cols() != q || x.cols() != p * q {
        return Err(Error::Shape {
            op: "kron_apply",
            left: (p, q),
            right: x.shape(),
        });
    }
    let a1 = a1.to_f64();
    let a2 = a2.to_f64();
    let mut out = Vec::with_capacity(x.len());
    let mut tmp = vec![0.0f64; p * q];
    for r in 0..x.rows() {
        let row = x.row(r);
        // tmp = M * a2  (p x q)
        for i in 0..p {
            for l in 0..q {
                let mut acc = 0.0;
                for k in 0..q {
                    acc += row[i * q + k] as f64 * a2[k * q + l];
                }
                tmp[i * q + l] = acc;
            }
        }
        // out = a1ᵀ * tmp
        for j in 0..p {
            for l in 0..q {
                let mut acc = 0.0;
                for i in 0..p {
                    acc += a1[i * p + j] * tmp[i * q + l];
                }
                out.push(acc as f32);
            }
        }
    }
    let out = Tensor::new(x.rows(), p * q, out)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("kron_apply".into()));
    }
    Ok(out)
}

/// `‖y - ŷ‖_F²` accumulated in `f64`; not normalized by element count.
pub fn frobenius_mse(y: &Tensor, yhat: &Tensor) -> Result<f64> {
    y.check_same_shape(yhat, "frobenius_mse")?;
    Ok(y.data()
        .iter()
        .zip(yhat.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum())
}

/// Per-element mean of the squared error.
pub fn mean_squared_error(y: &Tensor, yhat: &Tensor) -> Result<f64> {
    Ok(frobenius_mse(y, yhat)? / y.len().max(1) as f64)
}
