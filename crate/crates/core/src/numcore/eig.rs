//! Symmetric and generalized-symmetric eigendecomposition.
//!
//! The symmetric solver is a cyclic Jacobi iteration, accurate to near
//! machine precision at the matrix sizes seen here (channel counts up to a
//! few dozen, latent widths of a hundred or so). The generalized problem
//! `A v = lambda B v` is reduced to a symmetric one by whitening `B`.

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// Asymmetry beyond this (relative to the largest entry) is rejected.
const SYMMETRY_TOL: f64 = 1e-9;

/// Eigendecomposition of a symmetric matrix: `A = V diag(values) Vᵀ`.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvalues, sorted descending.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, matching `values` order.
    pub vectors: Tensor,
}

/// Solution of `A v = lambda B v` with `B`-orthonormal eigenvectors.
#[derive(Debug, Clone)]
pub struct GenEig {
    /// Eigenvalues, sorted descending.
    pub values: Vec<f64>,
    /// Columns satisfy `vᵀ B v = 1`, matching `values` order.
    pub vectors: Tensor,
}

fn check_square_finite(a: &Tensor, what: &'static str) -> Result<usize> {
    let (r, c) = a.dims2()?;
    if r != c {
        return Err(Error::NotSquare { rows: r, cols: c });
    }
    if !a.all_finite() {
        return Err(Error::NonFinite(what));
    }
    Ok(r)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(A + Aᵀ)/2` first; asymmetry beyond the
/// documented tolerance is an error. Eigenvalues come back sorted
/// descending (ties keep their pre-sort order) and each eigenvector's
/// largest-magnitude entry is made positive so the decomposition is
/// deterministic.
pub fn sym_eig(a: &Tensor) -> Result<SymEig> {
    let n = check_square_finite(a, "sym_eig input")?;
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if a.asymmetry()? > SYMMETRY_TOL * scale.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "matrix asymmetry exceeds {SYMMETRY_TOL:e}"
        )));
    }
    let sym = a.symmetrized()?;
    let (values, vectors) = jacobi(sym.data(), n);
    let (values, vectors) = sort_descending(values, vectors, n);
    Ok(SymEig { values, vectors: Tensor::new(vec![n, n], vectors)? })
}

/// Cyclic Jacobi on a symmetric matrix given as a row-major slice.
/// Returns unsorted eigenvalues and eigenvectors (columns, row-major).
fn jacobi(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    if n <= 1 {
        return (m.first().copied().into_iter().collect(), v);
    }

    let fro = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let stop = 1e-15 * fro;
    const MAX_SWEEPS: usize = 64;

    for _ in 0..MAX_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    s += m[p * n + q] * m[p * n + q];
                }
            }
            (2.0 * s).sqrt()
        };
        if off <= stop {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                // tan of the rotation angle, smaller root for stability
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = m[i * n + p];
                        let aiq = m[i * n + q];
                        let new_ip = aip - s * (aiq + tau * aip);
                        let new_iq = aiq + s * (aip - tau * aiq);
                        m[i * n + p] = new_ip;
                        m[p * n + i] = new_ip;
                        m[i * n + q] = new_iq;
                        m[q * n + i] = new_iq;
                    }
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = vip - s * (viq + tau * vip);
                    v[i * n + q] = viq + s * (vip - tau * viq);
                }
            }
        }
    }

    let values = (0..n).map(|i| m[i * n + i]).collect();
    (values, v)
}

/// Stable descending sort of eigenpairs plus a deterministic sign fix.
fn sort_descending(values: Vec<f64>, vectors: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut sorted_values = Vec::with_capacity(n);
    let mut sorted_vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        sorted_values.push(values[src]);
        // orient: largest-magnitude component positive (first index on ties)
        let mut pivot = 0;
        let mut best = 0.0f64;
        for i in 0..n {
            let mag = vectors[i * n + src].abs();
            if mag > best {
                best = mag;
                pivot = i;
            }
        }
        let sign = if vectors[pivot * n + src] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            sorted_vectors[i * n + dst] = sign * vectors[i * n + src];
        }
    }
    (sorted_values, sorted_vectors)
}

/// Whitening transform `P = Λ^{-1/2} Uᵀ` of a symmetric PD matrix, so that
/// `P C Pᵀ = I`.
pub fn whitening_transform(c: &Tensor) -> Result<Tensor> {
    let n = check_square_finite(c, "whitening input")?;
    let eig = sym_eig(c)?;
    let min_eig = *eig.values.last().unwrap_or(&0.0);
    if min_eig <= 1e-12 {
        return Err(Error::Singular { min_eig });
    }
    let mut p = Tensor::zeros(&[n, n]);
    for (i, &lam) in eig.values.iter().enumerate() {
        let inv_sqrt = 1.0 / lam.sqrt();
        for j in 0..n {
            // row i of P = eigvec i scaled
            p.set2(i, j, inv_sqrt * eig.vectors.at2(j, i));
        }
    }
    Ok(p)
}

/// Solves `A v = lambda B v` for symmetric PSD `A` and symmetric PD `B`
/// via the whitening route: eigendecompose `B`, whiten, eigendecompose the
/// whitened `A`, and map eigenvectors back so that `vᵀ B v = 1`.
pub fn generalized_eig_spd(a: &Tensor, b: &Tensor) -> Result<GenEig> {
    let n = check_square_finite(a, "generalized eig A")?;
    let nb = check_square_finite(b, "generalized eig B")?;
    if n != nb {
        return Err(Error::ShapeMismatch(format!("A is {n}x{n}, B is {nb}x{nb}")));
    }
    let p = whitening_transform(b)?;
    let whitened = p.matmul(a)?.matmul(&p.transpose()?)?.symmetrized()?;
    let inner = sym_eig(&whitened)?;
    let mut vectors = p.transpose()?.matmul(&inner.vectors)?;
    // renormalize columns so vᵀ B v = 1 exactly up to rounding
    for j in 0..n {
        let col = vectors.column(j);
        let bv: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|k| b.at2(i, k) * col[k]).sum())
            .collect();
        let norm: f64 = col.iter().zip(&bv).map(|(v, bv)| v * bv).sum();
        if norm > 0.0 {
            let inv = 1.0 / norm.sqrt();
            for i in 0..n {
                let v = vectors.at2(i, j) * inv;
                vectors.set2(i, j, v);
            }
        }
    }
    Ok(GenEig { values: inner.values, vectors })
}
