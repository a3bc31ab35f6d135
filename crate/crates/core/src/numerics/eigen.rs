//! Dense symmetric eigendecomposition by cyclic Jacobi rotations.

use ndarray::Array2;
use rand::RngExt;

use crate::error::{Error, Result};

/// Full eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are ascending; column `i` of `eigenvectors` pairs with
/// `eigenvalues[i]`. Ties keep the solver's natural order (stable sort), and
/// each eigenvector's sign is fixed so its largest-magnitude component is
/// positive, which makes downstream clustering bit-reproducible.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Array2<f64>,
}

/// Decomposes a symmetric matrix `A = V diag(l) V^T`.
///
/// Accepts asymmetry up to `1e-10` relative to the largest entry (the matrix
/// is symmetrized as `(A + A^T)/2` before iterating); rejects non-finite
/// entries and non-square input.
pub fn sym_eigen(a: &Array2<f64>) -> Result<EigenDecomposition> {
    let m = a.nrows();
    if a.ncols() != m {
        return Err(Error::Numerics(format!(
            "matrix must be square, got {}x{}",
            m,
            a.ncols()
        )));
    }
    if m == 0 {
        return Err(Error::Numerics("empty matrix".into()));
    }

    let mut amax = 0.0f64;
    for &v in a.iter() {
        if !v.is_finite() {
            return Err(Error::Numerics("non-finite matrix entry".into()));
        }
        amax = amax.max(v.abs());
    }
    let asym_tol = 1e-10 * amax.max(1.0);
    for i in 0..m {
        for j in (i + 1)..m {
            if (a[[i, j]] - a[[j, i]]).abs() > asym_tol {
                return Err(Error::Numerics(format!(
                    "matrix not symmetric at ({i},{j})"
                )));
            }
        }
    }

    // Flat row-major working copies: `w` holds the matrix being diagonalized,
    // `vt` the accumulated rotations stored transposed (row i of vt is the
    // i-th eigenvector candidate) so rotation updates touch contiguous rows.
    let mut w = vec![0.0f64; m * m];
    for i in 0..m {
        for j in 0..m {
            w[i * m + j] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let mut vt = vec![0.0f64; m * m];
    for i in 0..m {
        vt[i * m + i] = 1.0;
    }

    if m > 1 {
        jacobi(&mut w, &mut vt, m)?;
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| {
        w[i * m + i]
            .partial_cmp(&w[j * m + j])
            .expect("eigenvalues are finite")
    });

    let mut eigenvalues = Vec::with_capacity(m);
    let mut eigenvectors = Array2::zeros((m, m));
    for (col, &src) in order.iter().enumerate() {
        eigenvalues.push(w[src * m + src]);
        let row = &vt[src * m..(src + 1) * m];
        // Sign convention: largest-magnitude component positive.
        let mut best = 0usize;
        let mut best_abs = 0.0f64;
        for (i, &v) in row.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        let flip = if row[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            eigenvectors[[i, col]] = flip * row[i];
        }
    }

    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Cyclic-by-row Jacobi sweeps with the classical threshold strategy.
///
/// Each rotation annihilates one off-diagonal pair. Row updates are applied
/// to full contiguous rows of `w`, then mirrored into the corresponding
/// columns via symmetry, so the hot loops vectorize.
fn jacobi(w: &mut [f64], vt: &mut [f64], m: usize) -> Result<()> {
    const MAX_SWEEPS: usize = 60;

    let frob: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if frob == 0.0 {
        return Ok(());
    }
    let stop = 1e-14 * frob;

    for sweep in 0..MAX_SWEEPS {
        let mut off_sum = 0.0f64;
        for p in 0..m {
            for q in (p + 1)..m {
                off_sum += w[p * m + q].abs();
            }
        }
        if off_sum <= stop {
            return Ok(());
        }
        // During the first sweeps only rotate pairs above a threshold; this
        // skips work on already-small entries without affecting the limit.
        let tresh = if sweep < 3 {
            0.2 * off_sum / (m * m) as f64
        } else {
            0.0
        };

        for p in 0..m - 1 {
            for q in (p + 1)..m {
                let apq = w[p * m + q];
                let g = 100.0 * apq.abs();
                let app = w[p * m + p];
                let aqq = w[q * m + q];
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    w[p * m + q] = 0.0;
                    w[q * m + p] = 0.0;
                    continue;
                }
                if apq.abs() <= tresh || apq == 0.0 {
                    continue;
                }

                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta.abs() > 1e154 {
                    // Avoid overflow in theta^2; limit of the formula below.
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                rotate_rows(w, m, p, q, c, s);
                // Mirror the rotated rows into columns p and q (symmetry of
                // J^T A J), then set the 2x2 block from the closed form.
                for i in (0..p).chain(p + 1..q).chain(q + 1..m) {
                    w[i * m + p] = w[p * m + i];
                    w[i * m + q] = w[q * m + i];
                }
                w[p * m + p] = app - t * apq;
                w[q * m + q] = aqq + t * apq;
                w[p * m + q] = 0.0;
                w[q * m + p] = 0.0;

                rotate_rows(vt, m, p, q, c, s);
            }
        }
    }

    Err(Error::Numerics(format!(
        "jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
    )))
}

/// Bottom-`k` eigenpairs of a symmetric matrix by subspace iteration with
/// Rayleigh-Ritz extraction (the projected problems go through [`sym_eigen`]).
///
/// `scale_hint` must upper-bound the spectrum radius so that
/// `B = scale_hint*I - A` is positive semi-definite; iteration on `B` turns
/// the smallest eigenvalues of `A` into the dominant ones. Deterministic:
/// the starting block is drawn from a fixed seeded stream. Falls back to the
/// full decomposition for small matrices.
///
/// Returns ascending eigenvalues and matching eigenvector columns.
pub fn bottom_eigen(a: &Array2<f64>, k: usize, scale_hint: f64) -> Result<EigenDecomposition> {
    let m = a.nrows();
    if k == 0 || k > m {
        return Err(Error::Numerics(format!(
            "bottom_eigen requires 1 <= k <= m, got k={k}, m={m}"
        )));
    }
    // Buffer columns speed convergence of the trailing wanted pairs.
    let p = (k + k.max(8)).min(m);
    if m <= 64 || p + 8 >= m {
        let full = sym_eigen(a)?;
        let mut vecs = Array2::zeros((m, k));
        for j in 0..k {
            for i in 0..m {
                vecs[[i, j]] = full.eigenvectors[[i, j]];
            }
        }
        return Ok(EigenDecomposition {
            eigenvalues: full.eigenvalues[..k].to_vec(),
            eigenvectors: vecs,
        });
    }

    for &v in a.iter() {
        if !v.is_finite() {
            return Err(Error::Numerics("non-finite matrix entry".into()));
        }
    }

    // B = scale*I - A, applied on the fly.
    let apply = |q: &Array2<f64>| -> Array2<f64> {
        let mut z = a.dot(q);
        z.iter_mut().for_each(|v| *v = -*v);
        z += &(q * scale_hint);
        z
    };

    let mut rng = crate::rng::stream_rng(0x5ace_0f_b10c, 0);
    let mut q = Array2::zeros((m, p));
    for v in q.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    orthonormalize(&mut q)?;

    const MAX_ITERS: usize = 800;
    let mut theta = vec![0.0f64; p];
    let mut converged = false;
    for iter in 0..MAX_ITERS {
        let z = apply(&q);
        // Rayleigh-Ritz on the current block every few sweeps keeps the
        // columns sorted and gives a residual-based stopping rule.
        if iter % 4 == 3 || iter == MAX_ITERS - 1 {
            let mut zq = z;
            orthonormalize(&mut zq)?;
            let bzq = apply(&zq);
            let proj = zq.t().dot(&bzq);
            let small = sym_eigen(&proj)?;
            // Dominant eigenvalues of B first: descending order.
            let mut rot = Array2::zeros((p, p));
            for j in 0..p {
                let src = p - 1 - j;
                theta[j] = small.eigenvalues[src];
                for i in 0..p {
                    rot[[i, j]] = small.eigenvectors[[i, src]];
                }
            }
            q = zq.dot(&rot);
            // Residual check on the wanted pairs.
            let bq = apply(&q);
            let mut worst = 0.0f64;
            for j in 0..k {
                let mut res = 0.0f64;
                for i in 0..m {
                    let r = bq[[i, j]] - theta[j] * q[[i, j]];
                    res += r * r;
                }
                worst = worst.max(res.sqrt());
            }
            if worst <= 1e-10 * scale_hint.max(1.0) {
                converged = true;
                break;
            }
        } else {
            q = z;
            orthonormalize(&mut q)?;
        }
    }
    if !converged {
        // Spectra without a gap below column p converge too slowly for power
        // iteration; fall back to the full decomposition.
        let full = sym_eigen(a)?;
        let mut vecs = Array2::zeros((m, k));
        for j in 0..k {
            for i in 0..m {
                vecs[[i, j]] = full.eigenvectors[[i, j]];
            }
        }
        return Ok(EigenDecomposition {
            eigenvalues: full.eigenvalues[..k].to_vec(),
            eigenvectors: vecs,
        });
    }

    let mut eigenvalues = Vec::with_capacity(k);
    let mut eigenvectors = Array2::zeros((m, k));
    for j in 0..k {
        eigenvalues.push(scale_hint - theta[j]);
        // Sign convention as in sym_eigen.
        let mut best = 0usize;
        let mut best_abs = 0.0f64;
        for i in 0..m {
            if q[[i, j]].abs() > best_abs {
                best_abs = q[[i, j]].abs();
                best = i;
            }
        }
        let flip = if q[[best, j]] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            eigenvectors[[i, j]] = flip * q[[i, j]];
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// In-place modified Gram-Schmidt with re-orthogonalization pass.
fn orthonormalize(q: &mut Array2<f64>) -> Result<()> {
    let (m, p) = (q.nrows(), q.ncols());
    for j in 0..p {
        for _pass in 0..2 {
            for prev in 0..j {
                let mut dot = 0.0f64;
                for i in 0..m {
                    dot += q[[i, prev]] * q[[i, j]];
                }
                for i in 0..m {
                    q[[i, j]] -= dot * q[[i, prev]];
                }
            }
        }
        let norm: f64 = (0..m).map(|i| q[[i, j]] * q[[i, j]]).sum::<f64>().sqrt();
        if norm <= 1e-300 {
            return Err(Error::Numerics(
                "rank collapse during orthonormalization".into(),
            ));
        }
        for i in 0..m {
            q[[i, j]] /= norm;
        }
    }
    Ok(())
}

#[inline]
fn rotate_rows(data: &mut [f64], m: usize, p: usize, q: usize, c: f64, s: f64) {
    debug_assert!(p < q);
    let (head, tail) = data.split_at_mut(q * m);
    let row_p = &mut head[p * m..p * m + m];
    let row_q = &mut tail[..m];
    for (ap, aq) in row_p.iter_mut().zip(row_q.iter_mut()) {
        let x = *ap;
        let y = *aq;
        *ap = c * x - s * y;
        *aq = s * x + c * y;
    }
}
