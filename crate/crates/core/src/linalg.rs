//! Dense SVD by one-sided (Hestenes) Jacobi rotations and rank truncation.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAX_SWEEPS: usize = 80;

/// `A = U · diag(sigma) · V` with thin factors.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `m × k` with orthonormal columns, `k = min(m, n)`.
    pub u: Matrix,
    /// Non-increasing, non-negative, length `k`.
    pub sigma: Vec<f64>,
    /// `k × n` with orthonormal rows.
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank_limit(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (x, s) in us.row_mut(r).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        us.matmul(&self.v)
    }

    /// `Σ_{i ≥ rank} σ_i²`, the squared Frobenius error of the rank cut.
    pub fn tail_energy(&self, rank: usize) -> f64 {
        self.sigma.iter().skip(rank).map(|s| s * s).sum()
    }
}

/// Singular value decomposition of an arbitrary `m × n` matrix.
///
/// Each column of `U` is signed so its first nonzero entry is positive; the
/// matching row of `V` is flipped with it, so results are reproducible.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::InvalidArgument("svd of an empty matrix".into()));
    }
    if !a.is_finite() {
        return Err(Error::InvalidArgument("svd input has non-finite entries".into()));
    }
    if a.rows() >= a.cols() {
        let (u, sigma, v) = jacobi_tall(a);
        Ok(finish(u, sigma, v.transpose()))
    } else {
        let (u, sigma, v) = jacobi_tall(&a.transpose());
        // Aᵀ = U Σ Vᵀ  ⇒  A = V Σ Uᵀ
        Ok(finish(v, sigma, u.transpose()))
    }
}

/// One-sided Jacobi on a tall matrix: returns `(U m×n, σ, V n×n)` with
/// `A = U diag(σ) Vᵀ`, unsorted.
fn jacobi_tall(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (m, n) = a.shape();
    // Work on columns stored as rows for contiguous access.
    let mut w = a.transpose();
    let mut v = Matrix::identity(n);
    let tol = f64::EPSILON;

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n.saturating_sub(1) {
            for j in i + 1..n {
                let (alpha, beta, gamma) = {
                    let (ci, cj) = (w.row(i), w.row(j));
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for k in 0..m {
                        alpha += ci[k] * ci[k];
                        beta += cj[k] * cj[k];
                        gamma += ci[k] * cj[k];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, i, j, c, s);
                rotate_rows(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma = Vec::with_capacity(n);
    for i in 0..n {
        let norm = w.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        sigma.push(norm);
        if norm > 0.0 {
            w.row_mut(i).iter_mut().for_each(|x| *x /= norm);
        }
    }
    // w holds Uᵀ (n × m) and v holds Vᵀ rows; return column forms.
    (w.transpose(), sigma, v.transpose())
}

fn rotate_rows(m: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    let (lo, hi) = data.split_at_mut(j * cols);
    let ri = &mut lo[i * cols..(i + 1) * cols];
    let rj = &mut hi[..cols];
    for (x, y) in ri.iter_mut().zip(rj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Sorts, completes rank-deficient columns of `U`, and fixes signs.
/// `u` is `m × k`, `v_rows` is `k × n`.
fn finish(u: Matrix, sigma: Vec<f64>, v_rows: Matrix) -> SvdResult {
    let k = sigma.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let sigma: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();
    let mut u = u.select_cols(&order);
    let mut v = v_rows.select_rows(&order);

    let scale = sigma.first().copied().unwrap_or(0.0);
    let null_tol = scale * f64::EPSILON * (u.rows().max(v.cols()) as f64);
    for c in 0..k {
        let norm: f64 = (0..u.rows()).map(|r| u[(r, c)] * u[(r, c)]).sum::<f64>().sqrt();
        if sigma[c] <= null_tol || (norm - 1.0).abs() > 1e-6 {
            complete_column(&mut u, c);
        }
    }

    for c in 0..k {
        let first = (0..u.rows()).map(|r| u[(r, c)]).find(|x| x.abs() > 1e-300);
        if first.is_some_and(|x| x < 0.0) {
            for r in 0..u.rows() {
                u[(r, c)] = -u[(r, c)];
            }
            v.row_mut(c).iter_mut().for_each(|x| *x = -*x);
        }
    }
    SvdResult { u, sigma, v }
}

/// Replaces column `c` with a unit vector orthogonal to every other column,
/// found by Gram–Schmidt over the standard basis.
fn complete_column(u: &mut Matrix, c: usize) {
    let (m, k) = u.shape();
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        for _ in 0..2 {
            for other in (0..k).filter(|&o| o != c) {
                let dot: f64 = (0..m).map(|r| u[(r, other)] * cand[r]).sum();
                for r in 0..m {
                    cand[r] -= dot * u[(r, other)];
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > best_norm {
            best_norm = norm;
            best = Some(cand);
        }
        if best_norm > 0.5 {
            break;
        }
    }
    if let Some(cand) = best {
        for r in 0..m {
            u[(r, c)] = cand[r] / best_norm;
        }
    }
}

/// Rank-`rank` factors `(Ũ·Σ̃, Ṽ)`, so `W1 · W2` is the best rank-`rank`
/// approximation in Frobenius norm.
pub fn truncate_factor(svd: &SvdResult, rank: usize) -> Result<(Matrix, Matrix)> {
    let k = svd.rank_limit();
    if rank == 0 || rank > k {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} outside 1..={k}"
        )));
    }
    let keep: Vec<usize> = (0..rank).collect();
    let mut w1 = svd.u.select_cols(&keep);
    for r in 0..w1.rows() {
        for (x, s) in w1.row_mut(r).iter_mut().zip(&svd.sigma) {
            *x *= s;
        }
    }
    let w2 = svd.v.select_rows(&keep);
    Ok((w1, w2))
}

/// `max |MᵀM − I|` over the entries, for orthonormality checks.
pub fn orthonormality_error(m: &Matrix) -> f64 {
    let gram = m.matmul_tn(m);
    let mut worst: f64 = 0.0;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, m: usize, n: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(m, n, data).unwrap()
    }

    #[test]
    fn diagonal_singular_values() {
        let a = Matrix::from_rows(&[[3.0, 0.0], [0.0, 2.0]]).unwrap();
        let s = svd(&a).unwrap();
        assert!((s.sigma[0] - 3.0).abs() < 1e-14 && (s.sigma[1] - 2.0).abs() < 1e-14);
        let b = Matrix::from_rows(&[[-2.0, 0.0], [0.0, 3.0]]).unwrap();
        let s = svd(&b).unwrap();
        assert_eq!(s.sigma.len(), 2);
        assert!((s.sigma[0] - 3.0).abs() < 1e-14 && (s.sigma[1] - 2.0).abs() < 1e-14);
        assert!(s.reconstruct().sub(&b).max_abs() < 1e-14);
    }

    #[test]
    fn rank_one_has_a_single_nonzero_value() {
        let u = [1.0, -2.0, 2.0];
        let v = [3.0, 4.0];
        let a = Matrix::from_rows(&u.map(|x| [x * v[0], x * v[1]])).unwrap();
        let s = svd(&a).unwrap();
        assert!((s.sigma[0] - 15.0).abs() < 1e-12);
        assert!(s.sigma[1].abs() < 1e-12);
        assert!(orthonormality_error(&s.u) < 1e-10);
        let (w1, w2) = truncate_factor(&s, 1).unwrap();
        assert!(w1.matmul(&w2).sub(&a).frobenius() < 1e-12);
    }

    #[test]
    fn identity_truncation_error() {
        let s = svd(&Matrix::identity(3)).unwrap();
        let (w1, w2) = truncate_factor(&s, 2).unwrap();
        let err = w1.matmul(&w2).sub(&Matrix::identity(3)).frobenius_sq();
        assert!((err - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wide_and_tall_reconstruct() {
        for (seed, (m, n)) in [(3, 5), (8, 5), (1, 4), (4, 1), (6, 6)].into_iter().enumerate() {
            let a = random(seed as u64, m, n);
            let s = svd(&a).unwrap();
            let rel = s.reconstruct().sub(&a).frobenius() / a.frobenius();
            assert!(rel < 1e-12, "{m}x{n}: {rel}");
            assert!(orthonormality_error(&s.u) < 1e-10);
            assert!(orthonormality_error(&s.v.transpose()) < 1e-10);
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn eckart_young_on_30_by_8() {
        let a = random(99, 30, 8);
        let s = svd(&a).unwrap();
        let (w1, w2) = truncate_factor(&s, 4).unwrap();
        let err = w1.matmul(&w2).sub(&a).frobenius_sq();
        assert!((err - s.tail_energy(4)).abs() < 1e-8 * a.frobenius_sq());
    }

    #[test]
    fn sign_convention_is_stable() {
        let a = random(5, 7, 4);
        let s = svd(&a).unwrap();
        for c in 0..4 {
            let first = (0..7).map(|r| s.u[(r, c)]).find(|x| x.abs() > 0.0).unwrap();
            assert!(first > 0.0);
        }
        let neg = a.scaled(-1.0);
        let t = svd(&neg).unwrap();
        assert_eq!(s.sigma, t.sigma);
    }

    #[test]
    fn errors() {
        let mut bad = Matrix::zeros(2, 2);
        bad[(0, 1)] = f64::NAN;
        assert!(svd(&bad).is_err());
        let s = svd(&Matrix::identity(3)).unwrap();
        assert!(truncate_factor(&s, 0).is_err());
        assert!(truncate_factor(&s, 4).is_err());
    }
}
