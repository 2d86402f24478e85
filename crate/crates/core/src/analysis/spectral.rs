//! Top singular directions by orthogonal iteration and the drift measure
//! built on them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

pub const SUBSPACE_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 20_000;

/// Top-`k` left singular vectors as columns of `vectors`, singular values in
/// decreasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct LeftSingular {
    pub vectors: DenseMatrix,
    pub values: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Orthonormalizes the columns of `z` in place (two Gram–Schmidt passes).
/// A column that collapses is replaced by the first coordinate axis not yet
/// in the span.
fn orthonormalize(z: &mut DenseMatrix) {
    let (n, k) = z.shape();
    let mut axis = 0;
    for j in 0..k {
        let scale: f64 = (0..n).map(|r| z.get(r, j).abs()).fold(0.0, f64::max);
        loop {
            for _ in 0..2 {
                for i in 0..j {
                    let dot: f64 = (0..n).map(|r| z.get(r, i) * z.get(r, j)).sum();
                    for r in 0..n {
                        let v = z.get(r, j) - dot * z.get(r, i);
                        z.set(r, j, v);
                    }
                }
            }
            let norm = (0..n).map(|r| z.get(r, j).powi(2)).sum::<f64>().sqrt();
            if norm > 1e-12 * scale.max(1e-300) && norm > 1e-200 {
                for r in 0..n {
                    let v = z.get(r, j) / norm;
                    z.set(r, j, v);
                }
                break;
            }
            for r in 0..n {
                z.set(r, j, if r == axis { 1.0 } else { 0.0 });
            }
            axis += 1;
        }
    }
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi
/// rotations. Returns eigenvalues and eigenvectors as columns.
fn jacobi_eigen(a: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let k = a.rows();
    let mut a = a.clone();
    let mut v = DenseMatrix::identity(k);
    let norm = a.frobenius_sq().sqrt().max(1e-300);
    for _ in 0..100 {
        let off: f64 = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * norm {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..k {
                    let (arp, arq) = (a.get(r, p), a.get(r, q));
                    a.set(r, p, c * arp - s * arq);
                    a.set(r, q, s * arp + c * arq);
                }
                for r in 0..k {
                    let (apr, aqr) = (a.get(p, r), a.get(q, r));
                    a.set(p, r, c * apr - s * aqr);
                    a.set(q, r, s * apr + c * aqr);
                }
                for r in 0..k {
                    let (vrp, vrq) = (v.get(r, p), v.get(r, q));
                    v.set(r, p, c * vrp - s * vrq);
                    v.set(r, q, s * vrp + c * vrq);
                }
            }
        }
    }
    ((0..k).map(|i| a.get(i, i)).collect(), v)
}

/// Flips each column so its largest-magnitude entry is positive.
fn sign_normalize(u: &mut DenseMatrix) {
    for j in 0..u.cols() {
        let mut best = 0.0f64;
        for r in 0..u.rows() {
            if u.get(r, j).abs() > best.abs() + 1e-12 {
                best = u.get(r, j);
            }
        }
        if best < 0.0 {
            for r in 0..u.rows() {
                let v = -u.get(r, j);
                u.set(r, j, v);
            }
        }
    }
}

pub fn top_left_singular(w: &DenseMatrix, k: usize) -> Result<LeftSingular> {
    let n = w.rows();
    if k == 0 || k > n.min(w.cols()) {
        return Err(Error::config(format!(
            "k = {k} must lie in [1, {}] for a {} x {} matrix",
            n.min(w.cols()),
            n,
            w.cols()
        )));
    }
    let gram = w.matmul_t(w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5bd1_e995);
    let mut q = DenseMatrix::random_normal(n, k, 1.0, &mut rng);
    orthonormalize(&mut q);
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut next = gram.matmul(&q)?;
        orthonormalize(&mut next);
        let proj = q.matmul(&q.t_matmul(&next)?)?;
        let angle = next.sub(&proj)?.frobenius_sq().sqrt();
        q = next;
        if angle < SUBSPACE_TOL {
            converged = true;
            break;
        }
    }
    let ritz = q.t_matmul(&gram.matmul(&q)?)?;
    let (vals, vecs) = jacobi_eigen(&ritz);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let rotated = q.matmul(&vecs)?;
    let mut vectors = rotated.select_cols(&order)?;
    sign_normalize(&mut vectors);
    Ok(LeftSingular {
        vectors,
        values: order.iter().map(|&i| vals[i].max(0.0).sqrt()).collect(),
        sweeps,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDrift {
    /// For each top singular direction of the updated weight, the largest
    /// absolute cosine against the original top directions.
    pub similarity: Vec<f64>,
    pub converged: bool,
}

pub fn spectral_drift(
    before: &DenseMatrix,
    after: &DenseMatrix,
    k: usize,
) -> Result<SpectralDrift> {
    before.ensure_same_shape(after, "spectral_drift")?;
    let a = top_left_singular(before, k)?;
    let b = top_left_singular(after, k)?;
    let n = before.rows();
    let similarity = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    (0..n)
                        .map(|r| b.vectors.get(r, i) * a.vectors.get(r, j))
                        .sum::<f64>()
                        .abs()
                })
                .fold(0.0, f64::max)
                .min(1.0)
        })
        .collect();
    Ok(SpectralDrift {
        similarity,
        converged: a.converged && b.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_recovers_axes() {
        let w = DenseMatrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.0]]);
        let s = top_left_singular(&w, 2).unwrap();
        assert!(s.converged);
        assert!((s.values[0] - 3.0).abs() < 1e-9 && (s.values[1] - 2.0).abs() < 1e-9);
        assert!((s.vectors.get(1, 0) - 1.0).abs() < 1e-9);
        assert!((s.vectors.get(2, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn k_out_of_range() {
        let w = DenseMatrix::zeros(3, 2);
        assert!(matches!(spectral_drift(&w, &w, 3), Err(Error::Config(_))));
        assert!(spectral_drift(&w, &w, 0).is_err());
    }

    #[test]
    fn rank_deficient_input_still_orthonormal() {
        let w = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]]);
        let s = top_left_singular(&w, 2).unwrap();
        let g = s.vectors.t_matmul(&s.vectors).unwrap();
        assert!(g.max_abs_diff(&DenseMatrix::identity(2)) < 1e-9);
    }
}
