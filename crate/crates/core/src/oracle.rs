//! Reference computations the experiments are judged against: a one-sided
//! Jacobi SVD, the Eckart–Young tail error `ε_r`, numerical rank, and a small
//! PCA for weight-update trajectories.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAX_SWEEPS: usize = 80;
const ORTHO_TOL: f64 = 1e-15;

/// Thin SVD `M = U·diag(s)·Vᵀ` with `s` sorted in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Result<Matrix> {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.s.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul(&self.v.transpose())
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns of a working copy are rotated pairwise until every pair is
/// orthogonal to within `1e-15` relative to their norms; the column norms are
/// then the singular values. Sweep order is fixed, so results are
/// deterministic.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    let (rows, n) = m.shape();
    // column-major working copy
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut converged = n < 2;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        residual = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                if rel <= ORTHO_TOL {
                    continue;
                }
                residual = residual.max(rel);
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::NonConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let s_max = norms[order[0]];
    let tiny = s_max * f64::EPSILON * rows.max(n) as f64;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        s.push(norms[j]);
        if norms[j] > tiny && norms[j] > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            deficient.push(k);
        }
    }
    complete_orthonormal(&mut u_cols, &deficient);

    let mut u = Matrix::zeros(rows, n);
    let mut vm = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        for r in 0..rows {
            u[(r, k)] = u_cols[k][r];
        }
        for r in 0..n {
            vm[(r, k)] = v[j][r];
        }
    }
    Ok(Svd { u, s, v: vm })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed columns with unit vectors orthogonal to all others.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize]) {
    let dim = cols.first().map_or(0, Vec::len);
    let mut filled: Vec<bool> = (0..cols.len()).map(|k| !missing.contains(&k)).collect();
    let mut candidate = 0;
    for &k in missing {
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // two Gram–Schmidt passes
            for _ in 0..2 {
                for (j, col) in cols.iter().enumerate() {
                    if filled[j] {
                        let proj: f64 = col.iter().zip(&e).map(|(a, b)| a * b).sum();
                        for (ei, ci) in e.iter_mut().zip(col) {
                            *ei -= proj * ci;
                        }
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols[k] = e.iter().map(|x| x / norm).collect();
                filled[k] = true;
                break;
            }
        }
    }
}

/// Frobenius norm of `UᵀU - I`.
pub fn orthogonality_residual(q: &Matrix) -> f64 {
    let gram = q.transpose().matmul(q).expect("conforming");
    let eye = Matrix::identity(q.cols());
    gram.sub(&eye).expect("same shape").frobenius_norm()
}

/// `‖M - U·S·Vᵀ‖_F / ‖M‖_F` (absolute when `M = 0`).
pub fn reconstruction_residual(m: &Matrix, f: &Svd) -> Result<f64> {
    let err = m.sub(&f.reconstruct()?)?.frobenius_norm();
    let norm = m.frobenius_norm();
    Ok(if norm > 0.0 { err / norm } else { err })
}

/// Best rank-`r` Frobenius error `√(Σ_{i>r} sᵢ²)`.
pub fn epsilon_r(m: &Matrix, r: usize) -> Result<f64> {
    let p = m.rows().min(m.cols());
    if r > p {
        return Err(Error::InvalidArgument(format!("rank {r} exceeds min dimension {p}")));
    }
    let f = svd(m)?;
    Ok(tail_norm(&f.s, r))
}

pub fn tail_norm(s: &[f64], r: usize) -> f64 {
    s.iter().skip(r).map(|v| v * v).sum::<f64>().sqrt()
}

/// Count of singular values above `rel_tol·s_max`.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> Result<usize> {
    let f = svd(m)?;
    let s_max = f.s.first().copied().unwrap_or(0.0);
    if s_max == 0.0 {
        return Ok(0);
    }
    Ok(f.s.iter().filter(|&&v| v > rel_tol * s_max).count())
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    /// Projection of each snapshot on the top-2 principal axes.
    pub coords: Vec<[f64; 2]>,
    /// Singular values of the centred snapshot matrix for those axes.
    pub axis_scale: [f64; 2],
    pub path_length: f64,
    pub hull_area: f64,
}

/// PCA of flattened snapshots via the exact SVD of the centred data.
pub fn pca_trajectory(snapshots: &[Matrix]) -> Result<Trajectory> {
    if snapshots.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 snapshots for PCA, got {}",
            snapshots.len()
        )));
    }
    let dim = snapshots[0].len();
    if snapshots.iter().any(|s| s.len() != dim) {
        return Err(Error::InvalidArgument("snapshots differ in size".into()));
    }
    let k = snapshots.len();
    let mut mean = vec![0.0; dim];
    for s in snapshots {
        for (m, v) in mean.iter_mut().zip(s.data()) {
            *m += v / k as f64;
        }
    }
    let mut data = Vec::with_capacity(k * dim);
    for s in snapshots {
        data.extend(s.data().iter().zip(&mean).map(|(v, m)| v - m));
    }
    let centred = Matrix::new(k, dim, data)?;
    let f = svd(&centred)?;
    let axis = |j: usize| f.s.get(j).copied().unwrap_or(0.0);
    let coords: Vec<[f64; 2]> = (0..k)
        .map(|i| {
            let c = |j: usize| {
                if j < f.u.cols() {
                    f.u[(i, j)] * axis(j)
                } else {
                    0.0
                }
            };
            [c(0), c(1)]
        })
        .collect();
    Ok(Trajectory {
        path_length: path_length(&coords),
        hull_area: convex_hull_area(&coords),
        coords,
        axis_scale: [axis(0), axis(1)],
    })
}

pub fn path_length(points: &[[f64; 2]]) -> f64 {
    points
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .sum()
}

/// Area of the convex hull (Andrew's monotone chain + shoelace).
pub fn convex_hull_area(points: &[[f64; 2]]) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return 0.0;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    let n = hull.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice.abs() / 2.0
}
