//! Centralized dense oracles: normal equations, least squares, kernel-based
//! localizability, textbook conjugate gradient and symmetric spectra. None of
//! this shares code with the distributed paths.

use thiserror::Error;

use crate::graph::{Configuration, LinearSystem, NodeId, SparseMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum ReferenceError {
    #[error("system is singular (|R_jj| = {pivot:e} at column {column})")]
    SingularSystem { column: usize, pivot: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// A = MᵀM and b = MᵀB p_a, columns following `free`.
#[derive(Debug, Clone)]
pub struct DenseSystem {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<[f64; 3]>,
    pub free: Vec<NodeId>,
}

impl DenseSystem {
    pub fn from_linear_system(sys: &LinearSystem, anchors: &Configuration) -> Self {
        let n = sys.m.cols;
        let pa = sys.anchors.map(|id| anchors.position(id).to_array());
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![[0.0; 3]; n];
        for r in 0..sys.m.rows {
            let entries: Vec<(usize, f64)> = sys.m.row(r).collect();
            let mut bp = [0.0; 3];
            for (k, w) in sys.b[r].iter().enumerate() {
                for (axis, acc) in bp.iter_mut().enumerate() {
                    *acc += w * pa[k][axis];
                }
            }
            for &(i, vi) in &entries {
                for &(j, vj) in &entries {
                    a[i][j] += vi * vj;
                }
                for axis in 0..3 {
                    b[i][axis] += vi * bp[axis];
                }
            }
        }
        DenseSystem { a, b, free: sys.free.clone() }
    }

    pub fn dim(&self) -> usize {
        self.free.len()
    }
}

/// MᵀM as a dense matrix.
pub fn gram(m: &SparseMatrix) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; m.cols]; m.cols];
    for r in 0..m.rows {
        let entries: Vec<(usize, f64)> = m.row(r).collect();
        for &(i, vi) in &entries {
            for &(j, vj) in &entries {
                a[i][j] += vi * vj;
            }
        }
    }
    a
}

pub fn mat_vec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// Least-squares solution of `a x = b` (a: m×n, m ≥ n) by Householder QR,
/// for every column of `b`.
pub fn qr_solve(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ReferenceError> {
    let m = a.len();
    let n = a.first().map_or(0, Vec::len);
    if m < n || b.len() != m {
        return Err(ReferenceError::Dimension(format!("{m}x{n} system with {} right-hand rows", b.len())));
    }
    let nrhs = b.first().map_or(0, Vec::len);
    let mut r: Vec<Vec<f64>> = a.to_vec();
    let mut y: Vec<Vec<f64>> = b.to_vec();
    let mut diag_max = 0.0f64;
    for k in 0..n {
        let norm = (k..m).map(|i| r[i][k] * r[i][k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(ReferenceError::SingularSystem { column: k, pivot: 0.0 });
        }
        let alpha = if r[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| r[i][k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in k..n {
                let s: f64 = (k..m).map(|i| v[i - k] * r[i][j]).sum::<f64>() * 2.0 / vnorm2;
                for i in k..m {
                    r[i][j] -= s * v[i - k];
                }
            }
            for c in 0..nrhs {
                let s: f64 = (k..m).map(|i| v[i - k] * y[i][c]).sum::<f64>() * 2.0 / vnorm2;
                for i in k..m {
                    y[i][c] -= s * v[i - k];
                }
            }
        }
        diag_max = diag_max.max(r[k][k].abs());
    }
    for k in 0..n {
        if r[k][k].abs() <= 1e-14 * diag_max {
            return Err(ReferenceError::SingularSystem { column: k, pivot: r[k][k].abs() });
        }
    }
    let mut x = vec![vec![0.0; nrhs]; n];
    for c in 0..nrhs {
        for k in (0..n).rev() {
            let s: f64 = ((k + 1)..n).map(|j| r[k][j] * x[j][c]).sum();
            x[k][c] = (y[k][c] - s) / r[k][k];
        }
    }
    Ok(x)
}

/// p_f = A⁻¹ b, one row per free node.
pub fn solve_least_squares(sys: &DenseSystem) -> Result<Vec<[f64; 3]>, ReferenceError> {
    let rhs: Vec<Vec<f64>> = sys.b.iter().map(|r| r.to_vec()).collect();
    let x = qr_solve(&sys.a, &rhs)?;
    Ok(x.into_iter().map(|r| [r[0], r[1], r[2]]).collect())
}

/// Eigenvalues ascending with matching unit eigenvectors (columns).
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub values: Vec<f64>,
    /// `vectors[i][s]` is component i of eigenvector s
    pub vectors: Vec<Vec<f64>>,
}

impl Spectrum {
    pub fn lambda_max(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    pub fn lambda_min(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }
}

/// Householder tridiagonalization; `vectors` decides whether the orthogonal
/// transform is accumulated.
fn tred2(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64], vectors: bool) {
    let n = d.len();
    d.copy_from_slice(&v[n - 1][..n]);
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[j][i] = f;
                g = e[j] + v[j][j] * f;
                for k in (j + 1)..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }
    if !vectors {
        for j in 0..n {
            d[j] = v[j][j];
        }
        e[0] = 0.0;
        return;
    }
    for i in 0..n.saturating_sub(1) {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[k][i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL on the tridiagonal (d, e).
fn tql2(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64], vectors: bool) {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            loop {
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    if vectors {
                        for row in v.iter_mut() {
                            let t = row[i + 1];
                            row[i + 1] = s * row[i] + c * t;
                            row[i] = c * row[i] - s * t;
                        }
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
}

fn eigen(a: &[Vec<f64>], vectors: bool) -> Spectrum {
    let n = a.len();
    if n == 0 {
        return Spectrum { values: vec![], vectors: vec![] };
    }
    let mut v: Vec<Vec<f64>> = a.to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e, vectors);
    tql2(&mut v, &mut d, &mut e, vectors);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| d[x].total_cmp(&d[y]));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors =
        if vectors { v.iter().map(|row| order.iter().map(|&i| row[i]).collect()).collect() } else { Vec::new() };
    Spectrum { values, vectors }
}

/// Full symmetric eigendecomposition.
pub fn spectral(a: &[Vec<f64>]) -> Spectrum {
    eigen(a, true)
}

/// Eigenvalues only, ascending; much cheaper for large matrices.
pub fn eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    eigen(a, false).values
}

pub const KERNEL_EIGEN_THRESHOLD: f64 = 1e-10;
pub const KERNEL_COMPONENT_THRESHOLD: f64 = 1e-8;

/// Free node i is localizable iff e_i is orthogonal to ker(MᵀM).
pub fn kernel_localizability(m: &SparseMatrix) -> Vec<bool> {
    let a = gram(m);
    let spec = spectral(&a);
    let cutoff = KERNEL_EIGEN_THRESHOLD * spec.lambda_max().max(0.0);
    let kernel: Vec<usize> = (0..spec.values.len()).filter(|&s| spec.values[s] <= cutoff).collect();
    (0..m.cols).map(|i| kernel.iter().all(|&s| spec.vectors[i][s].abs() < KERNEL_COMPONENT_THRESHOLD)).collect()
}

/// One textbook CG iterate on the stacked (n × 3) unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct CgIterate {
    pub x: Vec<[f64; 3]>,
    pub r: Vec<[f64; 3]>,
    pub v: Vec<[f64; 3]>,
    pub alpha: f64,
    pub beta: f64,
}

fn dot3(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p[0] * q[0] + p[1] * q[1] + p[2] * q[2]).sum()
}

fn apply3(a: &[Vec<f64>], x: &[[f64; 3]]) -> Vec<[f64; 3]> {
    a.iter()
        .map(|row| {
            let mut acc = [0.0; 3];
            for (w, xi) in row.iter().zip(x) {
                for c in 0..3 {
                    acc[c] += w * xi[c];
                }
            }
            acc
        })
        .collect()
}

/// Textbook CG on (A ⊗ I₃) x = b from `x0`. Iterate 0 is the start; stops
/// when rᵀr < tol²·r₀ᵀr₀ or after `max_iter` steps.
pub fn dense_cg(sys: &DenseSystem, x0: &[[f64; 3]], tol: f64, max_iter: usize) -> Vec<CgIterate> {
    let ax = apply3(&sys.a, x0);
    let r: Vec<[f64; 3]> = sys.b.iter().zip(&ax).map(|(b, a)| [b[0] - a[0], b[1] - a[1], b[2] - a[2]]).collect();
    let rr0 = dot3(&r, &r);
    let mut it = CgIterate { x: x0.to_vec(), v: r.clone(), r, alpha: 0.0, beta: 0.0 };
    let mut out = vec![it.clone()];
    let mut rr = rr0;
    for _ in 0..max_iter {
        if rr <= tol * tol * rr0 || rr == 0.0 {
            break;
        }
        let q = apply3(&sys.a, &it.v);
        let vq = dot3(&it.v, &q);
        if vq == 0.0 {
            break;
        }
        let alpha = rr / vq;
        for i in 0..it.x.len() {
            for c in 0..3 {
                it.x[i][c] += alpha * it.v[i][c];
                it.r[i][c] -= alpha * q[i][c];
            }
        }
        let rr_next = dot3(&it.r, &it.r);
        let beta = rr_next / rr;
        for i in 0..it.v.len() {
            for c in 0..3 {
                it.v[i][c] = it.r[i][c] + beta * it.v[i][c];
            }
        }
        it.alpha = alpha;
        it.beta = beta;
        rr = rr_next;
        out.push(it.clone());
    }
    out
}
