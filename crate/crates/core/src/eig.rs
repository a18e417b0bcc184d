//! Eigendecomposition of small dense non-symmetric matrices.
//!
//! Householder reduction to Hessenberg form, shifted complex QR iteration to
//! Schur form `A = Q T Q*`, then eigenvectors by back substitution on `T`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

type C = Complex64;

#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<C>,
    /// Unit-norm right eigenvectors, one per column.
    pub vectors: DMatrix<C>,
}

fn hessenberg(a: &mut DMatrix<C>, q: &mut DMatrix<C>) {
    let n = a.nrows();
    for k in 0..n.saturating_sub(2) {
        let x: Vec<C> = (k + 1..n).map(|i| a[(i, k)]).collect();
        let norm = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let phase = if x[0].norm() > 0.0 {
            x[0] / x[0].norm()
        } else {
            C::new(1.0, 0.0)
        };
        let alpha = -phase * norm;
        let mut v = x.clone();
        v[0] -= alpha;
        let vnorm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        for c in v.iter_mut() {
            *c /= vnorm;
        }
        // A <- (I - 2 v v*) A
        for j in 0..n {
            let s: C = (0..v.len()).map(|i| v[i].conj() * a[(k + 1 + i, j)]).sum();
            for i in 0..v.len() {
                a[(k + 1 + i, j)] -= 2.0 * v[i] * s;
            }
        }
        // A <- A (I - 2 v v*), Q <- Q (I - 2 v v*)
        for m in [&mut *a, &mut *q] {
            for i in 0..n {
                let s: C = (0..v.len()).map(|j| m[(i, k + 1 + j)] * v[j]).sum();
                for j in 0..v.len() {
                    m[(i, k + 1 + j)] -= 2.0 * s * v[j].conj();
                }
            }
        }
        for i in k + 2..n {
            a[(i, k)] = C::new(0.0, 0.0);
        }
    }
}

/// Givens rotation `[c s; -s* c]` (c real) mapping `(a, b)` to `(r, 0)`.
fn givens(a: C, b: C) -> (f64, C) {
    let na = a.norm();
    let nb = b.norm();
    if nb == 0.0 {
        return (1.0, C::new(0.0, 0.0));
    }
    if na == 0.0 {
        return (0.0, (b.conj() / nb) * C::new(1.0, 0.0));
    }
    let r = na.hypot(nb);
    let c = na / r;
    let s = (a / na) * b.conj() / r;
    (c, s)
}

fn wilkinson_shift(a: C, b: C, c: C, d: C) -> C {
    let tr_half = (a + d) / 2.0;
    let det = a * d - b * c;
    let disc = (tr_half * tr_half - det).sqrt();
    let (l1, l2) = (tr_half + disc, tr_half - disc);
    if (l1 - d).norm() < (l2 - d).norm() {
        l1
    } else {
        l2
    }
}

/// Complex Schur form. Returns `(T, Q)` with `A = Q T Q*`.
pub fn schur(a: &DMatrix<C>) -> Result<(DMatrix<C>, DMatrix<C>)> {
    let n = a.nrows();
    let mut h = a.clone();
    let mut q = DMatrix::<C>::identity(n, n);
    if n <= 1 {
        return Ok((h, q));
    }
    hessenberg(&mut h, &mut q);
    let norm = h.iter().map(|c| c.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let eps = f64::EPSILON;
    let max_iter = 100 * n;
    let mut hi = n - 1;
    let mut iter = 0;
    let mut total = 0;
    while hi > 0 {
        let mut l = hi;
        while l > 0 {
            let scale = h[(l - 1, l - 1)].norm() + h[(l, l)].norm();
            let scale = if scale == 0.0 { norm } else { scale };
            if h[(l, l - 1)].norm() <= eps * scale {
                h[(l, l - 1)] = C::new(0.0, 0.0);
                break;
            }
            l -= 1;
        }
        if l == hi {
            hi -= 1;
            iter = 0;
            continue;
        }
        iter += 1;
        total += 1;
        if total > max_iter {
            return Err(Error::NoConvergence(total));
        }
        let mu = if iter % 11 == 10 {
            // exceptional shift to break cycles
            h[(hi, hi)] + C::new(h[(hi, hi - 1)].norm(), 0.0) * 0.75
        } else {
            wilkinson_shift(h[(hi - 1, hi - 1)], h[(hi - 1, hi)], h[(hi, hi - 1)], h[(hi, hi)])
        };
        for k in l..=hi {
            h[(k, k)] -= mu;
        }
        let mut rots = Vec::with_capacity(hi - l);
        for k in l..hi {
            let (c, s) = givens(h[(k, k)], h[(k + 1, k)]);
            for j in k..n {
                let (x, y) = (h[(k, j)], h[(k + 1, j)]);
                h[(k, j)] = x * c + s * y;
                h[(k + 1, j)] = -s.conj() * x + y * c;
            }
            rots.push((c, s));
        }
        for (idx, &(c, s)) in rots.iter().enumerate() {
            let k = l + idx;
            let rows = (k + 2).min(hi + 1);
            for i in 0..rows {
                let (x, y) = (h[(i, k)], h[(i, k + 1)]);
                h[(i, k)] = x * c + y * s.conj();
                h[(i, k + 1)] = -x * s + y * c;
            }
            for i in 0..n {
                let (x, y) = (q[(i, k)], q[(i, k + 1)]);
                q[(i, k)] = x * c + y * s.conj();
                q[(i, k + 1)] = -x * s + y * c;
            }
        }
        for k in l..=hi {
            h[(k, k)] += mu;
        }
    }
    for j in 0..n {
        for i in j + 1..n {
            h[(i, j)] = C::new(0.0, 0.0);
        }
    }
    Ok((h, q))
}

/// Eigenvalues and unit-norm right eigenvectors of a complex square matrix.
pub fn eig(a: &DMatrix<C>) -> Result<Eigen> {
    let n = a.nrows();
    let (t, q) = schur(a)?;
    let norm = t.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let small = (norm * f64::EPSILON).max(f64::MIN_POSITIVE);
    let mut vectors = DMatrix::<C>::zeros(n, n);
    for k in 0..n {
        let lambda = t[(k, k)];
        let mut x = vec![C::new(0.0, 0.0); n];
        x[k] = C::new(1.0, 0.0);
        for j in (0..k).rev() {
            let s: C = (j + 1..=k).map(|l| t[(j, l)] * x[l]).sum();
            let mut d = t[(j, j)] - lambda;
            if d.norm() < small {
                d = C::new(small, 0.0);
            }
            x[j] = -s / d;
        }
        let mut v: Vec<C> = (0..n).map(|i| (0..=k).map(|l| q[(i, l)] * x[l]).sum()).collect();
        normalize(&mut v);
        for i in 0..n {
            vectors[(i, k)] = v[i];
        }
    }
    Ok(Eigen {
        values: (0..n).map(|k| t[(k, k)]).collect(),
        vectors,
    })
}

/// Scales to unit 2-norm with the largest-magnitude entry real and positive.
pub fn normalize(v: &mut [C]) {
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let pivot = v
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()).then(b.0.cmp(&a.0)))
        .map(|(_, c)| c)
        .unwrap_or(C::new(1.0, 0.0));
    let phase = pivot.conj() / pivot.norm();
    for c in v.iter_mut() {
        *c = *c * phase / norm;
    }
}

/// Eigendecomposition of a real matrix with exact conjugate symmetry:
/// eigenvalues within `tol` of the real axis are made real (with real
/// eigenvectors) and every complex eigenvalue is paired with its exact
/// conjugate. Order: descending modulus, pairs adjacent, positive imaginary
/// part first.
pub fn eig_real(a: &DMatrix<f64>) -> Result<Eigen> {
    let n = a.nrows();
    let ac = a.map(|x| C::new(x, 0.0));
    let raw = eig(&ac)?;
    let scale = raw.values.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-9 * scale;

    let mut used = vec![false; n];
    // (value, vector, is_pair)
    let mut groups: Vec<(C, Vec<C>, bool)> = Vec::new();
    let col = |k: usize| -> Vec<C> { raw.vectors.column(k).iter().copied().collect() };
    for k in 0..n {
        if used[k] {
            continue;
        }
        let v = raw.values[k];
        if v.im.abs() <= tol {
            used[k] = true;
            let mut vec = col(k);
            normalize(&mut vec);
            let mut real: Vec<C> = vec.iter().map(|c| C::new(c.re, 0.0)).collect();
            normalize(&mut real);
            groups.push((C::new(v.re, 0.0), real, false));
            continue;
        }
        let target = v.conj();
        let partner = (0..n)
            .filter(|&j| {
                j != k && !used[j] && raw.values[j].im.abs() > tol && raw.values[j].im.signum() != v.im.signum()
            })
            .min_by(|&a, &b| {
                (raw.values[a] - target)
                    .norm()
                    .total_cmp(&(raw.values[b] - target).norm())
            });
        used[k] = true;
        if let Some(j) = partner {
            used[j] = true;
        }
        let (val, mut vec) = if v.im > 0.0 {
            (v, col(k))
        } else {
            match partner {
                Some(j) => (raw.values[j], col(j)),
                None => (v.conj(), col(k).iter().map(|c| c.conj()).collect()),
            }
        };
        normalize(&mut vec);
        groups.push((val, vec, true));
    }
    groups.sort_by(|a, b| {
        b.0.norm()
            .total_cmp(&a.0.norm())
            .then(b.0.im.total_cmp(&a.0.im))
            .then(b.0.re.total_cmp(&a.0.re))
    });

    let mut values = Vec::with_capacity(n);
    let mut vectors = DMatrix::<C>::zeros(n, n);
    let mut c = 0;
    for (val, vec, pair) in groups {
        let members: Vec<(C, Vec<C>)> = if pair {
            let conj: Vec<C> = vec.iter().map(|x| x.conj()).collect();
            vec![(val, vec), (val.conj(), conj)]
        } else {
            vec![(val, vec)]
        };
        for (value, v) in members {
            if c == n {
                break;
            }
            values.push(value);
            for i in 0..n {
                vectors[(i, c)] = v[i];
            }
            c += 1;
        }
    }
    if c != n {
        return Err(Error::NoConvergence(0));
    }
    Ok(Eigen { values, vectors })
}
