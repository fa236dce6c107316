//! Small dense linear-algebra helpers used by the tape and the graph ops.
//!
//! Problem sizes here are tiny (d <= 32), so everything is hand-rolled
//! Gauss-Jordan / Cholesky rather than pulling in a LAPACK backend.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Invert a square matrix by Gauss-Jordan elimination with partial pivoting.
pub fn mat_inv(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Contract(format!(
            "matrix inverse requires a square input, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut m = a.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let mut piv = col;
        let mut best = m[[col, col]].abs();
        for row in (col + 1)..n {
            let v = m[[row, col]].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best < 1e-300 {
            return Err(Error::Numerical(format!(
                "singular matrix at pivot column {col}"
            )));
        }
        if piv != col {
            for j in 0..n {
                m.swap([col, j], [piv, j]);
                inv.swap([col, j], [piv, j]);
            }
        }
        let p = m[[col, col]];
        for j in 0..n {
            m[[col, j]] /= p;
            inv[[col, j]] /= p;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = m[[row, col]];
            if f != 0.0 {
                for j in 0..n {
                    m[[row, j]] -= f * m[[col, j]];
                    inv[[row, j]] -= f * inv[[col, j]];
                }
            }
        }
    }
    Ok(inv)
}

/// 1-norm condition number estimate: ||A||_1 * ||A^-1||_1.
pub fn condition_1norm(a: &Array2<f64>, a_inv: &Array2<f64>) -> f64 {
    norm_1(a) * norm_1(a_inv)
}

fn norm_1(a: &Array2<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}

/// Topological sort of the support of a square adjacency matrix
/// (entry [child, parent] != 0 means parent -> child). Returns node order
/// or `None` when the support contains a cycle. The diagonal is ignored.
pub fn toposort_support(a: &Array2<f64>) -> Option<Vec<usize>> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "toposort expects a square matrix");
    let mut indeg = vec![0usize; n];
    for child in 0..n {
        for parent in 0..n {
            if child != parent && a[[child, parent]] != 0.0 {
                indeg[child] += 1;
            }
        }
    }
    let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(node) = queue.pop() {
        order.push(node);
        for child in 0..n {
            if child != node && a[[child, node]] != 0.0 {
                indeg[child] -= 1;
                if indeg[child] == 0 {
                    queue.push(child);
                }
            }
        }
    }
    if order.len() == n {
        Some(order)
    } else {
        None
    }
}

/// Whether the off-diagonal support of a square matrix is acyclic.
pub fn support_is_acyclic(a: &Array2<f64>) -> bool {
    toposort_support(a).is_some()
}

/// Solve (K + ridge*I) x = y via Cholesky. K must be symmetric positive
/// semi-definite; the ridge keeps the factorization well posed.
pub fn cholesky_solve(k: &Array2<f64>, ridge: f64, y: &Array1<f64>) -> Result<Array1<f64>> {
    let n = k.nrows();
    if k.ncols() != n || y.len() != n {
        return Err(Error::Contract("cholesky_solve shape mismatch".into()));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = k[[i, j]] + if i == j { ridge } else { 0.0 };
            for p in 0..j {
                s -= l[[i, p]] * l[[j, p]];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Numerical(
                        "cholesky factorization failed (matrix not positive definite)".into(),
                    ));
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    // forward then back substitution
    let mut z = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = y[i];
        for p in 0..i {
            s -= l[[i, p]] * z[p];
        }
        z[i] = s / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = z[i];
        for p in (i + 1)..n {
            s -= l[[p, i]] * x[p];
        }
        x[i] = s / l[[i, i]];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn inverse_roundtrip() {
        let a = array![[2.0, 1.0], [1.0, 3.0]];
        let inv = mat_inv(&a).unwrap();
        let prod = a.dot(&inv);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_rejected() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(mat_inv(&a).is_err());
    }

    #[test]
    fn toposort_detects_cycles() {
        let chain = array![[0.0, 0.0], [1.0, 0.0]];
        assert!(support_is_acyclic(&chain));
        let cycle = array![[0.0, 1.0], [1.0, 0.0]];
        assert!(!support_is_acyclic(&cycle));
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let k = array![[4.0, 1.0], [1.0, 3.0]];
        let y = Array1::from(vec![1.0, 2.0]);
        let x = cholesky_solve(&k, 0.0, &y).unwrap();
        let r0 = 4.0 * x[0] + x[1] - 1.0;
        let r1 = x[0] + 3.0 * x[1] - 2.0;
        assert!(r0.abs() < 1e-12 && r1.abs() < 1e-12);
    }
}
