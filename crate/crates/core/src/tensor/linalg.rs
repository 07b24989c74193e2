use crate::error::{Error, Result};

/// LU factorization with partial pivoting of a square row-major matrix.
#[derive(Clone, Debug)]
pub struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    pivots: Vec<usize>,
}

impl LuFactors {
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::shape(format!("expected {n}x{n} matrix, got {} values", a.len())));
        }
        let mut lu = a.to_vec();
        let mut pivots: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for col in 0..n {
            let (pivot_row, pivot_abs) = (col..n)
                .map(|r| (r, lu[r * n + col].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot_abs <= f64::EPSILON * scale * n as f64 {
                return Err(Error::Singular);
            }
            if pivot_row != col {
                for j in 0..n {
                    lu.swap(col * n + j, pivot_row * n + j);
                }
                pivots.swap(col, pivot_row);
            }
            let pivot = lu[col * n + col];
            for r in col + 1..n {
                let factor = lu[r * n + col] / pivot;
                lu[r * n + col] = factor;
                if factor != 0.0 {
                    for j in col + 1..n {
                        lu[r * n + j] -= factor * lu[col * n + j];
                    }
                }
            }
        }
        Ok(LuFactors { n, lu, pivots })
    }

    /// Solves `A X = B` for `B` of shape `[n, m]`.
    pub fn solve(&self, b: &[f64], m: usize) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n * m];
        for (i, &p) in self.pivots.iter().enumerate() {
            x[i * m..(i + 1) * m].copy_from_slice(&b[p * m..(p + 1) * m]);
        }
        for i in 0..n {
            for k in 0..i {
                let l = self.lu[i * n + k];
                if l != 0.0 {
                    for j in 0..m {
                        x[i * m + j] -= l * x[k * m + j];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = self.lu[i * n + k];
                if u != 0.0 {
                    for j in 0..m {
                        x[i * m + j] -= u * x[k * m + j];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..m {
                x[i * m + j] /= d;
            }
        }
        x
    }

    /// Solves `Aᵀ X = B`.
    pub fn solve_transposed(&self, b: &[f64], m: usize) -> Vec<f64> {
        // PA = LU  =>  Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ z = b, Lᵀ w = z, x = Pᵀ w.
        let n = self.n;
        let mut z = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                let u = self.lu[k * n + i];
                if u != 0.0 {
                    for j in 0..m {
                        z[i * m + j] -= u * z[k * m + j];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..m {
                z[i * m + j] /= d;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let l = self.lu[k * n + i];
                if l != 0.0 {
                    for j in 0..m {
                        z[i * m + j] -= l * z[k * m + j];
                    }
                }
            }
        }
        let mut x = vec![0.0; n * m];
        for (i, &p) in self.pivots.iter().enumerate() {
            x[p * m..(p + 1) * m].copy_from_slice(&z[i * m..(i + 1) * m]);
        }
        x
    }
}

/// Solves `A X = B` with `A` square `[n,n]` and `B` of shape `[n,m]`.
pub fn lu_solve(a: &[f64], b: &[f64], n: usize, m: usize) -> Result<Vec<f64>> {
    if b.len() != n * m {
        return Err(Error::shape(format!("right-hand side needs {} values, got {}", n * m, b.len())));
    }
    Ok(LuFactors::factor(a, n)?.solve(b, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matmul(a: &[f64], b: &[f64], n: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for k in 0..n {
                for j in 0..m {
                    out[i * m + j] += a[i * n + k] * b[k * m + j];
                }
            }
        }
        out
    }

    #[test]
    fn solve_recovers_rhs() {
        let a = [0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = lu_solve(&a, &b, 3, 2).unwrap();
        for (got, want) in matmul(&a, &x, 3, 2).iter().zip(&b) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_solve() {
        let a = [4.0, 1.0, 2.0, 0.5, 3.0, 1.0, 2.0, 0.0, 5.0];
        let at = [4.0, 0.5, 2.0, 1.0, 3.0, 0.0, 2.0, 1.0, 5.0];
        let b = [1.0, -1.0, 2.0];
        let lu = LuFactors::factor(&a, 3).unwrap();
        let x = lu.solve_transposed(&b, 1);
        for (got, want) in matmul(&at, &x, 3, 1).iter().zip(&b) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_rejected() {
        let a = [1.0, 2.0, 2.0, 4.0];
        assert!(matches!(LuFactors::factor(&a, 2), Err(Error::Singular)));
    }
}
