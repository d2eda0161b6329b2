//! Small dense symmetric solves for the closed-form quadratic prox.

/// Row-major `n x n` matrix.
#[derive(Clone, Debug)]
pub(crate) struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub(crate) fn scaled_identity(n: usize, diag: f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = diag;
        }
        Self { n, data }
    }

    /// `self += alpha * x x^T`
    pub(crate) fn rank_one_update(&mut self, alpha: f64, x: &[f64]) {
        let n = self.n;
        for i in 0..n {
            let ai = alpha * x[i];
            let row = &mut self.data[i * n..(i + 1) * n];
            for (r, xj) in row.iter_mut().zip(x) {
                *r += ai * xj;
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| crate::numerics::dot_slices(&self.data[i * n..(i + 1) * n], x))
            .collect()
    }

    /// Solves `self * x = rhs` by Cholesky factorization. Returns `None` if
    /// the matrix is not numerically positive definite.
    pub(crate) fn cholesky_solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        let n = self.n;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self.data[i * n + j];
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if sum <= 0.0 {
                        return None;
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut sum = rhs[i];
            for k in 0..i {
                sum -= l[i * n + k] * y[k];
            }
            y[i] = sum / l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= l[k * n + i] * x[k];
            }
            x[i] = sum / l[i * n + i];
        }
        Some(x)
    }
}
