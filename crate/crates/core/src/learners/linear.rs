use ndarray::{ArrayView1, ArrayView2};

use crate::error::{LdmlError, Result};

const IRLS_MAX_ITER: usize = 100;
const IRLS_GRAD_TOL: f64 = 1e-8;

/// Linear predictor with an unpenalized intercept.
#[derive(Debug, Clone)]
pub struct LinearModel {
    intercept: f64,
    coef: Vec<f64>,
    logistic: bool,
}

impl LinearModel {
    pub fn is_logistic(&self) -> bool {
        self.logistic
    }

    pub fn predict_row(&self, x: ArrayView1<'_, f64>) -> f64 {
        let eta = self.intercept + x.iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>();
        if self.logistic {
            sigmoid(eta)
        } else {
            eta
        }
    }

    pub fn fit_ridge(x: ArrayView2<'_, f64>, y: &[f64], l2: f64) -> Result<Self> {
        let q = x.ncols() + 1;
        let mut gram = vec![0.0; q * q];
        let mut rhs = vec![0.0; q];
        let mut z = vec![0.0; q];
        for (row, &yi) in x.rows().into_iter().zip(y) {
            design_row(row, &mut z);
            for a in 0..q {
                rhs[a] += z[a] * yi;
                for b in 0..=a {
                    gram[a * q + b] += z[a] * z[b];
                }
            }
        }
        symmetrize(&mut gram, q);
        for j in 1..q {
            gram[j * q + j] += l2;
        }
        let beta = cholesky_solve(&mut gram, &rhs, q).ok_or(LdmlError::SingularDesign)?;
        Ok(Self::from_beta(beta, false))
    }

    /// Penalized logistic regression by Newton/IRLS with step halving.
    pub fn fit_logistic(x: ArrayView2<'_, f64>, y: &[f64], l2: f64) -> Result<Self> {
        let q = x.ncols() + 1;
        let mut beta = vec![0.0; q];
        let mut z = vec![0.0; q];
        let mut loss = penalized_nll(x, y, &beta, l2);
        for _ in 0..IRLS_MAX_ITER {
            let mut grad = vec![0.0; q];
            let mut hess = vec![0.0; q * q];
            for (row, &yi) in x.rows().into_iter().zip(y) {
                design_row(row, &mut z);
                let p = sigmoid(dot(&z, &beta));
                let w = (p * (1.0 - p)).max(1e-12);
                for a in 0..q {
                    grad[a] += (p - yi) * z[a];
                    for b in 0..=a {
                        hess[a * q + b] += w * z[a] * z[b];
                    }
                }
            }
            symmetrize(&mut hess, q);
            for j in 1..q {
                grad[j] += l2 * beta[j];
                hess[j * q + j] += l2;
            }
            if grad.iter().map(|g| g * g).sum::<f64>().sqrt() <= IRLS_GRAD_TOL {
                break;
            }
            // tiny jitter keeps unpenalized, perfectly separated designs solvable
            for j in 0..q {
                hess[j * q + j] += 1e-10;
            }
            let step = cholesky_solve(&mut hess, &grad, q).ok_or(LdmlError::SingularDesign)?;
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-10 {
                let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b - t * s).collect();
                let cand_loss = penalized_nll(x, y, &cand, l2);
                if cand_loss <= loss {
                    beta = cand;
                    loss = cand_loss;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(Self::from_beta(beta, true))
    }

    fn from_beta(beta: Vec<f64>, logistic: bool) -> Self {
        Self {
            intercept: beta[0],
            coef: beta[1..].to_vec(),
            logistic,
        }
    }
}

fn design_row(row: ArrayView1<'_, f64>, z: &mut [f64]) {
    z[0] = 1.0;
    for (zj, &xj) in z[1..].iter_mut().zip(row.iter()) {
        *zj = xj;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn symmetrize(m: &mut [f64], q: usize) {
    for a in 0..q {
        for b in 0..a {
            m[b * q + a] = m[a * q + b];
        }
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn penalized_nll(x: ArrayView2<'_, f64>, y: &[f64], beta: &[f64], l2: f64) -> f64 {
    let mut z = vec![0.0; beta.len()];
    let nll: f64 = x
        .rows()
        .into_iter()
        .zip(y)
        .map(|(row, &yi)| {
            design_row(row, &mut z);
            let eta = dot(&z, beta);
            softplus(eta) - yi * eta
        })
        .sum();
    nll + 0.5 * l2 * beta[1..].iter().map(|b| b * b).sum::<f64>()
}

/// Solve `A x = b` for symmetric positive definite `A` (row-major, q×q),
/// overwriting `A` with its Cholesky factor. Returns `None` when a pivot is
/// not positive relative to the largest diagonal entry.
fn cholesky_solve(a: &mut [f64], b: &[f64], q: usize) -> Option<Vec<f64>> {
    let scale = (0..q).map(|i| a[i * q + i].abs()).fold(0.0, f64::max);
    let tol = scale * 1e-12;
    for j in 0..q {
        let mut d = a[j * q + j];
        for k in 0..j {
            d -= a[j * q + k] * a[j * q + k];
        }
        if !(d > tol) {
            return None;
        }
        let d = d.sqrt();
        a[j * q + j] = d;
        for i in j + 1..q {
            let mut s = a[i * q + j];
            for k in 0..j {
                s -= a[i * q + k] * a[j * q + k];
            }
            a[i * q + j] = s / d;
        }
    }
    let mut z = b.to_vec();
    for i in 0..q {
        for k in 0..i {
            z[i] -= a[i * q + k] * z[k];
        }
        z[i] /= a[i * q + i];
    }
    for i in (0..q).rev() {
        for k in i + 1..q {
            z[i] -= a[k * q + i] * z[k];
        }
        z[i] /= a[i * q + i];
    }
    Some(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn separable_logistic_stays_inside_unit_interval() {
        let x = array![[-2.0], [-1.0], [-0.5], [0.5], [1.0], [2.0]];
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let m = LinearModel::fit_logistic(x.view(), &y, 1e-4).unwrap();
        for row in x.rows() {
            let p = m.predict_row(row);
            assert!(p > 0.0 && p < 1.0, "p = {p}");
        }
        assert!(m.predict_row(array![3.0].view()) > 0.9);
    }

    #[test]
    fn logistic_recovers_known_coefficients() {
        // large balanced design with known log-odds 0.5 + 1.5 x
        let xs: Vec<f64> = (0..400).map(|i| -2.0 + 4.0 * i as f64 / 399.0).collect();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for &x in &xs {
            let p = sigmoid(0.5 + 1.5 * x);
            // expected-count data: fractional weights emulated by 100 replicates
            let ones = (p * 100.0).round() as usize;
            for r in 0..100 {
                rows.push(x);
                y.push(if r < ones { 1.0 } else { 0.0 });
            }
        }
        let x = ndarray::Array2::from_shape_vec((rows.len(), 1), rows).unwrap();
        let m = LinearModel::fit_logistic(x.view(), &y, 0.0).unwrap();
        assert!((m.intercept - 0.5).abs() < 0.02, "{}", m.intercept);
        assert!((m.coef[0] - 1.5).abs() < 0.02, "{}", m.coef[0]);
    }

    #[test]
    fn cholesky_solves_small_system() {
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        let x = cholesky_solve(&mut a, &[2.0, 1.0], 2).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12 && x[1].abs() < 1e-12);
    }
}
