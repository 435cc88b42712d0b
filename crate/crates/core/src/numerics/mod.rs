//! Dense matrix primitives, row normalization, softmax cross-entropy and the
//! finite-difference harness used to validate every hand-written backward pass.

mod matrix;

pub use matrix::Matrix;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norm floor below which a row counts as collapsed.
pub const DEFAULT_NORM_EPS: f64 = 1e-12;

/// Default step for central differences.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Row-normalized matrix together with the original row norms, which the
/// backward pass needs.
#[derive(Clone, Debug)]
pub struct NormalizedRows<T> {
    pub values: Matrix<T>,
    pub norms: Vec<T>,
}

impl<T: Scalar> NormalizedRows<T> {
    pub fn new(x: &Matrix<T>, eps: T) -> Result<Self> {
        let norms = x.row_norms();
        let mut values = x.clone();
        for (r, &norm) in norms.iter().enumerate() {
            if !(norm > eps) {
                return Err(Error::RowNormUnderflow {
                    row: r,
                    norm: norm.as_f64(),
                    eps: eps.as_f64(),
                });
            }
            let inv = T::one() / norm;
            values.row_mut(r).iter_mut().for_each(|v| *v *= inv);
        }
        Ok(Self { values, norms })
    }

    /// Pulls a gradient on the normalized rows back to the raw rows:
    /// `dx = (g - y (y . g)) / |x|`.
    pub fn backward(&self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        if grad_out.shape() != self.values.shape() {
            return Err(Error::ShapeMismatch {
                op: "l2_normalize_backward",
                left: self.values.shape(),
                right: grad_out.shape(),
            });
        }
        let mut grad = grad_out.clone();
        for r in 0..grad.rows() {
            let y = self.values.row(r);
            let g = grad.row_mut(r);
            let proj: T = y.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
            let inv = T::one() / self.norms[r];
            for (gi, &yi) in g.iter_mut().zip(y) {
                *gi = (*gi - yi * proj) * inv;
            }
        }
        Ok(grad)
    }
}

/// Scales every row to unit Euclidean norm.
///
/// Fails with [`Error::RowNormUnderflow`] instead of clamping, so a collapsed
/// representation surfaces as an error.
pub fn l2_normalize<T: Scalar>(x: &Matrix<T>, eps: T) -> Result<Matrix<T>> {
    NormalizedRows::new(x, eps).map(|n| n.values)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = T::one() / total;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Numerically stable `log(sum(exp(row)))`.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if max == T::neg_infinity() {
        return max;
    }
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

/// Mean row-wise cross-entropy and its gradient `(softmax - onehot) / n`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[usize],
) -> Result<(T, Matrix<T>)> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: c,
        });
    }
    if n == 0 {
        return Ok((T::zero(), logits.clone()));
    }
    let mut grad = softmax_rows(logits);
    let inv_n = T::one() / T::lit(n as f64);
    let mut loss = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        loss += log_sum_exp(logits.row(r)) - logits.get(r, label);
        let row = grad.row_mut(r);
        row[label] -= T::one();
        row.iter_mut().for_each(|v| *v *= inv_n);
    }
    Ok((loss * inv_n, grad))
}

/// Central finite differences `(f(x + h e_ij) - f(x - h e_ij)) / 2h` for every entry.
pub fn finite_difference_gradient<T: Scalar>(
    mut f: impl FnMut(&Matrix<T>) -> T,
    x: &Matrix<T>,
    h: T,
) -> Matrix<T> {
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let two_h = h + h;
    for i in 0..x.as_slice().len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let plus = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let minus = f(&probe);
        probe.as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (plus - minus) / two_h;
    }
    grad
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error<T: Scalar>(a: T, b: T) -> T {
    (a - b).abs() / T::one().max(a.abs()).max(b.abs())
}

/// Largest entry-wise [`relative_error`] between two same-shaped matrices.
pub fn max_relative_error<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "max_relative_error",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(T::zero(), |m, (&x, &y)| m.max(relative_error(x, y))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn normalize_three_four_five() {
        let x = Matrix::<f64>::from_f64_rows(&[&[3.0, 4.0]]).unwrap();
        let y = l2_normalize(&x, 1e-12).unwrap();
        assert!((y.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((y.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_unit_rows_is_identity() {
        let x = Matrix::<f64>::identity(2);
        assert_eq!(l2_normalize(&x, 1e-12).unwrap(), x);
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let x = random(5, 7, 3);
        let y = l2_normalize(&x, 1e-12).unwrap();
        for r in 0..5 {
            let norm: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let y = l2_normalize(&random(6, 4, 9), 1e-12).unwrap();
        let yy = l2_normalize(&y, 1e-12).unwrap();
        assert!(y.max_abs_diff(&yy).unwrap() <= 1e-15);
    }

    #[test]
    fn collapsed_row_is_an_error() {
        let x = Matrix::<f64>::from_f64_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        match l2_normalize(&x, 1e-12) {
            Err(Error::RowNormUnderflow { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected underflow, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        let one = Matrix::<f64>::from_f64_rows(&[&[5.0]]).unwrap();
        assert_eq!(softmax_cross_entropy(&one, &[0]).unwrap().0, 0.0);

        let flat = Matrix::<f64>::zeros(2, 2);
        let (loss, _) = softmax_cross_entropy(&flat, &[0, 1]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);

        let eye = Matrix::<f64>::identity(2);
        let (loss, _) = softmax_cross_entropy(&eye, &[0, 1]).unwrap();
        // -log(e / (e + 1)) = ln(1 + e^-1)
        assert!((loss - 0.313_261_687_518_222_8).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax_rows(&random(8, 11, 1).scaled(20.0));
        for r in 0..8 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let x = Matrix::<f64>::zeros(1, 2);
        assert!(matches!(
            softmax_cross_entropy(&x, &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn fd_of_sum_of_squares() {
        let x = Matrix::<f64>::from_f64_rows(&[&[1.0, 2.0]]).unwrap();
        let g = finite_difference_gradient(|m| m.dot(m).unwrap(), &x, 1e-5);
        assert!((g.get(0, 0) - 2.0).abs() < 1e-6);
        assert!((g.get(0, 1) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn fd_matches_cross_entropy_gradient() {
        for seed in 0..10 {
            let logits = random(4, 6, seed).scaled(3.0);
            let labels = [0, 5, 2, 2];
            let (_, analytic) = softmax_cross_entropy(&logits, &labels).unwrap();
            let numeric = finite_difference_gradient(
                |m| softmax_cross_entropy(m, &labels).unwrap().0,
                &logits,
                1e-5,
            );
            assert!(max_relative_error(&analytic, &numeric).unwrap() < 1e-6);
        }
    }

    #[test]
    fn fd_matches_normalization_jacobian() {
        for seed in 0..10 {
            let x = random(3, 5, 100 + seed);
            let c = random(3, 5, 200 + seed);
            let f = |m: &Matrix<f64>| l2_normalize(m, 1e-12).unwrap().dot(&c).unwrap();
            let analytic = NormalizedRows::new(&x, 1e-12)
                .unwrap()
                .backward(&c)
                .unwrap();
            let numeric = finite_difference_gradient(f, &x, 1e-5);
            assert!(max_relative_error(&analytic, &numeric).unwrap() < 1e-8);
        }
    }

    #[test]
    fn relative_error_uses_unit_floor() {
        assert_eq!(relative_error(1e-3f64, 2e-3), 1e-3);
        assert!((relative_error(100.0f64, 101.0) - 1.0 / 101.0).abs() < 1e-15);
    }
}
