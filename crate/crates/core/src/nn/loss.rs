use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar, Tensor4};

/// Neumaier-compensated sum, so that loss values stay accurate enough for
/// finite differences over thousands of terms.
pub(crate) fn compensated_sum<T: Scalar>(values: impl Iterator<Item = T>) -> T {
    let (mut sum, mut carry) = (T::zero(), T::zero());
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Mean squared error over every element of the batch.
pub fn l2_reconstruction_loss<T: Scalar>(x: &Tensor4<T>, x_hat: &Tensor4<T>) -> Result<T> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape(format!(
            "cannot compare {:?} with {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    if x.is_empty() {
        return Ok(T::zero());
    }
    let sum = compensated_sum(x.data().iter().zip(x_hat.data()).map(|(a, b)| (*a - *b) * (*a - *b)));
    Ok(sum / T::of(x.len() as f64))
}

/// Gradient of [`l2_reconstruction_loss`] with respect to `x_hat`.
pub fn mse_grad<T: Scalar>(x: &Tensor4<T>, x_hat: &Tensor4<T>) -> Result<Tensor4<T>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape("mse operands differ in shape".into()));
    }
    let scale = T::of(2.0 / x.len().max(1) as f64);
    let data = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (*b - *a) * scale)
        .collect();
    Tensor4::from_vec(x.shape(), data)
}

fn check_labels(labels: &[usize], logits_rows: usize, classes: usize) -> Result<()> {
    if labels.len() != logits_rows {
        return Err(Error::Shape(format!(
            "{} labels for {logits_rows} logit rows",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel {
            label,
            num_classes: classes,
        });
    }
    Ok(())
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> (T, T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|v| (*v - max).exp()).sum();
    (max, sum)
}

/// Unreduced cross-entropy of each row against its label.
pub fn cross_entropy_per_sample<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<Vec<T>> {
    check_labels(labels, logits.rows, logits.cols)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = logits.row(r);
            let (max, sum) = log_softmax_row(row);
            max + sum.ln() - row[y]
        })
        .collect())
}

/// `(1/n) * sum_i w_i * CE_i` and its gradient with respect to the logits.
/// With unit weights this is the usual mean cross-entropy.
pub fn weighted_cross_entropy<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[usize],
    weights: &[T],
) -> Result<(T, Matrix<T>)> {
    check_labels(labels, logits.rows, logits.cols)?;
    if weights.len() != logits.rows {
        return Err(Error::Shape(format!(
            "{} weights for {} samples",
            weights.len(),
            logits.rows
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < T::zero()) {
        return Err(Error::InvalidInput(format!("sample weight {w:?} must be finite and >= 0")));
    }
    let n = T::of(logits.rows.max(1) as f64);
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut total = T::zero();
    for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        let row = logits.row(r);
        let (max, sum) = log_softmax_row(row);
        total += w * (max + sum.ln() - row[y]);
        let g = grad.row_mut(r);
        for (c, gv) in g.iter_mut().enumerate() {
            let p = (row[c] - max).exp() / sum;
            let target = if c == y { T::one() } else { T::zero() };
            *gv = w * (p - target) / n;
        }
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits() -> Matrix<f64> {
        Matrix {
            rows: 2,
            cols: 3,
            data: vec![0.2, -1.0, 0.7, 1.5, 0.3, -0.4],
        }
    }

    /// Scalar-loop cross-entropy of one row.
    fn ce(row: &[f64], y: usize) -> f64 {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        -(row[y].exp() / z).ln()
    }

    #[test]
    fn l2_identity_and_unit_gap() {
        let x = Tensor4::<f64>::from_vec([1, 1, 1, 1], vec![0.0]).unwrap();
        let y = Tensor4::<f64>::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(l2_reconstruction_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(l2_reconstruction_loss(&x, &y).unwrap(), 1.0);
        assert!(l2_reconstruction_loss(&x, &Tensor4::zeros([2, 1, 1, 1])).is_err());
    }

    #[test]
    fn l2_matches_scalar_loop_on_random_batch() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let a: Vec<f64> = (0..32).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..32).map(|_| rng.gen()).collect();
        let mut want = 0.0;
        for i in 0..32 {
            want += (a[i] - b[i]).powi(2);
        }
        want /= 32.0;
        let x = Tensor4::from_vec([2, 1, 4, 4], a).unwrap();
        let y = Tensor4::from_vec([2, 1, 4, 4], b).unwrap();
        let got = l2_reconstruction_loss(&x, &y).unwrap();
        assert!((got - want).abs() < 1e-6);
        assert_eq!(got, l2_reconstruction_loss(&y, &x).unwrap());
    }

    #[test]
    fn unit_weights_give_mean_cross_entropy() {
        let l = logits();
        let (loss, _) = weighted_cross_entropy(&l, &[2, 0], &[1.0, 1.0]).unwrap();
        let want = (ce(l.row(0), 2) + ce(l.row(1), 0)) / 2.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_loss_and_gradient() {
        let (loss, grad) = weighted_cross_entropy(&logits(), &[1, 1], &[0.0, 0.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn weights_two_zero_double_first_contribution() {
        let l = logits();
        let (loss, _) = weighted_cross_entropy(&l, &[1, 2], &[2.0, 0.0]).unwrap();
        // per-sample contribution under the mean convention is CE_0 / 2
        let first = ce(l.row(0), 1) / 2.0;
        assert!((loss - 2.0 * first).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_labels_and_weights() {
        let l = logits();
        assert!(matches!(
            weighted_cross_entropy(&l, &[3, 0], &[1.0, 1.0]),
            Err(Error::InvalidLabel { label: 3, num_classes: 3 })
        ));
        assert!(weighted_cross_entropy(&l, &[0, 0], &[-1.0, 1.0]).is_err());
        assert!(weighted_cross_entropy(&l, &[0, 0], &[1.0]).is_err());
    }

    #[test]
    fn per_sample_is_nonnegative() {
        let v = cross_entropy_per_sample(&logits(), &[0, 1]).unwrap();
        assert!(v.iter().all(|x| *x >= 0.0));
    }
}
