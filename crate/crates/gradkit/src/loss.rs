use crate::error::{GradError, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax over the last axis.
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let classes = *logits.shape().last().unwrap_or(&logits.len());
    let y = kernels::softmax_rows(logits.data(), classes.max(1));
    Tensor::new(logits.shape().to_vec(), y).expect("same shape")
}

/// `-log softmax(logits)[target]` for a single logit vector, with its
/// gradient `softmax - onehot`. Uses log-sum-exp, so large logits do not
/// overflow.
pub fn cross_entropy_softmax<S: Scalar>(logits: &Tensor<S>, target: usize) -> Result<(f64, Tensor<S>)> {
    let (loss, grad) = cross_entropy_rows(logits, &[target])?;
    Ok((loss, grad))
}

/// Mean cross entropy over the rows of a `[rows, classes]` logit tensor
/// (a rank-1 tensor counts as one row). The gradient includes the `1/rows`
/// factor.
pub fn cross_entropy_rows<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<(f64, Tensor<S>)> {
    let classes = *logits.shape().last().unwrap_or(&0);
    if classes == 0 || logits.len() != classes * targets.len() {
        return Err(GradError::GradShape {
            expected: vec![targets.len(), classes],
            got: logits.shape().to_vec(),
        });
    }
    if let Some(element) = logits.first_non_finite() {
        return Err(GradError::NonFinite {
            what: "logits",
            index: 0,
            element,
        });
    }
    let rows = targets.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &t) in logits.data().chunks_exact(classes).zip(targets) {
        if t >= classes {
            return Err(GradError::TargetOutOfRange { target: t, classes });
        }
        let max = row
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t].to_f64();
        for (k, v) in row.iter().enumerate() {
            let p = (v.to_f64() - lse).exp();
            let onehot = if k == t { 1.0 } else { 0.0 };
            grad.push(S::from_f64((p - onehot) / rows));
        }
    }
    Ok((total / rows, Tensor::new(logits.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln2() {
        let (loss, grad) = cross_entropy_softmax(&Tensor::vector(vec![0.0f64, 0.0]), 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(grad.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let (loss, grad) = cross_entropy_softmax(&Tensor::vector(vec![1000.0f32, 0.0]), 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn closed_form_three_class() {
        // -log(e^3 / (e + e^2 + e^3)) = log(1 + e^-1 + e^-2)
        let want = (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        let (loss, _) = cross_entropy_softmax(&Tensor::vector(vec![1.0f64, 2.0, 3.0]), 2).unwrap();
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 0.40761).abs() < 1e-5);
    }

    #[test]
    fn target_out_of_range_is_an_error() {
        let err = cross_entropy_softmax(&Tensor::vector(vec![0.0f32, 1.0]), 2).unwrap_err();
        assert!(matches!(err, GradError::TargetOutOfRange { target: 2, classes: 2 }));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::new(vec![2, 3], vec![0.1f32, -4.0, 9.0, 3.0, 3.0, 3.0]).unwrap();
        let p = softmax(&t);
        for row in p.data().chunks(3) {
            let s: f64 = row.iter().map(|v| f64::from(*v)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
