//! Central-difference gradient verification.

use super::{DiffArray, GradRecord, TensorError};

/// Worst relative error between recorded gradients and central differences,
/// over every coordinate of `x`. Denominators are floored at 1e-8.
pub fn grad_check<F>(f: F, x: &DiffArray, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&GradRecord, &DiffArray) -> Result<DiffArray, TensorError>,
{
    grad_check_multi(|rec, xs| f(rec, &xs[0]), std::slice::from_ref(x), eps)
}

/// Multi-input variant of [`grad_check`]; checks every coordinate of every
/// input against a fresh forward evaluation pair.
pub fn grad_check_multi<F>(f: F, inputs: &[DiffArray], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&GradRecord, &[DiffArray]) -> Result<DiffArray, TensorError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::EpsOutOfRange { eps });
    }

    // Analytic gradients from one recorded pass.
    let rec = GradRecord::new();
    let leaves: Vec<DiffArray> = inputs.iter().map(|x| rec.leaf(x)).collect();
    let loss = f(&rec, &leaves)?;
    if loss.len() != 1 {
        return Err(TensorError::NonScalarLoss { shape: loss.shape().to_vec() });
    }
    let grads = rec.backward(&loss)?;
    let analytic: Vec<DiffArray> = leaves
        .iter()
        .map(|leaf| grads.wrt(leaf).expect("leaf registered above"))
        .collect();

    // Unrecorded evaluations for the finite differences.
    let eval = |xs: &[DiffArray]| -> Result<f64, TensorError> {
        let rec = GradRecord::new();
        let out = f(&rec, xs)?;
        match out.item() {
            Some(v) => Ok(v),
            None => Err(TensorError::NonScalarLoss { shape: out.shape().to_vec() }),
        }
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<DiffArray> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic[i].data()[j];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn sum_has_zero_error_on_dyadic_inputs() {
        // Powers of two keep every f64 step exact, so both gradient routes
        // produce exactly 1.0 per coordinate.
        let x = DiffArray::vector(vec![0.5, 0.25, 0.125, 1.0]);
        let eps = 2f64.powi(-17);
        let err = grad_check(|rec, x| ops::sum(rec, x), &x, eps).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sigmoid_sum_at_zero_matches_quarter() {
        let x = DiffArray::vector(vec![0.0; 6]);
        let err = grad_check(
            |rec, x| {
                let s = ops::sigmoid(rec, x)?;
                ops::sum(rec, &s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let x = DiffArray::vector(vec![1.0]);
        match grad_check(|rec, x| ops::sum(rec, x), &x, 1e-2) {
            Err(TensorError::EpsOutOfRange { .. }) => {}
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn non_scalar_function_rejected() {
        let x = DiffArray::vector(vec![1.0, 2.0]);
        match grad_check(|rec, x| ops::relu(rec, x), &x, 1e-5) {
            Err(TensorError::NonScalarLoss { .. }) => {}
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }
}
