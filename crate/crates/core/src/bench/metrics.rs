use ndarray::ArrayView3;

use super::BenchError;

/// Mean absolute and root-mean-square error over every element at once.
pub fn mae_rmse(pred: ArrayView3<'_, f64>, truth: ArrayView3<'_, f64>) -> Result<(f64, f64), BenchError> {
    if pred.shape() != truth.shape() {
        return Err(BenchError::ShapeMismatch { pred: pred.shape().to_vec(), truth: truth.shape().to_vec() });
    }
    if pred.is_empty() {
        return Err(BenchError::EmptyMetrics);
    }
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth.iter()) {
        let e = p - t;
        if !e.is_finite() {
            return Err(BenchError::NonFinite);
        }
        abs += e.abs();
        sq += e * e;
    }
    let n = pred.len() as f64;
    Ok((abs / n, (sq / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use ndarray::{Array3, ShapeBuilder};
    use proptest::prelude::*;

    use super::*;

    fn arr(v: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((1, 1, v.len()).f(), v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let a = arr(&[1.0, 2.0, 3.0]);
        assert_eq!(mae_rmse(a.view(), a.view()).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn symmetric_errors() {
        assert_eq!(mae_rmse(arr(&[1.0, -1.0]).view(), arr(&[0.0, 0.0]).view()).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn hand_values() {
        let (mae, rmse) = mae_rmse(arr(&[1.0, 2.0]).view(), arr(&[0.0, 0.0]).view()).unwrap();
        assert_eq!(mae, 1.5);
        assert!((rmse - 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(mae_rmse(arr(&[1.0]).view(), arr(&[1.0, 2.0]).view()), Err(BenchError::ShapeMismatch { .. })));
        assert!(matches!(mae_rmse(arr(&[]).view(), arr(&[]).view()), Err(BenchError::EmptyMetrics)));
        assert!(matches!(mae_rmse(arr(&[f64::NAN]).view(), arr(&[0.0]).view()), Err(BenchError::NonFinite)));
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let zero = vec![0.0; v.len()];
            let (mae, rmse) = mae_rmse(arr(&v).view(), arr(&zero).view()).unwrap();
            prop_assert!(mae <= rmse * (1.0 + 1e-12) + 1e-15);
        }
    }
}
