//! Prediction accuracy metrics.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Pooled R² over all components: `1 - sum (y - yhat)^2 / sum (y - ybar)^2`.
pub fn r2_score(truth: &DMatrix<f64>, pred: &DMatrix<f64>) -> Result<f64> {
    check_shapes(truth, pred)?;
    if truth.nrows() < 2 {
        return Err(Error::InvalidArgument(
            "r2_score needs at least two samples".into(),
        ));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::InvalidArgument(
            "r2_score is undefined for constant truth".into(),
        ));
    }
    let ss_res: f64 = truth
        .iter()
        .zip(pred.iter())
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Per-component R² scores.
pub fn r2_per_component(truth: &DMatrix<f64>, pred: &DMatrix<f64>) -> Result<Vec<f64>> {
    (0..truth.ncols())
        .map(|c| {
            r2_score(
                &DMatrix::from_column_slice(truth.nrows(), 1, truth.column(c).as_slice()),
                &DMatrix::from_column_slice(pred.nrows(), 1, pred.column(c).as_slice()),
            )
        })
        .collect()
}

/// Root mean squared error over all components.
pub fn rmse(truth: &DMatrix<f64>, pred: &DMatrix<f64>) -> Result<f64> {
    check_shapes(truth, pred)?;
    if truth.is_empty() {
        return Err(Error::InvalidArgument("rmse of empty input".into()));
    }
    let ss: f64 = truth
        .iter()
        .zip(pred.iter())
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    Ok((ss / truth.len() as f64).sqrt())
}

fn check_shapes(truth: &DMatrix<f64>, pred: &DMatrix<f64>) -> Result<()> {
    if truth.shape() != pred.shape() {
        return Err(Error::DimensionMismatch {
            context: "metric shapes",
            expected: truth.nrows(),
            actual: pred.nrows(),
        });
    }
    Ok(())
}

/// Mean after dropping `ceil(alpha * m)` lowest and highest values.
pub fn trimmed_mean(samples: &[f64], alpha: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("trimmed_mean of empty input".into()));
    }
    if !(0.0..0.5).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "trim fraction must be in [0, 0.5), got {alpha}"
        )));
    }
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let drop = (alpha * samples.len() as f64).ceil() as usize;
    if 2 * drop >= sorted.len() {
        return Err(Error::InvalidArgument(format!(
            "trimming {drop} per side drops all {} samples",
            sorted.len()
        )));
    }
    let kept = &sorted[drop..sorted.len() - drop];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(values.len(), 1, values)
    }

    #[test]
    fn r2_examples() {
        let truth = col(&[1.0, 2.0, 3.0]);
        assert_eq!(r2_score(&truth, &truth).unwrap(), 1.0);
        let mean = col(&[2.0, 2.0, 2.0]);
        assert_eq!(r2_score(&truth, &mean).unwrap(), 0.0);
        let pred = col(&[1.0, 2.0, 4.0]);
        assert!((r2_score(&truth, &pred).unwrap() - 0.5).abs() < 1e-15);
        assert!(r2_score(&mean, &truth).is_err()); // constant truth
    }

    #[test]
    fn rmse_examples() {
        let truth = col(&[0.0, 0.0]);
        assert_eq!(rmse(&truth, &truth).unwrap(), 0.0);
        let shifted = col(&[1.5, 1.5]);
        let base = col(&[4.0, -2.0]);
        let off = col(&[5.5, -0.5]);
        assert!((rmse(&base, &off).unwrap() - 1.5).abs() < 1e-15);
        let pred = col(&[3.0, 4.0]);
        assert!((rmse(&truth, &pred).unwrap() - (25.0f64 / 2.0).sqrt()).abs() < 1e-15);
        let _ = shifted;
    }

    #[test]
    fn translation_consistency() {
        let truth = col(&[1.0, 2.0, 5.0, 3.0]);
        let pred = col(&[1.2, 1.8, 4.5, 3.3]);
        let shift = 7.5;
        let truth_s = truth.map(|v| v + shift);
        let pred_s = pred.map(|v| v + shift);
        assert!(
            (rmse(&truth, &pred).unwrap() - rmse(&truth_s, &pred_s).unwrap()).abs() < 1e-12
        );
        assert!(
            (r2_score(&truth, &pred).unwrap() - r2_score(&truth_s, &pred_s).unwrap()).abs()
                < 1e-12
        );
    }

    #[test]
    fn trimmed_mean_examples() {
        let values = [3.0, 1.0, 4.0, 1.5];
        let mean: f64 = values.iter().sum::<f64>() / 4.0;
        assert!((trimmed_mean(&values, 0.0).unwrap() - mean).abs() < 1e-15);
        assert_eq!(trimmed_mean(&[1.0, 2.0, 100.0], 1.0 / 3.0).unwrap(), 2.0);
        assert!(trimmed_mean(&[1.0, 2.0], 0.5).is_err());
        assert!(trimmed_mean(&[], 0.1).is_err());
    }

    #[test]
    fn one_outlier_in_500_has_zero_influence_at_one_percent() {
        let clean: Vec<f64> = (0..500).map(|i| (i as f64) * 0.01).collect();
        let base = trimmed_mean(&clean, 0.01).unwrap();
        let mut spiked = clean.clone();
        spiked[250] = 1e6;
        let spiked_mean = trimmed_mean(&spiked, 0.01).unwrap();
        // the spike is dropped; only the membership of one interior point shifts
        assert!((spiked_mean - base).abs() < 0.02 * base.abs().max(1.0));
        let mut spiked_low = clean;
        spiked_low[10] = -1e6;
        assert!(trimmed_mean(&spiked_low, 0.01).unwrap().is_finite());
    }
}
