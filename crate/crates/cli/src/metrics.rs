//! Forecast error metrics, computed over flat prediction/target slices.

use citrus_core::{CitrusError, Result};

/// Targets with magnitude below this are excluded from the percentage
/// error, which is undefined at zero.
pub const MAPE_EXCLUSION_THRESHOLD: f64 = 1e-6;

fn check_lengths(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(CitrusError::InvalidArgument(format!(
            "metric inputs must be equal-length and nonempty, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let sum: f64 = pred.iter().zip(target).map(|(p, y)| (p - y).abs()).sum();
    Ok(sum / pred.len() as f64)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let sum: f64 = pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// Mean absolute percentage error over entries with `|y|` above the
/// exclusion threshold. Returns `(percent, excluded_count)`; all entries
/// excluded yields an error rather than 0/0.
pub fn mape(pred: &[f64], target: &[f64]) -> Result<(f64, usize)> {
    check_lengths(pred, target)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (p, y) in pred.iter().zip(target) {
        if y.abs() < MAPE_EXCLUSION_THRESHOLD {
            continue;
        }
        sum += ((p - y) / y).abs();
        used += 1;
    }
    if used == 0 {
        return Err(CitrusError::Numerical(
            "every target is below the percentage-error exclusion threshold".into(),
        ));
    }
    Ok((100.0 * sum / used as f64, pred.len() - used))
}

/// Root of the squared-error sum relative to the squared-target sum.
pub fn rnmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let num: f64 = pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum();
    let den: f64 = target.iter().map(|y| y * y).sum();
    if den <= 0.0 {
        return Err(CitrusError::Numerical(
            "relative error is undefined for an all-zero target".into(),
        ));
    }
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    // Oracle values below are brute-force loops evaluated independently.
    const PRED: [f64; 4] = [1.0, -2.0, 0.5, 4.0];
    const TARGET: [f64; 4] = [1.5, -1.0, 0.0, 5.0];

    #[test]
    fn mae_matches_manual_sum() {
        // (0.5 + 1.0 + 0.5 + 1.0) / 4
        assert!((mae(&PRED, &TARGET).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rmse_matches_manual_sum() {
        let expected = ((0.25 + 1.0 + 0.25 + 1.0) / 4.0_f64).sqrt();
        assert!((rmse(&PRED, &TARGET).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn mape_excludes_near_zero_targets() {
        let (pct, excluded) = mape(&PRED, &TARGET).unwrap();
        // |0.5/1.5| + |1/1| + |1/5| over 3 kept entries, times 100.
        let expected = 100.0 * (0.5 / 1.5 + 1.0 + 0.2) / 3.0;
        assert!((pct - expected).abs() < 1e-10);
        assert_eq!(excluded, 1);
    }

    #[test]
    fn mape_rejects_all_zero_targets() {
        assert!(mape(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn rnmse_matches_manual_sum() {
        let num = 0.25 + 1.0 + 0.25 + 1.0;
        let den = 2.25 + 1.0 + 0.0 + 25.0;
        let expected = (num / den as f64).sqrt();
        assert!((rnmse(&PRED, &TARGET).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        assert_eq!(mae(&TARGET, &TARGET).unwrap(), 0.0);
        assert_eq!(rmse(&TARGET, &TARGET).unwrap(), 0.0);
        assert_eq!(rnmse(&TARGET, &TARGET).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae(&[], &[]).is_err());
    }
}
