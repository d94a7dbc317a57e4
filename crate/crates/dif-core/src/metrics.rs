//! Normalized root-mean-square error.

use thiserror::Error;

use crate::traj::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("prediction and truth sets differ: {0}")]
    Mismatch(String),
    #[error("truth set has zero standard deviation")]
    DegenerateTruth,
    #[error("empty input sets")]
    Empty,
}

/// Root-mean-square error over every entry of the set, divided by the
/// population standard deviation of all truth entries.
pub fn nrmse(pred: &[Trajectory], truth: &[Trajectory]) -> Result<f64, MetricError> {
    if pred.is_empty() || truth.is_empty() {
        return Err(MetricError::Empty);
    }
    if pred.len() != truth.len() {
        return Err(MetricError::Mismatch(format!(
            "{} predictions vs {} truths",
            pred.len(),
            truth.len()
        )));
    }
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p.dim() != t.dim() || p.points() != t.points() {
            return Err(MetricError::Mismatch(format!(
                "sample {i}: {}x{} vs {}x{}",
                p.dim(),
                p.points(),
                t.dim(),
                t.points()
            )));
        }
    }

    let mut sq_err = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.states().iter().zip(t.states()) {
            let e = a - b;
            sq_err += e * e;
        }
        count += p.states().len();
    }
    let rmse = (sq_err / count as f64).sqrt();

    let mut mean = 0.0;
    for t in truth {
        mean += t.states().iter().sum::<f64>();
    }
    mean /= count as f64;
    let mut var = 0.0;
    for t in truth {
        for &v in t.states() {
            var += (v - mean) * (v - mean);
        }
    }
    var /= count as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return Err(MetricError::DegenerateTruth);
    }
    Ok(rmse / std)
}

/// NRMSE over raw value buffers with matching layouts. Used for derivative
/// tables and other non-trajectory comparisons.
pub fn nrmse_flat(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    if pred.len() != truth.len() {
        return Err(MetricError::Mismatch(format!(
            "{} vs {} entries",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let sq_err: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    let mean = truth.iter().sum::<f64>() / n;
    let var = truth.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Err(MetricError::DegenerateTruth);
    }
    Ok((sq_err / n).sqrt() / std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;

    fn traj_from(values: &[f64]) -> Trajectory {
        let grid = TimeGrid::new(0.0, 1.0, values.len()).unwrap();
        Trajectory::new(1, grid, values.to_vec())
    }

    #[test]
    fn identical_sets_score_zero() {
        let a = vec![traj_from(&[1.0, 2.0, 3.0])];
        assert_eq!(nrmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn unit_shift_against_unit_std() {
        // Truth entries {0,2}: mean 1, population std 1. Predictions one above.
        let truth = vec![traj_from(&[0.0, 2.0])];
        let pred = vec![traj_from(&[1.0, 3.0])];
        assert!((nrmse(&pred, &truth).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn invariant_under_sample_permutation() {
        let truth = vec![traj_from(&[0.0, 2.0, 1.0]), traj_from(&[5.0, -1.0, 2.0])];
        let pred = vec![traj_from(&[0.5, 2.5, 0.5]), traj_from(&[4.0, 0.0, 2.5])];
        let fwd = nrmse(&pred, &truth).unwrap();
        let rev = nrmse(
            &[pred[1].clone(), pred[0].clone()],
            &[truth[1].clone(), truth[0].clone()],
        )
        .unwrap();
        assert_eq!(fwd.to_bits(), rev.to_bits());
    }

    #[test]
    fn invariant_under_affine_rescaling() {
        let truth = vec![traj_from(&[0.0, 2.0, 1.0])];
        let pred = vec![traj_from(&[0.5, 2.5, 0.5])];
        let base = nrmse(&pred, &truth).unwrap();
        let scale = |t: &Trajectory, a: f64, b: f64| {
            traj_from(
                &t.states()
                    .iter()
                    .map(|v| a * v + b)
                    .collect::<Vec<_>>(),
            )
        };
        for (a, b) in [(2.0, 0.0), (-3.0, 1.0), (0.25, -7.0)] {
            let s = nrmse(&[scale(&pred[0], a, b)], &[scale(&truth[0], a, b)]).unwrap();
            assert!((s - base).abs() < 1e-12, "a={a} b={b}");
        }
    }

    #[test]
    fn constant_truth_is_degenerate() {
        let truth = vec![traj_from(&[2.0, 2.0])];
        let pred = vec![traj_from(&[1.0, 3.0])];
        assert_eq!(nrmse(&pred, &truth).unwrap_err(), MetricError::DegenerateTruth);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let truth = vec![traj_from(&[0.0, 2.0])];
        let pred = vec![traj_from(&[1.0, 3.0, 4.0])];
        assert!(matches!(
            nrmse(&pred, &truth).unwrap_err(),
            MetricError::Mismatch(_)
        ));
    }
}
