//! Per-step metrics records and derived report quantities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("baseline accuracies are zero for every task")]
    AllZeroBaseline,
    #[error("accuracy vectors have mismatched lengths")]
    LengthMismatch,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Latest held-out per-task accuracy (greedy decoding).
    pub per_task_accuracy: Vec<f64>,
    pub worst_task_accuracy: f64,
    pub average_accuracy: f64,
    /// Whether the accuracies were freshly evaluated at this step.
    pub evaluated: bool,
    /// Task weights z at the end of the step.
    pub z: Vec<f64>,
    /// Batch-mean raw reward per task (carried forward for absent tasks).
    pub batch_rewards: Vec<f64>,
    /// Which tasks were present in this step's batch.
    pub task_present: Vec<bool>,
    /// Clipped per-task improvements.
    pub improvements: Vec<f64>,
    /// Tracked filter rates after the step.
    pub rho: Vec<f64>,
    pub resample_rounds: usize,
    /// Post-filter task proportions realized in the batch.
    pub realized_proportions: Vec<f64>,
    pub batch_size: usize,
    pub undersized: bool,
}

pub type RunLog = Vec<MetricsRecord>;

/// Average per-task relative accuracy change versus a baseline, in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelativeChange {
    pub percent: f64,
    /// Tasks excluded because the baseline accuracy was zero.
    pub excluded_tasks: Vec<usize>,
}

pub fn relative_change(
    method_acc: &[f64],
    baseline_acc: &[f64],
) -> Result<RelativeChange, MetricsError> {
    if method_acc.len() != baseline_acc.len() {
        return Err(MetricsError::LengthMismatch);
    }
    let mut excluded = Vec::new();
    let mut total = 0.0;
    let mut used = 0usize;
    for (k, (&m, &b)) in method_acc.iter().zip(baseline_acc).enumerate() {
        if b > 0.0 {
            total += (m - b) / b;
            used += 1;
        } else {
            excluded.push(k);
        }
    }
    if used == 0 {
        return Err(MetricsError::AllZeroBaseline);
    }
    Ok(RelativeChange {
        percent: total / method_acc.len() as f64 * 100.0,
        excluded_tasks: excluded,
    })
}

/// First step whose worst-task accuracy reaches the threshold.
pub fn steps_to_threshold(log: &RunLog, threshold: f64) -> Option<u64> {
    log.iter()
        .find(|r| r.worst_task_accuracy >= threshold)
        .map(|r| r.step)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64, acc: Vec<f64>) -> MetricsRecord {
        let worst = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        let avg = acc.iter().sum::<f64>() / acc.len() as f64;
        MetricsRecord {
            step,
            per_task_accuracy: acc.clone(),
            worst_task_accuracy: worst,
            average_accuracy: avg,
            evaluated: true,
            z: vec![1.0 / acc.len() as f64; acc.len()],
            batch_rewards: vec![0.0; acc.len()],
            task_present: vec![true; acc.len()],
            improvements: vec![0.0; acc.len()],
            rho: vec![0.0; acc.len()],
            resample_rounds: 0,
            realized_proportions: vec![1.0 / acc.len() as f64; acc.len()],
            batch_size: 32,
            undersized: false,
        }
    }

    #[test]
    fn relative_change_values() {
        let same = relative_change(&[0.4, 0.25], &[0.4, 0.25]).unwrap();
        assert_eq!(same.percent, 0.0);
        let rc = relative_change(&[0.5, 0.5], &[0.4, 0.25]).unwrap();
        assert!((rc.percent - 62.5).abs() < 1e-12);
        let rc = relative_change(&[0.3], &[0.6]).unwrap();
        assert!((rc.percent + 50.0).abs() < 1e-12);
    }

    #[test]
    fn relative_change_exclusions() {
        let rc = relative_change(&[0.5, 0.9], &[0.0, 0.45]).unwrap();
        assert_eq!(rc.excluded_tasks, vec![0]);
        // Excluded tasks still divide the mean by K.
        assert!((rc.percent - 50.0).abs() < 1e-12);
        assert!(matches!(
            relative_change(&[0.5], &[0.0]),
            Err(MetricsError::AllZeroBaseline)
        ));
    }

    #[test]
    fn threshold_crossing() {
        let log = vec![
            record(0, vec![0.1, 0.2]),
            record(5, vec![0.5, 0.6]),
            record(10, vec![0.7, 0.8]),
        ];
        assert_eq!(steps_to_threshold(&log, 0.0), Some(0));
        assert_eq!(steps_to_threshold(&log, 0.5), Some(5));
        assert_eq!(steps_to_threshold(&log, 0.9), None);
    }
}
