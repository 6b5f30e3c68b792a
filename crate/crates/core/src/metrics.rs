//! Fairness statistics over per-client accuracies.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no accuracies given")]
    Empty,
    #[error("k_pct must lie in (0, 50], got {0}")]
    InvalidPercent(f64),
    #[error("accuracy {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("angle and KL are undefined for an all-zero accuracy vector")]
    AllZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub mean_accuracy: f64,
    /// Population standard deviation (divisor K).
    pub std_accuracy: f64,
    pub worst_k_pct: f64,
    pub best_k_pct: f64,
    /// Angle between the accuracy vector and the all-ones vector.
    pub angle_degrees: f64,
    /// KL(a / sum(a) || uniform), with `0 ln 0 = 0`.
    pub kl_to_uniform: f64,
}

impl FairnessReport {
    pub const CSV_HEADER: [&'static str; 6] = [
        "mean_accuracy",
        "std_accuracy",
        "worst_k_pct",
        "best_k_pct",
        "angle_degrees",
        "kl_to_uniform",
    ];

    pub fn csv_fields(&self) -> [f64; 6] {
        [
            self.mean_accuracy,
            self.std_accuracy,
            self.worst_k_pct,
            self.best_k_pct,
            self.angle_degrees,
            self.kl_to_uniform,
        ]
    }
}

/// Number of clients in the worst / best `k_pct` percent, rounded up.
pub fn tail_count(k_pct: f64, k: usize) -> usize {
    // Guard against 10.0 * 30 / 100 landing a hair above an integer.
    let raw = k_pct * k as f64 / 100.0;
    let nearest = raw.round();
    let count = if (raw - nearest).abs() < 1e-9 {
        nearest
    } else {
        raw.ceil()
    };
    (count as usize).clamp(1, k)
}

pub fn fairness_report(accuracies: &[f64], k_pct: f64) -> Result<FairnessReport, MetricsError> {
    if accuracies.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(k_pct > 0.0 && k_pct <= 50.0) {
        return Err(MetricsError::InvalidPercent(k_pct));
    }
    if let Some(&bad) = accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(MetricsError::OutOfRange(bad));
    }
    let k = accuracies.len() as f64;
    if accuracies.iter().all(|&a| a == 0.0) {
        return Err(MetricsError::AllZero);
    }
    // Shifted sums keep the statistics exactly zero for constant vectors.
    let shift = accuracies[0];
    let dev_sum: f64 = accuracies.iter().map(|a| a - shift).sum();
    let dev_sq: f64 = accuracies.iter().map(|a| (a - shift).powi(2)).sum();
    let mean = shift + dev_sum / k;
    let var = (dev_sq / k - (dev_sum / k).powi(2)).max(0.0);
    let std = var.sqrt();

    let mut sorted = accuracies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = tail_count(k_pct, accuracies.len());
    let worst = sorted[..m].iter().sum::<f64>() / m as f64;
    let best = sorted[sorted.len() - m..].iter().sum::<f64>() / m as f64;

    // a = mean * 1 + r with |r| = sqrt(K) * std, so tan(angle) = std / mean.
    let angle = std.atan2(mean).to_degrees();

    // a_hat_k = a_k / (K mean), so KL = (1/K) sum (a_k/mean) ln(a_k/mean).
    let kl = (accuracies
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| {
            let r = a / mean;
            r * r.ln()
        })
        .sum::<f64>()
        / k)
        .max(0.0);

    Ok(FairnessReport {
        mean_accuracy: mean,
        std_accuracy: std,
        worst_k_pct: worst.min(mean),
        best_k_pct: best.max(mean),
        angle_degrees: angle,
        kl_to_uniform: kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_vector() {
        let r = fairness_report(&[0.8; 10], 10.0).unwrap();
        assert!((r.mean_accuracy - 0.8).abs() < 1e-15);
        assert_eq!(r.std_accuracy, 0.0);
        assert_eq!(r.angle_degrees, 0.0);
        assert_eq!(r.kl_to_uniform, 0.0);
        assert!((r.worst_k_pct - 0.8).abs() < 1e-15);
        assert!((r.best_k_pct - 0.8).abs() < 1e-15);
    }

    #[test]
    fn unit_vector_angle() {
        let r = fairness_report(&[1.0, 0.0], 10.0).unwrap();
        assert!((r.angle_degrees - 45.0).abs() < 1e-12);
        // a_hat = (1, 0): KL = ln 2
        assert!((r.kl_to_uniform - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_point_arithmetic() {
        let r = fairness_report(&[0.5, 1.0], 50.0).unwrap();
        assert_eq!(r.worst_k_pct, 0.5);
        assert_eq!(r.best_k_pct, 1.0);
        assert_eq!(r.mean_accuracy, 0.75);
        assert_eq!(r.std_accuracy, 0.25);
    }

    #[test]
    fn tail_rounding() {
        assert_eq!(tail_count(10.0, 31), 4);
        assert_eq!(tail_count(10.0, 30), 3);
        assert_eq!(tail_count(10.0, 10), 1);
        assert_eq!(tail_count(10.0, 3), 1);
        assert_eq!(tail_count(50.0, 5), 3);
    }

    #[test]
    fn errors() {
        assert_eq!(fairness_report(&[], 10.0), Err(MetricsError::Empty));
        assert_eq!(
            fairness_report(&[0.0, 0.0], 10.0),
            Err(MetricsError::AllZero)
        );
        assert_eq!(
            fairness_report(&[0.5], 60.0),
            Err(MetricsError::InvalidPercent(60.0))
        );
        assert_eq!(
            fairness_report(&[1.5], 10.0),
            Err(MetricsError::OutOfRange(1.5))
        );
    }
}
