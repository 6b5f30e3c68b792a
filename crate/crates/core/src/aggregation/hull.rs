use serde::{Deserialize, Serialize};

use super::{AggregationError, ParamVector};
use crate::param::dot;

pub const DEFAULT_HULL_MAX_ITERS: usize = 10_000;
pub const DEFAULT_HULL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinNormResult {
    pub lambda: Vec<f64>,
    pub point: ParamVector,
    /// Frank-Wolfe duality gap of `|sum lambda_k g_k|^2` at termination.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimum-norm point of the convex hull of `gradients`, by pairwise
/// Frank-Wolfe with exact line search on the Gram matrix, started from
/// uniform weights.
///
/// Terminates once the duality gap drops below `tol * max_k |g_k|^2`. When
/// `max_iters` runs out first the current iterate is returned with
/// `converged = false`.
pub fn min_norm_in_hull(
    gradients: &[ParamVector],
    max_iters: usize,
    tol: f64,
) -> Result<MinNormResult, AggregationError> {
    let k = gradients.len();
    if k == 0 {
        return Err(AggregationError::Empty);
    }
    let dim = gradients[0].len();
    for (i, g) in gradients.iter().enumerate() {
        if g.len() != dim {
            return Err(AggregationError::DimensionMismatch {
                client_id: i as u32,
                expected: dim,
                found: g.len(),
            });
        }
    }

    let gram: Vec<Vec<f64>> = gradients
        .iter()
        .map(|a| {
            gradients
                .iter()
                .map(|b| dot(a.as_slice(), b.as_slice()))
                .collect()
        })
        .collect();
    let scale = (0..k).map(|i| gram[i][i]).fold(0.0, f64::max);
    let threshold = tol * scale.max(f64::MIN_POSITIVE);

    let mut lambda = vec![1.0 / k as f64; k];
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    while iterations <= max_iters {
        // Gradient of the objective is 2 * gram * lambda.
        let grad: Vec<f64> = gram.iter().map(|row| 2.0 * dot(row, &lambda)).collect();
        let toward = argmin(&grad);
        let current = dot(&grad, &lambda);
        gap = current - grad[toward];
        if gap <= threshold {
            converged = true;
            break;
        }
        if iterations == max_iters {
            break;
        }
        let away = (0..k)
            .filter(|&j| lambda[j] > 0.0)
            .max_by(|&a, &b| grad[a].total_cmp(&grad[b]))
            .expect("simplex point has an active vertex");

        // Move weight from `away` to `toward`; objective along the segment is
        // quadratic with curvature |g_toward - g_away|^2.
        let curvature = gram[toward][toward] + gram[away][away] - 2.0 * gram[toward][away];
        let slope = 0.5 * (grad[toward] - grad[away]);
        let max_step = lambda[away];
        let step = if curvature > 0.0 {
            (-slope / curvature).clamp(0.0, max_step)
        } else {
            max_step
        };
        if step <= 0.0 {
            converged = gap <= threshold;
            break;
        }
        lambda[toward] += step;
        if step == max_step {
            lambda[away] = 0.0;
        } else {
            lambda[away] -= step;
        }
        iterations += 1;
    }

    let total: f64 = lambda.iter().sum();
    for l in &mut lambda {
        *l /= total;
    }
    let mut point = ParamVector::zeros(dim);
    for (w, g) in lambda.iter().zip(gradients) {
        point.axpy(*w, g);
    }
    Ok(MinNormResult {
        lambda,
        point,
        gap,
        iterations,
        converged,
    })
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn symmetric_orthogonal_pair() {
        let r = min_norm_in_hull(&[pv(&[1.0, 0.0]), pv(&[0.0, 1.0])], 1000, 1e-14).unwrap();
        assert!(r.converged);
        assert!((r.lambda[0] - 0.5).abs() < 1e-12);
        assert!((r.point.norm_sq() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn collinear_shorter_endpoint_wins() {
        let r = min_norm_in_hull(&[pv(&[1.0, 0.0]), pv(&[2.0, 0.0])], 1000, 1e-14).unwrap();
        assert!(r.converged);
        assert!((r.lambda[0] - 1.0).abs() < 1e-12);
        assert!(r.lambda[1].abs() < 1e-12);
        assert!((r.point[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn origin_inside_hull() {
        let r = min_norm_in_hull(&[pv(&[1.0, 0.0]), pv(&[-1.0, 0.0])], 1000, 1e-14).unwrap();
        assert!(r.point.norm() < 1e-9);
    }

    #[test]
    fn single_vector() {
        let r = min_norm_in_hull(&[pv(&[3.0, 4.0])], 10, 1e-12).unwrap();
        assert_eq!(r.lambda, vec![1.0]);
        assert!(r.converged);
    }

    #[test]
    fn non_convergence_is_flagged() {
        let gs = [
            pv(&[1.0, 0.0, 0.0]),
            pv(&[0.0, 3.0, 0.0]),
            pv(&[0.0, 0.0, 0.2]),
        ];
        let r = min_norm_in_hull(&gs, 1, 1e-15).unwrap();
        assert!(!r.converged);
        assert!(r.gap > 0.0);
        assert!((r.lambda.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input() {
        assert_eq!(
            min_norm_in_hull(&[], 10, 1e-9),
            Err(AggregationError::Empty)
        );
    }
}
