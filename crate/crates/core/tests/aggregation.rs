use adafed::aggregation::{
    adafed_direction, aggregate, fedavg_direction, min_norm_in_hull, orthogonalize, solve_lambda,
    step_size_bound, AggregationError, AggregatorSpec, ClientUpdate, FedAvgWeights,
    DEFAULT_EPS_DEP, DEFAULT_EPS_LOSS,
};
use adafed::ParamVector;
use proptest::prelude::*;

fn upd(id: u32, g: &[f64], loss: f64) -> ClientUpdate {
    ClientUpdate::new(id, ParamVector::new(g.to_vec()), loss, 1)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// The direction with `g_k . d` proportional to `s_k` and `|d|^2` equal to
/// the common factor, computed from the Gram matrix without any
/// orthogonalization: `d = G^T (G G^T)^-1 s / (s^T (G G^T)^-1 s)`.
fn gram_oracle(grads: &[Vec<f64>], scaled: &[f64]) -> Vec<f64> {
    let gram: Vec<Vec<f64>> = grads
        .iter()
        .map(|a| grads.iter().map(|b| dot(a, b)).collect())
        .collect();
    let y = solve(gram, scaled.to_vec());
    let c = 1.0 / dot(scaled, &y);
    let mut d = vec![0.0; grads[0].len()];
    for (g, w) in grads.iter().zip(&y) {
        for (dj, gj) in d.iter_mut().zip(g) {
            *dj += c * w * gj;
        }
    }
    d
}

prop_compose! {
    fn instance(max_k: usize)(k in 1..=max_k)(
        extra in 2usize..12,
        gamma in prop::sample::select(vec![0.0, 0.1, 1.0]),
        rows in proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, k + 12), k),
        losses in proptest::collection::vec(0.1..10.0f64, k),
    ) -> (Vec<ClientUpdate>, f64) {
        let d = rows[0].len() - 12 + extra;
        let updates = rows
            .iter()
            .zip(&losses)
            .enumerate()
            .map(|(i, (r, &f))| upd(i as u32, &r[..d], f))
            .collect();
        (updates, gamma)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn retained_outputs_are_orthogonal_and_span_inputs((ups, gamma) in instance(8)) {
        let o = orthogonalize(&ups, gamma, DEFAULT_EPS_LOSS, DEFAULT_EPS_DEP).unwrap();
        for i in 0..o.gradients.len() {
            for j in 0..i {
                let (a, b) = (&o.gradients[i], &o.gradients[j]);
                prop_assert!(a.dot(b).abs() <= 1e-8 * a.norm() * b.norm());
            }
        }
        // Each retained g_k lies in span(g~_1 .. g~_k): subtract its
        // projections and check what is left.
        for (pos, id) in o.client_ids.iter().enumerate() {
            let g = &ups[*id as usize].gradient;
            let mut r = g.clone();
            for t in &o.gradients[..=pos] {
                r.axpy(-g.dot(t) / t.norm_sq(), t);
            }
            prop_assert!(r.norm() <= 1e-8 * g.norm());
        }
    }

    #[test]
    fn direction_matches_gram_oracle((ups, gamma) in instance(6)) {
        let r = adafed_direction(&ups, &AggregatorSpec::adafed(gamma)).unwrap();
        prop_assume!(r.dropped_clients.is_empty());
        let grads: Vec<Vec<f64>> = ups.iter().map(|u| u.gradient.as_slice().to_vec()).collect();
        let scaled: Vec<f64> = ups.iter().map(|u| u.loss.powf(gamma)).collect();
        let want = gram_oracle(&grads, &scaled);
        let err: f64 = r.direction.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-7 * dot(&want, &want).sqrt(), "error {err}");
        prop_assert!((r.direction.norm_sq() - r.alpha / 2.0).abs() <= 1e-10 * r.alpha);
    }

    #[test]
    fn directional_derivatives_follow_scaled_losses((ups, gamma) in instance(8)) {
        let r = adafed_direction(&ups, &AggregatorSpec::adafed(gamma)).unwrap();
        for (id, s) in r.client_ids.iter().zip(&r.scaled_losses) {
            let gd = ups[*id as usize].gradient.dot(&r.direction);
            let rhs = r.alpha / 2.0 * s;
            prop_assert!(gd > 0.0);
            prop_assert!((gd - rhs).abs() <= 1e-8 * rhs, "{gd} vs {rhs}");
        }
    }

    #[test]
    fn larger_scaled_loss_means_larger_derivative(
        (ups, _) in instance(8),
        gamma in prop::sample::select(vec![0.1, 1.0, 5.0]),
    ) {
        let r = adafed_direction(&ups, &AggregatorSpec::adafed(gamma)).unwrap();
        let gd: Vec<f64> = r.client_ids.iter().map(|&id| ups[id as usize].gradient.dot(&r.direction)).collect();
        for i in 0..gd.len() {
            for j in 0..gd.len() {
                if r.scaled_losses[i] > r.scaled_losses[j] * (1.0 + 1e-6) {
                    prop_assert!(gd[i] > gd[j]);
                }
            }
        }
    }

    #[test]
    fn lambda_lies_on_the_simplex((ups, gamma) in instance(8)) {
        let r = adafed_direction(&ups, &AggregatorSpec::adafed(gamma)).unwrap();
        prop_assert!(r.lambda.iter().all(|&l| l > 0.0));
        prop_assert!((r.lambda.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        let norms_inv: f64 = r.orthogonal_gradients.iter().map(|g| 1.0 / g.norm_sq()).sum();
        prop_assert!((r.alpha - 2.0 / norms_inv).abs() <= 1e-12 * r.alpha);
    }

    #[test]
    fn zero_gamma_equalizes_derivatives((ups, _) in instance(8)) {
        let r = adafed_direction(&ups, &AggregatorSpec::adafed(0.0)).unwrap();
        let first = ups[r.client_ids[0] as usize].gradient.dot(&r.direction);
        for &id in &r.client_ids {
            let gd = ups[id as usize].gradient.dot(&r.direction);
            prop_assert!((gd - first).abs() <= 1e-8 * first.abs());
        }
    }

    #[test]
    fn direction_does_not_depend_on_processing_order((ups, gamma) in instance(6)) {
        let base = adafed_direction(&ups, &AggregatorSpec::adafed(gamma)).unwrap();
        prop_assume!(base.dropped_clients.is_empty());
        // Reversing ids reverses the processing order.
        let n = ups.len() as u32;
        let shuffled: Vec<ClientUpdate> = ups
            .iter()
            .map(|u| ClientUpdate { client_id: n - 1 - u.client_id, ..u.clone() })
            .collect();
        let other = adafed_direction(&shuffled, &AggregatorSpec::adafed(gamma)).unwrap();
        let mut diff = base.direction.clone();
        diff.axpy(-1.0, &other.direction);
        prop_assert!(diff.norm() <= 1e-7 * base.direction.norm());
    }

    #[test]
    fn closed_form_matches_hull_on_orthogonal_inputs(
        norms in proptest::collection::vec(0.1..5.0f64, 1..6),
        signs in proptest::collection::vec(any::<bool>(), 6),
    ) {
        let k = norms.len();
        let vectors: Vec<ParamVector> = (0..k)
            .map(|i| {
                let mut v = vec![0.0; k + 1];
                v[i] = if signs[i] { norms[i] } else { -norms[i] };
                ParamVector::new(v)
            })
            .collect();
        let (lambda, alpha) = solve_lambda(&vectors).unwrap();
        let hull = min_norm_in_hull(&vectors, 100_000, 1e-14).unwrap();
        for (a, b) in lambda.iter().zip(&hull.lambda) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
        prop_assert!((hull.point.norm_sq() - alpha / 2.0).abs() <= 1e-6);
        prop_assert!((hull.lambda.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        prop_assert!(hull.lambda.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn rescaling_one_input_rescales_its_weight(
        norms in proptest::collection::vec(0.1..5.0f64, 2..6),
        c in 0.1..10.0f64,
        which in 0usize..6,
    ) {
        let k = norms.len();
        let which = which % k;
        let make = |scale: f64| -> Vec<ParamVector> {
            (0..k)
                .map(|i| {
                    let mut v = vec![0.0; k];
                    v[i] = norms[i] * if i == which { scale } else { 1.0 };
                    ParamVector::new(v)
                })
                .collect()
        };
        let (before, _) = solve_lambda(&make(1.0)).unwrap();
        let (after, _) = solve_lambda(&make(c)).unwrap();
        // Weights are proportional to 1/|g~|^2 before normalization.
        let mut raw = before.clone();
        raw[which] /= c * c;
        let total: f64 = raw.iter().sum();
        for (a, r) in after.iter().zip(&raw) {
            prop_assert!((a - r / total).abs() <= 1e-12);
        }
        prop_assert!((after.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn fedavg_is_a_weighted_mean(
        rows in proptest::collection::vec((proptest::collection::vec(-5.0..5.0f64, 3), 1usize..50), 1..8),
    ) {
        let ups: Vec<ClientUpdate> = rows
            .iter()
            .enumerate()
            .map(|(i, (g, n))| ClientUpdate::new(i as u32, ParamVector::new(g.clone()), 1.0, *n))
            .collect();
        let total: f64 = rows.iter().map(|r| r.1 as f64).sum();
        let d = fedavg_direction(&ups, FedAvgWeights::BySampleCount).unwrap();
        for j in 0..3 {
            let want: f64 = rows.iter().map(|(g, n)| g[j] * *n as f64 / total).sum();
            prop_assert!((d.as_slice()[j] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12)
}

#[test]
fn two_client_hand_example() {
    let ups = [upd(0, &[2.0, 0.0], 2.0), upd(1, &[1.0, 1.0], 3.0)];
    let o = orthogonalize(&ups, 1.0, DEFAULT_EPS_LOSS, DEFAULT_EPS_DEP).unwrap();
    assert!(close(o.gradients[0].as_slice(), &[1.0, 0.0]));
    assert!(close(o.gradients[1].as_slice(), &[0.0, 0.5]));

    let r = adafed_direction(&ups, &AggregatorSpec::adafed(1.0)).unwrap();
    assert!(close(&r.lambda, &[0.2, 0.8]));
    assert!((r.alpha - 0.4).abs() < 1e-12);
    assert!(close(r.direction.as_slice(), &[0.2, 0.4]));
    assert!((ups[0].gradient.dot(&r.direction) - 0.4).abs() < 1e-12);
    assert!((ups[1].gradient.dot(&r.direction) - 0.6).abs() < 1e-12);
}

#[test]
fn cancelling_denominator_drops_the_client() {
    let ups = [upd(0, &[2.0, 0.0], 2.0), upd(1, &[1.0, 1.0], 1.0)];
    let r = adafed_direction(&ups, &AggregatorSpec::adafed(1.0)).unwrap();
    assert_eq!(r.dropped_clients, vec![1]);
    assert_eq!(r.client_ids, vec![0]);
}

#[test]
fn single_client_direction_follows_its_gradient() {
    let r = adafed_direction(&[upd(0, &[3.0, 4.0], 1.0)], &AggregatorSpec::adafed(1.0)).unwrap();
    assert_eq!(r.lambda, vec![1.0]);
    let g = ParamVector::new(vec![3.0, 4.0]);
    assert!((g.dot(&r.direction) - g.norm() * r.direction.norm()).abs() < 1e-12);
    assert!((r.alpha - 2.0 * r.orthogonal_gradients[0].norm_sq()).abs() < 1e-12);
}

#[test]
fn solve_lambda_examples() {
    let e = |v: &[f64]| ParamVector::new(v.to_vec());
    let (l, a) = solve_lambda(&[e(&[1.0, 0.0]), e(&[0.0, 1.0])]).unwrap();
    assert!(close(&l, &[0.5, 0.5]) && (a - 1.0).abs() < 1e-15);
    let (l, a) = solve_lambda(&[e(&[1.0, 0.0]), e(&[0.0, 0.5])]).unwrap();
    assert!(close(&l, &[0.2, 0.8]) && (a - 0.4).abs() < 1e-15);
    assert!(matches!(
        solve_lambda(&[e(&[1.0, 0.0]), e(&[0.0, 0.0])]),
        Err(AggregationError::ZeroNorm { index: 1 })
    ));
}

#[test]
fn hull_examples() {
    let e = |v: &[f64]| ParamVector::new(v.to_vec());
    let r = min_norm_in_hull(&[e(&[1.0, 0.0]), e(&[0.0, 1.0])], 1000, 1e-14).unwrap();
    assert!(close(&r.lambda, &[0.5, 0.5]));
    assert!((r.point.norm_sq() - 0.5).abs() < 1e-12);
    let r = min_norm_in_hull(&[e(&[1.0, 0.0]), e(&[2.0, 0.0])], 1000, 1e-14).unwrap();
    assert!(close(&r.lambda, &[1.0, 0.0]));
    assert!(close(r.point.as_slice(), &[1.0, 0.0]));
}

#[test]
fn step_size_bound_examples() {
    assert_eq!(step_size_bound(&[2.0, 3.0], 1.0, 1.0), 4.0);
    assert_eq!(step_size_bound(&[0.3, 7.0], 0.0, 2.0), 1.0);
    assert_eq!(step_size_bound(&[0.25], 2.0, 0.5), 0.25);
}

#[test]
fn fedavg_examples() {
    let ups = [
        ClientUpdate::new(0, ParamVector::new(vec![1.0, 0.0]), 1.0, 3),
        ClientUpdate::new(1, ParamVector::new(vec![0.0, 1.0]), 1.0, 1),
    ];
    let u = fedavg_direction(&ups, FedAvgWeights::Uniform).unwrap();
    assert!(close(u.as_slice(), &[0.5, 0.5]));
    let s = fedavg_direction(&ups, FedAvgWeights::BySampleCount).unwrap();
    assert!(close(s.as_slice(), &[0.75, 0.25]));
    let one = fedavg_direction(&ups[..1], FedAvgWeights::Uniform).unwrap();
    assert!(close(one.as_slice(), &[1.0, 0.0]));
}

#[test]
fn aggregate_sorts_by_client_id() {
    let a = [upd(4, &[2.0, 0.0], 2.0), upd(9, &[1.0, 1.0], 3.0)];
    let b = [a[1].clone(), a[0].clone()];
    let spec = AggregatorSpec::adafed(1.0);
    assert_eq!(aggregate(&a, &spec).unwrap(), aggregate(&b, &spec).unwrap());
}

#[test]
fn malformed_rounds_are_rejected() {
    let spec = AggregatorSpec::adafed(1.0);
    assert!(matches!(
        adafed_direction(&[], &spec),
        Err(AggregationError::Empty)
    ));
    let mismatch = [upd(0, &[1.0, 0.0], 1.0), upd(1, &[1.0], 1.0)];
    assert!(matches!(
        adafed_direction(&mismatch, &spec),
        Err(AggregationError::DimensionMismatch { client_id: 1, .. })
    ));
    let zero = [upd(0, &[0.0, 0.0], 1.0)];
    assert!(matches!(
        adafed_direction(&zero, &spec),
        Err(AggregationError::AllDropped(1))
    ));
    let nan = [upd(0, &[f64::NAN, 0.0], 1.0)];
    assert!(matches!(
        adafed_direction(&nan, &spec),
        Err(AggregationError::NonFinite { client_id: 0 })
    ));
}
