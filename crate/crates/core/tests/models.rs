// The reference evaluator indexes by hand on purpose.
#![allow(clippy::needless_range_loop)]

use adafed::models::{self, Dataset, Labels, ModelKind, ModelSpec};
use adafed::ParamVector;
use proptest::prelude::*;

// Straight-loop evaluator with its own parameter indexing. It shares no code
// with the library's forward pass.
fn naive_loss(spec: &ModelSpec, p: &[f64], data: &Dataset) -> f64 {
    let (ni, no, nh) = (spec.input_dim, spec.output_dim, spec.hidden_dim);
    let n = data.len();
    let mut total = 0.0;
    if spec.kind == ModelKind::Quadratic {
        let mut c = vec![0.0; ni];
        for s in 0..n {
            for j in 0..ni {
                c[j] += data.features[s * ni + j] / n as f64;
            }
        }
        for j in 0..ni {
            total += 0.5 * (p[j] - c[j]) * (p[j] - c[j]);
        }
    } else {
        for s in 0..n {
            let x = &data.features[s * ni..(s + 1) * ni];
            let mut z = vec![0.0; no];
            match spec.kind {
                ModelKind::Linear | ModelKind::Logistic => {
                    for r in 0..no {
                        z[r] = p[no * ni + r];
                        for j in 0..ni {
                            z[r] += p[r * ni + j] * x[j];
                        }
                    }
                }
                ModelKind::Mlp2 => {
                    let mut hid = vec![0.0; nh];
                    for c in 0..nh {
                        let mut a = p[nh * ni + c];
                        for j in 0..ni {
                            a += p[c * ni + j] * x[j];
                        }
                        hid[c] = a.tanh();
                    }
                    let w2 = nh * ni + nh;
                    for r in 0..no {
                        z[r] = p[w2 + no * nh + r];
                        for c in 0..nh {
                            z[r] += p[w2 + r * nh + c] * hid[c];
                        }
                    }
                }
                ModelKind::Quadratic => unreachable!(),
            }
            total += match &data.labels {
                Labels::Real(y) => (z[0] - y[s]).powi(2),
                Labels::Class(y) => {
                    let sum: f64 = z.iter().map(|v| v.exp()).sum();
                    -(z[y[s]].exp() / sum).ln()
                }
            } / n as f64;
        }
    }
    total + 0.5 * spec.l2_reg * p.iter().map(|v| v * v).sum::<f64>()
}

fn naive_accuracy(spec: &ModelSpec, p: &[f64], data: &Dataset) -> f64 {
    let (ni, no) = (spec.input_dim, spec.output_dim);
    let y = data.class_labels().unwrap();
    let mut hits = 0;
    for s in 0..data.len() {
        let mut best = 0;
        let mut best_z = f64::NEG_INFINITY;
        for r in 0..no {
            let mut z = p[no * ni + r];
            for j in 0..ni {
                z += p[r * ni + j] * data.features[s * ni + j];
            }
            if z > best_z {
                best_z = z;
                best = r;
            }
        }
        hits += usize::from(best == y[s]);
    }
    hits as f64 / data.len() as f64
}

fn spec_for(kind: ModelKind, i: usize, o: usize, h: usize, l2: f64) -> ModelSpec {
    match kind {
        ModelKind::Linear => ModelSpec::linear(i),
        ModelKind::Logistic => ModelSpec::logistic(i, o),
        ModelKind::Mlp2 => ModelSpec::mlp2(i, h, o),
        ModelKind::Quadratic => ModelSpec::quadratic(i),
    }
    .with_l2(l2)
}

prop_compose! {
    fn instance(kind: ModelKind)(
        i in 1usize..5, o in 2usize..4, h in 1usize..5, n in 1usize..7,
        l2 in prop_oneof![Just(0.0), 0.0..0.5f64],
        seed in any::<u64>(),
    ) -> (ModelSpec, Vec<f64>, Dataset) {
        let spec = spec_for(kind, i, o, h, l2);
        let mut rng = seed;
        let mut next = move || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let p: Vec<f64> = (0..spec.param_count()).map(|_| next()).collect();
        let x: Vec<f64> = (0..n * i).map(|_| 2.0 * next()).collect();
        let labels = if spec.is_classifier() {
            Labels::Class((0..n).map(|_| ((next() + 1.0) * o as f64 / 2.0) as usize % o).collect())
        } else {
            Labels::Real((0..n).map(|_| next()).collect())
        };
        (spec, p, Dataset::new(i, x, labels).unwrap())
    }
}

fn any_instance() -> impl Strategy<Value = (ModelSpec, Vec<f64>, Dataset)> {
    prop_oneof![
        instance(ModelKind::Linear),
        instance(ModelKind::Logistic),
        instance(ModelKind::Mlp2),
        instance(ModelKind::Quadratic),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn loss_matches_naive((spec, p, data) in any_instance()) {
        let got = models::loss(&spec, &ParamVector::new(p.clone()), &data).unwrap();
        let want = naive_loss(&spec, &p, &data);
        prop_assert!((got - want).abs() <= 1e-10 * (1.0 + want.abs()), "{got} vs {want}");
    }

    #[test]
    fn gradient_matches_naive_central_differences((spec, p, data) in any_instance()) {
        let g = models::gradient(&spec, &ParamVector::new(p.clone()), &data).unwrap();
        let step = 1e-6;
        for j in 0..p.len() {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[j] += step;
            lo[j] -= step;
            let fd = (naive_loss(&spec, &hi, &data) - naive_loss(&spec, &lo, &data)) / (2.0 * step);
            let gj = g.as_slice()[j];
            prop_assert!((gj - fd).abs() <= 1e-5 * (1.0 + gj.abs()), "coord {j}: {gj} vs {fd}");
        }
    }

    #[test]
    fn accuracy_matches_naive((spec, p, data) in instance(ModelKind::Logistic)) {
        let got = models::accuracy(&spec, &ParamVector::new(p.clone()), &data).unwrap();
        prop_assert_eq!(got, naive_accuracy(&spec, &p, &data));
    }

    #[test]
    fn convex_models_are_midpoint_convex(
        (spec, a, data) in prop_oneof![instance(ModelKind::Linear), instance(ModelKind::Logistic)],
        shift in proptest::collection::vec(-2.0..2.0f64, 64),
    ) {
        let spec = spec.with_l2(0.1);
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let f = |v: &[f64]| models::loss(&spec, &ParamVector::new(v.to_vec()), &data).unwrap();
        prop_assert!(f(&mid) <= 0.5 * f(&a) + 0.5 * f(&b) + 1e-10);
    }
}

#[test]
fn zero_linear_model_on_zero_targets() {
    let spec = ModelSpec::linear(2);
    let data = Dataset::new(2, vec![1.0, 2.0, -3.0, 0.5], Labels::Real(vec![0.0, 0.0])).unwrap();
    assert_eq!(
        models::loss(&spec, &ParamVector::zeros(3), &data).unwrap(),
        0.0
    );
}

#[test]
fn zero_logistic_model_on_balanced_classes() {
    let spec = ModelSpec::logistic(2, 2);
    let data = Dataset::new(
        2,
        vec![1.0, 0.0, 0.0, 1.0, -1.0, 2.0, 3.0, 3.0],
        Labels::Class(vec![0, 1, 0, 1]),
    )
    .unwrap();
    let p = ParamVector::zeros(spec.param_count());
    let l = models::loss(&spec, &p, &data).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn zero_params_predict_class_zero() {
    let spec = ModelSpec::logistic(1, 2);
    let data = Dataset::new(1, vec![0.3, -1.0, 2.0], Labels::Class(vec![0, 1, 1])).unwrap();
    let p = ParamVector::zeros(spec.param_count());
    assert!((models::accuracy(&spec, &p, &data).unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn separating_params_score_perfectly() {
    let spec = ModelSpec::logistic(1, 2);
    let data = Dataset::new(
        1,
        vec![-2.0, -1.0, 1.0, 3.0],
        Labels::Class(vec![0, 0, 1, 1]),
    )
    .unwrap();
    // Logit for class 1 is x, class 0 is -x.
    let p = ParamVector::new(vec![-1.0, 1.0, 0.0, 0.0]);
    assert_eq!(models::accuracy(&spec, &p, &data).unwrap(), 1.0);
}

#[test]
fn quadratic_gradient_points_away_from_center() {
    let spec = ModelSpec::quadratic(3);
    let data = Dataset::new(
        3,
        vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0],
        Labels::Real(vec![0.0, 0.0]),
    )
    .unwrap();
    let theta = ParamVector::new(vec![0.5, -1.0, 4.0]);
    let g = models::gradient(&spec, &theta, &data).unwrap();
    assert_eq!(g.as_slice(), &[-1.5, -3.0, 2.0]);
    assert_eq!(models::smoothness_bound(&spec, &data), Some(1.0));
}

#[test]
fn single_sample_gradient_is_that_sample() {
    let spec = ModelSpec::linear(2);
    let data = Dataset::new(2, vec![1.0, -2.0], Labels::Real(vec![3.0])).unwrap();
    let p = ParamVector::new(vec![0.5, 0.5, 0.0]);
    // r = 0.5 - 1 - 3 = -3.5; d/dw = 2 r x, d/db = 2 r.
    let g = models::gradient(&spec, &p, &data).unwrap();
    assert_eq!(g.as_slice(), &[-7.0, 14.0, -7.0]);
}

#[test]
fn init_is_seeded_and_sized() {
    let spec = ModelSpec::linear(2);
    let a = models::init_params(&spec, 5);
    assert_eq!(a.len(), 3);
    assert_eq!(a, models::init_params(&spec, 5));
    assert_ne!(a, models::init_params(&spec, 6));
    let mlp = ModelSpec::mlp2(4, 9, 3);
    let p = models::init_params(&mlp, 1);
    let (first, second) = p.as_slice().split_at(9 * 4 + 9);
    assert!(first.iter().all(|v| v.abs() <= 0.5));
    assert!(second.iter().all(|v| v.abs() <= 1.0 / 3.0));
}

#[test]
fn dimension_mismatch_is_an_error() {
    let spec = ModelSpec::linear(2);
    let data = Dataset::new(2, vec![1.0, 2.0], Labels::Real(vec![0.0])).unwrap();
    assert!(models::loss(&spec, &ParamVector::zeros(2), &data).is_err());
    let wide = Dataset::new(3, vec![1.0, 2.0, 3.0], Labels::Real(vec![0.0])).unwrap();
    assert!(models::gradient(&spec, &ParamVector::zeros(3), &wide).is_err());
}
