//! Small differentiable models with closed-form gradients.
//!
//! Parameters are flattened layer-major, row-major within a layer:
//!
//! * `Linear`, `Logistic`: `W` (`output_dim x input_dim`), then `b` (`output_dim`).
//! * `Mlp2`: `W1` (`hidden x input`), `b1`, `W2` (`output x hidden`), `b2`.
//! * `Quadratic`: `theta` (`input_dim`); the objective is
//!   `1/2 |theta - mean(x)|^2`, which is 1-smooth.
//!
//! Every loss carries an extra `(l2_reg / 2) |params|^2` term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::param::{dot, ParamVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter vector has length {found}, model expects {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error("dataset has input dimension {found}, model expects {expected}")]
    InputDim { expected: usize, found: usize },
    #[error("labels do not fit the model: {0}")]
    Labels(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("accuracy is only defined for classification models")]
    NotClassification,
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[serde(alias = "Linear")]
    Linear,
    #[serde(alias = "Logistic")]
    Logistic,
    #[serde(alias = "MLP2", alias = "mlp")]
    Mlp2,
    #[serde(alias = "Quadratic")]
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default = "one")]
    pub output_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default)]
    pub l2_reg: f64,
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn linear(input_dim: usize) -> Self {
        Self::new(ModelKind::Linear, input_dim, 1, 0)
    }

    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self::new(ModelKind::Logistic, input_dim, num_classes, 0)
    }

    pub fn mlp2(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self::new(ModelKind::Mlp2, input_dim, output_dim, hidden_dim)
    }

    pub fn quadratic(dim: usize) -> Self {
        Self::new(ModelKind::Quadratic, dim, 1, 0)
    }

    fn new(kind: ModelKind, input_dim: usize, output_dim: usize, hidden_dim: usize) -> Self {
        Self {
            kind,
            input_dim,
            output_dim,
            hidden_dim,
            l2_reg: 0.0,
        }
    }

    pub fn with_l2(mut self, l2_reg: f64) -> Self {
        self.l2_reg = l2_reg;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("input_dim and output_dim must be positive");
        }
        if self.kind == ModelKind::Mlp2 && self.hidden_dim == 0 {
            return bad("mlp2 needs a positive hidden_dim");
        }
        if self.kind == ModelKind::Linear && self.output_dim != 1 {
            return bad("linear regression has a single output");
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return bad("l2_reg must be finite and non-negative");
        }
        Ok(())
    }

    /// Number of scalar parameters `d`.
    pub fn param_count(&self) -> usize {
        let (i, o, h) = (self.input_dim, self.output_dim, self.hidden_dim);
        match self.kind {
            ModelKind::Linear | ModelKind::Logistic => o * i + o,
            ModelKind::Mlp2 => h * i + h + o * h + o,
            ModelKind::Quadratic => i,
        }
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self.kind, ModelKind::Logistic | ModelKind::Mlp2) && self.output_dim >= 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    Real(Vec<f64>),
    Class(Vec<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Real(v) => v.len(),
            Labels::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major feature matrix plus labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub input_dim: usize,
    pub features: Vec<f64>,
    pub labels: Labels,
}

impl Dataset {
    pub fn new(input_dim: usize, features: Vec<f64>, labels: Labels) -> Result<Self, ModelError> {
        if input_dim == 0 || features.len() != input_dim * labels.len() {
            return Err(ModelError::InvalidSpec(format!(
                "{} feature values do not form {} rows of width {input_dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            input_dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn class_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Class(c) => Some(c),
            Labels::Real(_) => None,
        }
    }

    /// Copy of the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let labels = match &self.labels {
            Labels::Real(v) => Labels::Real(indices.iter().map(|&i| v[i]).collect()),
            Labels::Class(v) => Labels::Class(indices.iter().map(|&i| v[i]).collect()),
        };
        Dataset {
            input_dim: self.input_dim,
            features,
            labels,
        }
    }
}

/// Uniform(-s, s) initialization with `s = 1/sqrt(fan_in)` per layer.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize, fan_in: usize, out: &mut Vec<f64>| {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        out.extend((0..n).map(|_| rng.random_range(-s..=s)));
    };
    let mut values = Vec::with_capacity(spec.param_count());
    let (i, o, h) = (spec.input_dim, spec.output_dim, spec.hidden_dim);
    match spec.kind {
        ModelKind::Linear | ModelKind::Logistic => uniform(o * i + o, i, &mut values),
        ModelKind::Quadratic => uniform(i, i, &mut values),
        ModelKind::Mlp2 => {
            uniform(h * i + h, i, &mut values);
            uniform(o * h + o, h, &mut values);
        }
    }
    ParamVector::new(values)
}

fn check(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<(), ModelError> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(ModelError::ParamLength {
            expected: spec.param_count(),
            found: params.len(),
        });
    }
    if data.input_dim != spec.input_dim {
        return Err(ModelError::InputDim {
            expected: spec.input_dim,
            found: data.input_dim,
        });
    }
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    match (&spec.kind, &data.labels) {
        (ModelKind::Quadratic, _) => Ok(()),
        (ModelKind::Linear, Labels::Class(_)) => Err(ModelError::Labels(
            "linear regression needs real labels".into(),
        )),
        (ModelKind::Logistic, Labels::Real(_)) => Err(ModelError::Labels(
            "logistic regression needs class labels".into(),
        )),
        (ModelKind::Mlp2, Labels::Real(_)) if spec.output_dim != 1 => Err(ModelError::Labels(
            "real-valued targets need output_dim = 1".into(),
        )),
        (_, Labels::Class(c)) => match c.iter().find(|&&y| y >= spec.output_dim) {
            Some(y) => Err(ModelError::Labels(format!(
                "class {y} out of range for {} outputs",
                spec.output_dim
            ))),
            None => Ok(()),
        },
        _ => Ok(()),
    }
}

/// Output-layer activations for one sample; also returns the hidden layer
/// for `Mlp2`.
fn forward(spec: &ModelSpec, p: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (i, o, h) = (spec.input_dim, spec.output_dim, spec.hidden_dim);
    match spec.kind {
        ModelKind::Linear | ModelKind::Logistic => {
            let (w, b) = p.split_at(o * i);
            let out = (0..o)
                .map(|r| dot(&w[r * i..(r + 1) * i], x) + b[r])
                .collect();
            (out, Vec::new())
        }
        ModelKind::Mlp2 => {
            let (w1, rest) = p.split_at(h * i);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(o * h);
            let hidden: Vec<f64> = (0..h)
                .map(|r| (dot(&w1[r * i..(r + 1) * i], x) + b1[r]).tanh())
                .collect();
            let out = (0..o)
                .map(|r| dot(&w2[r * h..(r + 1) * h], &hidden) + b2[r])
                .collect();
            (out, hidden)
        }
        ModelKind::Quadratic => unreachable!("quadratic model has no per-sample forward pass"),
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-sample loss and its derivative with respect to the output layer.
fn output_loss(out: &[f64], labels: &Labels, n: usize, want_grad: bool) -> (f64, Vec<f64>) {
    match labels {
        Labels::Real(y) => {
            let r = out[0] - y[n];
            (r * r, if want_grad { vec![2.0 * r] } else { Vec::new() })
        }
        Labels::Class(y) => {
            let lse = log_sum_exp(out);
            let loss = lse - out[y[n]];
            let grad = if want_grad {
                let mut g: Vec<f64> = out.iter().map(|z| (z - lse).exp()).collect();
                g[y[n]] -= 1.0;
                g
            } else {
                Vec::new()
            };
            (loss, grad)
        }
    }
}

fn mean_point(data: &Dataset, rows: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; data.input_dim];
    for &r in rows {
        for (a, x) in c.iter_mut().zip(data.row(r)) {
            *a += x;
        }
    }
    let n = rows.len() as f64;
    c.iter_mut().for_each(|a| *a /= n);
    c
}

/// Mean loss (and optionally gradient) over the listed rows.
fn evaluate(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    rows: &[usize],
    want_grad: bool,
) -> (f64, ParamVector) {
    let p = params.as_slice();
    let reg = 0.5 * spec.l2_reg * params.norm_sq();
    let mut grad = vec![0.0; p.len()];

    if spec.kind == ModelKind::Quadratic {
        let c = mean_point(data, rows);
        let diff: Vec<f64> = p.iter().zip(&c).map(|(t, c)| t - c).collect();
        let loss = 0.5 * dot(&diff, &diff) + reg;
        if want_grad {
            for (g, (d, t)) in grad.iter_mut().zip(diff.iter().zip(p)) {
                *g = d + spec.l2_reg * t;
            }
        }
        return (loss, ParamVector::new(grad));
    }

    let (i, o, h) = (spec.input_dim, spec.output_dim, spec.hidden_dim);
    let inv_n = 1.0 / rows.len() as f64;
    let mut total = 0.0;
    for &n in rows {
        let x = data.row(n);
        let (out, hidden) = forward(spec, p, x);
        let (l, dout) = output_loss(&out, &data.labels, n, want_grad);
        total += l;
        if !want_grad {
            continue;
        }
        match spec.kind {
            ModelKind::Linear | ModelKind::Logistic => {
                let (gw, gb) = grad.split_at_mut(o * i);
                for r in 0..o {
                    let d = dout[r] * inv_n;
                    for (gw, xv) in gw[r * i..(r + 1) * i].iter_mut().zip(x) {
                        *gw += d * xv;
                    }
                    gb[r] += d;
                }
            }
            ModelKind::Mlp2 => {
                let w2 = &p[h * i + h..h * i + h + o * h];
                let (gw1, rest) = grad.split_at_mut(h * i);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(o * h);
                let mut dhidden = vec![0.0; h];
                for r in 0..o {
                    let d = dout[r] * inv_n;
                    for c in 0..h {
                        gw2[r * h + c] += d * hidden[c];
                        dhidden[c] += d * w2[r * h + c];
                    }
                    gb2[r] += d;
                }
                for c in 0..h {
                    let dpre = dhidden[c] * (1.0 - hidden[c] * hidden[c]);
                    for (gw, xv) in gw1[c * i..(c + 1) * i].iter_mut().zip(x) {
                        *gw += dpre * xv;
                    }
                    gb1[c] += dpre;
                }
            }
            ModelKind::Quadratic => unreachable!(),
        }
    }
    if want_grad && spec.l2_reg > 0.0 {
        for (g, t) in grad.iter_mut().zip(p) {
            *g += spec.l2_reg * t;
        }
    }
    (total * inv_n + reg, ParamVector::new(grad))
}

fn all_rows(data: &Dataset) -> Vec<usize> {
    (0..data.len()).collect()
}

/// Mean loss over `data`: MSE for real targets, cross-entropy for classes.
pub fn loss(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<f64, ModelError> {
    check(spec, params, data)?;
    Ok(evaluate(spec, params, data, &all_rows(data), false).0)
}

pub fn gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
) -> Result<ParamVector, ModelError> {
    check(spec, params, data)?;
    Ok(evaluate(spec, params, data, &all_rows(data), true).1)
}

pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
) -> Result<(f64, ParamVector), ModelError> {
    check(spec, params, data)?;
    Ok(evaluate(spec, params, data, &all_rows(data), true))
}

/// Mean gradient over a minibatch of row indices.
pub fn batch_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    rows: &[usize],
) -> Result<ParamVector, ModelError> {
    check(spec, params, data)?;
    if rows.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    Ok(evaluate(spec, params, data, rows, true).1)
}

/// Fraction of samples whose argmax output matches the label; ties go to
/// the lowest class index.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<f64, ModelError> {
    check(spec, params, data)?;
    let labels = match (&data.labels, spec.kind) {
        (Labels::Class(c), ModelKind::Logistic | ModelKind::Mlp2) => c,
        _ => return Err(ModelError::NotClassification),
    };
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(n, &y)| {
            let (out, _) = forward(spec, params.as_slice(), data.row(*n));
            argmax_first(&out) == y
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Upper bound on the gradient-Lipschitz constant of the loss on `data`,
/// where one is available in closed form.
///
/// Uses `lambda_max(X^T X / n) <= mean |x~|^2` (with `x~` the bias-augmented
/// input); the softmax cross-entropy Hessian in the logits is at most `1/2`.
pub fn smoothness_bound(spec: &ModelSpec, data: &Dataset) -> Option<f64> {
    let mean_sq = || {
        let n = data.len() as f64;
        (0..data.len())
            .map(|r| 1.0 + dot(data.row(r), data.row(r)))
            .sum::<f64>()
            / n
    };
    match spec.kind {
        ModelKind::Quadratic => Some(1.0 + spec.l2_reg),
        ModelKind::Linear => Some(2.0 * mean_sq() + spec.l2_reg),
        ModelKind::Logistic => Some(0.5 * mean_sq() + spec.l2_reg),
        ModelKind::Mlp2 => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class_data() -> Dataset {
        Dataset::new(
            2,
            vec![1.0, 0.0, -1.0, 0.5, 0.3, 0.3, 2.0, -1.0],
            Labels::Class(vec![0, 1, 1, 0]),
        )
        .unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelSpec::linear(2).param_count(), 3);
        assert_eq!(ModelSpec::logistic(4, 3).param_count(), 15);
        assert_eq!(ModelSpec::mlp2(4, 5, 3).param_count(), 20 + 5 + 15 + 3);
        assert_eq!(ModelSpec::quadratic(7).param_count(), 7);
        assert_eq!(init_params(&ModelSpec::linear(2), 1).len(), 3);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = ModelSpec::mlp2(4, 9, 3);
        let a = init_params(&spec, 7);
        assert_eq!(a, init_params(&spec, 7));
        assert_ne!(a, init_params(&spec, 8));
        let first = spec.hidden_dim * spec.input_dim + spec.hidden_dim;
        assert!(a.as_slice()[..first].iter().all(|v| v.abs() <= 0.5));
        assert!(a.as_slice()[first..].iter().all(|v| v.abs() <= 1.0 / 3.0));
    }

    #[test]
    fn zero_linear_model_on_zero_targets() {
        let data = Dataset::new(2, vec![1.0, 2.0, 3.0, 4.0], Labels::Real(vec![0.0, 0.0])).unwrap();
        let spec = ModelSpec::linear(2);
        assert_eq!(loss(&spec, &ParamVector::zeros(3), &data).unwrap(), 0.0);
    }

    #[test]
    fn zero_logistic_is_ln2() {
        let spec = ModelSpec::logistic(2, 2);
        let l = loss(&spec, &ParamVector::zeros(6), &two_class_data()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_params_accuracy_follows_tie_rule() {
        let spec = ModelSpec::logistic(2, 2);
        let acc = accuracy(&spec, &ParamVector::zeros(6), &two_class_data()).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn separating_params_give_full_accuracy() {
        let data = Dataset::new(
            1,
            vec![-2.0, -1.0, 1.0, 3.0],
            Labels::Class(vec![0, 0, 1, 1]),
        )
        .unwrap();
        let spec = ModelSpec::logistic(1, 2);
        let p = ParamVector::new(vec![-1.0, 1.0, 0.0, 0.0]);
        assert_eq!(accuracy(&spec, &p, &data).unwrap(), 1.0);
    }

    #[test]
    fn quadratic_gradient_is_offset() {
        let data = Dataset::new(2, vec![1.0, -2.0], Labels::Real(vec![0.0])).unwrap();
        let spec = ModelSpec::quadratic(2);
        let theta = ParamVector::new(vec![3.0, 1.0]);
        assert_eq!(
            gradient(&spec, &theta, &data).unwrap().as_slice(),
            &[2.0, 3.0]
        );
        assert_eq!(loss(&spec, &theta, &data).unwrap(), 0.5 * (4.0 + 9.0));
        assert_eq!(smoothness_bound(&spec, &data), Some(1.0));
    }

    #[test]
    fn single_sample_gradient() {
        let data = Dataset::new(2, vec![0.5, -1.0], Labels::Real(vec![2.0])).unwrap();
        let spec = ModelSpec::linear(2);
        let p = ParamVector::new(vec![1.0, 1.0, 0.0]);
        // residual = 0.5 - 1 - 2 = -2.5
        let g = gradient(&spec, &p, &data).unwrap();
        assert_eq!(g.as_slice(), &[-2.5, 5.0, -5.0]);
    }

    #[test]
    fn error_paths() {
        let spec = ModelSpec::logistic(2, 2);
        let data = two_class_data();
        assert!(matches!(
            loss(&spec, &ParamVector::zeros(5), &data),
            Err(ModelError::ParamLength { .. })
        ));
        assert!(matches!(
            loss(&ModelSpec::logistic(3, 2), &ParamVector::zeros(8), &data),
            Err(ModelError::InputDim { .. })
        ));
        assert!(matches!(
            loss(&ModelSpec::logistic(2, 1), &ParamVector::zeros(3), &data),
            Err(ModelError::Labels(_))
        ));
        let reg = Dataset::new(2, vec![1.0, 2.0], Labels::Real(vec![1.0])).unwrap();
        assert_eq!(
            accuracy(&ModelSpec::linear(2), &ParamVector::zeros(3), &reg),
            Err(ModelError::NotClassification)
        );
        assert!(Dataset::new(2, vec![1.0], Labels::Real(vec![1.0])).is_err());
        assert!(ModelSpec::mlp2(2, 0, 2).validate().is_err());
    }

    #[test]
    fn l2_term_added() {
        let data = Dataset::new(1, vec![0.0], Labels::Real(vec![0.0])).unwrap();
        let spec = ModelSpec::linear(1).with_l2(0.5);
        let p = ParamVector::new(vec![2.0, 0.0]);
        assert_eq!(loss(&spec, &p, &data).unwrap(), 0.25 * 4.0);
        assert_eq!(gradient(&spec, &p, &data).unwrap().as_slice(), &[1.0, 0.0]);
    }
}
