//! Self-contained invariant suites behind `adafed verify`.
//!
//! Every suite draws its own random instances from a fixed seed, so a
//! report is reproducible bit for bit.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::aggregation::{
    min_norm_in_hull, orthogonalize, safe_step_size, solve_lambda, step_size_bound,
    AggregationError, AggregatorSpec, ClientUpdate, DEFAULT_EPS_DEP, DEFAULT_EPS_LOSS,
    DEFAULT_HULL_MAX_ITERS, DEFAULT_HULL_TOL,
};
use crate::federation::{local_train, mix, LocalOptimizer};
use crate::models::{self, Dataset, Labels, ModelKind, ModelSpec};
use crate::ParamVector;

pub const IDENTITY_TOL: f64 = 1e-8;
pub const ORTHOGONALITY_TOL: f64 = 1e-8;
pub const ORACLE_TOL: f64 = 1e-6;
pub const DESCENT_TOL: f64 = 1e-12;
pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;
pub const GAMMAS: [f64; 4] = [0.0, 0.1, 1.0, 5.0];

/// Closed-form weight solver under test; swapped out by mutation tests.
pub type LambdaSolver = dyn Fn(&[ParamVector]) -> Result<(Vec<f64>, f64), AggregationError> + Sync;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    /// Largest residual, in the units of `limit`.
    pub worst: f64,
    pub limit: f64,
    pub cases: usize,
    pub elapsed: Duration,
    pub notes: Vec<String>,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<20} {}  worst {:.3e} (limit {:.1e}) over {} cases in {:.2?}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.worst,
            self.limit,
            self.cases,
            self.elapsed
        )?;
        for n in &self.notes {
            write!(f, "\n    {n}")?;
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random aggregation input: `K` in `[2, 16]`, `d` in `[K, 256]`, standard
/// normal gradients and losses uniform in `(0.1, 10)`.
pub fn random_updates(rng: &mut ChaCha8Rng) -> Vec<ClientUpdate> {
    let k = rng.random_range(2..=16usize);
    let d = rng.random_range(k..=256usize);
    (0..k)
        .map(|i| {
            let g = normal_vec(rng, d);
            ClientUpdate::new(i as u32, g.into(), rng.random_range(0.1..10.0), 1)
        })
        .collect()
}

/// Statistics of the directional-derivative identity
/// `g_k . d = (alpha / 2) s_k` over random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityStats {
    pub instances: usize,
    pub checks: usize,
    /// Largest `|g_k . d - rhs| / rhs`.
    pub worst_relative: f64,
    /// Per gamma in [`GAMMAS`].
    pub worst_relative_by_gamma: [f64; 4],
    pub strict_failures: usize,
    /// Largest `|g_k . d - rhs| / (tol * rhs + 8 u sum_j |g_kj d_j|)`; the
    /// second term is the error already committed by rounding `d` to f64.
    pub worst_floor_ratio: f64,
    pub min_derivative: f64,
    pub worst_orthogonality: f64,
    pub worst_span_residual: f64,
    /// Largest relative spread of `g_k . d` across clients for gamma = 0.
    pub worst_gamma0_spread: f64,
    pub ordering_violations: usize,
    pub dropped: usize,
    pub elapsed: Duration,
}

pub fn identity_stats(instances: usize, seed: u64, solver: &LambdaSolver) -> IdentityStats {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = IdentityStats {
        instances,
        checks: 0,
        worst_relative: 0.0,
        worst_relative_by_gamma: [0.0; 4],
        strict_failures: 0,
        worst_floor_ratio: 0.0,
        min_derivative: f64::INFINITY,
        worst_orthogonality: 0.0,
        worst_span_residual: 0.0,
        worst_gamma0_spread: 0.0,
        ordering_violations: 0,
        dropped: 0,
        elapsed: Duration::ZERO,
    };
    for inst in 0..instances {
        let gi = inst % GAMMAS.len();
        let gamma = GAMMAS[gi];
        let updates = random_updates(&mut rng);
        let orth = match orthogonalize(&updates, gamma, DEFAULT_EPS_LOSS, DEFAULT_EPS_DEP) {
            Ok(o) => o,
            Err(_) => {
                s.dropped += updates.len();
                s.min_derivative = f64::NEG_INFINITY;
                continue;
            }
        };
        s.dropped += orth.dropped.len();
        let Ok((lambda, alpha)) = solver(&orth.gradients) else {
            s.min_derivative = f64::NEG_INFINITY;
            continue;
        };
        let mut d = ParamVector::zeros(orth.gradients[0].len());
        for (w, v) in lambda.iter().zip(&orth.gradients) {
            d.axpy(*w, v);
        }

        let mut derivs = Vec::with_capacity(orth.client_ids.len());
        for (j, id) in orth.client_ids.iter().enumerate() {
            let g = &updates[*id as usize].gradient;
            let lhs = g.dot_compensated(&d);
            let rhs = alpha / 2.0 * orth.scaled_losses[j];
            let err = (lhs - rhs).abs();
            let rel = err / rhs.abs();
            let floor: f64 = g.iter().zip(d.iter()).map(|(a, b)| (a * b).abs()).sum();
            let tol = IDENTITY_TOL * rhs.abs() + 4.0 * f64::EPSILON * floor;
            s.checks += 1;
            s.worst_relative = s.worst_relative.max(rel);
            s.worst_relative_by_gamma[gi] = s.worst_relative_by_gamma[gi].max(rel);
            if !(rel <= IDENTITY_TOL) {
                s.strict_failures += 1;
            }
            s.worst_floor_ratio = s.worst_floor_ratio.max(err / tol);
            s.min_derivative = s.min_derivative.min(lhs);
            derivs.push((orth.scaled_losses[j], lhs));
        }

        for a in 0..orth.gradients.len() {
            let x = &orth.gradients[a];
            for y in &orth.gradients[..a] {
                let r = x.dot(y).abs() / (x.norm() * y.norm());
                s.worst_orthogonality = s.worst_orthogonality.max(r);
            }
        }
        s.worst_span_residual =
            s.worst_span_residual
                .max(span_residual(&updates, &orth.client_ids, &orth.gradients));

        if gamma == 0.0 {
            let hi = derivs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let lo = derivs.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            s.worst_gamma0_spread = s.worst_gamma0_spread.max((hi - lo) / hi.abs());
        }
        for (i, a) in derivs.iter().enumerate() {
            for b in &derivs[..i] {
                // Only pairs whose scaled losses are clearly ordered.
                if (a.0 - b.0).abs() > 1e-6 * a.0.max(b.0) && (a.0 > b.0) != (a.1 > b.1) {
                    s.ordering_violations += 1;
                }
            }
        }
    }
    s.elapsed = start.elapsed();
    s
}

/// Largest relative distance of a retained `g_k` from the span of
/// `g~_1 .. g~_k`.
fn span_residual(updates: &[ClientUpdate], ids: &[u32], basis: &[ParamVector]) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let g = &updates[*id as usize].gradient;
        let mut r = g.clone();
        for _ in 0..2 {
            for b in &basis[..=k] {
                let c = r.dot(b) / b.norm_sq();
                r.axpy(-c, b);
            }
        }
        worst = worst.max(r.norm() / g.norm());
    }
    worst
}

pub fn identity_suite(instances: usize, seed: u64, solver: &LambdaSolver) -> SuiteReport {
    let s = identity_stats(instances, seed, solver);
    let passed = s.worst_floor_ratio <= 1.0
        && s.min_derivative > 0.0
        && s.worst_gamma0_spread <= IDENTITY_TOL
        && s.ordering_violations == 0;
    SuiteReport {
        name: "derivative-identity",
        passed,
        worst: s.worst_floor_ratio,
        limit: 1.0,
        cases: s.checks,
        elapsed: s.elapsed,
        notes: vec![
            format!(
                "relative error worst {:.3e}; by gamma {:?}: {:.2e} {:.2e} {:.2e} {:.2e}; {} of {} above {:.0e}",
                s.worst_relative,
                GAMMAS,
                s.worst_relative_by_gamma[0],
                s.worst_relative_by_gamma[1],
                s.worst_relative_by_gamma[2],
                s.worst_relative_by_gamma[3],
                s.strict_failures,
                s.checks,
                IDENTITY_TOL
            ),
            format!(
                "min directional derivative {:.3e}; gamma=0 spread {:.3e}; ordering violations {}; dropped {}",
                s.min_derivative, s.worst_gamma0_spread, s.ordering_violations, s.dropped
            ),
        ],
    }
}

pub fn orthogonality_suite(instances: usize, seed: u64) -> SuiteReport {
    let s = identity_stats(instances, seed, &solve_lambda);
    let worst = s.worst_orthogonality.max(s.worst_span_residual);
    SuiteReport {
        name: "orthogonality",
        passed: worst <= ORTHOGONALITY_TOL,
        worst,
        limit: ORTHOGONALITY_TOL,
        cases: s.instances,
        elapsed: s.elapsed,
        notes: vec![format!(
            "max |g~i.g~j|/(|g~i||g~j|) {:.3e}; max span residual {:.3e}",
            s.worst_orthogonality, s.worst_span_residual
        )],
    }
}

/// `k` mutually orthogonal vectors in `R^d` with norms in `[0.5, 2]`.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<ParamVector> {
    let mut out: Vec<ParamVector> = Vec::with_capacity(k);
    while out.len() < k {
        let mut v = ParamVector::new(normal_vec(rng, d));
        for _ in 0..2 {
            for b in &out {
                let c = v.dot(b) / b.norm_sq();
                v.axpy(-c, b);
            }
        }
        let n = v.norm();
        if n > 1e-3 {
            v.scale(rng.random_range(0.5..2.0) / n);
            out.push(v);
        }
    }
    out
}

fn combine(weights: &[f64], vectors: &[ParamVector]) -> ParamVector {
    let mut out = ParamVector::zeros(vectors[0].len());
    for (w, v) in weights.iter().zip(vectors) {
        out.axpy(*w, v);
    }
    out
}

/// Exhaustive simplex grid search at resolution `1 / steps` for K = 2, 3.
pub fn grid_min_norm(vectors: &[ParamVector], steps: usize) -> (Vec<f64>, f64) {
    let h = 1.0 / steps as f64;
    let mut best = (Vec::new(), f64::INFINITY);
    let mut consider = |w: Vec<f64>| {
        let v = combine(&w, vectors).norm_sq();
        if v < best.1 {
            best = (w, v);
        }
    };
    match vectors.len() {
        2 => (0..=steps).for_each(|i| consider(vec![i as f64 * h, 1.0 - i as f64 * h])),
        3 => {
            for i in 0..=steps {
                for j in 0..=steps - i {
                    let (a, b) = (i as f64 * h, j as f64 * h);
                    consider(vec![a, b, (1.0 - a - b).max(0.0)]);
                }
            }
        }
        k => panic!("grid search supports K = 2 or 3, got {k}"),
    }
    best
}

/// Worst discrepancies between the closed form and the two oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleStats {
    pub hull_cases: usize,
    pub worst_lambda: f64,
    pub worst_norm_sq: f64,
    pub grid_cases: usize,
    pub worst_grid_lambda: f64,
    /// Positive when the grid found a smaller norm than the closed form.
    pub worst_grid_excess: f64,
    pub worst_simplex: f64,
    pub elapsed: Duration,
}

pub fn oracle_stats(
    hull_cases: usize,
    grid_cases: usize,
    grid_steps: usize,
    seed: u64,
) -> OracleStats {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = OracleStats {
        hull_cases,
        worst_lambda: 0.0,
        worst_norm_sq: 0.0,
        grid_cases,
        worst_grid_lambda: 0.0,
        worst_grid_excess: f64::NEG_INFINITY,
        worst_simplex: 0.0,
        elapsed: Duration::ZERO,
    };
    for _ in 0..hull_cases {
        let k = rng.random_range(1..=8usize);
        let d = rng.random_range(k..=32usize);
        let vs = random_orthogonal(&mut rng, k, d);
        let (lambda, alpha) = solve_lambda(&vs).expect("nonzero inputs");
        let hull = min_norm_in_hull(&vs, DEFAULT_HULL_MAX_ITERS, DEFAULT_HULL_TOL)
            .expect("nonempty input");
        for (a, b) in lambda.iter().zip(&hull.lambda) {
            s.worst_lambda = s.worst_lambda.max((a - b).abs());
        }
        let closed = alpha / 2.0;
        let oracle = hull.point.norm_sq();
        s.worst_norm_sq = s.worst_norm_sq.max((closed - oracle).abs() / oracle);
        for l in [&lambda, &hull.lambda] {
            let sum: f64 = l.iter().sum();
            let neg = l.iter().fold(0.0f64, |m, v| m.max(-v));
            s.worst_simplex = s.worst_simplex.max((sum - 1.0).abs()).max(neg);
        }
    }
    for case in 0..grid_cases {
        let k = 2 + case % 2;
        let d = rng.random_range(k..=8usize);
        let vs = random_orthogonal(&mut rng, k, d);
        let (lambda, alpha) = solve_lambda(&vs).expect("nonzero inputs");
        let (grid, grid_norm) = grid_min_norm(&vs, grid_steps);
        for (a, b) in lambda.iter().zip(&grid) {
            s.worst_grid_lambda = s.worst_grid_lambda.max((a - b).abs());
        }
        s.worst_grid_excess = s.worst_grid_excess.max(alpha / 2.0 - grid_norm);
    }
    s.elapsed = start.elapsed();
    s
}

pub fn oracle_suite(seed: u64) -> SuiteReport {
    let steps = 1000;
    let s = oracle_stats(500, 40, steps, seed);
    let resolution = 1.0 / steps as f64;
    let passed = s.worst_lambda <= ORACLE_TOL
        && s.worst_norm_sq <= ORACLE_TOL
        && s.worst_simplex <= 1e-10
        && s.worst_grid_lambda <= resolution
        && s.worst_grid_excess <= 1e-12;
    SuiteReport {
        name: "oracle-equivalence",
        passed,
        worst: s.worst_lambda.max(s.worst_norm_sq),
        limit: ORACLE_TOL,
        cases: s.hull_cases + s.grid_cases,
        elapsed: s.elapsed,
        notes: vec![
            format!(
                "hull: lambda {:.3e}, squared norm {:.3e}, simplex {:.3e}",
                s.worst_lambda, s.worst_norm_sq, s.worst_simplex
            ),
            format!(
                "grid (step {resolution:.0e}): lambda {:.3e}, norm excess {:.3e}",
                s.worst_grid_lambda, s.worst_grid_excess
            ),
        ],
    }
}

/// Outcome of running AdaFed with exact gradients on `f_k = 1/2 |x - c_k|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentStats {
    pub rounds: usize,
    pub steps: usize,
    /// Largest single-round increase of any client's loss.
    pub worst_increase: f64,
    pub dropped: usize,
    /// Rounds whose step was shortened for a dropped client.
    pub capped: usize,
    pub aborted: usize,
    pub initial_direction_norm: f64,
    pub final_direction_norm: f64,
    pub elapsed: Duration,
}

pub fn descent_stats(
    clients: usize,
    dim: usize,
    rounds: usize,
    gamma: f64,
    seed: u64,
) -> DescentStats {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<ParamVector> = (0..clients)
        .map(|_| ParamVector::new(normal_vec(&mut rng, dim)))
        .collect();
    let mut theta = ParamVector::new(normal_vec(&mut rng, dim)).scaled(2.0);
    let loss = |theta: &ParamVector| -> Vec<f64> {
        centers
            .iter()
            .map(|c| 0.5 * theta.sub(c).norm_sq())
            .collect()
    };
    let spec = AggregatorSpec::adafed(gamma);
    let mut s = DescentStats {
        rounds,
        steps: 0,
        worst_increase: f64::NEG_INFINITY,
        dropped: 0,
        capped: 0,
        aborted: 0,
        initial_direction_norm: f64::NAN,
        final_direction_norm: f64::NAN,
        elapsed: Duration::ZERO,
    };
    let mut losses = loss(&theta);
    for _ in 0..rounds {
        let updates: Vec<ClientUpdate> = centers
            .iter()
            .zip(&losses)
            .enumerate()
            .map(|(i, (c, f))| ClientUpdate::new(i as u32, theta.sub(c), *f, 1))
            .collect();
        let result = match crate::aggregation::adafed_direction(&updates, &spec) {
            Ok(r) => r,
            Err(_) => {
                s.aborted += 1;
                continue;
            }
        };
        s.dropped += result.dropped_clients.len();
        let mut eta = step_size_bound(&result.scaled_losses, 1.0, 1.0);
        if !result.dropped_clients.is_empty() {
            let dropped = result
                .dropped_clients
                .iter()
                .map(|id| &updates[*id as usize].gradient);
            let cap = safe_step_size(dropped, &result.direction, 1.0);
            if cap < eta {
                s.capped += 1;
                eta = cap;
            }
        }
        theta.axpy(-eta, &result.direction);
        let next = loss(&theta);
        for (a, b) in next.iter().zip(&losses) {
            s.worst_increase = s.worst_increase.max(a - b);
        }
        let n = result.direction.norm();
        if s.steps == 0 {
            s.initial_direction_norm = n;
        }
        s.final_direction_norm = n;
        s.steps += 1;
        losses = next;
    }
    s.elapsed = start.elapsed();
    s
}

pub fn descent_suite(seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    let mut cases = 0;
    let mut notes = Vec::new();
    for (i, gamma) in GAMMAS.iter().enumerate() {
        let s = descent_stats(8, 16, 500, *gamma, mix(&[seed, i as u64]));
        worst = worst.max(s.worst_increase);
        cases += s.steps;
        notes.push(format!(
            "gamma {gamma}: worst increase {:.3e}, |d| {:.3e} -> {:.3e}, dropped {}, capped {}, aborted {}",
            s.worst_increase,
            s.initial_direction_norm,
            s.final_direction_norm,
            s.dropped,
            s.capped,
            s.aborted
        ));
    }
    SuiteReport {
        name: "bounded-descent",
        passed: worst <= DESCENT_TOL,
        worst,
        limit: DESCENT_TOL,
        cases,
        elapsed: start.elapsed(),
        notes,
    }
}

/// Central finite-difference gradient of `loss`.
pub fn finite_difference_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    step: f64,
) -> Result<ParamVector, models::ModelError> {
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let x = params[i];
        probe[i] = x + step;
        let up = models::loss(spec, &probe, data)?;
        probe[i] = x - step;
        let down = models::loss(spec, &probe, data)?;
        probe[i] = x;
        out.push((up - down) / (2.0 * step));
    }
    Ok(ParamVector::new(out))
}

/// Random model, parameters and dataset of the given kind.
pub fn random_triple(rng: &mut ChaCha8Rng, kind: ModelKind) -> (ModelSpec, ParamVector, Dataset) {
    let input_dim = rng.random_range(1..=5usize);
    let n = rng.random_range(1..=8usize);
    let mut spec = match kind {
        ModelKind::Linear => ModelSpec::linear(input_dim),
        ModelKind::Logistic => ModelSpec::logistic(input_dim, rng.random_range(2..=4)),
        ModelKind::Mlp2 => {
            ModelSpec::mlp2(input_dim, rng.random_range(1..=5), rng.random_range(2..=4))
        }
        ModelKind::Quadratic => ModelSpec::quadratic(input_dim),
    };
    if rng.random_bool(0.5) {
        spec = spec.with_l2(rng.random_range(0.0..0.5));
    }
    let params = ParamVector::new(normal_vec(rng, spec.param_count())).scaled(0.7);
    let features = normal_vec(rng, n * input_dim);
    let labels = match kind {
        ModelKind::Linear | ModelKind::Quadratic => Labels::Real(normal_vec(rng, n)),
        ModelKind::Logistic | ModelKind::Mlp2 => Labels::Class(
            (0..n)
                .map(|_| rng.random_range(0..spec.output_dim))
                .collect(),
        ),
    };
    let data = Dataset::new(input_dim, features, labels).expect("consistent shapes");
    (spec, params, data)
}

pub const MODEL_KINDS: [ModelKind; 4] = [
    ModelKind::Linear,
    ModelKind::Logistic,
    ModelKind::Mlp2,
    ModelKind::Quadratic,
];

/// Worst `max_i |g_i - FD_i| / (1 + |g_i|)` per model kind.
pub fn gradient_check(triples_per_kind: usize, seed: u64) -> Vec<(ModelKind, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MODEL_KINDS
        .iter()
        .map(|&kind| {
            let mut worst: f64 = 0.0;
            for _ in 0..triples_per_kind {
                let (spec, params, data) = random_triple(&mut rng, kind);
                let g = models::gradient(&spec, &params, &data).expect("valid triple");
                let fd = finite_difference_gradient(&spec, &params, &data, FD_STEP)
                    .expect("valid triple");
                for (a, b) in g.iter().zip(fd.iter()) {
                    worst = worst.max((a - b).abs() / (1.0 + a.abs()));
                }
            }
            (kind, worst)
        })
        .collect()
}

pub fn gradient_suite(seed: u64) -> SuiteReport {
    let start = Instant::now();
    let per_kind = 100;
    let results = gradient_check(per_kind, seed);
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    SuiteReport {
        name: "fd-gradients",
        passed: worst <= FD_TOL,
        worst,
        limit: FD_TOL,
        cases: per_kind * results.len(),
        elapsed: start.elapsed(),
        notes: vec![results
            .iter()
            .map(|(k, w)| format!("{k:?} {w:.3e}"))
            .collect::<Vec<_>>()
            .join(", ")],
    }
}

/// Local-training drift: `|pseudo_e - lr grad f(theta_0)|` against
/// `lr * e * l`, where `l` is the largest gradient norm seen during the run.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftStats {
    pub runs: usize,
    /// Largest `drift / (lr e l)`.
    pub worst_ratio: f64,
    pub elapsed: Duration,
}

pub fn drift_stats(runs: usize, seed: u64) -> DriftStats {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for run in 0..runs {
        let kind = MODEL_KINDS[run % MODEL_KINDS.len()];
        let (spec, params, data) = random_triple(&mut rng, kind);
        let epochs = rng.random_range(1..=10usize);
        let lr = rng.random_range(0.001..0.5);
        let out = local_train(&spec, &params, &data, epochs, lr, LocalOptimizer::Gd, 1, 0)
            .expect("valid triple");
        let g0 = models::gradient(&spec, &params, &data).expect("valid triple");
        let drift = out.pseudo_gradient.sub(&g0.scaled(lr)).norm();
        let bound = lr * epochs as f64 * out.max_step_gradient_norm;
        let ratio = if bound > 0.0 {
            drift / bound
        } else if drift == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(ratio);
    }
    DriftStats {
        runs,
        worst_ratio: worst,
        elapsed: start.elapsed(),
    }
}

pub fn drift_suite(seed: u64) -> SuiteReport {
    let s = drift_stats(100, seed);
    SuiteReport {
        name: "local-drift",
        passed: s.worst_ratio <= 1.0 + 1e-12,
        worst: s.worst_ratio,
        limit: 1.0,
        cases: s.runs,
        elapsed: s.elapsed,
        notes: vec!["ratio of measured drift to lr * e * l".into()],
    }
}

/// All suites with the default instance counts.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![
        identity_suite(1000, seed, &solve_lambda),
        orthogonality_suite(1000, seed),
        oracle_suite(mix(&[seed, 1])),
        descent_suite(mix(&[seed, 2])),
        gradient_suite(mix(&[seed, 3])),
        drift_suite(mix(&[seed, 4])),
    ]
}
