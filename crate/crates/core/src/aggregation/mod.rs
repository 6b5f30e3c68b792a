//! Server-side aggregation rules.
//!
//! The AdaFed rule runs in two phases. First the client pseudo-gradients are
//! orthogonalized with a Gram-Schmidt pass in which each residual is divided
//! by the client's loss raised to `gamma`, minus the accumulated projection
//! coefficients. Second, the minimum-norm element of the convex hull of the
//! orthogonal vectors is found in closed form. The resulting direction `d`
//! satisfies `g_k · d = (alpha / 2) |f_k|^gamma` for every retained client.
//!
//! FedAvg and a Frank-Wolfe minimum-norm solver (the MGDA baseline, and the
//! oracle for the closed form) live alongside.

mod adafed;
mod fedavg;
mod hull;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::param::ParamVector;
pub use adafed::{
    adafed_direction, orthogonalize, safe_step_size, solve_lambda, step_size_bound, Orthogonalized,
    DEFAULT_EPS_DEP, DEFAULT_EPS_LOSS,
};
pub use fedavg::{fedavg_direction, fedavg_weights};
pub use hull::{min_norm_in_hull, MinNormResult, DEFAULT_HULL_MAX_ITERS, DEFAULT_HULL_TOL};

pub type ClientId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("no client updates to aggregate")]
    Empty,
    #[error("dimension mismatch: client {client_id} sent {found} values, expected {expected}")]
    DimensionMismatch {
        client_id: ClientId,
        expected: usize,
        found: usize,
    },
    #[error("client {client_id} sent a non-finite gradient or loss")]
    NonFinite { client_id: ClientId },
    #[error("client {client_id} reported a negative loss {loss}")]
    NegativeLoss { client_id: ClientId, loss: f64 },
    #[error("duplicate client id {0} in one round")]
    DuplicateClient(ClientId),
    #[error("every client was dropped as degenerate ({0} submitted)")]
    AllDropped(usize),
    #[error("vector {index} has zero norm")]
    ZeroNorm { index: usize },
    #[error("invalid aggregator setting: {0}")]
    InvalidSpec(String),
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: ClientId,
    pub gradient: ParamVector,
    pub loss: f64,
    pub num_samples: usize,
}

impl ClientUpdate {
    pub fn new(client_id: ClientId, gradient: ParamVector, loss: f64, num_samples: usize) -> Self {
        Self {
            client_id,
            gradient,
            loss,
            num_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// The Gram-Schmidt residual vanished: the gradient lies in the span of
    /// the clients processed before it.
    LinearlyDependent,
    /// The loss-scaled denominator cancelled to (near) zero.
    DegenerateDenominator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AggregationWarning {
    Dropped {
        client_id: ClientId,
        reason: DropReason,
    },
    NegativeDenominator {
        client_id: ClientId,
        denominator: f64,
    },
    HullNotConverged {
        gap: f64,
        iterations: usize,
    },
}

/// Output of the AdaFed rule. Vectors are aligned with `client_ids`, which
/// lists retained clients in processing (ascending id) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationResult {
    pub client_ids: Vec<ClientId>,
    pub orthogonal_gradients: Vec<ParamVector>,
    pub lambda: Vec<f64>,
    pub alpha: f64,
    pub direction: ParamVector,
    pub dropped_clients: Vec<ClientId>,
    /// `max(|f_k|, eps_loss)^gamma` for each retained client.
    pub scaled_losses: Vec<f64>,
    pub warnings: Vec<AggregationWarning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    #[serde(alias = "AdaFed")]
    Adafed,
    #[serde(alias = "FedAvg")]
    Fedavg,
    #[serde(alias = "MGDAMinNorm", alias = "mgda")]
    MgdaMinNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedAvgWeights {
    Uniform,
    #[default]
    BySampleCount,
}

/// Which aggregation rule the server applies, with its knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub fedavg_weights: Option<FedAvgWeights>,
    #[serde(default = "default_eps_loss")]
    pub eps_loss: f64,
    #[serde(default = "default_eps_dep")]
    pub eps_dep: f64,
    #[serde(default = "default_hull_iters")]
    pub hull_max_iters: usize,
    #[serde(default = "default_hull_tol")]
    pub hull_tol: f64,
}

fn default_eps_loss() -> f64 {
    DEFAULT_EPS_LOSS
}
fn default_eps_dep() -> f64 {
    DEFAULT_EPS_DEP
}
fn default_hull_iters() -> usize {
    DEFAULT_HULL_MAX_ITERS
}
fn default_hull_tol() -> f64 {
    DEFAULT_HULL_TOL
}

impl AggregatorSpec {
    pub fn adafed(gamma: f64) -> Self {
        Self {
            kind: AggregatorKind::Adafed,
            gamma: Some(gamma),
            ..Self::base(AggregatorKind::Adafed)
        }
    }

    pub fn fedavg(weights: FedAvgWeights) -> Self {
        Self {
            fedavg_weights: Some(weights),
            ..Self::base(AggregatorKind::Fedavg)
        }
    }

    pub fn mgda() -> Self {
        Self::base(AggregatorKind::MgdaMinNorm)
    }

    fn base(kind: AggregatorKind) -> Self {
        Self {
            kind,
            gamma: None,
            fedavg_weights: None,
            eps_loss: DEFAULT_EPS_LOSS,
            eps_dep: DEFAULT_EPS_DEP,
            hull_max_iters: DEFAULT_HULL_MAX_ITERS,
            hull_tol: DEFAULT_HULL_TOL,
        }
    }

    /// `gamma` for AdaFed; zero for the others.
    pub fn gamma_or_zero(&self) -> f64 {
        self.gamma.unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), AggregationError> {
        let bad = |m: &str| Err(AggregationError::InvalidSpec(m.to_string()));
        match self.kind {
            AggregatorKind::Adafed => match self.gamma {
                None => return bad("adafed requires gamma"),
                Some(g) if !g.is_finite() || g < 0.0 => {
                    return bad("gamma must be finite and non-negative")
                }
                _ => {}
            },
            _ if self.gamma.is_some() => return bad("gamma only applies to adafed"),
            _ => {}
        }
        if self.fedavg_weights.is_some() && self.kind != AggregatorKind::Fedavg {
            return bad("fedavg_weights only applies to fedavg");
        }
        if !(self.eps_loss > 0.0 && self.eps_loss.is_finite()) {
            return bad("eps_loss must be positive");
        }
        if !(self.eps_dep > 0.0 && self.eps_dep < 1.0) {
            return bad("eps_dep must lie in (0, 1)");
        }
        if self.hull_max_iters == 0 || !(self.hull_tol > 0.0) {
            return bad("hull_max_iters and hull_tol must be positive");
        }
        Ok(())
    }

    /// Short label such as `adafed(gamma=1)` used in reports.
    pub fn label(&self) -> String {
        match self.kind {
            AggregatorKind::Adafed => format!("adafed(gamma={})", self.gamma_or_zero()),
            AggregatorKind::Fedavg => match self.fedavg_weights.unwrap_or_default() {
                FedAvgWeights::Uniform => "fedavg(uniform)".into(),
                FedAvgWeights::BySampleCount => "fedavg(by_sample_count)".into(),
            },
            AggregatorKind::MgdaMinNorm => "mgda_min_norm".into(),
        }
    }
}

/// Rule-independent view of one round's aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub client_ids: Vec<ClientId>,
    pub weights: Vec<f64>,
    pub direction: ParamVector,
    pub dropped: Vec<ClientId>,
    /// Present for AdaFed only.
    pub alpha: Option<f64>,
    /// Losses as the rule consumed them (floored and raised to gamma for AdaFed).
    pub scaled_losses: Vec<f64>,
    pub warnings: Vec<AggregationWarning>,
}

/// Applies `spec` to a round's updates. Updates are processed in ascending
/// client id order regardless of the order they arrive in.
pub fn aggregate(
    updates: &[ClientUpdate],
    spec: &AggregatorSpec,
) -> Result<Aggregate, AggregationError> {
    spec.validate()?;
    let sorted = sorted_by_client(updates)?;
    match spec.kind {
        AggregatorKind::Adafed => {
            let r = adafed_direction(&sorted, spec)?;
            Ok(Aggregate {
                client_ids: r.client_ids,
                weights: r.lambda,
                direction: r.direction,
                dropped: r.dropped_clients,
                alpha: Some(r.alpha),
                scaled_losses: r.scaled_losses,
                warnings: r.warnings,
            })
        }
        AggregatorKind::Fedavg => {
            let rule = spec.fedavg_weights.unwrap_or_default();
            let weights = fedavg_weights(&sorted, rule)?;
            let direction = fedavg_direction(&sorted, rule)?;
            Ok(Aggregate {
                client_ids: sorted.iter().map(|u| u.client_id).collect(),
                weights,
                direction,
                dropped: Vec::new(),
                alpha: None,
                scaled_losses: sorted.iter().map(|u| u.loss).collect(),
                warnings: Vec::new(),
            })
        }
        AggregatorKind::MgdaMinNorm => {
            let grads: Vec<ParamVector> = sorted.iter().map(|u| u.gradient.clone()).collect();
            let hull = min_norm_in_hull(&grads, spec.hull_max_iters, spec.hull_tol)?;
            let mut warnings = Vec::new();
            if !hull.converged {
                warnings.push(AggregationWarning::HullNotConverged {
                    gap: hull.gap,
                    iterations: hull.iterations,
                });
            }
            Ok(Aggregate {
                client_ids: sorted.iter().map(|u| u.client_id).collect(),
                weights: hull.lambda,
                direction: hull.point,
                dropped: Vec::new(),
                alpha: None,
                scaled_losses: sorted.iter().map(|u| u.loss).collect(),
                warnings,
            })
        }
    }
}

pub(crate) fn sorted_by_client(
    updates: &[ClientUpdate],
) -> Result<Vec<ClientUpdate>, AggregationError> {
    validate_updates(updates)?;
    let mut sorted = updates.to_vec();
    sorted.sort_by_key(|u| u.client_id);
    for w in sorted.windows(2) {
        if w[0].client_id == w[1].client_id {
            return Err(AggregationError::DuplicateClient(w[0].client_id));
        }
    }
    Ok(sorted)
}

pub(crate) fn validate_updates(updates: &[ClientUpdate]) -> Result<usize, AggregationError> {
    let first = updates.first().ok_or(AggregationError::Empty)?;
    let dim = first.gradient.len();
    for u in updates {
        if u.gradient.len() != dim {
            return Err(AggregationError::DimensionMismatch {
                client_id: u.client_id,
                expected: dim,
                found: u.gradient.len(),
            });
        }
        if !u.gradient.is_finite() || !u.loss.is_finite() {
            return Err(AggregationError::NonFinite {
                client_id: u.client_id,
            });
        }
        if u.loss < 0.0 {
            return Err(AggregationError::NegativeLoss {
                client_id: u.client_id,
                loss: u.loss,
            });
        }
    }
    Ok(dim)
}
