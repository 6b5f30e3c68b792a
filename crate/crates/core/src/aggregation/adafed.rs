use log::{debug, warn};

use super::{
    sorted_by_client, validate_updates, AggregationError, AggregationResult, AggregationWarning,
    AggregatorKind, AggregatorSpec, ClientId, ClientUpdate, DropReason, ParamVector,
};

pub const DEFAULT_EPS_LOSS: f64 = 1e-12;
pub const DEFAULT_EPS_DEP: f64 = 1e-9;

/// Phase-one output. Vectors are aligned with `client_ids` (retained clients,
/// in the order they were processed).
#[derive(Debug, Clone, PartialEq)]
pub struct Orthogonalized {
    pub client_ids: Vec<ClientId>,
    pub gradients: Vec<ParamVector>,
    pub scaled_losses: Vec<f64>,
    pub dropped: Vec<ClientId>,
    pub warnings: Vec<AggregationWarning>,
}

/// Loss-scaled Gram-Schmidt over the updates, in the order given.
///
/// For the k-th retained client with residual `r_k = g_k - sum_i c_i g~_i`
/// (where `c_i = g_k . g~_i / |g~_i|^2`), the output is
/// `g~_k = r_k / (s_k - sum_i c_i)` with `s_k = max(|f_k|, eps_loss)^gamma`.
/// The first retained client therefore gets `g_1 / s_1`.
///
/// Projections are applied twice (modified Gram-Schmidt with one
/// re-orthogonalization pass); the second-pass coefficients are folded into
/// the same sums so `g_k = (s_k - sum c) g~_k + sum c_i g~_i` holds to
/// rounding.
///
/// A client is dropped when `|r_k| < eps_dep |g_k|` or when
/// `|s_k - sum c| < eps_dep * s_k`.
pub fn orthogonalize(
    updates: &[ClientUpdate],
    gamma: f64,
    eps_loss: f64,
    eps_dep: f64,
) -> Result<Orthogonalized, AggregationError> {
    validate_updates(updates)?;
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(AggregationError::InvalidSpec(format!(
            "gamma must be finite and non-negative, got {gamma}"
        )));
    }

    let mut out = Orthogonalized {
        client_ids: Vec::with_capacity(updates.len()),
        gradients: Vec::with_capacity(updates.len()),
        scaled_losses: Vec::with_capacity(updates.len()),
        dropped: Vec::new(),
        warnings: Vec::new(),
    };
    let mut norms_sq: Vec<f64> = Vec::with_capacity(updates.len());

    for update in updates {
        let g = &update.gradient;
        let scaled_loss = update.loss.abs().max(eps_loss).powf(gamma);

        let mut residual = g.clone();
        let mut coef_sum = 0.0;
        for _pass in 0..2 {
            for (basis, &nsq) in out.gradients.iter().zip(&norms_sq) {
                let c = residual.dot_compensated(basis) / nsq;
                residual.axpy(-c, basis);
                coef_sum += c;
            }
        }

        let g_norm = g.norm();
        let r_norm = residual.norm();
        if g_norm == 0.0 || r_norm < eps_dep * g_norm {
            drop_client(&mut out, update.client_id, DropReason::LinearlyDependent);
            continue;
        }
        let denominator = scaled_loss - coef_sum;
        if !(denominator.abs() >= eps_dep * scaled_loss) {
            drop_client(
                &mut out,
                update.client_id,
                DropReason::DegenerateDenominator,
            );
            continue;
        }
        if denominator < 0.0 {
            debug!(
                "client {}: negative orthogonalization denominator {denominator:e}",
                update.client_id
            );
            out.warnings.push(AggregationWarning::NegativeDenominator {
                client_id: update.client_id,
                denominator,
            });
        }

        residual.scale(1.0 / denominator);
        let nsq = residual.dot_compensated(&residual);
        if !(nsq > 0.0 && nsq.is_finite()) {
            drop_client(
                &mut out,
                update.client_id,
                DropReason::DegenerateDenominator,
            );
            continue;
        }
        norms_sq.push(nsq);
        out.gradients.push(residual);
        out.client_ids.push(update.client_id);
        out.scaled_losses.push(scaled_loss);
    }

    if out.gradients.is_empty() {
        return Err(AggregationError::AllDropped(updates.len()));
    }
    Ok(out)
}

fn drop_client(out: &mut Orthogonalized, client_id: ClientId, reason: DropReason) {
    warn!("dropping client {client_id} from aggregation: {reason:?}");
    out.dropped.push(client_id);
    out.warnings
        .push(AggregationWarning::Dropped { client_id, reason });
}

/// Closed-form minimum-norm weights over mutually orthogonal vectors:
/// `lambda_k = (1/|v_k|^2) / sum_j (1/|v_j|^2)` and
/// `alpha = 2 / sum_j (1/|v_j|^2)`.
pub fn solve_lambda(orthogonal: &[ParamVector]) -> Result<(Vec<f64>, f64), AggregationError> {
    if orthogonal.is_empty() {
        return Err(AggregationError::Empty);
    }
    let inv: Vec<f64> = orthogonal
        .iter()
        .enumerate()
        .map(|(index, v)| {
            let nsq = v.norm_sq();
            if nsq > 0.0 && nsq.is_finite() {
                Ok(1.0 / nsq)
            } else {
                Err(AggregationError::ZeroNorm { index })
            }
        })
        .collect::<Result<_, _>>()?;
    let total: f64 = inv.iter().sum();
    let lambda = inv.iter().map(|v| v / total).collect();
    Ok((lambda, 2.0 / total))
}

/// Full AdaFed direction: orthogonalize (ascending client id), solve for
/// the weights, and combine.
pub fn adafed_direction(
    updates: &[ClientUpdate],
    spec: &AggregatorSpec,
) -> Result<AggregationResult, AggregationError> {
    if spec.kind != AggregatorKind::Adafed {
        return Err(AggregationError::InvalidSpec(format!(
            "adafed_direction called with {:?}",
            spec.kind
        )));
    }
    spec.validate()?;
    let sorted = sorted_by_client(updates)?;
    let orth = orthogonalize(&sorted, spec.gamma_or_zero(), spec.eps_loss, spec.eps_dep)?;
    let (lambda, alpha) = solve_lambda(&orth.gradients)?;

    let mut direction = ParamVector::zeros(orth.gradients[0].len());
    for (w, v) in lambda.iter().zip(&orth.gradients) {
        direction.axpy(*w, v);
    }

    Ok(AggregationResult {
        client_ids: orth.client_ids,
        orthogonal_gradients: orth.gradients,
        lambda,
        alpha,
        direction,
        dropped_clients: orth.dropped,
        scaled_losses: orth.scaled_losses,
        warnings: orth.warnings,
    })
}

/// Largest global step size for which every L-smooth client objective is
/// guaranteed not to increase: `(2 / L) * min_k |f_k|^gamma`.
pub fn step_size_bound(losses: &[f64], gamma: f64, smoothness: f64) -> f64 {
    let min_scaled = losses
        .iter()
        .map(|f| f.abs().powf(gamma))
        .fold(f64::INFINITY, f64::min);
    2.0 / smoothness * min_scaled
}

/// Largest step along `-direction` that the quadratic upper bound of an
/// L-smooth objective allows for every given gradient:
/// `min_k 2 (g_k . d) / (L |d|^2)`, and zero if some `g_k . d <= 0`.
///
/// For retained AdaFed clients this equals [`step_size_bound`]; it is used
/// to cap the step for clients dropped from the orthogonalization.
pub fn safe_step_size<'a>(
    gradients: impl IntoIterator<Item = &'a ParamVector>,
    direction: &ParamVector,
    smoothness: f64,
) -> f64 {
    let dsq = direction.dot_compensated(direction);
    if dsq == 0.0 {
        return f64::INFINITY;
    }
    gradients
        .into_iter()
        .map(|g| (2.0 * g.dot_compensated(direction) / (smoothness * dsq)).max(0.0))
        .fold(f64::INFINITY, f64::min)
}
