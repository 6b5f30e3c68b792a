use super::{validate_updates, AggregationError, ClientUpdate, FedAvgWeights, ParamVector};

/// Fixed scalarization weights for FedAvg.
pub fn fedavg_weights(
    updates: &[ClientUpdate],
    rule: FedAvgWeights,
) -> Result<Vec<f64>, AggregationError> {
    validate_updates(updates)?;
    let raw: Vec<f64> = match rule {
        FedAvgWeights::Uniform => vec![1.0; updates.len()],
        FedAvgWeights::BySampleCount => updates.iter().map(|u| u.num_samples as f64).collect(),
    };
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(AggregationError::InvalidSpec(
            "sample counts sum to zero".to_string(),
        ));
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// `sum_k w_k g_k` with weights from [`fedavg_weights`].
pub fn fedavg_direction(
    updates: &[ClientUpdate],
    rule: FedAvgWeights,
) -> Result<ParamVector, AggregationError> {
    let weights = fedavg_weights(updates, rule)?;
    let mut out = ParamVector::zeros(updates[0].gradient.len());
    for (w, u) in weights.iter().zip(updates) {
        out.axpy(*w, &u.gradient);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(id: u32, g: &[f64], n: usize) -> ClientUpdate {
        ClientUpdate::new(id, ParamVector::new(g.to_vec()), 1.0, n)
    }

    #[test]
    fn uniform_average() {
        let d = fedavg_direction(
            &[upd(0, &[1.0, 0.0], 5), upd(1, &[0.0, 1.0], 1)],
            FedAvgWeights::Uniform,
        )
        .unwrap();
        assert_eq!(d.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn sample_count_average() {
        let d = fedavg_direction(
            &[upd(0, &[1.0, 0.0], 3), upd(1, &[0.0, 1.0], 1)],
            FedAvgWeights::BySampleCount,
        )
        .unwrap();
        assert_eq!(d.as_slice(), &[0.75, 0.25]);
    }

    #[test]
    fn single_client_passthrough() {
        let d = fedavg_direction(&[upd(4, &[1.5, -2.0], 7)], FedAvgWeights::BySampleCount).unwrap();
        assert_eq!(d.as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn opposite_gradients_cancel() {
        let d = fedavg_direction(
            &[upd(0, &[1.0, -2.0], 1), upd(1, &[-1.0, 2.0], 1)],
            FedAvgWeights::Uniform,
        )
        .unwrap();
        assert_eq!(d.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn empty_input_errors() {
        assert_eq!(
            fedavg_direction(&[], FedAvgWeights::Uniform),
            Err(AggregationError::Empty)
        );
    }
}
