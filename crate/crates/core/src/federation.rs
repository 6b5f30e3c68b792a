//! Round-based federated training.
//!
//! Each round the server samples clients uniformly without replacement,
//! every sampled client runs `e` epochs of local GD or SGD from the global
//! model and returns the pseudo-gradient `theta_init - theta_final` together
//! with its loss at `theta_final`. The server aggregates the updates (in
//! ascending client id order) and steps `theta <- theta - eta_t * d_t`.
//!
//! Client work depends only on the global model, the client's data and a
//! seed derived from `(seed, round, client_id)`, so clients are trained in
//! parallel without affecting results.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    aggregate, safe_step_size, step_size_bound, Aggregate, AggregationError, AggregatorSpec,
    ClientId, ClientUpdate,
};
use crate::data::{
    generate_synthetic, partition, partition_indices, DataError, PartitionSpec, SyntheticTaskSpec,
};
use crate::metrics::{fairness_report, FairnessReport};
use crate::models::{self, Dataset, ModelError, ModelSpec};
use crate::param::ParamVector;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("global model became non-finite in round {round}")]
    Diverged { round: usize },
    #[error("loss maps cover different clients")]
    KeyMismatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalOptimizer {
    #[default]
    #[serde(alias = "GD")]
    Gd,
    #[serde(alias = "SGD")]
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[serde(alias = "Constant")]
    Constant,
    /// `base / (t + 1)`
    #[serde(alias = "InverseT")]
    InverseT,
    /// `base / sqrt(t + 1)`
    #[serde(alias = "InverseSqrtT")]
    InverseSqrtT,
    /// `base * (2 / (L * local_lr)) * min_k |f_k|^gamma` over the round's
    /// aggregated clients.
    #[serde(alias = "StepSizeBound")]
    StepSizeBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub base: f64,
    /// Smoothness constant for `step_size_bound`; derived from the client
    /// data when omitted.
    #[serde(default)]
    pub smoothness: Option<f64>,
}

impl ScheduleSpec {
    pub fn constant(base: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            base,
            smoothness: None,
        }
    }

    pub fn inverse_t(base: f64) -> Self {
        Self {
            kind: ScheduleKind::InverseT,
            ..Self::constant(base)
        }
    }

    pub fn inverse_sqrt_t(base: f64) -> Self {
        Self {
            kind: ScheduleKind::InverseSqrtT,
            ..Self::constant(base)
        }
    }

    pub fn step_size_bound(base: f64, smoothness: Option<f64>) -> Self {
        Self {
            kind: ScheduleKind::StepSizeBound,
            base,
            smoothness,
        }
    }

    /// Rate for round `t` for the loss-independent schedules.
    pub fn rate(&self, t: usize) -> f64 {
        let t1 = (t + 1) as f64;
        match self.kind {
            ScheduleKind::Constant | ScheduleKind::StepSizeBound => self.base,
            ScheduleKind::InverseT => self.base / t1,
            ScheduleKind::InverseSqrtT => self.base / t1.sqrt(),
        }
    }

    pub fn validate(&self) -> Result<(), FederationError> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(FederationError::Config(
                "schedule base must be positive".into(),
            ));
        }
        if let Some(l) = self.smoothness {
            if !(l > 0.0 && l.is_finite()) {
                return Err(FederationError::Config(
                    "smoothness must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Everything about a run except the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub rounds: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    pub local_lr: f64,
    #[serde(default)]
    pub local_optimizer: LocalOptimizer,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "full")]
    pub participation_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Write a parameter checkpoint every this many rounds (0 = never).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Percentage used for the worst / best tail accuracies.
    #[serde(default = "ten")]
    pub k_pct: f64,
    /// Seed for the initial global model.
    #[serde(default)]
    pub init_seed: u64,
}

fn one() -> usize {
    1
}
fn default_batch() -> usize {
    32
}
fn full() -> f64 {
    1.0
}
fn ten() -> f64 {
    10.0
}

impl TrainingSpec {
    pub fn new(rounds: usize, local_lr: f64) -> Self {
        Self {
            rounds,
            local_epochs: 1,
            local_lr,
            local_optimizer: LocalOptimizer::Gd,
            batch_size: default_batch(),
            participation_fraction: 1.0,
            seed: 0,
            checkpoint_every: 0,
            k_pct: 10.0,
            init_seed: 0,
        }
    }

    pub fn validate(&self, num_clients: usize) -> Result<(), FederationError> {
        let bad = |m: &str| Err(FederationError::Config(m.to_string()));
        if self.local_epochs == 0 {
            return bad("local_epochs must be positive");
        }
        if !(self.local_lr >= 0.0 && self.local_lr.is_finite()) {
            return bad("local_lr must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        let f = self.participation_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad("participation_fraction must lie in (0, 1]");
        }
        if f * num_clients as f64 + 1e-9 < 1.0 {
            return bad("participation_fraction * num_clients must be at least 1");
        }
        if !(self.k_pct > 0.0 && self.k_pct <= 50.0) {
            return bad("k_pct must lie in (0, 50]");
        }
        Ok(())
    }

    pub fn clients_per_round(&self, num_clients: usize) -> usize {
        crate::metrics::tail_count(self.participation_fraction * 100.0, num_clients)
            .min(num_clients)
    }
}

/// A complete experiment: model, synthetic task, partition, aggregation
/// rule, global step-size schedule and training knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedConfig {
    pub model: ModelSpec,
    pub task: SyntheticTaskSpec,
    pub partition: PartitionSpec,
    pub aggregator: AggregatorSpec,
    pub schedule: ScheduleSpec,
    pub training: TrainingSpec,
}

impl FederatedConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        self.model.validate()?;
        self.task.validate()?;
        self.partition.validate()?;
        self.aggregator
            .validate()
            .map_err(|e| FederationError::Config(e.to_string()))?;
        self.schedule.validate()?;
        self.training.validate(self.partition.num_clients)?;
        if self.model.input_dim != self.task.input_dim {
            return Err(FederationError::Config(format!(
                "model.input_dim {} differs from task.input_dim {}",
                self.model.input_dim, self.task.input_dim
            )));
        }
        if self.model.is_classifier() && self.model.output_dim != self.task.num_classes {
            return Err(FederationError::Config(format!(
                "model.output_dim {} differs from task.num_classes {}",
                self.model.output_dim, self.task.num_classes
            )));
        }
        Ok(())
    }

    /// Client datasets. The task and partition seeds are salted with the
    /// run seed so that changing `training.seed` redraws the data as well.
    pub fn build_clients(&self) -> Result<Vec<Dataset>, FederationError> {
        let (data, part) = self.salted_task()?;
        Ok(partition(&data, &part)?)
    }

    /// Pooled dataset and per-client row indices, as used by a run.
    pub fn build_partition(&self) -> Result<(Dataset, Vec<Vec<usize>>), FederationError> {
        let (data, part) = self.salted_task()?;
        let indices = partition_indices(&data, &part)?;
        Ok((data, indices))
    }

    fn salted_task(&self) -> Result<(Dataset, PartitionSpec), FederationError> {
        let mut task = self.task.clone();
        task.seed = mix(&[self.training.seed, task.seed, 0x7461_736b]);
        let mut part = self.partition.clone();
        part.seed = mix(&[self.training.seed, part.seed, 0x7061_7274]);
        Ok((generate_synthetic(&task)?, part))
    }
}

/// SplitMix64 fold; stable across platforms and releases.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Seed for client `client_id`'s local training in `round`.
pub fn client_seed(seed: u64, round: usize, client_id: ClientId) -> u64 {
    mix(&[seed, round as u64, client_id as u64])
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub pseudo_gradient: ParamVector,
    pub final_loss: f64,
    /// Largest norm among the (mini-batch) gradients applied.
    pub max_step_gradient_norm: f64,
    pub steps: usize,
}

/// Runs `epochs` epochs of full-batch GD or shuffled minibatch SGD and
/// returns `theta_init - theta_final` (not divided by `lr`) with the loss at
/// `theta_final`.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    epochs: usize,
    lr: f64,
    optimizer: LocalOptimizer,
    batch_size: usize,
    seed: u64,
) -> Result<LocalOutcome, ModelError> {
    let mut theta = params.clone();
    let mut max_norm: f64 = 0.0;
    let mut steps = 0;
    match optimizer {
        LocalOptimizer::Gd => {
            for _ in 0..epochs {
                let g = models::gradient(spec, &theta, data)?;
                max_norm = max_norm.max(g.norm());
                theta.axpy(-lr, &g);
                steps += 1;
            }
        }
        LocalOptimizer::Sgd => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut order: Vec<usize> = (0..data.len()).collect();
            for _ in 0..epochs {
                order.shuffle(&mut rng);
                for batch in order.chunks(batch_size.max(1)) {
                    let g = models::batch_gradient(spec, &theta, data, batch)?;
                    max_norm = max_norm.max(g.norm());
                    theta.axpy(-lr, &g);
                    steps += 1;
                }
            }
        }
    }
    let final_loss = models::loss(spec, &theta, data)?;
    Ok(LocalOutcome {
        pseudo_gradient: params.sub(&theta),
        final_loss,
        max_step_gradient_norm: max_norm,
        steps,
    })
}

/// Fraction of clients whose loss did not increase. Both maps must cover
/// the same clients; an empty pair gives 1.
pub fn rho(
    before: &BTreeMap<ClientId, f64>,
    after: &BTreeMap<ClientId, f64>,
) -> Result<f64, FederationError> {
    if before.len() != after.len() || before.keys().ne(after.keys()) {
        return Err(FederationError::KeyMismatch);
    }
    if before.is_empty() {
        return Ok(1.0);
    }
    let kept = before
        .iter()
        .zip(after.values())
        .filter(|((_, b), a)| *a <= *b)
        .count();
    Ok(kept as f64 / before.len() as f64)
}

/// Per-round diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled: Vec<ClientId>,
    /// Sampled clients' losses at `theta_t`.
    pub loss_before: BTreeMap<ClientId, f64>,
    /// Every client's loss at `theta_{t+1}`.
    pub per_client_loss: BTreeMap<ClientId, f64>,
    /// Every client's accuracy at `theta_{t+1}` (classifiers only).
    pub per_client_accuracy: BTreeMap<ClientId, f64>,
    pub direction_norm: f64,
    pub rho: f64,
    /// Clients that entered the aggregate, aligned with `lambda`.
    pub aggregated: Vec<ClientId>,
    pub lambda: Vec<f64>,
    pub dropped: Vec<ClientId>,
    pub global_lr: f64,
    pub fairness: Option<FairnessReport>,
    /// Set when aggregation failed and the round left the model unchanged.
    pub error: Option<String>,
}

impl RoundRecord {
    pub fn mean_loss(&self) -> f64 {
        let n = self.per_client_loss.len().max(1) as f64;
        self.per_client_loss.values().sum::<f64>() / n
    }

    /// Sampled clients' losses at `theta_{t+1}`.
    pub fn loss_after(&self) -> BTreeMap<ClientId, f64> {
        self.sampled
            .iter()
            .map(|id| (*id, self.per_client_loss[id]))
            .collect()
    }
}

/// Mutable simulation state: the global model plus the fixed client data.
pub struct Simulation {
    model: ModelSpec,
    clients: Vec<Dataset>,
    aggregator: AggregatorSpec,
    schedule: ScheduleSpec,
    training: TrainingSpec,
    smoothness: Option<f64>,
    params: ParamVector,
    /// Every client's loss at the current `params`.
    losses: Vec<f64>,
    round: usize,
}

impl Simulation {
    pub fn from_config(config: &FederatedConfig) -> Result<Self, FederationError> {
        config.validate()?;
        let clients = config.build_clients()?;
        let init = models::init_params(
            &config.model,
            mix(&[config.training.seed, config.training.init_seed]),
        );
        Self::new(
            config.model.clone(),
            clients,
            config.aggregator.clone(),
            config.schedule.clone(),
            config.training.clone(),
            init,
        )
    }

    pub fn new(
        model: ModelSpec,
        clients: Vec<Dataset>,
        aggregator: AggregatorSpec,
        schedule: ScheduleSpec,
        training: TrainingSpec,
        params: ParamVector,
    ) -> Result<Self, FederationError> {
        model.validate()?;
        aggregator
            .validate()
            .map_err(|e| FederationError::Config(e.to_string()))?;
        schedule.validate()?;
        if clients.is_empty() {
            return Err(FederationError::Config("no clients".into()));
        }
        if clients.len() > ClientId::MAX as usize {
            return Err(FederationError::Config("too many clients".into()));
        }
        training.validate(clients.len())?;
        if params.len() != model.param_count() {
            return Err(ModelError::ParamLength {
                expected: model.param_count(),
                found: params.len(),
            }
            .into());
        }

        let smoothness = match (schedule.kind, schedule.smoothness) {
            (_, Some(l)) => Some(l),
            (ScheduleKind::StepSizeBound, None) => {
                let mut worst: f64 = 0.0;
                for c in &clients {
                    let l = models::smoothness_bound(&model, c).ok_or_else(|| {
                        FederationError::Config(
                            "schedule.smoothness is required for this model".into(),
                        )
                    })?;
                    worst = worst.max(l);
                }
                Some(worst)
            }
            _ => None,
        };

        let losses = clients
            .par_iter()
            .map(|c| models::loss(&model, &params, c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            model,
            clients,
            aggregator,
            schedule,
            training,
            smoothness,
            params,
            losses,
            round: 0,
        })
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn clients(&self) -> &[Dataset] {
        &self.clients
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    /// Every client's loss at the current global model.
    pub fn client_losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn smoothness(&self) -> Option<f64> {
        self.smoothness
    }

    /// Uniform sample of `ceil(fraction * K)` client ids, sorted.
    pub fn sample_clients(&self, round: usize) -> Vec<ClientId> {
        let k = self.clients.len();
        let m = self.training.clients_per_round(k);
        let mut ids: Vec<ClientId> = if m == k {
            (0..k as ClientId).collect()
        } else {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix(&[self.training.seed, round as u64, u64::MAX]));
            rand::seq::index::sample(&mut rng, k, m)
                .into_iter()
                .map(|i| i as ClientId)
                .collect()
        };
        ids.sort_unstable();
        ids
    }

    /// Executes one round of federated training and advances the model.
    pub fn run_round(&mut self) -> Result<RoundRecord, FederationError> {
        let t = self.round;
        let sampled = self.sample_clients(t);
        let loss_before: BTreeMap<ClientId, f64> = sampled
            .iter()
            .map(|&id| (id, self.losses[id as usize]))
            .collect();

        let tr = &self.training;
        let outcomes = sampled
            .par_iter()
            .map(|&id| {
                let data = &self.clients[id as usize];
                local_train(
                    &self.model,
                    &self.params,
                    data,
                    tr.local_epochs,
                    tr.local_lr,
                    tr.local_optimizer,
                    tr.batch_size,
                    client_seed(tr.seed, t, id),
                )
                .map(|o| ClientUpdate::new(id, o.pseudo_gradient, o.final_loss, data.len()))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut record = RoundRecord {
            round: t,
            sampled,
            loss_before,
            per_client_loss: BTreeMap::new(),
            per_client_accuracy: BTreeMap::new(),
            direction_norm: 0.0,
            rho: 1.0,
            aggregated: Vec::new(),
            lambda: Vec::new(),
            dropped: Vec::new(),
            global_lr: 0.0,
            fairness: None,
            error: None,
        };

        match aggregate(&outcomes, &self.aggregator) {
            Ok(agg) => {
                let eta = self.global_rate(t, &agg, &outcomes);
                debug!(
                    "round {t}: |d| = {:e}, eta = {eta:e}, dropped = {:?}",
                    agg.direction.norm(),
                    agg.dropped
                );
                let mut next = self.params.clone();
                next.axpy(-eta, &agg.direction);
                if !next.is_finite() {
                    return Err(FederationError::Diverged { round: t });
                }
                self.params = next;
                record.direction_norm = agg.direction.norm();
                record.aggregated = agg.client_ids;
                record.lambda = agg.weights;
                record.dropped = agg.dropped;
                record.global_lr = eta;
            }
            Err(e @ AggregationError::AllDropped(_)) => {
                warn!("round {t}: aggregation aborted, model unchanged: {e}");
                record.dropped = record.sampled.clone();
                record.error = Some(e.to_string());
            }
            Err(e) => {
                warn!("round {t}: aggregation failed, model unchanged: {e}");
                record.error = Some(e.to_string());
            }
        }

        self.evaluate_into(&mut record)?;
        record.rho = rho(&record.loss_before, &record.loss_after())?;
        self.round += 1;
        Ok(record)
    }

    fn global_rate(&self, t: usize, agg: &Aggregate, updates: &[ClientUpdate]) -> f64 {
        match self.schedule.kind {
            ScheduleKind::StepSizeBound => {
                let l = self.smoothness.expect("resolved at construction");
                // Pseudo-gradients are lr-scaled gradients.
                let lr = if self.training.local_lr > 0.0 {
                    self.training.local_lr
                } else {
                    1.0
                };
                // The scaled losses already carry the exponent.
                let mut eta = step_size_bound(&agg.scaled_losses, 1.0, l * lr);
                if !agg.dropped.is_empty() {
                    let dropped = updates
                        .iter()
                        .filter(|u| agg.dropped.contains(&u.client_id))
                        .map(|u| &u.gradient);
                    let cap = safe_step_size(dropped, &agg.direction, l * lr);
                    if cap < eta {
                        debug!("round {t}: step capped to {cap:e} for dropped clients");
                        eta = cap;
                    }
                }
                self.schedule.base * eta
            }
            _ => self.schedule.rate(t),
        }
    }

    fn evaluate_into(&mut self, record: &mut RoundRecord) -> Result<(), FederationError> {
        let classifier = self.model.is_classifier();
        let evals = self
            .clients
            .par_iter()
            .map(|c| {
                let l = models::loss(&self.model, &self.params, c)?;
                let a = if classifier {
                    Some(models::accuracy(&self.model, &self.params, c)?)
                } else {
                    None
                };
                Ok((l, a))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        self.losses = evals.iter().map(|e| e.0).collect();
        for (id, (l, a)) in evals.iter().enumerate() {
            record.per_client_loss.insert(id as ClientId, *l);
            if let Some(a) = a {
                record.per_client_accuracy.insert(id as ClientId, *a);
            }
        }
        if classifier {
            let accs: Vec<f64> = record.per_client_accuracy.values().copied().collect();
            record.fairness = fairness_report(&accs, self.training.k_pct).ok();
        }
        Ok(())
    }

    /// Runs `rounds` rounds, handing each record and the updated model to
    /// `observe`.
    pub fn run<F>(
        &mut self,
        rounds: usize,
        mut observe: F,
    ) -> Result<Vec<RoundRecord>, FederationError>
    where
        F: FnMut(&RoundRecord, &ParamVector) -> Result<(), FederationError>,
    {
        let mut out = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let rec = self.run_round()?;
            observe(&rec, &self.params)?;
            out.push(rec);
        }
        Ok(out)
    }
}

/// Runs `config.training.rounds` rounds from scratch.
pub fn run_experiment(config: &FederatedConfig) -> Result<Vec<RoundRecord>, FederationError> {
    let mut sim = Simulation::from_config(config)?;
    sim.run(config.training.rounds, |_, _| Ok(()))
}

/// `u64` little-endian length followed by `f64` little-endian values.
pub fn write_checkpoint<W: Write>(params: &ParamVector, mut w: W) -> std::io::Result<()> {
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamVector, FederationError> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let n = u64::from_le_bytes(len) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * 8 {
        return Err(FederationError::Checkpoint(format!(
            "header promises {n} values, found {} bytes",
            bytes.len()
        )));
    }
    Ok(ParamVector::new(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    ))
}

pub fn save_checkpoint(params: &ParamVector, path: &Path) -> Result<(), FederationError> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(params, std::io::BufWriter::new(f))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamVector, FederationError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
