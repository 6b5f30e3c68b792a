//! Synthetic classification data and client partitioners.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Dataset, Labels};
use crate::output::format_real;

/// Attempts at a Dirichlet allocation before giving up on empty clients.
pub const MAX_DIRICHLET_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("{n} samples cannot be cut into {shards} equal shards")]
    IndivisibleShards { n: usize, shards: usize },
    #[error("client {client} stayed empty after {attempts} Dirichlet draws")]
    EmptyClient { client: usize, attempts: usize },
    #[error("partitioning needs class labels")]
    NeedsClassLabels,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidTask(m.to_string()));
        if self.num_classes == 0 || self.input_dim == 0 || self.samples_per_class == 0 {
            return bad("num_classes, input_dim and samples_per_class must be positive");
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return bad("cluster_spread must be positive");
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Gaussian class clusters. Class means are standard normal vectors scaled
/// by 3; samples are `N(mean, spread^2 I)`. Rows are class-major. With
/// probability `label_noise` a label is replaced by a uniformly chosen
/// different class.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, dim) = (spec.num_classes, spec.input_dim);
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..dim)
                .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let n = c * spec.samples_per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for m in mean {
                features.push(m + spec.cluster_spread * rng.sample::<f64, _>(StandardNormal));
            }
            let mut y = class;
            if c > 1 && spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
                let shift = rng.random_range(1..c);
                y = (class + shift) % c;
            }
            labels.push(y);
        }
    }
    Ok(Dataset::new(dim, features, Labels::Class(labels)).expect("shape is consistent"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    #[serde(alias = "Shards")]
    Shards,
    #[serde(alias = "Dirichlet")]
    Dirichlet,
    #[serde(alias = "ByCluster")]
    ByCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub num_clients: usize,
    #[serde(default = "two")]
    pub shards_per_client: usize,
    #[serde(default = "half")]
    pub beta: f64,
    #[serde(default)]
    pub seed: u64,
}

fn two() -> usize {
    2
}
fn half() -> f64 {
    0.5
}

impl PartitionSpec {
    pub fn shards(num_clients: usize, shards_per_client: usize, seed: u64) -> Self {
        Self {
            kind: PartitionKind::Shards,
            num_clients,
            shards_per_client,
            beta: half(),
            seed,
        }
    }

    pub fn dirichlet(num_clients: usize, beta: f64, seed: u64) -> Self {
        Self {
            kind: PartitionKind::Dirichlet,
            num_clients,
            shards_per_client: two(),
            beta,
            seed,
        }
    }

    pub fn by_cluster(num_clients: usize) -> Self {
        Self {
            kind: PartitionKind::ByCluster,
            num_clients,
            shards_per_client: two(),
            beta: half(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_clients == 0 {
            return Err(DataError::InvalidPartition(
                "num_clients must be positive".into(),
            ));
        }
        if self.shards_per_client == 0 {
            return Err(DataError::InvalidPartition(
                "shards_per_client must be positive".into(),
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(DataError::InvalidPartition("beta must be positive".into()));
        }
        Ok(())
    }
}

/// Row indices owned by each client. Every row appears exactly once.
pub fn partition_indices(
    data: &Dataset,
    spec: &PartitionSpec,
) -> Result<Vec<Vec<usize>>, DataError> {
    spec.validate()?;
    let labels = data.class_labels().ok_or(DataError::NeedsClassLabels)?;
    match spec.kind {
        PartitionKind::Shards => shards(labels, spec),
        PartitionKind::Dirichlet => dirichlet(labels, spec),
        PartitionKind::ByCluster => by_cluster(labels, spec.num_clients),
    }
}

pub fn partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>, DataError> {
    Ok(partition_indices(data, spec)?
        .iter()
        .map(|rows| data.subset(rows))
        .collect())
}

/// Sort by label, cut into `K * shards_per_client` equal shards and deal
/// them out at random without replacement.
fn shards(labels: &[usize], spec: &PartitionSpec) -> Result<Vec<Vec<usize>>, DataError> {
    let n = labels.len();
    let total = spec.num_clients * spec.shards_per_client;
    if total == 0 || !n.is_multiple_of(total) || n < total {
        return Err(DataError::IndivisibleShards { n, shards: total });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| labels[i]);
    let size = n / total;

    let mut shard_ids: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    shard_ids.shuffle(&mut rng);

    Ok(shard_ids
        .chunks(spec.shards_per_client)
        .map(|mine| {
            let mut rows: Vec<usize> = mine
                .iter()
                .flat_map(|&s| order[s * size..(s + 1) * size].iter().copied())
                .collect();
            rows.sort_unstable();
            rows
        })
        .collect())
}

/// For each class draw client proportions from `Dir(beta * 1_K)` and send
/// each of its samples to a client drawn from those proportions.
fn dirichlet(labels: &[usize], spec: &PartitionSpec) -> Result<Vec<Vec<usize>>, DataError> {
    let k = spec.num_clients;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let gamma = Gamma::new(spec.beta, 1.0)
        .map_err(|e| DataError::InvalidPartition(format!("beta: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut last_empty = 0;
    for _attempt in 0..MAX_DIRICHLET_ATTEMPTS {
        let cumulative: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| draw_cumulative(&gamma, k, &mut rng))
            .collect();
        let mut clients = vec![Vec::new(); k];
        for (row, &y) in labels.iter().enumerate() {
            let u: f64 = rng.random();
            let cdf = &cumulative[y];
            let client = cdf.partition_point(|&c| c <= u).min(k - 1);
            clients[client].push(row);
        }
        match clients.iter().position(Vec::is_empty) {
            None => return Ok(clients),
            Some(empty) => last_empty = empty,
        }
    }
    Err(DataError::EmptyClient {
        client: last_empty,
        attempts: MAX_DIRICHLET_ATTEMPTS,
    })
}

fn draw_cumulative(gamma: &Gamma<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            let mut acc = 0.0;
            return draws
                .iter()
                .map(|d| {
                    acc += d / total;
                    acc
                })
                .collect();
        }
    }
}

/// Deterministic class-to-client assignment. With `K <= C`, client `k` owns
/// every class `c` with `c % K == k`. With `K > C`, the clients
/// `{k : k % C == c}` split class `c`'s samples into contiguous, nearly equal
/// blocks.
fn by_cluster(labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>, DataError> {
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut clients = vec![Vec::new(); k];
    for class in 0..num_classes {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let owners: Vec<usize> = if k <= num_classes {
            vec![class % k]
        } else {
            (0..k).filter(|&j| j % num_classes == class).collect()
        };
        let m = owners.len();
        for (j, &owner) in owners.iter().enumerate() {
            let lo = rows.len() * j / m;
            let hi = rows.len() * (j + 1) / m;
            clients[owner].extend_from_slice(&rows[lo..hi]);
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    if let Some(empty) = clients.iter().position(Vec::is_empty) {
        return Err(DataError::InvalidPartition(format!(
            "client {empty} received no samples"
        )));
    }
    Ok(clients)
}

/// One row per sample: `client_id,label,x0,x1,...`.
pub fn write_partition_csv<W: Write>(
    data: &Dataset,
    clients: &[Vec<usize>],
    writer: W,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["client_id".to_string(), "label".to_string()];
    header.extend((0..data.input_dim).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (client, rows) in clients.iter().enumerate() {
        for &r in rows {
            let mut rec = vec![client.to_string()];
            rec.push(match &data.labels {
                Labels::Class(c) => c[r].to_string(),
                Labels::Real(v) => format_real(v[r]),
            });
            rec.extend(data.row(r).iter().map(|&x| format_real(x)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shannon entropy (nats) of a client's label histogram.
pub fn label_entropy(labels: &[usize], num_classes: usize) -> f64 {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}
