//! The federation engine: per-client local training with an EMA target
//! encoder, server-side parameter averaging, two-level centroid refresh,
//! and per-round metrics.
//!
//! Every source of randomness is a counter stream keyed by
//! (seed, purpose, round, client), so timelines are bitwise reproducible
//! and independent of how client work is scheduled across threads.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    inter_cluster_mixing, nearest_assignment, sinkhorn_balanced, Centroids, SinkhornConfig,
};
use crate::datasets::{augment_batch, AugmentConfig, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{alignment_score, knn_probe, linear_probe, uniformity_score};
use crate::losses::assignment_probs;
use crate::numcore::{
    compute_loss_and_grads, ema_update, sgd_step, DenseMatrix, EncoderParams, Gradients, LossSpec,
};
use crate::rng::{derive_seed, Purpose, StreamRng};
use crate::ROTATION_CLASSES;

/// Local training objective run by every client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cluster agreement plus rotation prediction.
    Orchestra,
    /// Spectral contrastive baseline.
    Specloss,
    /// Rotation prediction alone.
    Rotpred,
    /// No training; the frozen random encoder.
    Random,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Orchestra => "orchestra",
            Method::Specloss => "specloss",
            Method::Rotpred => "rotpred",
            Method::Random => "random",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orchestra" => Ok(Method::Orchestra),
            "specloss" => Ok(Method::Specloss),
            "rotpred" => Ok(Method::Rotpred),
            "random" => Ok(Method::Random),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected orchestra, specloss, rotpred, or random)"
            ))),
        }
    }
}

fn default_tau_assign() -> f64 {
    0.1
}
fn default_tau_unif() -> f64 {
    0.2
}
fn default_mem_size() -> usize {
    128
}
fn default_eval_every() -> usize {
    5
}
fn default_hidden_dims() -> Vec<usize> {
    vec![64, 64]
}
fn default_rep_dim() -> usize {
    16
}
fn default_jitter_sigma() -> f64 {
    0.1
}
fn default_scale_lo() -> f64 {
    0.9
}
fn default_scale_hi() -> f64 {
    1.1
}
fn default_init_scale() -> f64 {
    1.0
}
fn default_probe_epochs() -> usize {
    500
}
fn default_probe_lr() -> f64 {
    0.5
}

/// Everything the federation needs besides the data itself.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    /// Number of clients K.
    pub clients: usize,
    /// Fraction of clients sampled per round, in (0, 1].
    pub participation: f64,
    pub rounds: usize,
    /// Local epochs E per selected client per round.
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// EMA retention m for the target encoder, in [0, 1].
    pub ema: f64,
    /// Global cluster count G.
    pub global_clusters: usize,
    /// Local cluster count L uploaded by each client.
    pub local_clusters: usize,
    /// Softmax temperature for centroid assignments.
    #[serde(default = "default_tau_assign")]
    pub tau_assign: f64,
    /// Temperature of the uniformity diagnostic.
    #[serde(default = "default_tau_unif")]
    pub tau_unif: f64,
    /// Dirichlet concentration used when the caller partitions data.
    pub alpha: f64,
    pub seed: u64,
    pub method: Method,
    /// Capacity of each client's representation memory.
    #[serde(default = "default_mem_size")]
    pub mem_size: usize,
    /// Weight parameter averages by shard size instead of uniformly.
    #[serde(default)]
    pub weighted_avg: bool,
    /// Probe cadence in rounds (probes always run on the final round).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_hidden_dims")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_rep_dim")]
    pub rep_dim: usize,
    /// Multiplier on the initial weight scale; 1 is the plain
    /// `1/sqrt(fan_in)` draw, larger values roughen the starting map.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default = "default_jitter_sigma")]
    pub jitter_sigma: f64,
    #[serde(default = "default_scale_lo")]
    pub scale_lo: f64,
    #[serde(default = "default_scale_hi")]
    pub scale_hi: f64,
    /// Epochs of the linear probe run on probe rounds.
    #[serde(default = "default_probe_epochs")]
    pub probe_epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub probe_lr: f64,
    /// Neighbor count for the kNN probe; `None` picks min(200, n_train/10).
    #[serde(default)]
    pub knn_k: Option<usize>,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!(
                "participation {} must lie in (0, 1]",
                self.participation
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr {} must be >= 0", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(Error::Config(format!(
                "EMA rate {} must lie in [0, 1]",
                self.ema
            )));
        }
        if self.global_clusters < 2 {
            return Err(Error::Config(format!(
                "global cluster count {} must be at least 2",
                self.global_clusters
            )));
        }
        if self.local_clusters == 0 {
            return Err(Error::Config("local cluster count must be at least 1".into()));
        }
        if self.mem_size < self.local_clusters {
            return Err(Error::Config(format!(
                "memory capacity {} cannot hold {} local clusters",
                self.mem_size, self.local_clusters
            )));
        }
        if !self.tau_assign.is_finite() || self.tau_assign <= 0.0 {
            return Err(Error::Config(format!(
                "assignment temperature {} must be positive",
                self.tau_assign
            )));
        }
        if !self.tau_unif.is_finite() || self.tau_unif <= 0.0 {
            return Err(Error::Config(format!(
                "uniformity temperature {} must be positive",
                self.tau_unif
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("probe cadence must be at least 1 round".into()));
        }
        if self.rep_dim == 0 {
            return Err(Error::Config("representation dimension must be positive".into()));
        }
        if !self.init_scale.is_finite() || self.init_scale <= 0.0 {
            return Err(Error::Config(format!(
                "init scale {} must be positive",
                self.init_scale
            )));
        }
        if self.probe_epochs == 0 {
            return Err(Error::Config("probe epochs must be at least 1".into()));
        }
        if !self.probe_lr.is_finite() || self.probe_lr <= 0.0 {
            return Err(Error::Config(format!(
                "probe lr {} must be positive",
                self.probe_lr
            )));
        }
        self.augment_config().validate()?;
        Ok(())
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            jitter_sigma: self.jitter_sigma,
            scale_lo: self.scale_lo,
            scale_hi: self.scale_hi,
        }
    }

    /// Participants drawn per round.
    pub fn participants_per_round(&self) -> usize {
        ((self.participation * self.clients as f64).ceil() as usize).clamp(1, self.clients)
    }
}

/// Fixed-capacity ring of the most recent target-encoder representations.
#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    dim: usize,
    capacity: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "memory buffer {capacity}x{dim} must be non-degenerate"
            )));
        }
        Ok(MemoryBuffer {
            dim,
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    /// Appends one representation, evicting the oldest entry when full.
    pub fn push(&mut self, rep: &[f64]) -> Result<()> {
        if rep.len() != self.dim {
            return Err(Error::Shape(format!(
                "representation of dim {} pushed into {}-dim buffer",
                rep.len(),
                self.dim
            )));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(rep.to_vec());
        Ok(())
    }

    pub fn push_rows(&mut self, reps: &DenseMatrix) -> Result<()> {
        for row in reps.iter_rows() {
            self.push(row)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Buffer contents as rows, oldest first.
    pub fn as_matrix(&self) -> Result<DenseMatrix> {
        if self.entries.is_empty() {
            return Err(Error::Config("memory buffer is empty".into()));
        }
        let rows: Vec<Vec<f64>> = self.entries.iter().cloned().collect();
        DenseMatrix::from_rows(&rows)
    }
}

/// A client's contribution to one round.
#[derive(Debug, Clone)]
pub struct ClientResult {
    pub client_id: usize,
    pub shard_len: usize,
    pub online: EncoderParams,
    pub target: EncoderParams,
    pub local_centroids: Centroids,
    /// Mean clustering-style loss over local steps (0 when the method has
    /// none, so downstream aggregates stay finite).
    pub mean_cluster_loss: f64,
    /// Mean rotation loss over local steps (0 when the method has none).
    pub mean_deg_loss: f64,
}

/// Outcome of asking one client to train.
#[derive(Debug, Clone)]
pub enum ClientOutcome {
    Trained(Box<ClientResult>),
    /// Shard too small for even one batch; excluded from aggregation.
    Skipped { client_id: usize, shard_len: usize },
}

/// One round of local training on a single client's shard.
///
/// The memory buffer is prefilled with target representations of the first
/// `min(mem_size, shard)` samples, then refreshed with the clean-batch
/// target representations seen at every step; local centroids are clustered
/// from the final buffer contents.
pub fn client_round(
    dataset: &Dataset,
    shard: &ClientShard,
    online_init: &EncoderParams,
    target_init: &EncoderParams,
    global_centroids: &Centroids,
    cfg: &FederationConfig,
    round: u64,
) -> Result<ClientOutcome> {
    let ids = &shard.sample_ids;
    if ids.len() < cfg.batch_size {
        return Ok(ClientOutcome::Skipped {
            client_id: shard.client_id,
            shard_len: ids.len(),
        });
    }
    let mut online = online_init.clone();
    let mut target = target_init.clone();
    let mut rng = StreamRng::new(cfg.seed, Purpose::ClientRound, round, shard.client_id as u64);
    let augment = cfg.augment_config();

    let mut buffer = MemoryBuffer::new(cfg.mem_size, cfg.rep_dim)?;
    let prefill = ids.len().min(cfg.mem_size);
    let initial_reps = target.forward(&dataset.gather(&ids[..prefill]))?;
    buffer.push_rows(&initial_reps)?;

    let epochs = if cfg.method == Method::Random {
        0
    } else {
        cfg.local_epochs
    };
    let mut cluster_sum = 0.0;
    let mut deg_sum = 0.0;
    let mut steps = 0usize;
    for _ in 0..epochs {
        let mut order = ids.clone();
        rng.shuffle(&mut order);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let clean = dataset.gather(chunk);
            let augmented = augment_batch(&clean, &augment, &mut rng);
            let target_reps = target.forward(&clean)?;

            let mut grads = Gradients::zeros_like(&online);
            match cfg.method {
                Method::Orchestra => {
                    let target_probs =
                        assignment_probs(&target_reps, global_centroids, cfg.tau_assign)?;
                    let (c_loss, c_grads) = compute_loss_and_grads(
                        &online,
                        &LossSpec::Cluster {
                            aug_batch: &augmented,
                            target_probs: &target_probs,
                            centroids: global_centroids.matrix(),
                            tau: cfg.tau_assign,
                        },
                    )?;
                    let (rotated, labels) = draw_rotations(dataset, &clean, &mut rng)?;
                    let (d_loss, d_grads) = compute_loss_and_grads(
                        &online,
                        &LossSpec::Rotation {
                            rotated_batch: &rotated,
                            labels: &labels,
                        },
                    )?;
                    grads.add(&c_grads)?;
                    grads.add(&d_grads)?;
                    cluster_sum += c_loss;
                    deg_sum += d_loss;
                }
                Method::Specloss => {
                    let (loss, g) = compute_loss_and_grads(
                        &online,
                        &LossSpec::Spectral {
                            batch: &clean,
                            aug_batch: &augmented,
                        },
                    )?;
                    grads.add(&g)?;
                    cluster_sum += loss;
                }
                Method::Rotpred => {
                    let (rotated, labels) = draw_rotations(dataset, &clean, &mut rng)?;
                    let (loss, g) = compute_loss_and_grads(
                        &online,
                        &LossSpec::Rotation {
                            rotated_batch: &rotated,
                            labels: &labels,
                        },
                    )?;
                    grads.add(&g)?;
                    deg_sum += loss;
                }
                Method::Random => unreachable!("random method trains zero epochs"),
            }
            online = sgd_step(&online, &grads, cfg.lr)?;
            target = ema_update(&target, &online, cfg.ema)?;
            buffer.push_rows(&target_reps)?;
            steps += 1;
        }
    }

    let local_centroids = sinkhorn_balanced(
        &buffer.as_matrix()?,
        cfg.local_clusters,
        &SinkhornConfig::default(),
        derive_seed(cfg.seed, Purpose::LocalCluster, round, shard.client_id as u64),
    )?
    .0;
    let denom = steps.max(1) as f64;
    Ok(ClientOutcome::Trained(Box::new(ClientResult {
        client_id: shard.client_id,
        shard_len: ids.len(),
        online,
        target,
        local_centroids,
        mean_cluster_loss: cluster_sum / denom,
        mean_deg_loss: deg_sum / denom,
    })))
}

fn draw_rotations(
    dataset: &Dataset,
    clean: &DenseMatrix,
    rng: &mut StreamRng,
) -> Result<(DenseMatrix, Vec<usize>)> {
    let mut rotated = DenseMatrix::zeros(clean.rows(), clean.cols());
    let mut labels = Vec::with_capacity(clean.rows());
    for i in 0..clean.rows() {
        let idx = rng.next_range(ROTATION_CLASSES);
        let r = crate::datasets::rotate_sample(clean.row(i), idx, dataset.layout)?;
        rotated.row_mut(i).copy_from_slice(&r);
        labels.push(idx);
    }
    Ok((rotated, labels))
}

/// Uniform mean of encoder parameters. Entries are summed in ascending
/// client-id order, so the result is independent of arrival order.
pub fn fedavg(entries: &[(usize, &EncoderParams)]) -> Result<EncoderParams> {
    weighted_mean(entries, None)
}

/// [`fedavg`] weighting each entry by its shard size.
pub fn fedavg_weighted(entries: &[(usize, &EncoderParams)], weights: &[f64]) -> Result<EncoderParams> {
    if weights.len() != entries.len() {
        return Err(Error::Aggregation(format!(
            "{} weights for {} entries",
            weights.len(),
            entries.len()
        )));
    }
    weighted_mean(entries, Some(weights))
}

fn weighted_mean(
    entries: &[(usize, &EncoderParams)],
    weights: Option<&[f64]>,
) -> Result<EncoderParams> {
    if entries.is_empty() {
        return Err(Error::Aggregation("no parameters to aggregate".into()));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by_key(|&i| entries[i].0);
    let total: f64 = match weights {
        Some(w) => {
            if w.iter().any(|&x| !x.is_finite() || x <= 0.0) {
                return Err(Error::Aggregation("weights must be positive".into()));
            }
            w.iter().sum()
        }
        None => entries.len() as f64,
    };
    let flat_len = entries[0].1.to_flat().len();
    let mut acc = vec![0.0f64; flat_len];
    for &i in &order {
        let flat = entries[i].1.to_flat();
        if flat.len() != flat_len {
            return Err(Error::Aggregation(format!(
                "client {} has incongruent parameter shape",
                entries[i].0
            )));
        }
        let w = weights.map_or(1.0, |w| w[i]) / total;
        for (a, v) in acc.iter_mut().zip(&flat) {
            *a += w * v;
        }
    }
    entries[0].1.from_flat_like(&acc)
}

/// Initial global centroids from a small federation step: every client with
/// at least `local_clusters` samples encodes its shard with the initial
/// target encoder and clusters it locally; the server clusters the pool.
pub fn init_global_centroids(
    dataset: &Dataset,
    shards: &[ClientShard],
    target: &EncoderParams,
    cfg: &FederationConfig,
) -> Result<Centroids> {
    let eligible: Vec<&ClientShard> = shards
        .iter()
        .filter(|s| s.sample_ids.len() >= cfg.local_clusters)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Config(format!(
            "no client shard reaches the {} samples needed for local clustering",
            cfg.local_clusters
        )));
    }
    if eligible.len() * cfg.local_clusters < cfg.global_clusters {
        return Err(Error::Config(format!(
            "{} eligible clients x {} local clusters cannot seed {} global clusters",
            eligible.len(),
            cfg.local_clusters,
            cfg.global_clusters
        )));
    }
    let sink = SinkhornConfig::default();
    let locals: Vec<Centroids> = eligible
        .par_iter()
        .map(|shard| {
            let reps = target.forward(&dataset.gather(&shard.sample_ids))?;
            Ok(sinkhorn_balanced(
                &reps,
                cfg.local_clusters,
                &sink,
                derive_seed(cfg.seed, Purpose::LocalCluster, 0, shard.client_id as u64),
            )?
            .0)
        })
        .collect::<Result<Vec<_>>>()?;
    cluster_pooled_locals(&locals, cfg.global_clusters, &sink, cfg.seed, 0)
}

/// Clusters client-uploaded local centroids (in client order) into global
/// centroids.
fn cluster_pooled_locals(
    locals: &[Centroids],
    g: usize,
    sink: &SinkhornConfig,
    seed: u64,
    round: u64,
) -> Result<Centroids> {
    let total: usize = locals.iter().map(|c| c.count()).sum();
    if total < g {
        return Err(Error::Round(format!(
            "{total} uploaded centroids cannot form {g} global clusters"
        )));
    }
    let dim = locals[0].dim();
    let mut pooled = DenseMatrix::zeros(total, dim);
    let mut row = 0;
    for c in locals {
        for j in 0..c.count() {
            pooled.row_mut(row).copy_from_slice(&c.column(j));
            row += 1;
        }
    }
    Ok(sinkhorn_balanced(
        &pooled,
        g,
        sink,
        derive_seed(seed, Purpose::GlobalCluster, round, 0),
    )?
    .0)
}

/// What the server observed in one round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub mean_cluster_loss: f64,
    pub mean_deg_loss: f64,
    /// Inter-cluster mixing of a fixed held-out probe batch under the
    /// current target encoder and global centroids.
    pub delta: f64,
    pub align: f64,
    pub unif: f64,
    /// Probe accuracies; populated on probe rounds only.
    pub knn_acc: Option<f64>,
    pub linear_acc: Option<f64>,
    /// Clients whose results were aggregated this round.
    pub participants: Vec<usize>,
}

/// Everything a finished federation returns.
#[derive(Debug, Clone)]
pub struct FederationRun {
    pub metrics: Vec<RoundMetrics>,
    pub init_online: EncoderParams,
    pub init_target: EncoderParams,
    pub online: EncoderParams,
    pub target: EncoderParams,
    pub global_centroids: Centroids,
}

/// Fixed sample-id sets used for all measurement during a run.
struct EvalPlan {
    probe_train: Vec<usize>,
    probe_test: Vec<usize>,
    delta_batch: Vec<usize>,
    /// Per client: ids its alignment/uniformity scores are computed on.
    client_eval: Vec<Vec<usize>>,
}

impl EvalPlan {
    fn new(dataset: &Dataset, shards: &[ClientShard], seed: u64) -> Self {
        let mut ids: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = StreamRng::for_purpose(seed, Purpose::ProbeSplit);
        rng.shuffle(&mut ids);
        let split = (ids.len() * 4) / 5;
        let probe_train = ids[..split].to_vec();
        let probe_test = ids[split..].to_vec();
        let delta_batch = probe_test[..probe_test.len().min(256)].to_vec();
        let client_eval = shards
            .iter()
            .map(|s| s.sample_ids[..s.sample_ids.len().min(64)].to_vec())
            .collect();
        EvalPlan {
            probe_train,
            probe_test,
            delta_batch,
            client_eval,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn round_metrics(
    dataset: &Dataset,
    cfg: &FederationConfig,
    plan: &EvalPlan,
    target: &EncoderParams,
    centroids: &Centroids,
    round: usize,
    trained: &[ClientResult],
    run_probes: bool,
) -> Result<RoundMetrics> {
    let k = trained.len() as f64;
    let mean_cluster_loss = trained.iter().map(|r| r.mean_cluster_loss).sum::<f64>() / k;
    let mean_deg_loss = trained.iter().map(|r| r.mean_deg_loss).sum::<f64>() / k;

    let probe_reps = target.forward(&dataset.gather(&plan.delta_batch))?;
    let probe_assign = nearest_assignment(&probe_reps, centroids)?;
    let delta = inter_cluster_mixing(centroids, &probe_reps, &probe_assign)?
        .expect("at least two global clusters");

    let augment = cfg.augment_config();
    let mut align_sum = 0.0;
    let mut unif_sum = 0.0;
    let mut align_n = 0usize;
    let mut unif_n = 0usize;
    for (client, ids) in plan.client_eval.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let batch = dataset.gather(ids);
        let mut rng = StreamRng::new(cfg.seed, Purpose::EvalAugment, round as u64, client as u64);
        align_sum += alignment_score(target, &batch, &augment, &mut rng)?;
        align_n += 1;
        if ids.len() >= 2 {
            unif_sum += uniformity_score(target, &batch, cfg.tau_unif)?;
            unif_n += 1;
        }
    }
    let align = align_sum / align_n.max(1) as f64;
    let unif = unif_sum / unif_n.max(1) as f64;

    let (knn_acc, linear_acc) = if run_probes {
        let train_reps = target.forward(&dataset.gather(&plan.probe_train))?;
        let test_reps = target.forward(&dataset.gather(&plan.probe_test))?;
        let train_labels: Vec<usize> = plan.probe_train.iter().map(|&i| dataset.labels()[i]).collect();
        let test_labels: Vec<usize> = plan.probe_test.iter().map(|&i| dataset.labels()[i]).collect();
        let knn = knn_probe(&train_reps, &train_labels, &test_reps, &test_labels, cfg.knn_k)?;
        let linear = linear_probe(
            &train_reps,
            &train_labels,
            &test_reps,
            &test_labels,
            cfg.probe_epochs,
            cfg.probe_lr,
        )?;
        (Some(knn.accuracy), Some(linear.accuracy))
    } else {
        (None, None)
    };

    Ok(RoundMetrics {
        round,
        mean_cluster_loss,
        mean_deg_loss,
        delta,
        align,
        unif,
        knn_acc,
        linear_acc,
        participants: trained.iter().map(|r| r.client_id).collect(),
    })
}

/// Runs the full federation: seeded parameter init, centroid bootstrap, then
/// `rounds` rounds of sampled client training, parameter averaging, and
/// global centroid refresh from the uploaded local centroids.
pub fn run_federation(
    cfg: &FederationConfig,
    dataset: &Dataset,
    shards: &[ClientShard],
) -> Result<FederationRun> {
    cfg.validate()?;
    if shards.len() != cfg.clients {
        return Err(Error::Config(format!(
            "{} shards for {} clients",
            shards.len(),
            cfg.clients
        )));
    }
    let mut init_rng = StreamRng::for_purpose(cfg.seed, Purpose::ParamInit);
    let online0 = EncoderParams::init_scaled(
        &mut init_rng,
        dataset.dim(),
        &cfg.hidden_dims,
        cfg.rep_dim,
        cfg.init_scale,
    );
    let target0 = online0.clone();
    let mut online = online0.clone();
    let mut target = target0.clone();
    let mut centroids = init_global_centroids(dataset, shards, &target, cfg)?;
    let plan = EvalPlan::new(dataset, shards, cfg.seed);

    let mut metrics = Vec::with_capacity(cfg.rounds);
    let per_round = cfg.participants_per_round();
    for round in 1..=cfg.rounds {
        let mut sampler = StreamRng::new(cfg.seed, Purpose::Participants, round as u64, 0);
        let mut chosen = sampler.sample_distinct(cfg.clients, per_round);
        chosen.sort_unstable();

        let outcomes: Vec<ClientOutcome> = chosen
            .par_iter()
            .map(|&k| {
                client_round(
                    dataset,
                    &shards[k],
                    &online,
                    &target,
                    &centroids,
                    cfg,
                    round as u64,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut trained: Vec<ClientResult> = outcomes
            .into_iter()
            .filter_map(|o| match o {
                ClientOutcome::Trained(r) => Some(*r),
                ClientOutcome::Skipped { .. } => None,
            })
            .collect();
        if trained.is_empty() {
            return Err(Error::Round(format!(
                "round {round}: every sampled client was skipped (shards smaller than the batch size)"
            )));
        }
        trained.sort_by_key(|r| r.client_id);

        let online_entries: Vec<(usize, &EncoderParams)> =
            trained.iter().map(|r| (r.client_id, &r.online)).collect();
        let target_entries: Vec<(usize, &EncoderParams)> =
            trained.iter().map(|r| (r.client_id, &r.target)).collect();
        if cfg.weighted_avg {
            let weights: Vec<f64> = trained.iter().map(|r| r.shard_len as f64).collect();
            online = fedavg_weighted(&online_entries, &weights)?;
            target = fedavg_weighted(&target_entries, &weights)?;
        } else {
            online = fedavg(&online_entries)?;
            target = fedavg(&target_entries)?;
        }

        let locals: Vec<Centroids> = trained.iter().map(|r| r.local_centroids.clone()).collect();
        centroids = cluster_pooled_locals(
            &locals,
            cfg.global_clusters,
            &SinkhornConfig::default(),
            cfg.seed,
            round as u64,
        )?;

        let run_probes = round % cfg.eval_every == 0 || round == cfg.rounds;
        metrics.push(round_metrics(
            dataset, cfg, &plan, &target, &centroids, round, &trained, run_probes,
        )?);
    }

    Ok(FederationRun {
        metrics,
        init_online: online0,
        init_target: target0,
        online,
        target,
        global_centroids: centroids,
    })
}

/// Local-epoch scaling when the client count changes: `E * K_new / K_base`,
/// rounded, floored at 1.
pub fn scale_local_epochs(e_base: usize, k_base: usize, k_new: usize) -> Result<usize> {
    if e_base == 0 || k_base == 0 || k_new == 0 {
        return Err(Error::Config("scaling inputs must be positive".into()));
    }
    let scaled = (e_base as f64 * k_new as f64 / k_base as f64).round() as usize;
    Ok(scaled.max(1))
}

/// Learning-rate scaling when the participation ratio changes:
/// `lr * sqrt(R_new / R_base)`.
pub fn scale_lr(lr_base: f64, r_base: f64, r_new: f64) -> Result<f64> {
    if !(lr_base > 0.0 && r_base > 0.0 && r_new > 0.0) {
        return Err(Error::Config("scaling inputs must be positive".into()));
    }
    Ok(lr_base * (r_new / r_base).sqrt())
}
