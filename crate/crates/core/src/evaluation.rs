//! Representation-quality probes (cosine kNN and a linear classifier) and
//! the unsupervised tuning score used to pick hyperparameters without
//! labels.

#![allow(clippy::needless_range_loop)]

use rayon::prelude::*;

use crate::datasets::{augment_batch, AugmentConfig, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::numcore::{dot, softmax_rows, DenseMatrix, EncoderParams};
use crate::protocol::{run_federation, FederationConfig};
use crate::rng::{Purpose, StreamRng};

/// Which probe produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Knn,
    Linear,
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    /// Test accuracy in [0, 1].
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// k for the kNN probe; epochs for the linear probe.
    pub hyperparam: usize,
}

/// Default rounds used by [`hyperparam_search`].
pub const TUNE_ROUNDS_DEFAULT: usize = 20;

fn check_probe_shapes(
    train_reps: &DenseMatrix,
    train_labels: &[usize],
    test_reps: &DenseMatrix,
    test_labels: &[usize],
) -> Result<()> {
    if train_reps.rows() != train_labels.len() || test_reps.rows() != test_labels.len() {
        return Err(Error::Shape(format!(
            "labels ({}, {}) do not match representations ({}, {})",
            train_labels.len(),
            test_labels.len(),
            train_reps.rows(),
            test_reps.rows()
        )));
    }
    if train_reps.cols() != test_reps.cols() {
        return Err(Error::Shape(format!(
            "train dim {} vs test dim {}",
            train_reps.cols(),
            test_reps.cols()
        )));
    }
    if train_reps.rows() == 0 || test_reps.rows() == 0 {
        return Err(Error::Config("probe needs nonempty train and test sets".into()));
    }
    Ok(())
}

/// Cosine-similarity k-nearest-neighbor probe. Votes are counted over the k
/// most similar training points; ties go to the class with the larger summed
/// similarity, then to the lower class index. `k = None` uses
/// `min(200, n_train / 10)` (at least 1).
pub fn knn_probe(
    train_reps: &DenseMatrix,
    train_labels: &[usize],
    test_reps: &DenseMatrix,
    test_labels: &[usize],
    k: Option<usize>,
) -> Result<ProbeReport> {
    check_probe_shapes(train_reps, train_labels, test_reps, test_labels)?;
    let n_train = train_reps.rows();
    let k = match k {
        Some(0) => return Err(Error::Config("k must be at least 1".into())),
        Some(k) => k,
        None => (n_train / 10).clamp(1, 200),
    };
    if k > n_train {
        return Err(Error::Config(format!(
            "k = {k} exceeds {n_train} training points"
        )));
    }
    let n_classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(0, |&m| m + 1);

    let mut correct = 0usize;
    for i in 0..test_reps.rows() {
        let x = test_reps.row(i);
        let mut sims: Vec<(f64, usize)> = (0..n_train)
            .map(|j| (dot(x, train_reps.row(j)), j))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; n_classes];
        let mut sim_mass = vec![0.0f64; n_classes];
        for &(s, j) in &sims[..k] {
            votes[train_labels[j]] += 1;
            sim_mass[train_labels[j]] += s;
        }
        let mut best = 0usize;
        for c in 1..n_classes {
            if votes[c] > votes[best]
                || (votes[c] == votes[best] && sim_mass[c] > sim_mass[best])
            {
                best = c;
            }
        }
        if best == test_labels[i] {
            correct += 1;
        }
    }
    Ok(ProbeReport {
        kind: ProbeKind::Knn,
        accuracy: correct as f64 / test_reps.rows() as f64,
        n_train,
        n_test: test_reps.rows(),
        hyperparam: k,
    })
}

/// Multinomial logistic regression on frozen representations, trained by
/// full-batch gradient descent from zero-initialized weights.
pub fn linear_probe(
    train_reps: &DenseMatrix,
    train_labels: &[usize],
    test_reps: &DenseMatrix,
    test_labels: &[usize],
    epochs: usize,
    lr: f64,
) -> Result<ProbeReport> {
    check_probe_shapes(train_reps, train_labels, test_reps, test_labels)?;
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::Config(format!("probe lr {lr} must be positive")));
    }
    let first = train_labels[0];
    if train_labels.iter().all(|&l| l == first) {
        return Err(Error::Config(
            "linear probe needs at least two classes in the training labels".into(),
        ));
    }
    let n = train_reps.rows();
    let d = train_reps.cols();
    let n_classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map(|&m| m + 1)
        .expect("nonempty labels");

    let mut weight = DenseMatrix::zeros(n_classes, d);
    let mut bias = vec![0.0f64; n_classes];
    for _ in 0..epochs {
        let mut logits = train_reps.matmul_bt(&weight)?;
        for i in 0..n {
            for (c, b) in bias.iter().enumerate() {
                logits.set(i, c, logits.get(i, c) + b);
            }
        }
        let probs = softmax_rows(&logits);
        // err = (probs - onehot) / n
        let mut err = probs;
        for (i, &label) in train_labels.iter().enumerate() {
            err.set(i, label, err.get(i, label) - 1.0);
        }
        err.scale(1.0 / n as f64);
        let grad_w = err.matmul_at(train_reps)?;
        weight.add_scaled(&grad_w, -lr)?;
        for (c, b) in bias.iter_mut().enumerate() {
            let mut g = 0.0;
            for i in 0..n {
                g += err.get(i, c);
            }
            *b -= lr * g;
        }
    }

    let mut logits = test_reps.matmul_bt(&weight)?;
    for i in 0..test_reps.rows() {
        for (c, b) in bias.iter().enumerate() {
            logits.set(i, c, logits.get(i, c) + b);
        }
    }
    let mut correct = 0usize;
    for i in 0..test_reps.rows() {
        let row = logits.row(i);
        let mut best = 0usize;
        for c in 1..n_classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == test_labels[i] {
            correct += 1;
        }
    }
    Ok(ProbeReport {
        kind: ProbeKind::Linear,
        accuracy: correct as f64 / test_reps.rows() as f64,
        n_train: n,
        n_test: test_reps.rows(),
        hyperparam: epochs,
    })
}

/// Mean cosine similarity between each sample's representation and the
/// representation of one augmentation of it.
pub fn alignment_score(
    params: &EncoderParams,
    batch: &DenseMatrix,
    augment: &AugmentConfig,
    rng: &mut StreamRng,
) -> Result<f64> {
    if batch.rows() == 0 {
        return Err(Error::Config("alignment needs at least one sample".into()));
    }
    let augmented = augment_batch(batch, augment, rng);
    let reps = params.forward(batch)?;
    let aug_reps = params.forward(&augmented)?;
    let mut total = 0.0;
    for i in 0..reps.rows() {
        total += dot(reps.row(i), aug_reps.row(i));
    }
    Ok(total / reps.rows() as f64)
}

/// Negated mean log-mean similarity kernel over all pairs (self-pairs
/// included): `-mean_x ln mean_y exp(cos(f(x), f(y)) / tau)`. A collapsed
/// encoder attains the minimum `-1/tau` exactly.
pub fn uniformity_score(params: &EncoderParams, batch: &DenseMatrix, tau: f64) -> Result<f64> {
    if batch.rows() < 2 {
        return Err(Error::Config(format!(
            "uniformity needs at least 2 samples, got {}",
            batch.rows()
        )));
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let reps = params.forward(batch)?;
    let gram = reps.matmul_bt(&reps)?;
    let n = reps.rows();
    let mut total = 0.0;
    for i in 0..n {
        // log-mean-exp against the row maximum: exact when all similarities
        // coincide, overflow-proof for sharp temperatures otherwise.
        let row = gram.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v / tau));
        let sum: f64 = row.iter().map(|&v| (v / tau - m).exp()).sum();
        total += m + (sum / n as f64).ln();
    }
    Ok(-total / n as f64)
}

/// The label-free selection score: alignment plus 0.2 times uniformity.
pub fn tuner_score(align: f64, unif: f64) -> f64 {
    align + 0.2 * unif
}

/// One grid entry's outcome in a hyperparameter search.
#[derive(Debug, Clone)]
pub struct SearchRow {
    pub index: usize,
    pub config: FederationConfig,
    pub align: Option<f64>,
    pub unif: Option<f64>,
    /// Tuning score; negative infinity when the run failed.
    pub score: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best_index: usize,
    pub rows: Vec<SearchRow>,
}

impl SearchOutcome {
    pub fn best(&self) -> &SearchRow {
        &self.rows[self.best_index]
    }
}

/// Runs every grid entry for `tune_rounds` rounds on the first 80% of each
/// client's shard and scores the trained target encoder with
/// [`tuner_score`] on the held-out 20%. Failed runs score negative infinity
/// and the search continues. Ties prefer the lower learning rate, then the
/// earlier grid position.
pub fn hyperparam_search(
    grid: &[FederationConfig],
    dataset: &Dataset,
    shards: &[ClientShard],
    tune_rounds: usize,
) -> Result<SearchOutcome> {
    if grid.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    let mut train_shards = Vec::with_capacity(shards.len());
    let mut held_out: Vec<Vec<usize>> = Vec::with_capacity(shards.len());
    for shard in shards {
        let n = shard.sample_ids.len();
        let h = (n.div_ceil(5)).min(n);
        train_shards.push(ClientShard {
            client_id: shard.client_id,
            sample_ids: shard.sample_ids[..n - h].to_vec(),
        });
        held_out.push(shard.sample_ids[n - h..].to_vec());
    }

    let rows: Vec<SearchRow> = grid
        .par_iter()
        .enumerate()
        .map(|(index, base)| {
            let cfg = FederationConfig {
                rounds: tune_rounds,
                ..base.clone()
            };
            let scored = run_federation(&cfg, dataset, &train_shards).and_then(|run| {
                score_held_out(&run.target, dataset, &held_out, &cfg)
            });
            match scored {
                Ok((align, unif)) => SearchRow {
                    index,
                    config: base.clone(),
                    align: Some(align),
                    unif: Some(unif),
                    score: tuner_score(align, unif),
                    error: None,
                },
                Err(e) => SearchRow {
                    index,
                    config: base.clone(),
                    align: None,
                    unif: None,
                    score: f64::NEG_INFINITY,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let mut best_index = 0;
    for row in &rows[1..] {
        let best = &rows[best_index];
        let better = row.score > best.score
            || (row.score == best.score && row.config.lr < best.config.lr);
        if better {
            best_index = row.index;
        }
    }
    Ok(SearchOutcome { best_index, rows })
}

fn score_held_out(
    target: &EncoderParams,
    dataset: &Dataset,
    held_out: &[Vec<usize>],
    cfg: &FederationConfig,
) -> Result<(f64, f64)> {
    let augment = cfg.augment_config();
    let mut align_sum = 0.0;
    let mut align_n = 0usize;
    let mut unif_sum = 0.0;
    let mut unif_n = 0usize;
    for (client, ids) in held_out.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let batch = dataset.gather(ids);
        let mut rng = StreamRng::new(cfg.seed, Purpose::EvalSample, 0, client as u64);
        align_sum += alignment_score(target, &batch, &augment, &mut rng)?;
        align_n += 1;
        if ids.len() >= 2 {
            unif_sum += uniformity_score(target, &batch, cfg.tau_unif)?;
            unif_n += 1;
        }
    }
    if align_n == 0 || unif_n == 0 {
        return Err(Error::Config(
            "held-out evaluation sample is too small to score".into(),
        ));
    }
    Ok((align_sum / align_n as f64, unif_sum / unif_n as f64))
}
