//! Subcommand implementations as plain library functions so integration
//! tests can drive them in-process and assert on the returned artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use orchestra_core::clustering::{
    inter_cluster_mixing, nearest_assignment, sinkhorn_balanced, SinkhornConfig,
};
use orchestra_core::datasets::{
    avg_classes_per_client, dirichlet_partition, gen_mixture, CountRule, Dataset,
};
use orchestra_core::evaluation::{
    alignment_score, hyperparam_search, knn_probe, linear_probe, tuner_score, uniformity_score,
    TUNE_ROUNDS_DEFAULT,
};
use orchestra_core::numcore::{
    compute_loss_and_grads, finite_diff_grads, softmax_rows, DenseMatrix, EncoderParams,
};
use orchestra_core::protocol::{run_federation, FederationConfig, FederationRun, RoundMetrics};
use orchestra_core::rng::{Purpose, StreamRng};
use orchestra_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{fnv1a64, ExperimentConfig};

/// One metrics.jsonl line: the round observation plus run identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub mean_cluster_loss: f64,
    pub mean_deg_loss: f64,
    pub delta: f64,
    pub align: f64,
    pub unif: f64,
    pub knn_acc: Option<f64>,
    pub linear_acc: Option<f64>,
    pub participants: Vec<usize>,
}

impl MetricsRecord {
    fn new(m: &RoundMetrics, hash: &str, cfg: &ExperimentConfig) -> Self {
        MetricsRecord {
            round: m.round,
            config_hash: hash.to_string(),
            seed: cfg.seed,
            method: cfg.method.name().to_string(),
            mean_cluster_loss: m.mean_cluster_loss,
            mean_deg_loss: m.mean_deg_loss,
            delta: m.delta,
            align: m.align,
            unif: m.unif,
            knn_acc: m.knn_acc,
            linear_acc: m.linear_acc,
            participants: m.participants.clone(),
        }
    }
}

/// Final-state figures written to summary.csv.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub knn_acc: f64,
    pub linear_acc: f64,
    pub delta: f64,
    pub align: f64,
    pub unif: f64,
    pub tuner: f64,
}

impl SummaryRow {
    fn from_final(m: &RoundMetrics) -> Self {
        SummaryRow {
            knn_acc: m.knn_acc.expect("final round always probes"),
            linear_acc: m.linear_acc.expect("final round always probes"),
            delta: m.delta,
            align: m.align,
            unif: m.unif,
            tuner: tuner_score(m.align, m.unif),
        }
    }

    fn to_csv(self) -> String {
        format!(
            "knn_acc,linear_acc,delta,align,unif,tuner_score\n{},{},{},{},{},{}\n",
            self.knn_acc, self.linear_acc, self.delta, self.align, self.unif, self.tuner
        )
    }
}

/// Where a finished run landed and what it measured.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub hash: String,
    pub dir: PathBuf,
    pub config_path: PathBuf,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub rounds_written: usize,
    pub summary: SummaryRow,
}

/// Runs one experiment and writes `config.json`, `metrics.jsonl`, and
/// `summary.csv` under `<outdir>/<config-hash>/`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let dataset = cfg.dataset()?;
    let shards = dirichlet_partition(&dataset, cfg.clients, cfg.alpha, cfg.seed, 1)?;
    let fed = cfg.federation();
    let run = run_federation(&fed, &dataset, &shards)?;

    let hash = cfg.hash();
    let dir = cfg.outdir.join(&hash);
    std::fs::create_dir_all(&dir)?;

    let config_path = dir.join("config.json");
    let mut config_text = serde_json::to_string_pretty(cfg).expect("config serializes");
    config_text.push('\n');
    std::fs::write(&config_path, config_text)?;

    let metrics_path = dir.join("metrics.jsonl");
    let mut lines = String::new();
    for m in &run.metrics {
        lines.push_str(&serde_json::to_string(&MetricsRecord::new(m, &hash, cfg)).expect("record serializes"));
        lines.push('\n');
    }
    std::fs::write(&metrics_path, lines)?;

    let summary = match run.metrics.last() {
        Some(last) => SummaryRow::from_final(last),
        None => init_summary(&dataset, &run, &fed)?,
    };
    let summary_path = dir.join("summary.csv");
    std::fs::write(&summary_path, summary.to_csv())?;

    Ok(RunArtifacts {
        hash,
        dir,
        config_path,
        metrics_path,
        summary_path,
        rounds_written: run.metrics.len(),
        summary,
    })
}

/// Summary figures for a zero-round run: the initial encoder and centroids
/// evaluated on the same seeded 80/20 split a training run would use.
fn init_summary(
    dataset: &Dataset,
    run: &FederationRun,
    cfg: &FederationConfig,
) -> Result<SummaryRow> {
    let mut ids: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = StreamRng::for_purpose(cfg.seed, Purpose::ProbeSplit);
    rng.shuffle(&mut ids);
    let split = ids.len() * 4 / 5;
    let (train_ids, test_ids) = ids.split_at(split);

    let train_reps = run.target.forward(&dataset.gather(train_ids))?;
    let test_reps = run.target.forward(&dataset.gather(test_ids))?;
    let train_labels: Vec<usize> = train_ids.iter().map(|&i| dataset.labels()[i]).collect();
    let test_labels: Vec<usize> = test_ids.iter().map(|&i| dataset.labels()[i]).collect();
    let knn = knn_probe(&train_reps, &train_labels, &test_reps, &test_labels, cfg.knn_k)?;
    let linear = linear_probe(
        &train_reps,
        &train_labels,
        &test_reps,
        &test_labels,
        cfg.probe_epochs,
        cfg.probe_lr,
    )?;

    let delta_ids = &test_ids[..test_ids.len().min(256)];
    let batch = dataset.gather(delta_ids);
    let delta_reps = run.target.forward(&batch)?;
    let assign = nearest_assignment(&delta_reps, &run.global_centroids)?;
    let delta = inter_cluster_mixing(&run.global_centroids, &delta_reps, &assign)?
        .expect("at least two global clusters");

    let mut aug_rng = StreamRng::new(cfg.seed, Purpose::EvalAugment, 0, 0);
    let align = alignment_score(&run.target, &batch, &cfg.augment_config(), &mut aug_rng)?;
    let unif = uniformity_score(&run.target, &batch, cfg.tau_unif)?;

    Ok(SummaryRow {
        knn_acc: knn.accuracy,
        linear_acc: linear.accuracy,
        delta,
        align,
        unif,
        tuner: tuner_score(align, unif),
    })
}

/// Grid-search description: a base config plus per-key value lists whose
/// cartesian product forms the grid.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    base: serde_json::Value,
    #[serde(default)]
    vary: BTreeMap<String, Vec<serde_json::Value>>,
    #[serde(default)]
    tune_rounds: Option<usize>,
}

/// Keys the grid must not vary: every entry shares one dataset and one
/// partition, so anything shaping those is pinned to the base config.
const PINNED_KEYS: &[&str] = &[
    "classes",
    "input_dim",
    "per_class",
    "class_sep",
    "within_std",
    "cifar_path",
    "clients",
    "alpha",
    "seed",
    "outdir",
];

/// One scored grid entry, in the displayed (score-descending) order.
#[derive(Debug, Clone)]
pub struct TuneRow {
    pub config: ExperimentConfig,
    /// The varied keys and this entry's values for them.
    pub varied: BTreeMap<String, serde_json::Value>,
    pub align: Option<f64>,
    pub unif: Option<f64>,
    pub score: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TuneArtifacts {
    pub table_path: PathBuf,
    /// Rows sorted by score descending (ties: lower lr, then grid order).
    pub rows: Vec<TuneRow>,
}

impl TuneArtifacts {
    /// The winning entry; the sort order puts it first.
    pub fn best(&self) -> &TuneRow {
        &self.rows[0]
    }
}

/// Expands the grid file, scores every entry with the tuning objective, and
/// writes `tune.csv` under `<outdir>/<grid-hash>/`.
pub fn cmd_tune(grid_path: &Path) -> Result<TuneArtifacts> {
    let text = std::fs::read_to_string(grid_path)?;
    let canonical: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("grid file: {e}")))?;
    let grid_hash = format!(
        "{:016x}",
        fnv1a64(canonical.to_string().as_bytes())
    );
    let spec: GridFile =
        serde_json::from_value(canonical).map_err(|e| Error::Config(format!("grid file: {e}")))?;

    for key in spec.vary.keys() {
        if PINNED_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "grid key '{key}' shapes the dataset or partition shared by all entries; \
                 set it in \"base\" instead"
            )));
        }
    }
    let base_obj = match &spec.base {
        serde_json::Value::Object(map) => map.clone(),
        _ => return Err(Error::Config("grid \"base\" must be a JSON object".into())),
    };

    // Cartesian product in key order; each entry remembers its assignment.
    let mut entries: Vec<(serde_json::Map<String, serde_json::Value>, BTreeMap<String, serde_json::Value>)> =
        vec![(base_obj, BTreeMap::new())];
    for (key, values) in &spec.vary {
        if values.is_empty() {
            return Err(Error::Config(format!(
                "grid key '{key}' has no values; the grid is empty"
            )));
        }
        let mut next = Vec::with_capacity(entries.len() * values.len());
        for (obj, varied) in &entries {
            for v in values {
                let mut obj = obj.clone();
                obj.insert(key.clone(), v.clone());
                let mut varied = varied.clone();
                varied.insert(key.clone(), v.clone());
                next.push((obj, varied));
            }
        }
        entries = next;
    }

    let mut configs = Vec::with_capacity(entries.len());
    for (obj, varied) in entries {
        let cfg: ExperimentConfig = serde_json::from_value(serde_json::Value::Object(obj))
            .map_err(|e| Error::Config(format!("grid entry {varied:?}: {e}")))?;
        cfg.validate()
            .map_err(|e| Error::Config(format!("grid entry {varied:?}: {e}")))?;
        configs.push((cfg, varied));
    }

    let base = &configs[0].0;
    let dataset = base.dataset()?;
    let shards = dirichlet_partition(&dataset, base.clients, base.alpha, base.seed, 1)?;
    let grid: Vec<FederationConfig> = configs.iter().map(|(c, _)| c.federation()).collect();
    let tune_rounds = spec.tune_rounds.unwrap_or(TUNE_ROUNDS_DEFAULT);
    let outcome = hyperparam_search(&grid, &dataset, &shards, tune_rounds)?;

    let mut rows: Vec<TuneRow> = outcome
        .rows
        .iter()
        .map(|r| TuneRow {
            config: configs[r.index].0.clone(),
            varied: configs[r.index].1.clone(),
            align: r.align,
            unif: r.unif,
            score: r.score,
            error: r.error.clone(),
        })
        .collect();
    // Same preference as the search itself: score, then lower lr, then
    // grid order, so rows[0] is the reported winner.
    let order: Vec<usize> = {
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.sort_by(|&a, &b| {
            rows[b]
                .score
                .total_cmp(&rows[a].score)
                .then(rows[a].config.lr.total_cmp(&rows[b].config.lr))
                .then(a.cmp(&b))
        });
        idx
    };
    rows = order.into_iter().map(|i| rows[i].clone()).collect();

    let dir = base.outdir.join(&grid_hash);
    std::fs::create_dir_all(&dir)?;
    let table_path = dir.join("tune.csv");
    std::fs::write(&table_path, tune_table_csv(&spec.vary, &rows))?;

    Ok(TuneArtifacts { table_path, rows })
}

fn tune_table_csv(
    vary: &BTreeMap<String, Vec<serde_json::Value>>,
    rows: &[TuneRow],
) -> String {
    let keys: Vec<&String> = vary.keys().collect();
    let mut out = String::new();
    for key in &keys {
        let _ = write!(out, "{key},");
    }
    out.push_str("align,unif,score,error\n");
    for row in rows {
        for key in &keys {
            let cell = row.varied.get(*key).map(json_cell).unwrap_or_default();
            let _ = write!(out, "{cell},");
        }
        let _ = writeln!(
            out,
            "{},{},{},{}",
            row.align.map(|v| v.to_string()).unwrap_or_default(),
            row.unif.map(|v| v.to_string()).unwrap_or_default(),
            row.score,
            row.error.as_deref().map(sanitize_cell).unwrap_or_default(),
        );
    }
    out
}

fn json_cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => sanitize_cell(s),
        other => sanitize_cell(&other.to_string()),
    }
}

/// Keeps one-value-per-comma parsing trivial for downstream scripts.
fn sanitize_cell(s: &str) -> String {
    s.replace([',', '\n'], ";")
}

/// Inputs of the class-spread table.
#[derive(Debug, Clone)]
pub struct StatsSpec {
    pub classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub clients: usize,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub class_sep: f64,
    pub within_std: f64,
    pub data_seed: u64,
}

/// Average classes per client for one (alpha, seed) partition draw.
#[derive(Debug, Clone)]
pub struct StatsCell {
    pub alpha: f64,
    pub seed: u64,
    pub at_least_one: Option<f64>,
    pub at_least_one_percent: Option<f64>,
    pub note: Option<String>,
}

/// Per-alpha medians over the seeds that produced a partition.
#[derive(Debug, Clone)]
pub struct StatsMedian {
    pub alpha: f64,
    pub at_least_one: Option<f64>,
    pub at_least_one_percent: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StatsTable {
    pub cells: Vec<StatsCell>,
    pub medians: Vec<StatsMedian>,
}

impl StatsTable {
    /// One CSV with per-seed rows and a `median` row closing each alpha group.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,seed,at_least_one,at_least_one_percent,note\n");
        for median in &self.medians {
            for cell in self.cells.iter().filter(|c| c.alpha == median.alpha) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    cell.alpha,
                    cell.seed,
                    cell.at_least_one.map(|v| v.to_string()).unwrap_or_default(),
                    cell.at_least_one_percent
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                    cell.note.as_deref().map(sanitize_cell).unwrap_or_default(),
                );
            }
            let _ = writeln!(
                out,
                "{},median,{},{},",
                median.alpha,
                median.at_least_one.map(|v| v.to_string()).unwrap_or_default(),
                median
                    .at_least_one_percent
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            );
        }
        out
    }

    /// Median under the at-least-one rule for a given alpha, if any draw
    /// succeeded.
    pub fn median_at_least_one(&self, alpha: f64) -> Option<f64> {
        self.medians
            .iter()
            .find(|m| m.alpha == alpha)
            .and_then(|m| m.at_least_one)
    }
}

/// Measures how many classes each client sees across partition draws: every
/// (alpha, seed) pair is partitioned once and scored under both counting
/// rules, with per-alpha medians.
pub fn cmd_partition_stats(spec: &StatsSpec) -> Result<StatsTable> {
    if spec.alphas.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("need at least one alpha and one seed".into()));
    }
    let dataset = gen_mixture(
        spec.classes,
        spec.input_dim,
        spec.per_class,
        spec.class_sep,
        spec.within_std,
        spec.data_seed,
    )?;
    let mut cells = Vec::with_capacity(spec.alphas.len() * spec.seeds.len());
    let mut medians = Vec::with_capacity(spec.alphas.len());
    for &alpha in &spec.alphas {
        let mut ones = Vec::new();
        let mut percents = Vec::new();
        for &seed in &spec.seeds {
            let cell = match dirichlet_partition(&dataset, spec.clients, alpha, seed, 1) {
                Ok(shards) => {
                    let one = avg_classes_per_client(
                        &shards,
                        dataset.labels(),
                        dataset.n_classes(),
                        CountRule::AtLeastOne,
                    )?;
                    let percent = avg_classes_per_client(
                        &shards,
                        dataset.labels(),
                        dataset.n_classes(),
                        CountRule::AtLeastOnePercent,
                    )?;
                    ones.push(one);
                    percents.push(percent);
                    StatsCell {
                        alpha,
                        seed,
                        at_least_one: Some(one),
                        at_least_one_percent: Some(percent),
                        note: None,
                    }
                }
                // A failed draw is reported in its cell, not fatal.
                Err(e) => StatsCell {
                    alpha,
                    seed,
                    at_least_one: None,
                    at_least_one_percent: None,
                    note: Some(e.to_string()),
                },
            };
            cells.push(cell);
        }
        medians.push(StatsMedian {
            alpha,
            at_least_one: median(&mut ones),
            at_least_one_percent: median(&mut percents),
        });
    }
    Ok(StatsTable { cells, medians })
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    })
}

/// Inputs of the standalone clustering utility.
#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub input: PathBuf,
    pub clusters: usize,
    pub out: PathBuf,
    pub seed: u64,
    pub sinkhorn: SinkhornConfig,
}

#[derive(Debug, Clone)]
pub struct ClusterArtifacts {
    pub assignments_path: PathBuf,
    pub centroids_path: PathBuf,
    /// `None` for a single cluster, where mixing is undefined.
    pub delta: Option<f64>,
    pub sizes: Vec<usize>,
}

/// Balanced-clusters a CSV of vectors (rows normalized to the unit sphere)
/// and writes `assignments.csv` and `centroids.csv` under `out`.
pub fn cmd_cluster(spec: &ClusterSpec) -> Result<ClusterArtifacts> {
    if spec.clusters == 0 {
        return Err(Error::Config("cluster count must be at least 1".into()));
    }
    let raw = read_vectors_csv(&spec.input)?;
    if raw.rows() < spec.clusters {
        return Err(Error::Config(format!(
            "{} points cannot fill {} clusters",
            raw.rows(),
            spec.clusters
        )));
    }
    let points = normalize_rows(&raw)?;
    let (centroids, assignment) =
        sinkhorn_balanced(&points, spec.clusters, &spec.sinkhorn, spec.seed)?;
    let delta = inter_cluster_mixing(&centroids, &points, &assignment.assignment)?;
    let sizes = assignment.cluster_sizes(spec.clusters);

    std::fs::create_dir_all(&spec.out)?;
    let assignments_path = spec.out.join("assignments.csv");
    let mut text = String::from("row,cluster\n");
    for (row, &g) in assignment.assignment.iter().enumerate() {
        let _ = writeln!(text, "{row},{g}");
    }
    std::fs::write(&assignments_path, text)?;

    let centroids_path = spec.out.join("centroids.csv");
    std::fs::write(&centroids_path, vectors_to_csv(&centroids.as_rows()))?;

    Ok(ClusterArtifacts {
        assignments_path,
        centroids_path,
        delta,
        sizes,
    })
}

/// Reads a vector table: header `f0,f1,...` then one row of floats per point.
pub fn read_vectors_csv(path: &Path) -> Result<DenseMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("vector file is empty".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let d = cols.len();
    for (i, name) in cols.iter().enumerate() {
        if *name != format!("f{i}") {
            return Err(Error::Format(format!(
                "expected header column {i} to be 'f{i}', found '{name}'"
            )));
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d {
            return Err(Error::Format(format!(
                "line {}: {} fields, expected {d}",
                lineno + 2,
                fields.len()
            )));
        }
        let mut row = Vec::with_capacity(d);
        for f in fields {
            row.push(f.trim().parse::<f64>().map_err(|_| {
                Error::Format(format!("line {}: '{f}' is not a number", lineno + 2))
            })?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("vector file holds no data rows".into()));
    }
    DenseMatrix::from_rows(&rows)
}

/// Serializes vectors row-per-line under an `f0,f1,...` header.
pub fn vectors_to_csv(m: &DenseMatrix) -> String {
    let mut out = String::new();
    for c in 0..m.cols() {
        if c > 0 {
            out.push(',');
        }
        let _ = write!(out, "f{c}");
    }
    out.push('\n');
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

fn normalize_rows(m: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(Error::Config(format!(
                "input row {r} has zero norm and no direction to cluster"
            )));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(out)
}

/// Analytic-vs-finite-difference agreement for one objective.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub loss: &'static str,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_err < self.tolerance)
    }
}

const GRAD_D_IN: usize = 8;
const GRAD_REP: usize = 4;
const GRAD_BATCH: usize = 6;
const GRAD_FD_EPS: f64 = 1e-5;
/// Relative-error ceiling for a healthy analytic gradient.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Checks every training objective's analytic gradients against central
/// differences over `draws` random instances each.
pub fn cmd_gradcheck(seed: u64, draws: usize) -> Result<GradCheckReport> {
    if draws == 0 {
        return Err(Error::Config("need at least one draw per loss".into()));
    }
    use orchestra_core::numcore::LossSpec;
    let losses: Vec<(&'static str, u64)> = vec![
        ("mean-squared", 0),
        ("cluster", 1),
        ("rotation", 2),
        ("spectral", 3),
    ];
    let mut rows = Vec::with_capacity(losses.len());
    for (name, variant) in losses {
        let mut worst = 0.0f64;
        for draw in 0..draws {
            let mut rng = StreamRng::new(seed, Purpose::GradCheck, draw as u64, variant);
            let params = EncoderParams::init(&mut rng, GRAD_D_IN, &[7], GRAD_REP);
            let batch = random_matrix(&mut rng, GRAD_BATCH, GRAD_D_IN);
            let err = match variant {
                0 => {
                    let targets = random_matrix(&mut rng, GRAD_BATCH, GRAD_REP);
                    check_spec(&params, &LossSpec::MeanSquared { batch: &batch, targets: &targets })?
                }
                1 => {
                    let g = 3;
                    let target_probs = softmax_rows(&random_matrix(&mut rng, GRAD_BATCH, g));
                    let centroids = unit_columns(&mut rng, GRAD_REP, g);
                    check_spec(
                        &params,
                        &LossSpec::Cluster {
                            aug_batch: &batch,
                            target_probs: &target_probs,
                            centroids: &centroids,
                            tau: 0.3,
                        },
                    )?
                }
                2 => {
                    let labels: Vec<usize> = (0..GRAD_BATCH)
                        .map(|_| rng.next_range(orchestra_core::ROTATION_CLASSES))
                        .collect();
                    check_spec(&params, &LossSpec::Rotation { rotated_batch: &batch, labels: &labels })?
                }
                _ => {
                    let aug = random_matrix(&mut rng, GRAD_BATCH, GRAD_D_IN);
                    check_spec(&params, &LossSpec::Spectral { batch: &batch, aug_batch: &aug })?
                }
            };
            worst = worst.max(err);
        }
        rows.push(GradCheckRow { loss: name, max_rel_err: worst });
    }
    Ok(GradCheckReport { rows, tolerance: GRAD_TOLERANCE })
}

fn check_spec(
    params: &EncoderParams,
    spec: &orchestra_core::numcore::LossSpec<'_>,
) -> Result<f64> {
    let (_, analytic) = compute_loss_and_grads(params, spec)?;
    let numeric = finite_diff_grads(
        params,
        |p| orchestra_core::numcore::compute_loss(p, spec),
        GRAD_FD_EPS,
    )?;
    let a = analytic.to_flat();
    let f = numeric.to_flat();
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(&f) {
        worst = worst.max((x - y).abs() / y.abs().max(1.0));
    }
    Ok(worst)
}

fn random_matrix(rng: &mut StreamRng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn unit_columns(rng: &mut StreamRng, rows: usize, cols: usize) -> DenseMatrix {
    let mut m = random_matrix(rng, rows, cols);
    for c in 0..cols {
        let norm = (0..rows).map(|r| m.get(r, c).powi(2)).sum::<f64>().sqrt().max(1e-12);
        for r in 0..rows {
            m.set(r, c, m.get(r, c) / norm);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd_lists() {
        assert_eq!(median(&mut []), None);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn vector_csv_round_trips() {
        let m = DenseMatrix::from_rows(&[vec![1.0, -0.5], vec![0.25, 2.0]]).unwrap();
        let text = vectors_to_csv(&m);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.csv");
        std::fs::write(&path, &text).unwrap();
        let back = read_vectors_csv(&path).unwrap();
        assert_eq!(back.data(), m.data());
    }

    #[test]
    fn malformed_vector_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.csv");
        std::fs::write(&path, "x0,x1\n1,2\n").unwrap();
        assert!(matches!(read_vectors_csv(&path), Err(Error::Format(_))));
        std::fs::write(&path, "f0,f1\n1\n").unwrap();
        assert!(matches!(read_vectors_csv(&path), Err(Error::Format(_))));
        std::fs::write(&path, "f0,f1\n1,two\n").unwrap();
        assert!(matches!(read_vectors_csv(&path), Err(Error::Format(_))));
    }

    #[test]
    fn gradcheck_covers_each_loss_once_and_passes() {
        let report = cmd_gradcheck(11, 3).unwrap();
        let names: Vec<&str> = report.rows.iter().map(|r| r.loss).collect();
        assert_eq!(names, ["mean-squared", "cluster", "rotation", "spectral"]);
        assert!(report.passed(), "{:?}", report.rows);
    }
}
