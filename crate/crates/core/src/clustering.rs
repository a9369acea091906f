//! Balanced clustering by entropic optimal transport, plus the cluster
//! geometry diagnostics and generalization-bound evaluators built on it.
//!
//! Clustering alternates an entropic transport plan (uniform row marginals
//! over points, uniform column marginals over clusters) with a plan-weighted
//! centroid update; a greedy capacity-respecting rounding of the final plan
//! yields hard assignments whose sizes differ by at most one.

#![allow(clippy::needless_range_loop)]

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numcore::{dot, DenseMatrix};
use crate::rng::{derive_seed, Purpose, StreamRng};

/// Controls for the transport solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub epsilon: f64,
    /// Alternations of plan solve and centroid update.
    pub outer_iters: usize,
    /// Maximum scaling sweeps per plan solve.
    pub inner_iters: usize,
    /// Marginal error below which a plan solve stops.
    pub tol: f64,
    /// Independent seeded initializations; the lowest-objective solution
    /// wins. Alternating minimization has basins, so one init is not enough
    /// on small instances.
    pub restarts: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.05,
            outer_iters: 10,
            inner_iters: 100,
            tol: 1e-6,
            restarts: 8,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "epsilon {} must be positive",
                self.epsilon
            )));
        }
        if self.outer_iters == 0 || self.inner_iters == 0 || self.restarts == 0 {
            return Err(Error::Config("iteration counts must be at least 1".into()));
        }
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err(Error::Config(format!("tolerance {} must be positive", self.tol)));
        }
        Ok(())
    }
}

/// Cluster centers stored column-per-cluster (`rep_dim x n_clusters`) with
/// unit column norms.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    matrix: DenseMatrix,
}

impl Centroids {
    /// Validates unit column norms (within 1e-8).
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(Error::Shape("centroid matrix cannot be empty".into()));
        }
        for c in 0..matrix.cols() {
            let norm: f64 = (0..matrix.rows())
                .map(|r| matrix.get(r, c).powi(2))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > 1e-8 {
                return Err(Error::Numerical(format!(
                    "centroid column {c} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Centroids { matrix })
    }

    /// Number of clusters.
    pub fn count(&self) -> usize {
        self.matrix.cols()
    }

    /// Representation dimension.
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn column(&self, g: usize) -> Vec<f64> {
        (0..self.matrix.rows()).map(|r| self.matrix.get(r, g)).collect()
    }

    /// Centroid vectors as rows, in cluster order.
    pub fn as_rows(&self) -> DenseMatrix {
        self.matrix.transpose()
    }
}

/// Transport plan and its capacity-respecting hard rounding.
#[derive(Debug, Clone)]
pub struct BalancedAssignment {
    /// Cluster index per point.
    pub assignment: Vec<usize>,
    /// Entropic transport plan, `n_points x n_clusters`, total mass 1.
    pub plan: DenseMatrix,
}

impl BalancedAssignment {
    pub fn cluster_sizes(&self, n_clusters: usize) -> Vec<usize> {
        let mut sizes = vec![0usize; n_clusters];
        for &g in &self.assignment {
            sizes[g] += 1;
        }
        sizes
    }
}

/// Objective values recorded across outer iterations, for monotonicity checks.
#[derive(Debug, Clone)]
pub struct SinkhornTrace {
    /// Entropic transport objective `<C, P> + eps * KL(P | uniform)` after
    /// each plan solve.
    pub objectives: Vec<f64>,
}

fn check_unit_rows(points: &DenseMatrix) -> Result<()> {
    for (i, row) in points.iter_rows().enumerate() {
        let norm = dot(row, row).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "point {i} has norm {norm}; clustering expects unit-norm rows"
            )));
        }
    }
    Ok(())
}

/// Solves one entropic transport plan for fixed centroids. Returns the plan
/// and the transport objective.
fn solve_plan(
    points: &DenseMatrix,
    centroids: &DenseMatrix,
    cfg: &SinkhornConfig,
) -> Result<(DenseMatrix, f64)> {
    let n = points.rows();
    let g = centroids.cols();
    let row_mass = 1.0 / n as f64;
    let col_mass = 1.0 / g as f64;

    // cost = 1 - <point, centroid>, in [0, 2] for unit vectors; the kernel
    // exp(-cost / eps) overwrites it in place.
    let mut kernel = points.matmul(centroids)?;
    for v in kernel.data_mut() {
        *v = ((*v - 1.0) / cfg.epsilon).exp();
    }
    if kernel.row_sums().iter().any(|&s| s <= 0.0) || kernel.col_sums().iter().any(|&s| s <= 0.0) {
        return Err(Error::Numerical(format!(
            "entropic kernel underflowed to zero for a whole point or cluster; \
             epsilon {} is too small for this cost spread",
            cfg.epsilon
        )));
    }

    let mut u = vec![row_mass; n];
    let mut v = vec![1.0; g];
    for _ in 0..cfg.inner_iters {
        // u = row_mass / (K v)
        for i in 0..n {
            let kv = dot(kernel.row(i), &v);
            if kv <= 0.0 || !kv.is_finite() {
                return Err(Error::Numerical(format!(
                    "transport scaling degenerated (row factor {kv}); \
                     epsilon {} is too small",
                    cfg.epsilon
                )));
            }
            u[i] = row_mass / kv;
        }
        // v = col_mass / (K^T u)
        for j in 0..g {
            let mut ku = 0.0;
            for i in 0..n {
                ku += kernel.get(i, j) * u[i];
            }
            if ku <= 0.0 || !ku.is_finite() {
                return Err(Error::Numerical(format!(
                    "transport scaling degenerated (column factor {ku}); \
                     epsilon {} is too small",
                    cfg.epsilon
                )));
            }
            v[j] = col_mass / ku;
        }
        // After the v-sweep columns are exact; row error measures convergence.
        let mut err: f64 = 0.0;
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..g {
                sum += u[i] * kernel.get(i, j) * v[j];
            }
            err = err.max((sum - row_mass).abs());
        }
        if err <= cfg.tol {
            break;
        }
    }

    let plan = DenseMatrix::from_fn(n, g, |i, j| u[i] * kernel.get(i, j) * v[j]);
    let mut objective = 0.0;
    for i in 0..n {
        for j in 0..g {
            let p = plan.get(i, j);
            if p > 0.0 {
                // cost recovered from the kernel: -eps * ln k = 1 - <p, mu>.
                let cost = -cfg.epsilon * kernel.get(i, j).ln();
                objective += p * cost + cfg.epsilon * p * (p / (row_mass * col_mass)).ln();
            }
        }
    }
    Ok((plan, objective))
}

/// Greedy capacity-respecting rounding of a plan, then a final pass that
/// enforces cluster sizes of either `floor(n/g)` or `ceil(n/g)`.
fn round_plan(plan: &DenseMatrix) -> Vec<usize> {
    let n = plan.rows();
    let g = plan.cols();
    let cap = n.div_ceil(g);
    let floor = n / g;

    let mut cells: Vec<(f64, usize, usize)> = Vec::with_capacity(n * g);
    for i in 0..n {
        for j in 0..g {
            cells.push((plan.get(i, j), i, j));
        }
    }
    cells.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut assignment = vec![usize::MAX; n];
    let mut sizes = vec![0usize; g];
    for &(_, i, j) in &cells {
        if assignment[i] == usize::MAX && sizes[j] < cap {
            assignment[i] = j;
            sizes[j] += 1;
        }
    }
    debug_assert!(assignment.iter().all(|&a| a != usize::MAX));

    // Bring every cluster up to the floor by moving the best-matching point
    // out of a cluster that can spare one.
    while let Some(under) = (0..g).find(|&j| sizes[j] < floor) {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..n {
            let from = assignment[i];
            if from == under || sizes[from] <= floor {
                continue;
            }
            let w = plan.get(i, under);
            if best.is_none_or(|(bw, bi)| w > bw || (w == bw && i < bi)) {
                best = Some((w, i));
            }
        }
        let (_, mover) = best.expect("a donor cluster above the floor exists");
        sizes[assignment[mover]] -= 1;
        assignment[mover] = under;
        sizes[under] += 1;
    }
    assignment
}

/// Balanced clustering of unit-norm points into `g` clusters.
///
/// Centroids start from `g` distinct seeded points; each outer iteration
/// solves an entropic transport plan against the current centroids and
/// re-estimates every centroid as the normalized plan-weighted mean. The
/// plan is solved once more against the final centroids so the returned
/// plan, assignment, and centroids are mutually consistent. The whole
/// alternation runs once per configured restart (each from its own seeded
/// initialization) and the solution with the lowest final objective is kept.
pub fn sinkhorn_balanced(
    points: &DenseMatrix,
    g: usize,
    cfg: &SinkhornConfig,
    seed: u64,
) -> Result<(Centroids, BalancedAssignment)> {
    let (centroids, assignment, _) = sinkhorn_balanced_traced(points, g, cfg, seed)?;
    Ok((centroids, assignment))
}

/// [`sinkhorn_balanced`] plus the winning restart's objective trace.
pub fn sinkhorn_balanced_traced(
    points: &DenseMatrix,
    g: usize,
    cfg: &SinkhornConfig,
    seed: u64,
) -> Result<(Centroids, BalancedAssignment, SinkhornTrace)> {
    cfg.validate()?;
    let n = points.rows();
    if g == 0 {
        return Err(Error::Config("cluster count must be at least 1".into()));
    }
    if n < g {
        return Err(Error::Config(format!(
            "cannot form {g} clusters from {n} points"
        )));
    }
    check_unit_rows(points)?;

    let mut best: Option<(DenseMatrix, DenseMatrix, Vec<f64>)> = None;
    for restart in 0..cfg.restarts {
        let init_seed = derive_seed(seed, Purpose::CentroidInit, restart as u64, 0);
        let run = alternate_once(points, g, cfg, init_seed)?;
        let better = best
            .as_ref()
            .is_none_or(|b| run.2.last().unwrap() < b.2.last().unwrap());
        if better {
            best = Some(run);
        }
    }
    let (centroids, final_plan, objectives) = best.expect("restarts >= 1");
    let assignment = round_plan(&final_plan);

    Ok((
        Centroids::new(centroids)?,
        BalancedAssignment {
            assignment,
            plan: final_plan,
        },
        SinkhornTrace { objectives },
    ))
}

/// One full alternation from one seeded initialization. Returns the final
/// centroids, the plan re-solved against them, and the objective trace.
fn alternate_once(
    points: &DenseMatrix,
    g: usize,
    cfg: &SinkhornConfig,
    init_seed: u64,
) -> Result<(DenseMatrix, DenseMatrix, Vec<f64>)> {
    let n = points.rows();
    let d = points.cols();
    let mut rng = StreamRng::for_purpose(init_seed, Purpose::CentroidInit);
    let picks = rng.sample_distinct(n, g);
    let mut centroids = DenseMatrix::from_fn(d, g, |r, c| points.get(picks[c], r));
    normalize_columns(&mut centroids);

    let mut objectives = Vec::with_capacity(cfg.outer_iters + 1);
    for _ in 0..cfg.outer_iters {
        let (plan, obj) = solve_plan(points, &centroids, cfg)?;
        objectives.push(obj);
        update_centroids(points, &plan, &mut centroids);
    }
    let (final_plan, obj) = solve_plan(points, &centroids, cfg)?;
    objectives.push(obj);
    Ok((centroids, final_plan, objectives))
}

fn normalize_columns(m: &mut DenseMatrix) {
    for c in 0..m.cols() {
        let norm: f64 = (0..m.rows()).map(|r| m.get(r, c).powi(2)).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for r in 0..m.rows() {
                m.set(r, c, m.get(r, c) / norm);
            }
        }
    }
}

/// Plan-weighted mean per cluster, re-normalized to the sphere. A cluster
/// whose weighted mean vanishes keeps its previous centroid.
fn update_centroids(points: &DenseMatrix, plan: &DenseMatrix, centroids: &mut DenseMatrix) {
    let d = points.cols();
    for c in 0..plan.cols() {
        let mut acc = vec![0.0; d];
        for i in 0..points.rows() {
            let w = plan.get(i, c);
            if w == 0.0 {
                continue;
            }
            for (a, &p) in acc.iter_mut().zip(points.row(i)) {
                *a += w * p;
            }
        }
        let norm = dot(&acc, &acc).sqrt();
        if norm > 1e-12 {
            for r in 0..d {
                centroids.set(r, c, acc[r] / norm);
            }
        }
    }
}

/// Hard assignment of points to their most similar centroid (ties to the
/// lowest cluster index). Used for diagnostics, not for training.
pub fn nearest_assignment(points: &DenseMatrix, centroids: &Centroids) -> Result<Vec<usize>> {
    if points.cols() != centroids.dim() {
        return Err(Error::Shape(format!(
            "point dim {} vs centroid dim {}",
            points.cols(),
            centroids.dim()
        )));
    }
    let sims = points.matmul(centroids.matrix())?;
    Ok((0..points.rows())
        .map(|i| {
            let row = sims.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Worst-case alignment between a cluster center and any point assigned
/// elsewhere: `max_g max_{i not in g} <centroid_g, point_i>`.
///
/// Returns `None` when there is a single cluster (no outside points exist).
pub fn inter_cluster_mixing(
    centroids: &Centroids,
    points: &DenseMatrix,
    assignment: &[usize],
) -> Result<Option<f64>> {
    if points.cols() != centroids.dim() {
        return Err(Error::Shape(format!(
            "point dim {} vs centroid dim {}",
            points.cols(),
            centroids.dim()
        )));
    }
    if assignment.len() != points.rows() {
        return Err(Error::Shape(format!(
            "{} assignments for {} points",
            assignment.len(),
            points.rows()
        )));
    }
    let g = centroids.count();
    if let Some(&bad) = assignment.iter().find(|&&a| a >= g) {
        return Err(Error::Range(format!("cluster label {bad} outside 0..{g}")));
    }
    if g == 1 {
        return Ok(None);
    }
    let sims = points.matmul(centroids.matrix())?;
    let mut worst: Option<f64> = None;
    for cluster in 0..g {
        for i in 0..points.rows() {
            if assignment[i] != cluster {
                let s = sims.get(i, cluster);
                worst = Some(worst.map_or(s, |w| w.max(s)));
            }
        }
    }
    Ok(worst)
}

/// Fraction of points whose two cluster labelings agree under the best
/// possible label permutation (exact assignment-problem matching).
pub fn consistency_fraction(ideal: &[usize], actual: &[usize], g: usize) -> Result<f64> {
    if ideal.len() != actual.len() || ideal.is_empty() {
        return Err(Error::Shape(format!(
            "labelings of lengths {} and {} must match and be nonempty",
            ideal.len(),
            actual.len()
        )));
    }
    if g == 0 {
        return Err(Error::Config("need at least one cluster".into()));
    }
    if let Some(&bad) = ideal.iter().chain(actual).find(|&&l| l >= g) {
        return Err(Error::Range(format!("cluster label {bad} outside 0..{g}")));
    }
    let mut overlap = vec![0i64; g * g];
    for (&a, &b) in ideal.iter().zip(actual) {
        overlap[a * g + b] += 1;
    }
    let matched = if g == 1 {
        overlap[0]
    } else {
        let weights = pathfinding::matrix::Matrix::square_from_vec(overlap)
            .expect("overlap matrix is square");
        pathfinding::kuhn_munkres::kuhn_munkres(&weights).0
    };
    Ok(matched as f64 / ideal.len() as f64)
}

/// Inputs shared by the two generalization-bound evaluators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    /// Population/sample count in the augmentation graph.
    pub n_samples: usize,
    /// Number of clusters.
    pub n_clusters: usize,
    /// Inter-cluster mixing (may be slightly negative; clamped at 0).
    pub delta: f64,
    /// Fraction of points whose assignments agree with the idealized ones.
    pub consistency: f64,
    /// Augmentation-graph connectivity offset.
    pub zeta: f64,
}

impl BoundInputs {
    fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config(format!(
                "bound needs at least 2 samples, got {}",
                self.n_samples
            )));
        }
        if self.n_clusters < 2 {
            return Err(Error::Config(format!(
                "bound needs at least 2 clusters, got {}",
                self.n_clusters
            )));
        }
        if !(-1.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!(
                "mixing {} must lie in [-1, 1]",
                self.delta
            )));
        }
        if !(0.0..=1.0).contains(&self.consistency) {
            return Err(Error::Config(format!(
                "consistency {} must lie in [0, 1]",
                self.consistency
            )));
        }
        if !self.zeta.is_finite() || self.zeta < 0.0 {
            return Err(Error::Config(format!("offset {} must be >= 0", self.zeta)));
        }
        Ok(())
    }

    fn mixing_term(&self) -> f64 {
        let d = self.delta.max(0.0);
        let g = self.n_clusters as f64;
        2.0 * d + (g - 1.0) * d * d
    }
}

/// Error bound for perfectly consistent balanced clustering: increases with
/// mixing, decreases with cluster count.
pub fn bound_prop1(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let n = inputs.n_samples as f64;
    let g = inputs.n_clusters as f64;
    Ok(inputs.zeta
        + (n / (n - 1.0)) * (1.0 / g + (1.0 - 1.0 / g) * inputs.mixing_term()))
}

/// Error bound allowing a fraction of inconsistent assignments; reduces to
/// [`bound_prop1`] minus `G / (N (N - 1))` at full consistency.
pub fn bound_prop2(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let n = inputs.n_samples as f64;
    let g = inputs.n_clusters as f64;
    let c = inputs.consistency;
    let coupling = (1.0 - (1.0 - c) / g).powi(2) - 1.0 / g;
    Ok(inputs.zeta
        + (n / (n - 1.0))
            * ((1.0 - g * g / (n * n)) / g
                + (1.0 - c * c) / g
                + coupling * inputs.mixing_term()))
}

/// Result of clustering each client's representations locally and then
/// clustering the pooled local centroids on the server.
#[derive(Debug, Clone)]
pub struct TwoLevelClustering {
    /// Server-side centroids over all local centroids.
    pub global: Centroids,
    /// Per-client local centroids, in client order.
    pub local: Vec<Centroids>,
    /// Per client: local cluster index of each of its samples.
    pub local_assignments: Vec<Vec<usize>>,
    /// Per client: global cluster index of each of its local centroids.
    pub global_of_local: Vec<Vec<usize>>,
}

impl TwoLevelClustering {
    /// Global cluster of every sample, inherited through its local centroid;
    /// one vector per client, client order preserved.
    pub fn sample_assignments(&self) -> Vec<Vec<usize>> {
        self.local_assignments
            .iter()
            .zip(&self.global_of_local)
            .map(|(locals, map)| locals.iter().map(|&l| map[l]).collect())
            .collect()
    }
}

/// Clusters each client's unit-norm representations into its own local
/// centroids (in parallel; seeds derive from client position), then clusters
/// the pooled local centroids into `g` global ones.
pub fn two_level_cluster(
    client_reps: &[DenseMatrix],
    local_counts: &[usize],
    g: usize,
    cfg: &SinkhornConfig,
    seed: u64,
) -> Result<TwoLevelClustering> {
    if client_reps.is_empty() || client_reps.len() != local_counts.len() {
        return Err(Error::Config(format!(
            "{} clients with {} local cluster counts",
            client_reps.len(),
            local_counts.len()
        )));
    }
    let total: usize = local_counts.iter().sum();
    if total < g {
        return Err(Error::Config(format!(
            "{total} local centroids cannot form {g} global clusters"
        )));
    }
    let locals: Vec<(Centroids, BalancedAssignment)> = client_reps
        .par_iter()
        .zip(local_counts.par_iter())
        .enumerate()
        .map(|(k, (reps, &l))| {
            sinkhorn_balanced(reps, l, cfg, derive_seed(seed, Purpose::LocalCluster, 0, k as u64))
        })
        .collect::<Result<Vec<_>>>()?;

    let dim = locals[0].0.dim();
    let mut pooled = DenseMatrix::zeros(total, dim);
    let mut row = 0;
    for (centroids, _) in &locals {
        for c in 0..centroids.count() {
            pooled.row_mut(row).copy_from_slice(&centroids.column(c));
            row += 1;
        }
    }
    let (global, global_assign) = sinkhorn_balanced(
        &pooled,
        g,
        cfg,
        derive_seed(seed, Purpose::GlobalCluster, 0, 0),
    )?;

    let mut global_of_local = Vec::with_capacity(locals.len());
    let mut offset = 0;
    for (centroids, _) in &locals {
        let l = centroids.count();
        global_of_local.push(global_assign.assignment[offset..offset + l].to_vec());
        offset += l;
    }
    let (local, local_assignments) = locals
        .into_iter()
        .map(|(c, a)| (c, a.assignment))
        .unzip();
    Ok(TwoLevelClustering {
        global,
        local,
        local_assignments,
        global_of_local,
    })
}

/// Size of the smallest identity set a client's upload can be traced to:
/// `floor(samples / local_clusters)`. Fewer samples than clusters is a
/// privacy-floor violation.
pub fn kanonymity_level(n_samples: usize, local_clusters: usize) -> Result<usize> {
    if local_clusters == 0 {
        return Err(Error::Config("local cluster count must be at least 1".into()));
    }
    if n_samples < local_clusters {
        return Err(Error::Anonymity(format!(
            "{n_samples} samples cannot populate {local_clusters} local clusters"
        )));
    }
    Ok(n_samples / local_clusters)
}
