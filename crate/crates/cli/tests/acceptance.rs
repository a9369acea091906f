//! The shipping gate: one test per release criterion, each printing a
//! `criterion N: PASS/FAIL` line with the figures it measured before
//! asserting. Criteria 4, 5, and 7 share one set of comparative federated
//! runs; everything else builds its own fixtures.
//!
//! The comparative criteria pin an exact configuration and seed set. The
//! margins were calibrated once against this crate's deterministic runs, so
//! a change anywhere in the numeric stack is expected to show up here.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use orchestra_cli::{
    cmd_gradcheck, cmd_partition_stats, cmd_run, ExperimentConfig, MetricsRecord, RunArtifacts,
    StatsSpec, GRAD_TOLERANCE,
};
use orchestra_core::clustering::{
    bound_prop1, bound_prop2, consistency_fraction, sinkhorn_balanced, two_level_cluster,
    BoundInputs, SinkhornConfig,
};
use orchestra_core::datasets::{dirichlet_partition, gen_mixture};
use orchestra_core::evaluation::{alignment_score, tuner_score, uniformity_score};
use orchestra_core::numcore::{dot, DenseMatrix, EncoderParams};
use orchestra_core::protocol::Method;
use orchestra_core::rng::{derive_seed, Purpose, StreamRng};

/// Seeds of the comparative experiment; criteria 4-7 quote "acceptance
/// seeds" and mean these.
const ACCEPTANCE_SEEDS: [u64; 3] = [2, 6, 7];

/// The pinned comparative configuration: a 4-class mixture in 16 dimensions,
/// 2048 samples over 16 clients at Dirichlet 0.1, 16 global / 4 local
/// clusters, batches of 16, 5 local epochs, 30 rounds at half participation.
fn acceptance_config(outdir: &Path, seed: u64, method: Method) -> ExperimentConfig {
    ExperimentConfig {
        clients: 16,
        participation: 0.5,
        rounds: 30,
        local_epochs: 5,
        batch_size: 16,
        lr: 0.25,
        ema: 0.95,
        global_clusters: 16,
        local_clusters: 4,
        tau_assign: 0.1,
        tau_unif: 0.2,
        alpha: 0.1,
        seed,
        method,
        mem_size: 128,
        weighted_avg: false,
        eval_every: 5,
        hidden_dims: vec![16, 16, 16],
        rep_dim: 8,
        init_scale: 10.0,
        jitter_sigma: 0.33,
        scale_lo: 0.65,
        scale_hi: 1.35,
        probe_epochs: 500,
        probe_lr: 0.5,
        knn_k: None,
        classes: 4,
        input_dim: 16,
        per_class: 512,
        class_sep: 4.0,
        within_std: 1.5,
        cifar_path: None,
        outdir: outdir.to_path_buf(),
    }
}

/// Everything criteria 4, 5, and 7 need from one seed.
struct SeedOutcome {
    orchestra: RunArtifacts,
    orchestra_rounds: Vec<MetricsRecord>,
    random: RunArtifacts,
    rotpred: RunArtifacts,
    /// Zero-round run: the initial encoder scored on the same plan.
    init: RunArtifacts,
    orchestra_secs: f64,
}

struct Comparative {
    /// Keeps the run directories alive for postmortem inspection.
    _dir: tempfile::TempDir,
    by_seed: Vec<(u64, SeedOutcome)>,
}

static COMPARATIVE: OnceLock<Comparative> = OnceLock::new();

fn read_metrics(run: &RunArtifacts) -> Vec<MetricsRecord> {
    let text = std::fs::read_to_string(&run.metrics_path).expect("metrics file exists");
    text.lines()
        .map(|l| serde_json::from_str(l).expect("metrics line parses"))
        .collect()
}

fn comparative() -> &'static Comparative {
    COMPARATIVE.get_or_init(|| {
        let dir = tempfile::TempDir::new().expect("tempdir");
        let by_seed = ACCEPTANCE_SEEDS
            .iter()
            .map(|&seed| {
                let cfg = |m| acceptance_config(dir.path(), seed, m);
                let t0 = Instant::now();
                let orchestra = cmd_run(&cfg(Method::Orchestra)).expect("orchestra run");
                let orchestra_secs = t0.elapsed().as_secs_f64();
                let random = cmd_run(&cfg(Method::Random)).expect("random run");
                let rotpred = cmd_run(&cfg(Method::Rotpred)).expect("rotpred run");
                let mut init_cfg = cfg(Method::Orchestra);
                init_cfg.rounds = 0;
                let init = cmd_run(&init_cfg).expect("zero-round run");
                let orchestra_rounds = read_metrics(&orchestra);
                (
                    seed,
                    SeedOutcome {
                        orchestra,
                        orchestra_rounds,
                        random,
                        rotpred,
                        init,
                        orchestra_secs,
                    },
                )
            })
            .collect();
        Comparative { _dir: dir, by_seed }
    })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

fn random_unit_rows(n: usize, d: usize, rng: &mut StreamRng) -> DenseMatrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = dot(&v, &v).sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    DenseMatrix::from_rows(&rows).expect("rows are rectangular")
}

#[test]
fn criterion_1_gradients_agree_with_central_differences() {
    let t0 = Instant::now();
    let report = cmd_gradcheck(0, 20).expect("gradient check runs");
    let secs = t0.elapsed().as_secs_f64();

    for required in ["cluster", "rotation", "spectral"] {
        assert!(
            report.rows.iter().any(|r| r.loss == required),
            "gradient report is missing the {required} objective"
        );
    }
    let detail: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{} {:.2e}", r.loss, r.max_rel_err))
        .collect();
    let ok = report.passed() && secs < 30.0;
    println!(
        "criterion 1: {} - {} (tolerance {:.0e}) in {secs:.1}s",
        if ok { "PASS" } else { "FAIL" },
        detail.join(", "),
        GRAD_TOLERANCE,
    );
    assert!(ok, "gradient agreement or runtime out of contract");
}

/// Mean cosine distance of each point to its cluster's normalized mean.
fn partition_cost(points: &DenseMatrix, assignment: &[usize], g: usize) -> f64 {
    let d = points.cols();
    let mut sums = vec![vec![0.0; d]; g];
    for (i, &a) in assignment.iter().enumerate() {
        for (j, v) in points.row(i).iter().enumerate() {
            sums[a][j] += v;
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .into_iter()
        .map(|s| {
            let norm = dot(&s, &s).sqrt();
            if norm > 1e-12 {
                s.iter().map(|x| x / norm).collect()
            } else {
                vec![0.0; d]
            }
        })
        .collect();
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| 1.0 - dot(points.row(i), &centroids[a]))
        .sum();
    total / points.rows() as f64
}

/// Exhaustive minimum cost over all balanced two-cluster partitions.
fn optimal_two_cluster_cost(points: &DenseMatrix) -> f64 {
    let n = points.rows();
    let big = n.div_ceil(2);
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != big {
            continue;
        }
        let assignment: Vec<usize> = (0..n).map(|i| usize::from(mask & (1 << i) == 0)).collect();
        best = best.min(partition_cost(points, &assignment, 2));
    }
    best
}

#[test]
fn criterion_2_balanced_clustering_invariants_and_optimality() {
    let t0 = Instant::now();

    // 100 instances up to n=256, G=16: plan marginals and hard balance.
    let sweep_cfg = SinkhornConfig {
        epsilon: 0.2,
        outer_iters: 8,
        inner_iters: 3000,
        tol: 1e-9,
        restarts: 2,
    };
    let mut worst_marginal = 0.0f64;
    for seed in 0..100u64 {
        let n = 16 + (seed as usize * 31) % 241;
        let g = 2 + (seed as usize) % 15;
        let mut rng = StreamRng::for_purpose(seed, Purpose::CentroidInit);
        let points = random_unit_rows(n, 6, &mut rng);
        let (_, result) = sinkhorn_balanced(&points, g, &sweep_cfg, seed).expect("solve");

        let row_mass = 1.0 / n as f64;
        let col_mass = 1.0 / g as f64;
        for i in 0..n {
            let s: f64 = result.plan.row(i).iter().sum();
            worst_marginal = worst_marginal.max((s - row_mass).abs());
        }
        for j in 0..g {
            let s: f64 = (0..n).map(|i| result.plan.get(i, j)).sum();
            worst_marginal = worst_marginal.max((s - col_mass).abs());
        }

        let sizes = result.cluster_sizes(g);
        for (cluster, &size) in sizes.iter().enumerate() {
            assert!(
                size == n / g || size == n.div_ceil(g),
                "seed {seed}: cluster {cluster} holds {size} of {n} points across {g} clusters"
            );
        }
    }

    // 20 instances small enough to enumerate every balanced 2-partition.
    let oracle_cfg = SinkhornConfig {
        epsilon: 0.05,
        outer_iters: 10,
        inner_iters: 4000,
        tol: 1e-9,
        ..SinkhornConfig::default()
    };
    let mut worst_ratio = 0.0f64;
    let mut checked = 0;
    for n in 4..=8usize {
        for seed in 0..4u64 {
            let mut rng = StreamRng::for_purpose(1000 + seed, Purpose::CentroidInit);
            let points = random_unit_rows(n, 3, &mut rng);
            let (_, result) =
                sinkhorn_balanced(&points, 2, &oracle_cfg, seed * 31 + n as u64).expect("solve");
            let achieved = partition_cost(&points, &result.assignment, 2);
            let optimal = optimal_two_cluster_cost(&points);
            if optimal > 1e-12 {
                worst_ratio = worst_ratio.max(achieved / optimal);
            }
            assert!(
                achieved <= 1.05 * optimal + 1e-9,
                "n={n} seed={seed}: cost {achieved} vs exhaustive optimum {optimal}"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 20);

    let secs = t0.elapsed().as_secs_f64();
    let ok = worst_marginal < 1e-6 && secs < 60.0;
    println!(
        "criterion 2: {} - worst marginal error {worst_marginal:.2e}, all sizes balanced, \
         worst cost ratio {worst_ratio:.4} over 20 exhaustive instances, in {secs:.1}s",
        if ok { "PASS" } else { "FAIL" },
    );
    assert!(ok, "marginal accuracy or runtime out of contract");
}

#[test]
fn criterion_3_bound_identities_and_monotonicity() {
    let t0 = Instant::now();
    let deltas: Vec<f64> = (0..=12).map(|i| i as f64 * 0.05).collect();
    let consistencies: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
    let mut worst_gap = 0.0f64;

    for &n in &[8usize, 64, 512, 2048] {
        for &g in &[2usize, 4, 16, 64] {
            if g >= n {
                continue;
            }
            for &zeta in &[0.0, 0.1, 1.0] {
                // Full consistency collapses the richer bound onto the
                // simpler one minus G / (N (N - 1)).
                for &delta in &deltas {
                    let inputs = BoundInputs {
                        n_samples: n,
                        n_clusters: g,
                        delta,
                        consistency: 1.0,
                        zeta,
                    };
                    let p1 = bound_prop1(&inputs).expect("bound evaluates");
                    let p2 = bound_prop2(&inputs).expect("bound evaluates");
                    let expected = p1 - g as f64 / (n as f64 * (n as f64 - 1.0));
                    worst_gap = worst_gap.max((p2 - expected).abs());
                }

                // More mixing never shrinks the first bound.
                let p1s: Vec<f64> = deltas
                    .iter()
                    .map(|&delta| {
                        bound_prop1(&BoundInputs {
                            n_samples: n,
                            n_clusters: g,
                            delta,
                            consistency: 1.0,
                            zeta,
                        })
                        .expect("bound evaluates")
                    })
                    .collect();
                for w in p1s.windows(2) {
                    assert!(w[1] >= w[0], "mixing increase lowered the bound: {w:?}");
                }

                // At zero mixing, more consistency strictly tightens the
                // second bound.
                let p2s: Vec<f64> = consistencies
                    .iter()
                    .map(|&c| {
                        bound_prop2(&BoundInputs {
                            n_samples: n,
                            n_clusters: g,
                            delta: 0.0,
                            consistency: c,
                            zeta,
                        })
                        .expect("bound evaluates")
                    })
                    .collect();
                for w in p2s.windows(2) {
                    assert!(
                        w[1] < w[0],
                        "consistency increase failed to tighten the bound: {w:?}"
                    );
                }
            }
        }
    }

    let secs = t0.elapsed().as_secs_f64();
    let ok = worst_gap < 1e-12 && secs < 5.0;
    println!(
        "criterion 3: {} - worst identity gap {worst_gap:.2e}, both monotonicities hold, \
         in {secs:.2}s",
        if ok { "PASS" } else { "FAIL" },
    );
    assert!(ok, "bound identity or runtime out of contract");
}

#[test]
fn criterion_4_trained_encoder_beats_baselines() {
    let runs = comparative();
    let orch: Vec<f64> = runs.by_seed.iter().map(|(_, s)| s.orchestra.summary.linear_acc).collect();
    let rand: Vec<f64> = runs.by_seed.iter().map(|(_, s)| s.random.summary.linear_acc).collect();
    let rot: Vec<f64> = runs.by_seed.iter().map(|(_, s)| s.rotpred.summary.linear_acc).collect();
    let slowest = runs
        .by_seed
        .iter()
        .map(|(_, s)| s.orchestra_secs)
        .fold(0.0f64, f64::max);

    let (mo, mr, mp) = (median(&orch), median(&rand), median(&rot));
    let ok = mo - mr >= 0.15 && mo >= mp && slowest < 600.0;
    println!(
        "criterion 4: {} - median linear probe: trained {mo:.3}, random init {mr:.3} \
         (gap {:+.1} points), rotation-only {mp:.3}; slowest seed {slowest:.0}s",
        if ok { "PASS" } else { "FAIL" },
        (mo - mr) * 100.0,
    );
    assert!(ok, "accuracy ordering or runtime out of contract");
}

#[test]
fn criterion_5_mixing_declines_over_training() {
    let runs = comparative();
    let first: Vec<f64> = runs
        .by_seed
        .iter()
        .map(|(_, s)| s.orchestra_rounds.first().expect("30 rounds").delta)
        .collect();
    let last: Vec<f64> = runs
        .by_seed
        .iter()
        .map(|(_, s)| s.orchestra_rounds.last().expect("30 rounds").delta)
        .collect();

    let (m1, m30) = (median(&first), median(&last));
    let ok = m30 < m1;
    println!(
        "criterion 5: {} - median inter-cluster mixing {m1:.4} at round 1, {m30:.4} at \
         round 30 ({:+.4})",
        if ok { "PASS" } else { "FAIL" },
        m30 - m1,
    );
    assert!(ok, "mixing did not decline over training");
}

/// Two-level vs direct clustering agreement with the encoder held at its
/// random initialization, on the comparative dataset and partition.
fn fixed_rep_consistency(alpha: f64, seed: u64) -> f64 {
    let data = gen_mixture(4, 16, 512, 4.0, 1.5, seed).expect("mixture generates");
    let shards = dirichlet_partition(&data, 16, alpha, seed, 1).expect("partition draws");
    let mut enc_rng = StreamRng::for_purpose(seed, Purpose::ParamInit);
    let enc = EncoderParams::init(&mut enc_rng, 16, &[16, 16, 16], 8);
    let sink = SinkhornConfig::default();

    // Mirror the protocol's eligibility rule: a shard smaller than the local
    // cluster count cannot cluster and sits the round out.
    let eligible: Vec<_> = shards.iter().filter(|s| s.len() >= 4).collect();
    let client_reps: Vec<DenseMatrix> = eligible
        .iter()
        .map(|s| enc.forward(&data.gather(&s.sample_ids)).expect("forward"))
        .collect();
    let counts = vec![4usize; eligible.len()];
    let two = two_level_cluster(&client_reps, &counts, 16, &sink, seed).expect("two-level");
    let two_labels: Vec<usize> = two.sample_assignments().into_iter().flatten().collect();

    let pooled_ids: Vec<usize> = eligible
        .iter()
        .flat_map(|s| s.sample_ids.iter().copied())
        .collect();
    let pooled = enc.forward(&data.gather(&pooled_ids)).expect("forward");
    let (_, direct) = sinkhorn_balanced(
        &pooled,
        16,
        &sink,
        derive_seed(seed, Purpose::GlobalCluster, 0, 0),
    )
    .expect("direct clustering");
    consistency_fraction(&direct.assignment, &two_labels, 16).expect("labelings comparable")
}

#[test]
fn criterion_6_heterogeneity_does_not_degrade() {
    // Part 1: with representations frozen at the random initialization, the
    // two-level scheme tracks direct clustering at least as well under
    // extreme skew as under a near-uniform split.
    let skewed: Vec<f64> = (1..=5).map(|seed| fixed_rep_consistency(1e-3, seed)).collect();
    let uniform: Vec<f64> = (1..=5).map(|seed| fixed_rep_consistency(1e5, seed)).collect();
    let (ms, mu) = (median(&skewed), median(&uniform));

    // Part 2: full training under the same two concentrations; skew may cost
    // at most three points of final linear-probe accuracy.
    let dir = tempfile::TempDir::new().expect("tempdir");
    let acc_at = |alpha: f64| -> Vec<f64> {
        ACCEPTANCE_SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = acceptance_config(dir.path(), seed, Method::Orchestra);
                cfg.alpha = alpha;
                cmd_run(&cfg).expect("training run").summary.linear_acc
            })
            .collect()
    };
    let (ma_skew, ma_unif) = (median(&acc_at(1e-3)), median(&acc_at(1e5)));

    let ok = ms >= mu && ma_skew >= ma_unif - 0.03;
    println!(
        "criterion 6: {} - median fixed-encoder consistency {ms:.3} at concentration 1e-3 \
         vs {mu:.3} at 1e5; median trained accuracy {ma_skew:.3} vs {ma_unif:.3}",
        if ok { "PASS" } else { "FAIL" },
    );
    assert!(ok, "heterogeneity robustness out of contract");
}

#[test]
fn criterion_7_tuning_score_improves_and_zeroes_on_collapse() {
    let runs = comparative();
    let mut detail = Vec::new();
    let mut improved_everywhere = true;
    for (seed, s) in &runs.by_seed {
        let trained = s.orchestra.summary.tuner;
        let initial = s.init.summary.tuner;
        improved_everywhere &= trained > initial;
        detail.push(format!("seed {seed}: {trained:.3} vs {initial:.3} at init"));
    }

    // A constant encoder must score exactly zero: alignment 1, uniformity at
    // its floor of -1/tau = -5, and 1 + 0.2 * -5 = 0 in floating point too.
    let mut rng = StreamRng::for_purpose(0, Purpose::ParamInit);
    let mut collapsed = EncoderParams::init(&mut rng, 16, &[16, 16, 16], 8);
    let final_layer = collapsed.layers_mut().last_mut().expect("nonempty");
    final_layer.weight = DenseMatrix::zeros(final_layer.weight.rows(), final_layer.weight.cols());
    final_layer.bias.fill(0.0);

    let data = gen_mixture(4, 16, 64, 4.0, 1.5, 0).expect("mixture generates");
    let augment = acceptance_config(Path::new("unused"), 0, Method::Orchestra)
        .federation()
        .augment_config();
    let mut aug_rng = StreamRng::new(0, Purpose::EvalAugment, 0, 0);
    let align = alignment_score(&collapsed, data.features(), &augment, &mut aug_rng)
        .expect("alignment evaluates");
    let unif = uniformity_score(&collapsed, data.features(), 0.2).expect("uniformity evaluates");
    let collapsed_score = tuner_score(align, unif);

    let ok = improved_everywhere && collapsed_score == 0.0;
    println!(
        "criterion 7: {} - tuning score {}; collapsed encoder scores {collapsed_score:?} \
         (alignment {align}, uniformity {unif})",
        if ok { "PASS" } else { "FAIL" },
        detail.join(", "),
    );
    assert!(ok, "tuning score contract violated");
}

#[test]
fn criterion_8_reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::TempDir::new().expect("tempdir");
    let cfg = acceptance_config(dir.path(), ACCEPTANCE_SEEDS[0], Method::Orchestra);
    let config_path = dir.path().join("config.json");
    std::fs::write(
        &config_path,
        serde_json::to_string_pretty(&cfg).expect("config serializes"),
    )
    .expect("config written");
    let metrics_path: PathBuf = dir.path().join(cfg.hash()).join("metrics.jsonl");

    let spawn = |threads: Option<&str>| -> Vec<u8> {
        let mut command = Command::new(env!("CARGO_BIN_EXE_orchestra-sim"));
        command.arg("run").arg("--config").arg(&config_path);
        if let Some(t) = threads {
            command.env("RAYON_NUM_THREADS", t);
        }
        let output = command.output().expect("binary spawns");
        assert!(
            output.status.success(),
            "run exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr),
        );
        std::fs::read(&metrics_path).expect("metrics written")
    };

    let first = spawn(None);
    let second = spawn(None);
    let serial = spawn(Some("1"));

    let ok = !first.is_empty() && first == second && first == serial;
    println!(
        "criterion 8: {} - {} metric bytes, rerun identical: {}, single-thread identical: {}",
        if ok { "PASS" } else { "FAIL" },
        first.len(),
        first == second,
        first == serial,
    );
    assert!(ok, "runs are not byte-reproducible");
}

#[test]
fn criterion_9_partition_skew_tracks_concentration() {
    let alphas = [1e5, 1e-1, 1e-3];
    let table = cmd_partition_stats(&StatsSpec {
        classes: 10,
        per_class: 100,
        input_dim: 16,
        clients: 100,
        alphas: alphas.to_vec(),
        seeds: vec![0, 1, 2, 3, 4],
        class_sep: 3.0,
        within_std: 1.0,
        data_seed: 0,
    })
    .expect("stats table builds");

    let medians: Vec<f64> = alphas
        .iter()
        .map(|&a| {
            table
                .median_at_least_one(a)
                .expect("every concentration produced partitions")
        })
        .collect();
    let ok = medians.windows(2).all(|w| w[1] < w[0]);
    println!(
        "criterion 9: {} - median classes per client {:.2} / {:.2} / {:.2} across \
         concentrations 1e5 / 1e-1 / 1e-3",
        if ok { "PASS" } else { "FAIL" },
        medians[0],
        medians[1],
        medians[2],
    );
    assert!(ok, "class spread did not decrease with concentration");
}
