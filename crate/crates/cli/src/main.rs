//! Command-line front end: argument parsing, human-readable output, and the
//! exit-code contract (0 success, 2 configuration error, 3 runtime error).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use orchestra_cli::{
    cmd_cluster, cmd_gradcheck, cmd_partition_stats, cmd_run, cmd_tune, ClusterSpec,
    ExperimentConfig, Overrides, StatsSpec,
};
use orchestra_core::clustering::SinkhornConfig;
use orchestra_core::protocol::Method;
use orchestra_core::Error;

#[derive(Parser)]
#[command(
    name = "orchestra-sim",
    version,
    about = "Desk-scale simulator of federated representation learning via balanced clustering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one federated experiment from a flat JSON config file.
    Run(RunArgs),
    /// Grid-search hyperparameters with the unsupervised tuning score.
    Tune(TuneArgs),
    /// Tabulate average classes per client across partition settings.
    PartitionStats(StatsArgs),
    /// Balanced-cluster a CSV of vectors.
    Cluster(ClusterArgs),
    /// Compare analytic loss gradients against finite differences.
    GradCheck(GradArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the JSON config.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's Dirichlet concentration.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    participation: Option<f64>,
    #[arg(long)]
    global_clusters: Option<usize>,
    #[arg(long)]
    local_clusters: Option<usize>,
    /// orchestra, specloss, rotpred, or random.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    outdir: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    /// JSON file with a "base" config and "vary" value lists.
    #[arg(long)]
    grid: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    clients: usize,
    /// Dirichlet concentrations to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1e5,1e-1,1e-3")]
    alphas: Vec<f64>,
    /// Partition seeds to draw per concentration.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 3.0)]
    class_sep: f64,
    #[arg(long, default_value_t = 1.0)]
    within_std: f64,
    /// Seed of the synthetic dataset itself.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args)]
struct ClusterArgs {
    /// CSV of vectors with an f0,f1,... header.
    #[arg(long)]
    input: PathBuf,
    /// Number of equal-size clusters.
    #[arg(long)]
    clusters: usize,
    /// Directory assignments.csv and centroids.csv are written to.
    #[arg(long, default_value = "cluster-out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Entropic regularization strength.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Centroid-update alternations.
    #[arg(long)]
    outer_iters: Option<usize>,
    /// Marginal-scaling sweeps per plan solve.
    #[arg(long)]
    inner_iters: Option<usize>,
    /// Marginal convergence tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Independent seeded initializations; lowest objective wins.
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances checked per loss.
    #[arg(long, default_value_t = 20)]
    draws: usize,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Format(_) | Error::Range(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Run(args) => {
            let over = Overrides {
                alpha: args.alpha,
                clients: args.clients,
                rounds: args.rounds,
                participation: args.participation,
                global_clusters: args.global_clusters,
                local_clusters: args.local_clusters,
                method: args.method,
                seed: args.seed,
                lr: args.lr,
                local_epochs: args.local_epochs,
                batch_size: args.batch_size,
                outdir: args.outdir,
            };
            let cfg = ExperimentConfig::load(&args.config, &over)?;
            for warning in cfg.warnings() {
                eprintln!("warning: {warning}");
            }
            let run = cmd_run(&cfg)?;
            println!("config hash: {}", run.hash);
            println!(
                "wrote {} ({} rounds)",
                run.metrics_path.display(),
                run.rounds_written
            );
            println!("wrote {}", run.summary_path.display());
            let s = run.summary;
            println!(
                "summary: knn_acc={} linear_acc={} delta={} align={} unif={} tuner_score={}",
                s.knn_acc, s.linear_acc, s.delta, s.align, s.unif, s.tuner
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Tune(args) => {
            let tune = cmd_tune(&args.grid)?;
            println!("wrote {} ({} entries)", tune.table_path.display(), tune.rows.len());
            let best = tune.best();
            println!(
                "best: score={} config={}",
                best.score,
                serde_json::to_string(&best.config).expect("config serializes")
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::PartitionStats(args) => {
            let spec = StatsSpec {
                classes: args.classes,
                per_class: args.per_class,
                input_dim: args.dim,
                clients: args.clients,
                alphas: args.alphas,
                seeds: args.seeds,
                class_sep: args.class_sep,
                within_std: args.within_std,
                data_seed: args.data_seed,
            };
            let table = cmd_partition_stats(&spec)?;
            print!("{}", table.to_csv());
            Ok(ExitCode::SUCCESS)
        }
        Command::Cluster(args) => {
            let defaults = SinkhornConfig::default();
            let sinkhorn = SinkhornConfig {
                epsilon: args.epsilon.unwrap_or(defaults.epsilon),
                outer_iters: args.outer_iters.unwrap_or(defaults.outer_iters),
                inner_iters: args.inner_iters.unwrap_or(defaults.inner_iters),
                tol: args.tol.unwrap_or(defaults.tol),
                restarts: args.restarts.unwrap_or(defaults.restarts),
            };
            let spec = ClusterSpec {
                input: args.input,
                clusters: args.clusters,
                out: args.out,
                seed: args.seed,
                sinkhorn,
            };
            let result = cmd_cluster(&spec)?;
            println!("wrote {}", result.assignments_path.display());
            println!("wrote {}", result.centroids_path.display());
            match result.delta {
                Some(delta) => println!("delta: {delta}"),
                None => println!("delta: n/a (single cluster)"),
            }
            let sizes: Vec<String> = result.sizes.iter().map(|s| s.to_string()).collect();
            println!("sizes: {}", sizes.join(" "));
            Ok(ExitCode::SUCCESS)
        }
        Command::GradCheck(args) => {
            let report = cmd_gradcheck(args.seed, args.draws)?;
            for row in &report.rows {
                println!("{}: max relative error {:.3e}", row.loss, row.max_rel_err);
            }
            if report.passed() {
                println!("gradient check passed (tolerance {:.0e})", report.tolerance);
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient check failed (tolerance {:.0e})", report.tolerance);
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
