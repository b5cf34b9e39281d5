//! Experiment CLI: dataset generation, diffeomorphism training, model
//! construction, evaluation, and method comparison.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use koopflow_core::harness::{
    self, describe, ExperimentConfig, Method,
};

#[derive(Parser)]
#[command(
    name = "koopflow",
    version,
    about = "Koopman eigenfunction learning with coupling flows, and generator-EDMD baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training dataset (CSV + metadata sidecar)
    Generate(RunArgs),
    /// Train the coupling-flow diffeomorphism on the generated dataset
    Train(RunArgs),
    /// Build the eigenfunction library and the lifted LTI model
    Build(RunArgs),
    /// Evaluate previously built models over the start-point grid
    Evaluate(RunArgs),
    /// Run every requested method end-to-end and emit the comparison table
    Compare(RunArgs),
    /// Run the closed-form and finite-difference oracle suites
    OracleCheck {
        /// Seed for the randomized checks
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Preset name (`ex1`, `ex3`) or path to a config TOML
    #[arg(long)]
    config: String,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method to run (repeatable); defaults to the config's list
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Uniformly scale training pair count and epochs for desk-scale runs
    #[arg(long)]
    scale: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> koopflow_core::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if !self.methods.is_empty() {
            cfg.methods = self
                .methods
                .iter()
                .map(|m| Method::from_name(m))
                .collect::<koopflow_core::Result<_>>()?;
        }
        if let Some(scale) = self.scale {
            cfg.apply_scale(scale)?;
        }
        Ok(cfg)
    }
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("KOOPFLOW_THREADS") {
        match value.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("ignoring invalid KOOPFLOW_THREADS=`{value}`"),
        }
    }
}

fn run(cli: Cli) -> koopflow_core::Result<bool> {
    match cli.command {
        Command::Generate(args) => {
            let cfg = args.resolve()?;
            let ds = harness::cmd_generate(&cfg)?;
            println!(
                "wrote {} pairs from {} trajectories to {}",
                ds.n_pairs(),
                ds.trajectories.len(),
                cfg.dataset_base().with_extension("csv").display()
            );
            Ok(true)
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            for (k, v) in describe(&cfg) {
                println!("{k} = {v}");
            }
            let history = harness::cmd_train(&cfg)?;
            if let Some(last) = history.last() {
                println!(
                    "trained {} epochs: conjugacy {:.3e}, jac0 {:.3e}, orig0 {:.3e}, total {:.3e}",
                    history.len(),
                    last.conjugacy,
                    last.jac0,
                    last.orig0,
                    last.total
                );
            } else {
                println!("trained 0 epochs (identity checkpoint written)");
            }
            println!("flow checkpoint: {}", cfg.flow_path().display());
            Ok(true)
        }
        Command::Build(args) => {
            let cfg = args.resolve()?;
            let summary = harness::cmd_build(&cfg)?;
            println!(
                "built lifted model: D = {}, reconstruction rmse {:.3e}, constant mode {:.3e}{}",
                summary.dim_lifted,
                summary.training_rmse,
                summary.constant_mode_norm,
                if summary.rank_deficient {
                    " (warning: rank-deficient lift)"
                } else {
                    ""
                }
            );
            Ok(true)
        }
        Command::Evaluate(args) => {
            let cfg = args.resolve()?;
            let methods = cfg.methods.clone();
            let report = harness::cmd_evaluate(&cfg, &methods)?;
            for m in &report.methods {
                println!(
                    "{:>14}: rmse {:.4} ± {:.4}  (D = {}, {:.2}s)",
                    m.method, m.rmse_mean, m.rmse_std, m.lifted_dim, m.wall_time_s
                );
            }
            println!("report: {}", cfg.report_path().display());
            Ok(true)
        }
        Command::Compare(args) => {
            let cfg = args.resolve()?;
            let outcome = harness::cmd_compare(&cfg)?;
            println!("method,rmse_mean,rmse_std,lifted_dim");
            for m in &outcome.report.methods {
                println!(
                    "{},{:.6},{:.6},{}",
                    m.method, m.rmse_mean, m.rmse_std, m.lifted_dim
                );
            }
            for (method, error) in &outcome.failures {
                eprintln!("{method} failed: {error}");
            }
            println!("table: {}", cfg.out_dir.join("compare.csv").display());
            Ok(outcome.failures.is_empty())
        }
        Command::OracleCheck { seed } => {
            let checks = harness::oracle_checks(seed);
            let mut all_ok = true;
            for c in &checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("{tag} {} — {}", c.name, c.detail);
                all_ok &= c.passed;
            }
            Ok(all_ok)
        }
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
