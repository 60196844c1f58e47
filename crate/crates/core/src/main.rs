use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use flexem::baselines::{gmm_em, kmeans, DEFAULT_RESTARTS};
use flexem::elliptic::{generate_setup, SetupSpec};
use flexem::estimators::Version;
use flexem::fem::{fit, FitConfig, Init};
use flexem::harness::{emit_results, run_experiment, ExperimentConfig};
use flexem::io::{load_csv, load_labels, write_dataset, write_report};
use flexem::metrics::{accuracy, ami, ari, strip_noise};
use flexem::Result;

#[derive(Parser)]
#[command(name = "flexem", version, about = "Robust clustering of elliptical mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Fem,
    Gmm,
    Kmeans,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a built-in setup (1-5) or a TOML-described one and write CSV.
    Generate {
        #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
        setup: Option<u8>,
        /// TOML file describing a custom setup.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cluster a CSV file and write a JSON report.
    Fit {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value_t = Algo::Fem)]
        algo: Algo,
        /// Fixed-point variant of F-EM (1-4).
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=4))]
        version: u8,
        /// The last CSV column holds labels and is not used for fitting.
        #[arg(long)]
        labels: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        max_iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a repeated experiment described by a TOML config.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Output prefix; overrides `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Compare two labelings (last column of each CSV).
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Ignore points whose true label is -1.
        #[arg(long)]
        exclude_noise: bool,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { setup, spec, out, seed } => {
            let spec = match (setup, spec) {
                (Some(id), _) => SetupSpec::builtin(id)?,
                (None, Some(path)) => {
                    let text = std::fs::read_to_string(path)?;
                    let spec: SetupSpec =
                        toml::from_str(&text).map_err(|e| flexem::Error::Config(e.to_string()))?;
                    spec.validate()?;
                    spec
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            let sample = generate_setup(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
            write_dataset(&out, &sample.data, Some(&sample.labels))?;
            eprintln!("wrote {} rows to {}", sample.data.nrows(), out.display());
        }
        Command::Fit { input, k, algo, version, labels, seed, max_iters, out } => {
            let data = load_csv(&input, labels)?.data;
            let version = Version::try_from(version)?;
            let mut cfg = FitConfig::with_version(version);
            cfg.em_max_iters = max_iters;
            cfg.init = Init::KMeans { seed, restarts: DEFAULT_RESTARTS };
            match algo {
                Algo::Fem => write_report(&out, &fit(&data, k, &cfg)?)?,
                Algo::Gmm => write_report(&out, &gmm_em(&data, k, &cfg)?)?,
                Algo::Kmeans => {
                    let r = kmeans(&data, k, seed, DEFAULT_RESTARTS)?;
                    let value = json!({
                        "schema": 1,
                        "labels": r.labels,
                        "centers": r.centers.iter().map(|c| c.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
                        "inertia": r.inertia,
                    });
                    std::fs::write(&out, serde_json::to_string_pretty(&value)? + "\n")?;
                }
            }
            eprintln!("wrote {}", out.display());
        }
        Command::Bench { config, out, jobs } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if jobs.is_some() {
                cfg.jobs = jobs;
            }
            let prefix = out.or(cfg.output.clone()).unwrap_or_else(|| PathBuf::from("results"));
            let res = run_experiment(&cfg)?;
            for s in &res.summaries {
                let line: Vec<String> = s
                    .stats
                    .iter()
                    .map(|(name, st)| format!("{name}={:.4}", st.mean))
                    .collect();
                println!("{} runs={} failures={} {}", s.algorithm, s.runs, s.failures, line.join(" "));
            }
            for path in emit_results(&res, &prefix)? {
                eprintln!("wrote {}", path.display());
            }
        }
        Command::Metrics { pred, truth, exclude_noise } => {
            let pred = load_labels(&pred)?;
            let truth = load_labels(&truth)?;
            let (pred, truth) = if exclude_noise {
                strip_noise(&pred, &truth)?
            } else {
                (pred, truth)
            };
            let value = json!({
                "n": pred.len(),
                "ari": ari(&pred, &truth)?,
                "ami": ami(&pred, &truth)?,
                "accuracy": accuracy(&pred, &truth)?,
            });
            println!("{}", serde_json::to_string_pretty(&value)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
