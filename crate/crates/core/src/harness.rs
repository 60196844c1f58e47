//! Repeated-experiment runner: generates (or loads) data for each
//! repetition, fits every configured algorithm, scores the fits and
//! aggregates the scores.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baselines::{gmm_em, kmeans, DEFAULT_RESTARTS};
use crate::elliptic::{generate_setup, SetupSpec};
use crate::error::{Error, Result};
use crate::estimators::{FixedPointConfig, Version};
use crate::fem::{fit, FitConfig, Init, LikelihoodMonitor, MixtureModel};
use crate::io::load_csv;
use crate::metrics::{accuracy, ami, ari, match_clusters, mu_error, sigma_error, strip_noise};

/// Where the data of each repetition comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SetupSource {
    /// One of the built-in simulation setups, regenerated per repetition.
    Builtin(u8),
    /// A user-described simulation setup.
    Custom(SetupSpec),
    /// A fixed data file; only the initialization seed varies.
    Csv { path: PathBuf, k: usize, #[serde(default)] has_labels: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", rename_all = "snake_case", deny_unknown_fields)]
pub enum Algorithm {
    Fem {
        #[serde(default = "default_version")]
        version: Version,
    },
    GmmEm,
    Kmeans,
}

fn default_version() -> Version {
    Version::V1
}

impl Algorithm {
    pub fn name(&self) -> String {
        match self {
            Algorithm::Fem { version } => format!("fem_{version}"),
            Algorithm::GmmEm => "gmm_em".into(),
            Algorithm::Kmeans => "kmeans".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ari,
    Ami,
    Accuracy,
    MuError,
    SigmaError,
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::Ari, Metric::Ami, Metric::Accuracy, Metric::MuError, Metric::SigmaError]
}

/// Likelihood recorded along the EM iterations (F-EM and GMM-EM only).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Monitor {
    #[default]
    Off,
    Gaussian,
    StudentT { dof: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub fp_max_iters: usize,
    pub fp_tol: f64,
    pub kmeans_restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        let em = FitConfig::default();
        Self {
            em_max_iters: em.em_max_iters,
            em_tol: em.em_tol,
            fp_max_iters: em.fixed_point.max_iters,
            fp_tol: em.fixed_point.tol,
            kmeans_restarts: DEFAULT_RESTARTS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub setup: SetupSource,
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_nrep")]
    pub nrep: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    /// Score clustering metrics on non-noise points only.
    #[serde(default)]
    pub exclude_noise: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Worker threads; `None` uses all cores.
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub monitor: Monitor,
    #[serde(default)]
    pub fit: FitOptions,
}

fn default_nrep() -> usize {
    50
}

impl ExperimentConfig {
    pub fn new(setup: SetupSource, algorithms: Vec<Algorithm>, nrep: usize) -> Self {
        Self {
            setup,
            algorithms,
            nrep,
            base_seed: 0,
            metrics: default_metrics(),
            exclude_noise: false,
            output: None,
            jobs: None,
            monitor: Monitor::Off,
            fit: FitOptions::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nrep == 0 {
            return Err(Error::Config("nrep must be at least 1".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("algorithms must not be empty".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        match &self.setup {
            SetupSource::Builtin(id) => {
                SetupSpec::builtin(*id)?;
            }
            SetupSource::Custom(spec) => spec.validate()?,
            SetupSource::Csv { k, .. } if *k == 0 => {
                return Err(Error::Config("k must be at least 1".into()))
            }
            SetupSource::Csv { .. } => {}
        }
        if let Monitor::StudentT { dof } = self.monitor {
            if !(dof > 0.0) {
                return Err(Error::Config("monitor dof must be positive".into()));
            }
        }
        self.fit_config(0, Version::V1, 1).validate()
    }

    fn fit_config(&self, seed: u64, version: Version, k: usize) -> FitConfig {
        let o = &self.fit;
        FitConfig {
            em_max_iters: o.em_max_iters,
            em_tol: o.em_tol,
            fixed_point: FixedPointConfig {
                version,
                max_iters: o.fp_max_iters,
                tol: o.fp_tol,
                ..FixedPointConfig::default()
            },
            init: Init::KMeans { seed, restarts: o.kmeans_restarts },
            likelihood_monitor: match self.monitor {
                Monitor::Off => LikelihoodMonitor::Off,
                Monitor::Gaussian => LikelihoodMonitor::Gaussian,
                Monitor::StudentT { dof } => LikelihoodMonitor::StudentT(vec![dof; k]),
            },
            ..FitConfig::default()
        }
    }
}

/// One fit of one algorithm on one repetition. `values` follows
/// [`ExperimentResult::columns`]; `None` marks a value that does not apply
/// or a failed fit.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub rep: usize,
    pub seed: u64,
    pub algorithm: String,
    pub status: String,
    pub em_iters: usize,
    pub converged: bool,
    pub values: Vec<Option<f64>>,
}

impl Record {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Stats {
    /// Sample statistics (standard deviation with `n - 1`, zero for a single
    /// value). `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Some(Self { count: n, mean, std, median })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlgorithmSummary {
    pub algorithm: String,
    pub runs: usize,
    pub failures: usize,
    pub stats: BTreeMap<String, Stats>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub columns: Vec<String>,
    pub records: Vec<Record>,
    pub summaries: Vec<AlgorithmSummary>,
    /// Wall-clock seconds per record, same order as `records`.
    pub runtimes: Vec<f64>,
    /// `(record index, log-likelihood per EM iteration)` for monitored runs.
    pub loglik: Vec<(usize, Vec<f64>)>,
}

impl ExperimentResult {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn values(&self, algorithm: &str, column: &str) -> Vec<f64> {
        let Some(j) = self.column(column) else { return Vec::new() };
        self.records
            .iter()
            .filter(|r| r.algorithm == algorithm)
            .filter_map(|r| r.values[j])
            .collect()
    }

    pub fn summary(&self, algorithm: &str) -> Option<&AlgorithmSummary> {
        self.summaries.iter().find(|s| s.algorithm == algorithm)
    }
}

pub fn columns(metrics: &[Metric], k: usize) -> Vec<String> {
    let mut sorted = metrics.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut out = Vec::new();
    for m in sorted {
        match m {
            Metric::Ari => out.push("ari".into()),
            Metric::Ami => out.push("ami".into()),
            Metric::Accuracy => out.push("accuracy".into()),
            Metric::MuError => out.extend((1..=k).map(|j| format!("mu_error_{j}"))),
            Metric::SigmaError => out.extend((1..=k).map(|j| format!("sigma_error_{j}"))),
        }
    }
    out
}

/// Aggregates the successful records of each algorithm, in the given
/// algorithm order and in record order.
pub fn aggregate(algorithms: &[String], columns: &[String], records: &[Record]) -> Vec<AlgorithmSummary> {
    algorithms
        .iter()
        .map(|name| {
            let mine: Vec<&Record> = records.iter().filter(|r| &r.algorithm == name).collect();
            let ok: Vec<&&Record> = mine.iter().filter(|r| r.ok()).collect();
            let mut stats = BTreeMap::new();
            for (j, col) in columns.iter().enumerate() {
                let vals: Vec<f64> = ok.iter().filter_map(|r| r.values[j]).collect();
                if let Some(s) = Stats::of(&vals) {
                    stats.insert(col.clone(), s);
                }
            }
            let iters: Vec<f64> = ok.iter().map(|r| r.em_iters as f64).collect();
            if let Some(s) = Stats::of(&iters) {
                stats.insert("em_iters".into(), s);
            }
            AlgorithmSummary {
                algorithm: name.clone(),
                runs: mine.len(),
                failures: mine.len() - ok.len(),
                stats,
            }
        })
        .collect()
}

struct Dataset {
    data: DMatrix<f64>,
    labels: Option<Vec<i64>>,
    truth: Option<MixtureModel>,
}

struct Estimate {
    labels: Vec<usize>,
    mu: Vec<DVector<f64>>,
    sigma: Option<Vec<DMatrix<f64>>>,
    em_iters: usize,
    converged: bool,
    loglik: Vec<f64>,
}

fn run_algorithm(cfg: &ExperimentConfig, algo: Algorithm, x: &DMatrix<f64>, k: usize, seed: u64) -> Result<Estimate> {
    match algo {
        Algorithm::Fem { version } => {
            let r = fit(x, k, &cfg.fit_config(seed, version, k))?;
            Ok(Estimate {
                labels: r.labels,
                mu: r.model.mu,
                sigma: Some(r.model.sigma),
                em_iters: r.em_iters,
                converged: r.converged,
                loglik: r.loglik_trace,
            })
        }
        Algorithm::GmmEm => {
            let r = gmm_em(x, k, &cfg.fit_config(seed, Version::V1, k))?;
            Ok(Estimate {
                labels: r.labels,
                mu: r.model.mu,
                sigma: Some(r.model.sigma),
                em_iters: r.em_iters,
                converged: r.converged,
                loglik: r.loglik_trace,
            })
        }
        Algorithm::Kmeans => {
            let r = kmeans(x, k, seed, cfg.fit.kmeans_restarts)?;
            Ok(Estimate {
                labels: r.labels,
                mu: r.centers,
                sigma: None,
                em_iters: 0,
                converged: true,
                loglik: Vec::new(),
            })
        }
    }
}

fn score(
    cfg: &ExperimentConfig,
    columns: &[String],
    data: &Dataset,
    est: &Estimate,
    k: usize,
) -> Result<Vec<Option<f64>>> {
    let mut values = vec![None; columns.len()];
    let Some(truth) = &data.labels else { return Ok(values) };
    let (pred, gold) = if cfg.exclude_noise {
        strip_noise(&est.labels, truth)?
    } else {
        (est.labels.clone(), truth.clone())
    };
    let perm = match &data.truth {
        Some(_) => Some(match_clusters(truth, &est.labels, k)?),
        None => None,
    };
    for (j, col) in columns.iter().enumerate() {
        values[j] = match col.as_str() {
            "ari" => Some(ari(&pred, &gold)?),
            "ami" => Some(ami(&pred, &gold)?),
            "accuracy" => Some(accuracy(&pred, &gold)?),
            c => {
                let (Some(model), Some(perm)) = (&data.truth, &perm) else { continue };
                if let Some(idx) = c.strip_prefix("mu_error_") {
                    let t: usize = idx.parse::<usize>().expect("column index") - 1;
                    Some(mu_error(&model.mu[t], &est.mu[perm[t]])?)
                } else if let Some(idx) = c.strip_prefix("sigma_error_") {
                    let t: usize = idx.parse::<usize>().expect("column index") - 1;
                    match &est.sigma {
                        Some(s) => Some(sigma_error(&model.sigma[t], &s[perm[t]])?),
                        None => None,
                    }
                } else {
                    None
                }
            }
        };
    }
    Ok(values)
}

fn load_fixed(cfg: &ExperimentConfig) -> Result<Option<(Dataset, usize)>> {
    match &cfg.setup {
        SetupSource::Csv { path, k, has_labels } => {
            let d = load_csv(path, *has_labels)?;
            Ok(Some((Dataset { data: d.data, labels: d.labels, truth: None }, *k)))
        }
        _ => Ok(None),
    }
}

fn spec_of(cfg: &ExperimentConfig) -> Result<Option<SetupSpec>> {
    match &cfg.setup {
        SetupSource::Builtin(id) => SetupSpec::builtin(*id).map(Some),
        SetupSource::Custom(spec) => Ok(Some(spec.clone())),
        SetupSource::Csv { .. } => Ok(None),
    }
}

type RepOutput = Vec<(Record, f64, Vec<f64>)>;

fn run_rep(
    cfg: &ExperimentConfig,
    columns: &[String],
    spec: Option<&SetupSpec>,
    fixed: Option<&(Dataset, usize)>,
    rep: usize,
) -> RepOutput {
    let seed = cfg.base_seed ^ rep as u64;
    let fail_all = |reason: String| -> RepOutput {
        cfg.algorithms
            .iter()
            .map(|a| {
                let rec = Record {
                    rep,
                    seed,
                    algorithm: a.name(),
                    status: format!("failed: {reason}"),
                    em_iters: 0,
                    converged: false,
                    values: vec![None; columns.len()],
                };
                (rec, 0.0, Vec::new())
            })
            .collect()
    };
    let generated;
    let (data, k) = match (spec, fixed) {
        (_, Some((d, k))) => (d, *k),
        (Some(spec), None) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match generate_setup(spec, &mut rng) {
                Ok(s) => {
                    generated = Dataset { data: s.data, labels: Some(s.labels), truth: Some(s.truth) };
                    (&generated, spec.k())
                }
                Err(e) => return fail_all(format!("generation: {e}")),
            }
        }
        (None, None) => unreachable!("setup is either generated or loaded"),
    };
    cfg.algorithms
        .iter()
        .map(|&algo| {
            let start = Instant::now();
            let outcome = run_algorithm(cfg, algo, &data.data, k, seed)
                .and_then(|est| score(cfg, columns, data, &est, k).map(|v| (est, v)));
            let elapsed = start.elapsed().as_secs_f64();
            match outcome {
                Ok((est, values)) => {
                    let rec = Record {
                        rep,
                        seed,
                        algorithm: algo.name(),
                        status: "ok".into(),
                        em_iters: est.em_iters,
                        converged: est.converged,
                        values,
                    };
                    (rec, elapsed, est.loglik)
                }
                Err(e) => {
                    let rec = Record {
                        rep,
                        seed,
                        algorithm: algo.name(),
                        status: format!("failed: {e}"),
                        em_iters: 0,
                        converged: false,
                        values: vec![None; columns.len()],
                    };
                    (rec, elapsed, Vec::new())
                }
            }
        })
        .collect()
}

/// Runs every repetition (in parallel, bounded by `jobs`) and aggregates.
/// Repetition `r` uses seed `base_seed ^ r` both for data generation and for
/// the k-means initialization.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run_reps(cfg, &(0..cfg.nrep).collect::<Vec<_>>())
}

/// Like [`run_experiment`] but executing the repetitions in the given order.
/// Records are always reported sorted by repetition.
pub fn run_reps(cfg: &ExperimentConfig, order: &[usize]) -> Result<ExperimentResult> {
    cfg.validate()?;
    let spec = spec_of(cfg)?;
    let fixed = load_fixed(cfg)?;
    let k = spec.as_ref().map_or_else(|| fixed.as_ref().map_or(0, |f| f.1), SetupSpec::k);
    let cols = columns(&cfg.metrics, k);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cfg.jobs {
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut outputs: Vec<(usize, RepOutput)> = pool.install(|| {
        order
            .par_iter()
            .map(|&rep| (rep, run_rep(cfg, &cols, spec.as_ref(), fixed.as_ref(), rep)))
            .collect()
    });
    outputs.sort_by_key(|(rep, _)| *rep);

    let mut records = Vec::new();
    let mut runtimes = Vec::new();
    let mut loglik = Vec::new();
    for (_, rep_out) in outputs {
        for (rec, time, trace) in rep_out {
            if !trace.is_empty() {
                loglik.push((records.len(), trace));
            }
            records.push(rec);
            runtimes.push(time);
        }
    }
    let names: Vec<String> = cfg.algorithms.iter().map(Algorithm::name).collect();
    let summaries = aggregate(&names, &cols, &records);
    Ok(ExperimentResult { columns: cols, records, summaries, runtimes, loglik })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub const RECORD_FIELDS: [&str; 6] = ["rep", "seed", "algorithm", "status", "em_iters", "converged"];

/// Writes `<prefix>_records.csv`, `<prefix>_summary.json` and
/// `<prefix>_loglik.csv`. Runtimes go to the summary only so that the
/// records file is reproducible byte for byte.
pub fn emit_results(res: &ExperimentResult, prefix: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let prefix = prefix.as_ref();
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let records_path = with_suffix(prefix, "_records.csv");
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&records_path)?));
    let mut head: Vec<String> = RECORD_FIELDS.iter().map(|s| s.to_string()).collect();
    head.extend(res.columns.iter().cloned());
    w.write_record(&head)?;
    for r in &res.records {
        let mut row = vec![
            r.rep.to_string(),
            r.seed.to_string(),
            r.algorithm.clone(),
            r.status.clone(),
            r.em_iters.to_string(),
            r.converged.to_string(),
        ];
        row.extend(r.values.iter().map(|v| fmt_opt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;

    let loglik_path = with_suffix(prefix, "_loglik.csv");
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&loglik_path)?));
    w.write_record(["rep", "seed", "algorithm", "iteration", "value"])?;
    for (idx, trace) in &res.loglik {
        let r = &res.records[*idx];
        for (it, v) in trace.iter().enumerate() {
            w.write_record([
                r.rep.to_string(),
                r.seed.to_string(),
                r.algorithm.clone(),
                it.to_string(),
                format!("{v:?}"),
            ])?;
        }
    }
    w.flush()?;

    let summary_path = with_suffix(prefix, "_summary.json");
    let algorithms: Vec<_> = res
        .summaries
        .iter()
        .map(|s| {
            let times: Vec<f64> = res
                .records
                .iter()
                .zip(&res.runtimes)
                .filter(|(r, _)| r.algorithm == s.algorithm)
                .map(|(_, t)| *t)
                .collect();
            json!({
                "algorithm": s.algorithm,
                "runs": s.runs,
                "failures": s.failures,
                "runtime_s": Stats::of(&times),
                "stats": s.stats,
            })
        })
        .collect();
    let mut f = BufWriter::new(File::create(&summary_path)?);
    serde_json::to_writer_pretty(
        &mut f,
        &json!({ "schema": 1, "columns": res.columns, "algorithms": algorithms }),
    )?;
    writeln!(f)?;
    f.flush()?;
    Ok(vec![records_path, summary_path, loglik_path])
}

/// Reads a records file written by [`emit_results`] back into records and
/// metric column names.
pub fn read_records(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Record>)> {
    let mut rd = csv::Reader::from_path(path)?;
    let head: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    if head.len() < RECORD_FIELDS.len() || head[..RECORD_FIELDS.len()] != RECORD_FIELDS {
        return Err(Error::Config("not a records file".into()));
    }
    let cols = head[RECORD_FIELDS.len()..].to_vec();
    let bad = |what: &str| Error::Config(format!("bad {what} in records file"));
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let values = rec
            .iter()
            .skip(RECORD_FIELDS.len())
            .map(|f| if f.is_empty() { Ok(None) } else { f.parse().map(Some) })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("value"))?;
        out.push(Record {
            rep: rec[0].parse().map_err(|_| bad("rep"))?,
            seed: rec[1].parse().map_err(|_| bad("seed"))?,
            algorithm: rec[2].to_owned(),
            status: rec[3].to_owned(),
            em_iters: rec[4].parse().map_err(|_| bad("em_iters"))?,
            converged: rec[5].parse().map_err(|_| bad("converged"))?,
            values,
        });
    }
    Ok((cols, out))
}
