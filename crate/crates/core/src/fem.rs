//! The flexible EM driver.
//!
//! The E-step only needs the quadratic forms and log-determinants of the
//! current model: the density generators and the nuisance scales cancel out of
//! the posterior probabilities. The M-step solves the coupled location/scatter
//! fixed point of [`crate::estimators`] for every cluster.

use nalgebra::{DMatrix, DVector};

use crate::baselines::{kmeans, DEFAULT_RESTARTS};
use crate::elliptic::DensityGenerator;
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_tau, fixed_point_columns, update_pi, FixedPointConfig, FixedPointOutcome,
    GeneratorMap, ScaleEstimates, Version,
};
use crate::linalg::{self, Factor};

/// `K` clusters, each with a proportion, a location and a scatter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureModel {
    pub pi: Vec<f64>,
    pub mu: Vec<DVector<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
}

impl MixtureModel {
    pub fn new(pi: Vec<f64>, mu: Vec<DVector<f64>>, sigma: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = pi.len();
        if k == 0 {
            return Err(Error::InvalidParameter("mixture needs at least one cluster".into()));
        }
        if mu.len() != k || sigma.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: mu.len().min(sigma.len()) });
        }
        let total: f64 = pi.iter().sum();
        if pi.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "proportions must lie in [0, 1] and sum to 1, got {pi:?}"
            )));
        }
        let m = mu[0].len();
        for (mu_k, sigma_k) in mu.iter().zip(&sigma) {
            if mu_k.len() != m {
                return Err(Error::DimensionMismatch { expected: m, found: mu_k.len() });
            }
            if sigma_k.shape() != (m, m) {
                return Err(Error::DimensionMismatch { expected: m, found: sigma_k.nrows() });
            }
            Factor::new(sigma_k)?;
        }
        Ok(Self { pi, mu, sigma })
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.mu[0].len()
    }

    pub(crate) fn check_dimension(&self, m: usize) -> Result<()> {
        if self.dim() != m {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: m });
        }
        Ok(())
    }

    /// Copy with every scatter matrix rescaled to trace `m`.
    pub fn trace_normalized(&self) -> Self {
        let m = self.dim() as f64;
        Self {
            pi: self.pi.clone(),
            mu: self.mu.clone(),
            sigma: self.sigma.iter().map(|s| s * (m / s.trace())).collect(),
        }
    }

    /// Relative change `|theta - other| / |theta|` over all parameters.
    pub fn relative_change(&self, other: &Self) -> f64 {
        let mut diff = 0.0;
        let mut norm = 0.0;
        for k in 0..self.k() {
            diff += (self.pi[k] - other.pi[k]).powi(2)
                + (&self.mu[k] - &other.mu[k]).norm_squared()
                + (&self.sigma[k] - &other.sigma[k]).norm_squared();
            norm += self.pi[k].powi(2) + self.mu[k].norm_squared() + self.sigma[k].norm_squared();
        }
        (diff / norm).sqrt()
    }
}

/// Posterior cluster probabilities, `n x K`, rows summing to one.
pub type Responsibilities = DMatrix<f64>;

/// `log L0_ik = -1/2 log|Sigma_k| - (m/2) log s_ik`, with `s_ik` floored.
fn log_l0(cols: &DMatrix<f64>, model: &MixtureModel, floor: f64) -> Result<DMatrix<f64>> {
    let (m, n) = cols.shape();
    model.check_dimension(m)?;
    let half_m = 0.5 * m as f64;
    let mut out = DMatrix::zeros(n, model.k());
    for k in 0..model.k() {
        let factor = Factor::new(&model.sigma[k])?;
        let q = factor.quad_forms(cols, &model.mu[k]);
        let half_logdet = 0.5 * factor.log_det();
        for i in 0..n {
            out[(i, k)] = -half_logdet - half_m * q[i].max(floor).ln();
        }
    }
    Ok(out)
}

/// Adds `log pi_k + offset_k` and soft-max normalizes each row in place.
fn normalize_rows(log_w: &mut DMatrix<f64>, pi: &[f64], offsets: &[f64]) {
    let k = pi.len();
    let mut row = vec![0.0; k];
    for i in 0..log_w.nrows() {
        for j in 0..k {
            row[j] = log_w[(i, j)] + pi[j].ln() + offsets[j];
        }
        let lse = linalg::log_sum_exp(&row);
        let mut total = 0.0;
        for j in 0..k {
            let p = (row[j] - lse).exp();
            log_w[(i, j)] = p;
            total += p;
        }
        for j in 0..k {
            log_w[(i, j)] /= total;
        }
    }
}

pub(crate) fn e_step_columns(
    cols: &DMatrix<f64>,
    model: &MixtureModel,
    offsets: &[f64],
    floor: f64,
) -> Result<Responsibilities> {
    let mut p = log_l0(cols, model, floor)?;
    normalize_rows(&mut p, &model.pi, offsets);
    Ok(p)
}

/// Distribution-free E-step:
/// `p_ik ∝ pi_k s_ik^{-m/2} |Sigma_k|^{-1/2}`, evaluated in log space.
pub fn e_step(x: &DMatrix<f64>, model: &MixtureModel, tau_floor: f64) -> Result<Responsibilities> {
    e_step_columns(&linalg::columns(x), model, &vec![0.0; model.k()], tau_floor)
}

/// How the Student-t E-step weighs clusters with different degrees of freedom.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentMode {
    /// Exact factor `A_k sup_t t^{m/2} g_k(t)`.
    Exact,
    /// Large-dimension factor `sqrt(c_k / (1 + c_k))` with `c_k = nu_k / m`.
    Approximate,
}

fn student_offsets(nu: &[f64], m: usize, mode: StudentMode) -> Result<Vec<f64>> {
    nu.iter()
        .map(|&dof| match mode {
            StudentMode::Exact => DensityGenerator::StudentT { dof }.log_peak(m),
            StudentMode::Approximate => {
                DensityGenerator::StudentT { dof }.validate()?;
                let c = dof / m as f64;
                Ok(0.5 * (c / (1.0 + c)).ln())
            }
        })
        .collect()
}

/// E-step for a mixture of Student-t clusters with per-cluster degrees of freedom.
pub fn e_step_student(
    x: &DMatrix<f64>,
    model: &MixtureModel,
    nu: &[f64],
    mode: StudentMode,
    tau_floor: f64,
) -> Result<Responsibilities> {
    if nu.len() != model.k() {
        return Err(Error::DimensionMismatch { expected: model.k(), found: nu.len() });
    }
    let offsets = student_offsets(nu, x.ncols(), mode)?;
    e_step_columns(&linalg::columns(x), model, &offsets, tau_floor)
}

/// Which posterior the E-step computes.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum EStep {
    /// Generator-free posterior; the default.
    #[default]
    DistributionFree,
    /// Bayes posterior for known per-cluster generators (Gaussian or Student-t).
    Known(Vec<DensityGenerator>),
    /// Large-dimension approximation for Student-t clusters.
    StudentApprox(Vec<f64>),
}

impl EStep {
    fn offsets(&self, m: usize, k: usize) -> Result<Vec<f64>> {
        let check = |len: usize| {
            if len == k {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected: k, found: len })
            }
        };
        match self {
            EStep::DistributionFree => Ok(vec![0.0; k]),
            EStep::Known(gens) => {
                check(gens.len())?;
                gens.iter().map(|g| g.log_peak(m)).collect()
            }
            EStep::StudentApprox(nu) => {
                check(nu.len())?;
                student_offsets(nu, m, StudentMode::Approximate)
            }
        }
    }
}

/// Observed log-likelihood evaluated at each EM iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum LikelihoodMonitor {
    #[default]
    Off,
    Gaussian,
    /// Student-t clusters with the given degrees of freedom.
    StudentT(Vec<f64>),
    /// Arbitrary per-cluster generators with exact normalization.
    PerCluster(Vec<DensityGenerator>),
}

impl LikelihoodMonitor {
    fn generators(&self) -> Option<GeneratorMap> {
        match self {
            LikelihoodMonitor::Off => None,
            LikelihoodMonitor::Gaussian => Some(GeneratorMap::Shared(DensityGenerator::Gaussian)),
            LikelihoodMonitor::StudentT(nu) => Some(GeneratorMap::PerCluster(
                nu.iter().map(|&dof| DensityGenerator::StudentT { dof }).collect(),
            )),
            LikelihoodMonitor::PerCluster(gens) => Some(GeneratorMap::PerCluster(gens.clone())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    KMeans { seed: u64, restarts: usize },
    Given(MixtureModel),
}

impl Default for Init {
    fn default() -> Self {
        Init::KMeans { seed: 0, restarts: DEFAULT_RESTARTS }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub em_max_iters: usize,
    /// Threshold on the relative parameter change between EM iterations.
    pub em_tol: f64,
    /// Inner fixed point; its `version` selects the M-step variant.
    pub fixed_point: FixedPointConfig,
    pub init: Init,
    pub e_step: EStep,
    pub likelihood_monitor: LikelihoodMonitor,
    /// Recompute the scale estimates after every iteration.
    pub track_tau: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            em_max_iters: 200,
            em_tol: 1e-6,
            fixed_point: FixedPointConfig::default(),
            init: Init::default(),
            e_step: EStep::DistributionFree,
            likelihood_monitor: LikelihoodMonitor::Off,
            track_tau: false,
        }
    }
}

impl FitConfig {
    pub fn with_version(version: Version) -> Self {
        let mut cfg = Self::default();
        cfg.fixed_point.version = version;
        cfg
    }

    pub fn version(&self) -> Version {
        self.fixed_point.version
    }

    pub fn validate(&self) -> Result<()> {
        self.fixed_point.validate()?;
        if self.em_max_iters == 0 || !(self.em_tol > 0.0) {
            return Err(Error::InvalidParameter("EM needs em_max_iters >= 1 and em_tol > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    /// Inner fixed-point passes, per EM iteration and cluster.
    pub fp_iters: Vec<Vec<usize>>,
    /// Whether each inner fixed point met its tolerance.
    pub fp_converged: Vec<Vec<bool>>,
    /// Iterations (1-based) whose monitored log-likelihood dropped by more than
    /// the allowed slack while every fixed point had converged.
    pub monotonicity_violations: Vec<usize>,
    /// Iterations at which a degenerate cluster was reseeded.
    pub reinitializations: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub labels: Vec<usize>,
    pub model: MixtureModel,
    pub responsibilities: Responsibilities,
    pub tau: ScaleEstimates,
    /// Monitored log-likelihood, starting with the initial model.
    pub loglik_trace: Vec<f64>,
    pub em_iters: usize,
    pub converged: bool,
    pub diagnostics: Diagnostics,
    /// Scale estimates after each iteration when `track_tau` is set.
    pub tau_history: Vec<ScaleEstimates>,
}

/// Allowed relative decrease of the monitored log-likelihood.
pub const MONOTONE_SLACK: f64 = 1e-8;
const MAX_REINIT: usize = 3;

/// Observed mixture log-likelihood with the given scales plugged in.
pub fn log_likelihood(
    x: &DMatrix<f64>,
    model: &MixtureModel,
    gens: &GeneratorMap,
    tau: &ScaleEstimates,
) -> Result<f64> {
    let (n, m) = x.shape();
    model.check_dimension(m)?;
    let k = model.k();
    if tau.tau.shape() != (n, k) {
        return Err(Error::DimensionMismatch { expected: n, found: tau.tau.nrows() });
    }
    let gen_at = |i: usize, j: usize| -> &DensityGenerator {
        match gens {
            GeneratorMap::Shared(g) => g,
            GeneratorMap::PerCluster(v) => &v[j],
            GeneratorMap::PerObservation(v) => &v[i][j],
        }
    };
    if let GeneratorMap::PerCluster(v) = gens {
        if v.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: v.len() });
        }
    }
    if let GeneratorMap::PerObservation(v) = gens {
        if v.len() != n || v.iter().any(|r| r.len() != k) {
            return Err(Error::DimensionMismatch { expected: n, found: v.len() });
        }
    }
    let cols = linalg::columns(x);
    let half_m = 0.5 * m as f64;
    let mut terms = DMatrix::zeros(n, k);
    for j in 0..k {
        let factor = Factor::new(&model.sigma[j])?;
        let q = factor.quad_forms(&cols, &model.mu[j]);
        let base = model.pi[j].ln() - 0.5 * factor.log_det();
        for i in 0..n {
            let t = tau.tau[(i, j)];
            terms[(i, j)] =
                base - half_m * t.ln() + gen_at(i, j).log_normalized_profile(q[i] / t, m)?;
        }
    }
    let mut total = 0.0;
    let mut row = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            row[j] = terms[(i, j)];
        }
        total += linalg::log_sum_exp(&row);
    }
    Ok(total)
}

/// Proportions from the responsibilities, then one fixed point per cluster
/// started at the previous parameters.
pub fn m_step(
    x: &DMatrix<f64>,
    p: &Responsibilities,
    prev: &MixtureModel,
    cfg: &FitConfig,
) -> Result<(MixtureModel, Vec<FixedPointOutcome>)> {
    m_step_columns(&linalg::columns(x), p, prev, cfg)
}

fn m_step_columns(
    cols: &DMatrix<f64>,
    p: &Responsibilities,
    prev: &MixtureModel,
    cfg: &FitConfig,
) -> Result<(MixtureModel, Vec<FixedPointOutcome>)> {
    let n = cols.ncols();
    if p.shape() != (n, prev.k()) {
        return Err(Error::DimensionMismatch { expected: n, found: p.nrows() });
    }
    let pi = update_pi(p);
    let mut outcomes = Vec::with_capacity(prev.k());
    for k in 0..prev.k() {
        let weights = p.column(k).into_owned();
        if !(weights.sum() > f64::MIN_POSITIVE) {
            return Err(Error::DegenerateCluster { cluster: k });
        }
        let out = fixed_point_columns(cols, &weights, &prev.mu[k], &prev.sigma[k], &cfg.fixed_point)
            .map_err(|e| match e {
                Error::DegenerateCluster { .. } => Error::DegenerateCluster { cluster: k },
                other => other,
            })?;
        outcomes.push(out);
    }
    let model = MixtureModel {
        pi: pi.iter().copied().collect(),
        mu: outcomes.iter().map(|o| o.mu.clone()).collect(),
        sigma: outcomes.iter().map(|o| o.sigma.clone()).collect(),
    };
    Ok((model, outcomes))
}

/// Starting model: k-means centers (or the given model), identity scatter and
/// proportions from the k-means partition.
pub(crate) fn initial_model(x: &DMatrix<f64>, k: usize, init: &Init) -> Result<MixtureModel> {
    let (n, m) = x.shape();
    match init {
        Init::Given(model) => {
            model.check_dimension(m)?;
            if model.k() != k {
                return Err(Error::DimensionMismatch { expected: k, found: model.k() });
            }
            Ok(model.clone())
        }
        Init::KMeans { seed, restarts } => {
            let km = kmeans(x, k, *seed, *restarts)?;
            let mut counts = vec![0usize; k];
            for &l in &km.labels {
                counts[l] += 1;
            }
            let pi = counts.iter().map(|&c| c as f64 / n as f64).collect();
            MixtureModel::new(pi, km.centers, vec![DMatrix::identity(m, m); k])
        }
    }
}

/// Row-wise argmax, ties resolved toward the lowest cluster index.
pub fn hard_labels(p: &Responsibilities) -> Vec<usize> {
    p.row_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Index of the observation whose largest responsibility is smallest.
pub(crate) fn worst_explained(p: &Responsibilities) -> usize {
    let mut worst = (0, f64::INFINITY);
    for (i, row) in p.row_iter().enumerate() {
        let best = row.max();
        if best < worst.1 {
            worst = (i, best);
        }
    }
    worst.0
}

/// Runs the flexible EM algorithm with `k` clusters.
pub fn fit(x: &DMatrix<f64>, k: usize, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    let (n, m) = x.shape();
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewObservations { n, k });
    }
    let mut diagnostics = Diagnostics::default();
    if n <= m * (2 * m - 1) {
        diagnostics.warnings.push(format!(
            "n = {n} does not exceed m(2m-1) = {}; scale estimates may be unreliable",
            m * (2 * m - 1)
        ));
    }
    let cols = linalg::columns(x);
    let floor = cfg.fixed_point.tau_floor;
    let offsets = cfg.e_step.offsets(m, k)?;
    let monitor = cfg.likelihood_monitor.generators();
    let evaluate = |model: &MixtureModel, gens: &GeneratorMap| -> Result<f64> {
        let tau = estimate_tau(x, model, gens, floor)?;
        log_likelihood(x, model, gens, &tau)
    };

    let mut model = initial_model(x, k, &cfg.init)?;
    let mut loglik_trace = Vec::new();
    if let Some(gens) = &monitor {
        loglik_trace.push(evaluate(&model, gens)?);
    }
    let tau_gens = monitor.clone().unwrap_or(GeneratorMap::Shared(DensityGenerator::Gaussian));
    let mut tau_history = Vec::new();
    let mut converged = false;
    let mut em_iters = 0;
    let mut reinits = 0;
    let mut restarted = false;

    while em_iters < cfg.em_max_iters {
        em_iters += 1;
        let p = e_step_columns(&cols, &model, &offsets, floor)?;
        let (next, outcomes) = match m_step_columns(&cols, &p, &model, cfg) {
            Ok(step) => step,
            Err(Error::DegenerateCluster { cluster }) => {
                reinits += 1;
                if reinits > MAX_REINIT {
                    return Err(Error::FitFailed {
                        retries: MAX_REINIT,
                        reason: format!("cluster {cluster} degenerate at iteration {em_iters}"),
                    });
                }
                let seed_row = worst_explained(&p);
                model.mu[cluster] = x.row(seed_row).transpose();
                model.sigma[cluster] = DMatrix::identity(m, m);
                model.pi = vec![1.0 / k as f64; k];
                diagnostics.reinitializations.push(em_iters);
                restarted = true;
                continue;
            }
            Err(other) => return Err(other),
        };
        let change = model.relative_change(&next);
        model = next;
        let fp_ok = outcomes.iter().all(|o| o.converged);
        diagnostics.fp_iters.push(outcomes.iter().map(|o| o.iters).collect());
        diagnostics.fp_converged.push(outcomes.iter().map(|o| o.converged).collect());

        if let Some(gens) = &monitor {
            let value = evaluate(&model, gens)?;
            if let Some(&prev) = loglik_trace.last() {
                if fp_ok && !restarted && value < prev - MONOTONE_SLACK * prev.abs() {
                    diagnostics.monotonicity_violations.push(em_iters);
                }
            }
            loglik_trace.push(value);
        }
        restarted = false;
        if cfg.track_tau {
            tau_history.push(estimate_tau(x, &model, &tau_gens, floor)?);
        }
        if change < cfg.em_tol {
            converged = true;
            break;
        }
    }

    let responsibilities = e_step_columns(&cols, &model, &offsets, floor)?;
    let labels = hard_labels(&responsibilities);
    let tau = estimate_tau(x, &model, &tau_gens, floor)?;
    Ok(FitReport {
        labels,
        model,
        responsibilities,
        tau,
        loglik_trace,
        em_iters,
        converged,
        diagnostics,
        tau_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_model(k: usize, m: usize, rng: &mut ChaCha8Rng) -> MixtureModel {
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.2).collect();
        let total: f64 = raw.iter().sum();
        let mu = (0..k)
            .map(|_| DVector::from_fn(m, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let sigma = (0..k)
            .map(|_| {
                let a = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
                &a * a.transpose() + DMatrix::identity(m, m)
            })
            .collect();
        MixtureModel::new(raw.iter().map(|r| r / total).collect(), mu, sigma).unwrap()
    }

    fn random_points(n: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| 4.0 * rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn single_cluster_responsibilities_are_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_model(1, 3, &mut rng);
        let x = random_points(20, 3, &mut rng);
        let p = e_step(&x, &model, 1e-12).unwrap();
        assert!(p.iter().all(|v| *v == 1.0));
        let q = e_step_student(&x, &model, &[4.0], StudentMode::Exact, 1e-12).unwrap();
        assert!(q.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn equidistant_point_splits_evenly() {
        let model = MixtureModel::new(
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![-1.0, 0.0]), DVector::from_vec(vec![1.0, 0.0])],
            vec![DMatrix::identity(2, 2); 2],
        )
        .unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 3.0]);
        let p = e_step(&x, &model, 1e-12).unwrap();
        for i in 0..2 {
            assert!((p[(i, 0)] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_sum_to_one_and_scatter_scale_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(4, 6, &mut rng);
        let x = random_points(200, 6, &mut rng);
        let p = e_step(&x, &model, 1e-12).unwrap();
        for row in p.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let mut scaled = model.clone();
            for s in &mut scaled.sigma {
                *s *= c;
            }
            let q = e_step(&x, &scaled, 1e-12).unwrap();
            assert!((&p - q).amax() < 1e-12, "c = {c}");
        }
    }

    #[test]
    fn equal_dof_student_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = random_model(3, 5, &mut rng);
        let x = random_points(100, 5, &mut rng);
        let p = e_step(&x, &model, 1e-12).unwrap();
        for mode in [StudentMode::Exact, StudentMode::Approximate] {
            let q = e_step_student(&x, &model, &[3.5; 3], mode, 1e-12).unwrap();
            assert!((&p - q).amax() < 1e-10);
        }
    }

    #[test]
    fn student_approximation_error_shrinks_with_dimension() {
        // identical clusters isolate the per-cluster constants
        let ratios = [0.5, 2.0];
        let mut previous = f64::INFINITY;
        for m in [10usize, 40, 160] {
            let model = MixtureModel::new(
                vec![0.5, 0.5],
                vec![DVector::zeros(m); 2],
                vec![DMatrix::identity(m, m); 2],
            )
            .unwrap();
            let mut x = DMatrix::zeros(1, m);
            x[(0, 0)] = 1.0;
            let nu: Vec<f64> = ratios.iter().map(|c| c * m as f64).collect();
            let exact = e_step_student(&x, &model, &nu, StudentMode::Exact, 1e-12).unwrap();
            let approx = e_step_student(&x, &model, &nu, StudentMode::Approximate, 1e-12).unwrap();
            let gap = (exact - approx).amax();
            assert!(gap < previous, "m = {m}: {gap} >= {previous}");
            previous = gap;
        }
    }

    #[test]
    fn gaussian_point_at_mean_log_density() {
        let m = 3;
        let model = MixtureModel::new(vec![1.0], vec![DVector::zeros(m)], vec![DMatrix::identity(m, m)])
            .unwrap();
        let x = DMatrix::zeros(1, m);
        let tau = ScaleEstimates { tau: DMatrix::from_element(1, 1, 1.0) };
        let l = log_likelihood(&x, &model, &GeneratorMap::Shared(DensityGenerator::Gaussian), &tau)
            .unwrap();
        let expected = -(m as f64) / 2.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = random_model(2, 3, &mut rng);
        let x = random_points(2, 3, &mut rng);
        let gens = GeneratorMap::Shared(DensityGenerator::StudentT { dof: 4.0 });
        let tau = estimate_tau(&x, &model, &gens, 1e-12).unwrap();
        let both = log_likelihood(&x, &model, &gens, &tau).unwrap();
        let mut parts = 0.0;
        for i in 0..2 {
            let xi = x.rows(i, 1).into_owned();
            let ti = ScaleEstimates { tau: tau.tau.rows(i, 1).into_owned() };
            parts += log_likelihood(&xi, &model, &gens, &ti).unwrap();
        }
        assert!((both - parts).abs() < 1e-12);
    }

    /// Direct density evaluation with explicit inverse and determinant.
    fn direct_log_density(
        x: &DVector<f64>,
        model: &MixtureModel,
        gen: &DensityGenerator,
        tau: &[f64],
    ) -> f64 {
        use statrs::function::gamma::ln_gamma;
        let m = x.len() as f64;
        let mut total = 0.0;
        for k in 0..model.k() {
            let c = &model.sigma[k] * tau[k];
            let inv = c.clone().try_inverse().unwrap();
            let d = x - &model.mu[k];
            let q = (d.transpose() * &inv * &d)[(0, 0)];
            let det = c.determinant();
            let dens = match gen {
                DensityGenerator::Gaussian => {
                    (2.0 * std::f64::consts::PI).powf(-m / 2.0) * det.powf(-0.5) * (-q / 2.0).exp()
                }
                DensityGenerator::StudentT { dof } => {
                    (ln_gamma((dof + m) / 2.0) - ln_gamma(dof / 2.0)).exp()
                        * (dof * std::f64::consts::PI).powf(-m / 2.0)
                        * det.powf(-0.5)
                        * (1.0 + q / dof).powf(-(dof + m) / 2.0)
                }
                _ => unreachable!(),
            };
            total += model.pi[k] * dens;
        }
        total.ln()
    }

    #[test]
    fn log_likelihood_matches_direct_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = random_model(2, 3, &mut rng);
        let x = random_points(10, 3, &mut rng);
        for gen in [DensityGenerator::Gaussian, DensityGenerator::StudentT { dof: 5.0 }] {
            let tau_values = [0.7, 1.9];
            let tau = ScaleEstimates { tau: DMatrix::from_fn(10, 2, |_, k| tau_values[k]) };
            let got = log_likelihood(&x, &model, &GeneratorMap::Shared(gen), &tau).unwrap();
            let want: f64 = (0..10)
                .map(|i| direct_log_density(&x.row(i).transpose(), &model, &gen, &tau_values))
                .sum();
            assert!((got - want).abs() < 1e-9 * want.abs(), "{gen:?}: {got} vs {want}");
        }
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        let p = DMatrix::from_row_slice(2, 3, &[0.4, 0.4, 0.2, 0.2, 0.4, 0.4]);
        assert_eq!(hard_labels(&p), vec![0, 1]);
    }

    #[test]
    fn model_validation() {
        let sigma = vec![DMatrix::identity(2, 2)];
        assert!(MixtureModel::new(vec![0.9], vec![DVector::zeros(2)], sigma.clone()).is_err());
        assert!(MixtureModel::new(vec![1.0], vec![DVector::zeros(3)], sigma).is_err());
        let bad = vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])];
        assert!(MixtureModel::new(vec![1.0], vec![DVector::zeros(2)], bad).is_err());
    }

    proptest::proptest! {
        #[test]
        fn relabelling_clusters_permutes_responsibilities(seed in 0u64..10_000, shift in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = random_model(3, 4, &mut rng);
            let x = DMatrix::from_fn(25, 4, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal));
            let order: Vec<usize> = (0..3).map(|j| (j + shift) % 3).collect();
            let rotated = MixtureModel::new(
                order.iter().map(|&j| model.pi[j]).collect(),
                order.iter().map(|&j| model.mu[j].clone()).collect(),
                order.iter().map(|&j| model.sigma[j].clone()).collect(),
            )
            .unwrap();
            let p = e_step(&x, &model, 1e-12).unwrap();
            let q = e_step(&x, &rotated, 1e-12).unwrap();
            for (new, &old) in order.iter().enumerate() {
                proptest::prop_assert!((q.column(new) - p.column(old)).amax() < 1e-12);
            }
        }
    }
}
