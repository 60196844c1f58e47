//! Comparison algorithms: k-means (also the initializer of the EM variants)
//! and a classical full-covariance Gaussian-mixture EM.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::elliptic::DensityGenerator;
use crate::error::{Error, Result};
use crate::estimators::{estimate_tau, GeneratorMap, ScaleEstimates};
use crate::fem::{
    hard_labels, initial_model, log_likelihood, worst_explained, Diagnostics, FitConfig,
    FitReport, LikelihoodMonitor, MixtureModel, Responsibilities, MONOTONE_SLACK,
};
use crate::linalg::{self, Factor, RANK_TOL};

pub const DEFAULT_RESTARTS: usize = 10;
const MAX_LLOYD_ITERS: usize = 300;
const MAX_SINGLETON_ROUNDS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<DVector<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

/// One Lloyd run with the inertia recorded after every assignment step.
#[derive(Clone, Debug, PartialEq)]
pub struct LloydRun {
    pub centers: Vec<DVector<f64>>,
    pub labels: Vec<usize>,
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(x: &DMatrix<f64>, i: usize, c: &DVector<f64>) -> f64 {
    x.row(i).iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn nearest(x: &DMatrix<f64>, i: usize, centers: &[DVector<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(x, i, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding: each new center drawn with probability proportional to
/// the squared distance to the closest existing one.
pub fn kmeans_plus_plus<R: Rng + ?Sized>(x: &DMatrix<f64>, k: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let n = x.nrows();
    let mut centers = vec![x.row(rng.random_range(0..n)).transpose()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x, i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(pick).transpose();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x, i, &c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd iterations until the assignment stops changing or `max_iters` passes.
/// An emptied cluster is moved onto the observation farthest from its center.
pub fn lloyd(x: &DMatrix<f64>, mut centers: Vec<DVector<f64>>, max_iters: usize) -> LloydRun {
    let (n, m) = x.shape();
    let k = centers.len();
    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut inertia_trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for i in 0..n {
            let (j, d) = nearest(x, i, &centers);
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
            dists[i] = d;
        }
        inertia_trace.push(dists.iter().sum());
        if !changed {
            break;
        }
        let mut sums = vec![DVector::<f64>::zeros(m); k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            sums[labels[i]] += x.row(i).transpose();
            counts[labels[i]] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = &sums[j] / counts[j] as f64;
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                centers[j] = x.row(far).transpose();
                dists[far] = 0.0;
            }
        }
    }
    LloydRun { centers, labels, inertia_trace }
}

fn best_of_restarts(x: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng, restarts: usize) -> LloydRun {
    let mut best: Option<LloydRun> = None;
    for _ in 0..restarts.max(1) {
        let seeds = kmeans_plus_plus(x, k, rng);
        let run = lloyd(x, seeds, MAX_LLOYD_ITERS);
        let better = match &best {
            None => true,
            Some(b) => run.inertia_trace.last() < b.inertia_trace.last(),
        };
        if better {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}

/// k-means with k-means++ seeding, keeping the best of `restarts` runs.
///
/// Clusters reduced to a single observation are treated as isolated points:
/// they are left out and k-means is rerun (at most three rounds), after which
/// the left-out points join their nearest center.
pub fn kmeans(x: &DMatrix<f64>, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let n = x.nrows();
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewObservations { n, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut active: Vec<usize> = (0..n).collect();
    let mut run = best_of_restarts(x, k, &mut rng, restarts);
    for _ in 0..MAX_SINGLETON_ROUNDS {
        let mut counts = vec![0usize; k];
        for &l in &run.labels {
            counts[l] += 1;
        }
        let isolated: Vec<usize> =
            (0..active.len()).filter(|&i| counts[run.labels[i]] == 1).collect();
        if isolated.is_empty() || active.len() - isolated.len() < k {
            break;
        }
        active = (0..active.len())
            .filter(|i| !isolated.contains(i))
            .map(|i| active[i])
            .collect();
        let subset = x.select_rows(active.iter());
        run = best_of_restarts(&subset, k, &mut rng, restarts);
    }

    let mut labels = Vec::with_capacity(n);
    let mut inertia = 0.0;
    for i in 0..n {
        let (j, d) = nearest(x, i, &run.centers);
        labels.push(j);
        inertia += d;
    }
    Ok(KMeansResult { centers: run.centers, labels, inertia })
}

fn gaussian_log_densities(cols: &DMatrix<f64>, model: &MixtureModel) -> Result<DMatrix<f64>> {
    let (m, n) = cols.shape();
    let c = -0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut out = DMatrix::zeros(n, model.k());
    for k in 0..model.k() {
        let factor = Factor::new(&model.sigma[k])?;
        let q = factor.quad_forms(cols, &model.mu[k]);
        let base = c - 0.5 * factor.log_det() + model.pi[k].ln();
        for i in 0..n {
            out[(i, k)] = base - 0.5 * q[i];
        }
    }
    Ok(out)
}

fn gaussian_e_step(cols: &DMatrix<f64>, model: &MixtureModel) -> Result<Responsibilities> {
    let mut p = gaussian_log_densities(cols, model)?;
    let k = model.k();
    let mut row = vec![0.0; k];
    for i in 0..p.nrows() {
        for j in 0..k {
            row[j] = p[(i, j)];
        }
        let lse = linalg::log_sum_exp(&row);
        let mut total = 0.0;
        for j in 0..k {
            let v = (row[j] - lse).exp();
            p[(i, j)] = v;
            total += v;
        }
        for j in 0..k {
            p[(i, j)] /= total;
        }
    }
    Ok(p)
}

fn gaussian_log_likelihood(cols: &DMatrix<f64>, model: &MixtureModel) -> Result<f64> {
    let d = gaussian_log_densities(cols, model)?;
    Ok(d.row_iter()
        .map(|r| linalg::log_sum_exp(&r.iter().copied().collect::<Vec<_>>()))
        .sum())
}

/// Weighted mean and covariance; the covariance gets `1e-9 tr/m I` added when
/// it is numerically singular.
fn gaussian_m_step(cols: &DMatrix<f64>, p: &Responsibilities) -> Result<MixtureModel> {
    let (m, n) = cols.shape();
    let k = p.ncols();
    let mut pi = Vec::with_capacity(k);
    let mut mu = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    for j in 0..k {
        let w = p.column(j);
        let nk = w.sum();
        if !(nk > f64::MIN_POSITIVE) {
            return Err(Error::DegenerateCluster { cluster: j });
        }
        let mean = cols * w / nk;
        let mut centered = cols.clone();
        let mut scaled = cols.clone();
        for i in 0..n {
            let mut c = centered.column_mut(i);
            c -= &mean;
            scaled.column_mut(i).copy_from(&(&c * (w[i] / nk)));
        }
        let mut cov = &scaled * centered.transpose();
        linalg::symmetrize(&mut cov);
        let ok = Factor::new(&cov).map(|f| f.pivot_ratio(&cov) > RANK_TOL).unwrap_or(false);
        if !ok {
            let ridge = 1e-9 * cov.trace().max(f64::MIN_POSITIVE) / m as f64;
            cov += DMatrix::identity(m, m) * ridge;
            let ok = Factor::new(&cov).map(|f| f.pivot_ratio(&cov) > RANK_TOL).unwrap_or(false);
            if !ok {
                return Err(Error::DegenerateCluster { cluster: j });
            }
        }
        pi.push(nk / n as f64);
        mu.push(mean);
        sigma.push(cov);
    }
    let total: f64 = pi.iter().sum();
    for v in &mut pi {
        *v /= total;
    }
    Ok(MixtureModel { pi, mu, sigma })
}

/// Classical EM for a Gaussian mixture with full covariances.
///
/// Uses the initialization, stopping rule and degenerate-cluster recovery of
/// [`crate::fem::fit`]. The reported `sigma` are covariance matrices (not
/// trace-normalized). Any likelihood monitor other than `Off` records the
/// Gaussian mixture log-likelihood.
pub fn gmm_em(x: &DMatrix<f64>, k: usize, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    let (n, m) = x.shape();
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewObservations { n, k });
    }
    let cols = linalg::columns(x);
    let monitor = cfg.likelihood_monitor != LikelihoodMonitor::Off;
    let mut model = initial_model(x, k, &cfg.init)?;
    let mut diagnostics = Diagnostics::default();
    let mut loglik_trace = Vec::new();
    if monitor {
        loglik_trace.push(gaussian_log_likelihood(&cols, &model)?);
    }
    let mut converged = false;
    let mut em_iters = 0;
    let mut reinits = 0;
    let mut restarted = false;
    while em_iters < cfg.em_max_iters {
        em_iters += 1;
        let p = gaussian_e_step(&cols, &model)?;
        let next = match gaussian_m_step(&cols, &p) {
            Ok(next) => next,
            Err(Error::DegenerateCluster { cluster }) => {
                reinits += 1;
                if reinits > 3 {
                    return Err(Error::FitFailed {
                        retries: 3,
                        reason: format!("cluster {cluster} degenerate at iteration {em_iters}"),
                    });
                }
                model.mu[cluster] = x.row(worst_explained(&p)).transpose();
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
        if monitor {
            let value = gaussian_log_likelihood(&cols, &model)?;
            if let Some(&prev) = loglik_trace.last() {
                if !restarted && value < prev - MONOTONE_SLACK * prev.abs() {
                    diagnostics.monotonicity_violations.push(em_iters);
                }
            }
            loglik_trace.push(value);
        }
        restarted = false;
        if change < cfg.em_tol {
            converged = true;
            break;
        }
    }
    let responsibilities = gaussian_e_step(&cols, &model)?;
    let labels = hard_labels(&responsibilities);
    let tau = estimate_tau(
        x,
        &model,
        &GeneratorMap::Shared(DensityGenerator::Gaussian),
        cfg.fixed_point.tau_floor,
    )
    .unwrap_or_else(|_| ScaleEstimates { tau: DMatrix::from_element(n, k, 1.0) });
    Ok(FitReport {
        labels,
        model,
        responsibilities,
        tau,
        loglik_trace,
        em_iters,
        converged,
        diagnostics,
        tau_history: Vec::new(),
    })
}

/// Whole-model Gaussian log-likelihood, exposed for tests and the harness.
pub fn gaussian_mixture_log_likelihood(x: &DMatrix<f64>, model: &MixtureModel) -> Result<f64> {
    let tau = ScaleEstimates { tau: DMatrix::from_element(x.nrows(), model.k(), 1.0) };
    log_likelihood(x, model, &GeneratorMap::Shared(DensityGenerator::Gaussian), &tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::Init;
    use rand_distr::StandardNormal;

    fn blobs(centers: &[(f64, f64)], per: usize, spread: f64, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = centers.len() * per;
        let mut x = DMatrix::zeros(n, 2);
        let mut labels = Vec::with_capacity(n);
        for (c, &(a, b)) in centers.iter().enumerate() {
            for r in 0..per {
                let i = c * per + r;
                x[(i, 0)] = a + spread * rng.sample::<f64, _>(StandardNormal);
                x[(i, 1)] = b + spread * rng.sample::<f64, _>(StandardNormal);
                labels.push(c);
            }
        }
        (x, labels)
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 5.0, 5.0, -3.0, 2.0]);
        let res = kmeans(&x, 4, 0, 3).unwrap();
        assert_eq!(res.inertia, 0.0);
        let mut l = res.labels.clone();
        l.sort();
        l.dedup();
        assert_eq!(l.len(), 4);
    }

    #[test]
    fn pairs_give_midpoints() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 2.0, 10.0, 10.0, 12.0, 10.0]);
        let res = kmeans(&x, 2, 7, 5).unwrap();
        let mut centers: Vec<(f64, f64)> = res.centers.iter().map(|c| (c[0], c[1])).collect();
        centers.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(centers, vec![(0.0, 1.0), (11.0, 10.0)]);
        assert_eq!(res.inertia, 4.0);
    }

    #[test]
    fn inertia_never_increases() {
        let (x, _) = blobs(&[(0.0, 0.0), (3.0, 0.0), (0.0, 3.0), (3.0, 3.0)], 50, 1.2, 4);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let run = lloyd(&x, kmeans_plus_plus(&x, 5, &mut rng), 300);
            for w in run.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", run.inertia_trace);
            }
        }
    }

    #[test]
    fn kmeans_is_deterministic_and_rejects_small_n() {
        let (x, _) = blobs(&[(0.0, 0.0), (5.0, 5.0)], 30, 1.0, 1);
        assert_eq!(kmeans(&x, 2, 3, 4).unwrap(), kmeans(&x, 2, 3, 4).unwrap());
        assert!(matches!(kmeans(&x.rows(0, 1).into_owned(), 2, 0, 1), Err(Error::TooFewObservations { .. })));
    }

    #[test]
    fn isolated_point_is_left_out() {
        let (mut x, _) = blobs(&[(0.0, 0.0), (6.0, 0.0)], 40, 0.5, 2);
        x = x.insert_row(80, 0.0);
        x[(80, 0)] = 200.0;
        x[(80, 1)] = 200.0;
        let res = kmeans(&x, 2, 0, 5).unwrap();
        let mut counts = [0usize; 2];
        for &l in &res.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c >= 40), "{counts:?}");
    }

    #[test]
    fn gmm_single_cluster_is_sample_moments() {
        let (x, _) = blobs(&[(1.0, -2.0)], 200, 1.5, 3);
        let report = gmm_em(&x, 1, &FitConfig::default()).unwrap();
        let n = x.nrows() as f64;
        let mean = x.row_mean().transpose();
        let mut cov = DMatrix::zeros(2, 2);
        for i in 0..x.nrows() {
            let d = x.row(i).transpose() - &mean;
            cov += &d * d.transpose();
        }
        cov /= n;
        assert!((&report.model.mu[0] - &mean).amax() < 1e-12);
        assert!((&report.model.sigma[0] - &cov).amax() < 1e-12);
    }

    #[test]
    fn gmm_separates_spherical_blobs_with_monotone_likelihood() {
        let (x, truth) = blobs(&[(0.0, 0.0), (8.0, 0.0), (0.0, 8.0)], 100, 1.0, 5);
        let cfg = FitConfig {
            likelihood_monitor: LikelihoodMonitor::Gaussian,
            init: Init::KMeans { seed: 1, restarts: 5 },
            ..Default::default()
        };
        let report = gmm_em(&x, 3, &cfg).unwrap();
        let ari = crate::metrics::ari(&report.labels, &truth).unwrap();
        assert!(ari >= 0.99, "{ari}");
        assert!(report.diagnostics.monotonicity_violations.is_empty());
        for w in report.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs());
        }
    }
}
