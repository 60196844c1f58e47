//! Robust parameter estimation: per-observation scale estimates, the coupled
//! location/scatter fixed point of the M-step (four update variants) and a
//! reference Tyler estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::elliptic::{argsup_density, DensityGenerator};
use crate::error::{Error, Result};
use crate::fem::{MixtureModel, Responsibilities};
use crate::linalg::{self, Factor, RANK_TOL};

pub const DEFAULT_TAU_FLOOR: f64 = 1e-12;

/// `(x - mu)^T Sigma^{-1} (x - mu)` given the inverse scatter matrix.
pub fn mahalanobis_sq(x: &DVector<f64>, mu: &DVector<f64>, sigma_inv: &DMatrix<f64>) -> Result<f64> {
    let m = x.len();
    if mu.len() != m {
        return Err(Error::DimensionMismatch { expected: m, found: mu.len() });
    }
    if sigma_inv.shape() != (m, m) {
        return Err(Error::DimensionMismatch { expected: m, found: sigma_inv.nrows() });
    }
    let d = x - mu;
    Ok(d.dot(&(sigma_inv * &d)).max(0.0))
}

/// Estimated nuisance scales, `n x K`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleEstimates {
    pub tau: DMatrix<f64>,
}

/// Density generator attached to each (observation, cluster) pair.
#[derive(Clone, Debug, PartialEq)]
pub enum GeneratorMap {
    Shared(DensityGenerator),
    PerCluster(Vec<DensityGenerator>),
    /// Indexed `[i][k]`.
    PerObservation(Vec<Vec<DensityGenerator>>),
}

impl GeneratorMap {
    /// `a_ik` for every pair.
    fn maximizers(&self, n: usize, k: usize, m: usize) -> Result<DMatrix<f64>> {
        match self {
            GeneratorMap::Shared(g) => Ok(DMatrix::from_element(n, k, argsup_density(g, m)?)),
            GeneratorMap::PerCluster(gens) => {
                if gens.len() != k {
                    return Err(Error::DimensionMismatch { expected: k, found: gens.len() });
                }
                let a = gens
                    .iter()
                    .map(|g| argsup_density(g, m))
                    .collect::<Result<Vec<_>>>()?;
                Ok(DMatrix::from_fn(n, k, |_, j| a[j]))
            }
            GeneratorMap::PerObservation(rows) => {
                if rows.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, found: rows.len() });
                }
                let mut out = DMatrix::zeros(n, k);
                for (i, row) in rows.iter().enumerate() {
                    if row.len() != k {
                        return Err(Error::DimensionMismatch { expected: k, found: row.len() });
                    }
                    for (j, g) in row.iter().enumerate() {
                        out[(i, j)] = argsup_density(g, m)?;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// `tau_ik = s_ik / a_ik`, floored at `tau_floor`.
pub fn estimate_tau(
    x: &DMatrix<f64>,
    model: &MixtureModel,
    gens: &GeneratorMap,
    tau_floor: f64,
) -> Result<ScaleEstimates> {
    let (n, m) = x.shape();
    model.check_dimension(m)?;
    let k = model.k();
    let a = gens.maximizers(n, k, m)?;
    let cols = linalg::columns(x);
    let mut tau = DMatrix::zeros(n, k);
    for j in 0..k {
        let factor = Factor::new(&model.sigma[j])?;
        let q = factor.quad_forms(&cols, &model.mu[j]);
        for i in 0..n {
            tau[(i, j)] = (q[i] / a[(i, j)]).max(tau_floor);
        }
    }
    Ok(ScaleEstimates { tau })
}

/// Mixing proportions: column means of the responsibilities.
pub fn update_pi(p: &Responsibilities) -> DVector<f64> {
    let n = p.nrows() as f64;
    DVector::from_iterator(p.ncols(), p.column_iter().map(|c| c.sum() / n))
}

/// Variant of the location/scatter fixed point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Version {
    /// Scatter update centered at the location from the same iteration.
    #[default]
    V1,
    /// Scatter update centered at the previous location.
    V2,
    /// Square-root location weights, scatter centered at the previous location.
    V3,
    /// Square-root location weights, scatter centered at the new location.
    V4,
}

impl Version {
    pub const ALL: [Version; 4] = [Version::V1, Version::V2, Version::V3, Version::V4];

    fn sqrt_weights(self) -> bool {
        matches!(self, Version::V3 | Version::V4)
    }

    fn fresh_center(self) -> bool {
        matches!(self, Version::V1 | Version::V4)
    }
}

impl TryFrom<u8> for Version {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Version::V1),
            2 => Ok(Version::V2),
            3 => Ok(Version::V3),
            4 => Ok(Version::V4),
            other => Err(Error::InvalidParameter(format!("version must be 1..=4, got {other}"))),
        }
    }
}

impl From<Version> for u8 {
    fn from(v: Version) -> u8 {
        match v {
            Version::V1 => 1,
            Version::V2 => 2,
            Version::V3 => 3,
            Version::V4 => 4,
        }
    }
}

impl std::fmt::Display for Version {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedPointConfig {
    pub version: Version,
    pub max_iters: usize,
    pub tol: f64,
    pub tau_floor: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self { version: Version::V1, max_iters: 20, tol: 1e-6, tau_floor: DEFAULT_TAU_FLOOR }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.tol > 0.0) || !(self.tau_floor > 0.0) {
            return Err(Error::InvalidParameter(
                "fixed point needs max_iters >= 1, tol > 0 and tau_floor > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointOutcome {
    pub mu: DVector<f64>,
    /// Trace-`m` scatter matrix.
    pub sigma: DMatrix<f64>,
    pub iters: usize,
    pub converged: bool,
}

/// Weighted scatter `m * sum_i w_i d_i d_i^T / s_i`, symmetrized, rescaled to
/// trace `m` and checked for rank deficiency.
fn scatter_update(
    cols: &DMatrix<f64>,
    weights: &DVector<f64>,
    center: &DVector<f64>,
    quad: &DVector<f64>,
) -> Option<DMatrix<f64>> {
    let (m, n) = cols.shape();
    let mut scaled = cols.clone();
    let mut centered = cols.clone();
    for i in 0..n {
        let mut c = centered.column_mut(i);
        c -= center;
        let w = weights[i] / quad[i];
        scaled.column_mut(i).copy_from(&(&c * w));
    }
    let mut sigma = &scaled * centered.transpose();
    linalg::symmetrize(&mut sigma);
    let trace = sigma.trace();
    if !(trace.is_finite() && trace > 0.0) {
        return None;
    }
    sigma *= m as f64 / trace;
    let factor = Factor::new(&sigma).ok()?;
    (factor.pivot_ratio(&sigma) > RANK_TOL).then_some(sigma)
}

fn validate_weights(weights: &DVector<f64>, n: usize) -> Result<f64> {
    if weights.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: weights.len() });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidParameter("weights must be finite and nonnegative".into()));
    }
    let total = weights.sum();
    if !(total > 0.0) {
        return Err(Error::InvalidParameter("weights sum to zero".into()));
    }
    Ok(total)
}

/// Solves the coupled location/scatter equations for one cluster, starting from
/// `(mu0, sigma0)` and weighting observation `i` by `weights[i]` (its
/// responsibility for the cluster).
///
/// Stops once `|mu_new - mu_old|_2 + |Sigma_new - Sigma_old|_F < tol` or after
/// `max_iters` passes. A rank-deficient scatter update yields
/// [`Error::DegenerateCluster`] with `cluster = 0`; the caller relabels it.
pub fn fixed_point_mu_sigma(
    x: &DMatrix<f64>,
    weights: &DVector<f64>,
    mu0: &DVector<f64>,
    sigma0: &DMatrix<f64>,
    cfg: &FixedPointConfig,
) -> Result<FixedPointOutcome> {
    fixed_point_columns(&linalg::columns(x), weights, mu0, sigma0, cfg)
}

pub(crate) fn fixed_point_columns(
    cols: &DMatrix<f64>,
    weights: &DVector<f64>,
    mu0: &DVector<f64>,
    sigma0: &DMatrix<f64>,
    cfg: &FixedPointConfig,
) -> Result<FixedPointOutcome> {
    cfg.validate()?;
    let (m, n) = cols.shape();
    if mu0.len() != m || sigma0.shape() != (m, m) {
        return Err(Error::DimensionMismatch { expected: m, found: mu0.len() });
    }
    let total = validate_weights(weights, n)?;
    let w = weights / total;
    let floor = cfg.tau_floor;

    let mut mu = mu0.clone();
    let mut sigma = sigma0.clone();
    let mut iters = 0;
    let mut converged = false;
    while iters < cfg.max_iters {
        iters += 1;
        let factor = Factor::new(&sigma).map_err(|_| Error::DegenerateCluster { cluster: 0 })?;
        let quad = factor.quad_forms(cols, &mu).map(|q| q.max(floor));

        let mut num = DVector::zeros(m);
        let mut den = 0.0;
        for i in 0..n {
            let s = if cfg.version.sqrt_weights() { quad[i].sqrt() } else { quad[i] };
            let c = weights[i] / s;
            num.axpy(c, &cols.column(i), 1.0);
            den += c;
        }
        let mu_new = num / den;

        let (center, center_quad) = if cfg.version.fresh_center() {
            let q = factor.quad_forms(cols, &mu_new).map(|q| q.max(floor));
            (&mu_new, q)
        } else {
            (&mu, quad)
        };
        let sigma_new = scatter_update(cols, &w, center, &center_quad)
            .ok_or(Error::DegenerateCluster { cluster: 0 })?;

        let change = (&mu_new - &mu).norm() + (&sigma_new - &sigma).norm();
        mu = mu_new;
        sigma = sigma_new;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(FixedPointOutcome { mu, sigma, iters, converged })
}

/// Scatter equation alone with the location held at `mu`.
pub fn fixed_point_sigma(
    x: &DMatrix<f64>,
    weights: &DVector<f64>,
    mu: &DVector<f64>,
    sigma0: &DMatrix<f64>,
    cfg: &FixedPointConfig,
) -> Result<FixedPointOutcome> {
    cfg.validate()?;
    let cols = linalg::columns(x);
    let (m, n) = cols.shape();
    if mu.len() != m || sigma0.shape() != (m, m) {
        return Err(Error::DimensionMismatch { expected: m, found: mu.len() });
    }
    let total = validate_weights(weights, n)?;
    let w = weights / total;
    let mut sigma = sigma0.clone();
    let mut iters = 0;
    let mut converged = false;
    while iters < cfg.max_iters {
        iters += 1;
        let factor = Factor::new(&sigma).map_err(|_| Error::DegenerateCluster { cluster: 0 })?;
        let quad = factor.quad_forms(&cols, mu).map(|q| q.max(cfg.tau_floor));
        let sigma_new =
            scatter_update(&cols, &w, mu, &quad).ok_or(Error::DegenerateCluster { cluster: 0 })?;
        let change = (&sigma_new - &sigma).norm();
        sigma = sigma_new;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(FixedPointOutcome { mu: mu.clone(), sigma, iters, converged })
}

/// Known-location Tyler M-estimator of scatter, normalized to trace `m`.
///
/// Plain reference implementation (explicit inverse, one observation at a
/// time), kept independent of [`fixed_point_mu_sigma`].
pub fn tyler_estimator(x: &DMatrix<f64>, mu: &DVector<f64>, iters: usize, tol: f64) -> Result<DMatrix<f64>> {
    let (n, m) = x.shape();
    if mu.len() != m {
        return Err(Error::DimensionMismatch { expected: m, found: mu.len() });
    }
    if n <= m {
        return Err(Error::TooFewObservations { n, k: m + 1 });
    }
    let diffs: Vec<DVector<f64>> = (0..n).map(|i| x.row(i).transpose() - mu).collect();
    let mut sigma = DMatrix::<f64>::identity(m, m);
    for _ in 0..iters.max(1) {
        let inv = sigma.clone().try_inverse().ok_or(Error::DegenerateCluster { cluster: 0 })?;
        let mut next = DMatrix::<f64>::zeros(m, m);
        for d in &diffs {
            let q = mahalanobis_sq(d, &DVector::zeros(m), &inv)?.max(DEFAULT_TAU_FLOOR);
            next += d * d.transpose() / q;
        }
        next *= m as f64 / n as f64;
        linalg::symmetrize(&mut next);
        next *= m as f64 / next.trace();
        let min_eig = next.clone().symmetric_eigen().eigenvalues.min();
        if !(min_eig > RANK_TOL) {
            return Err(Error::DegenerateCluster { cluster: 0 });
        }
        let change = (&next - &sigma).norm();
        sigma = next;
        if change < tol {
            break;
        }
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, m: usize, scales: &[f64], seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, m, |_, j| scales[j] * rng.sample::<f64, _>(StandardNormal))
    }

    fn random_spd(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() + DMatrix::identity(m, m) * 0.5
    }

    #[test]
    fn mahalanobis_basics() {
        let mu = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let inv = DMatrix::identity(3, 3);
        assert_eq!(mahalanobis_sq(&mu, &mu, &inv).unwrap(), 0.0);
        for m in [1, 4, 9] {
            let mut x = DVector::zeros(m);
            x[0] = 1.0;
            let d = mahalanobis_sq(&x, &DVector::zeros(m), &DMatrix::identity(m, m)).unwrap();
            assert_eq!(d, 1.0);
        }
        assert!(mahalanobis_sq(&mu, &DVector::zeros(2), &inv).is_err());
    }

    #[test]
    fn mahalanobis_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 5;
        let x = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mu = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let inv = random_spd(m, &mut rng).try_inverse().unwrap();
        let mut naive = 0.0;
        for i in 0..m {
            for j in 0..m {
                naive += (x[i] - mu[i]) * inv[(i, j)] * (x[j] - mu[j]);
            }
        }
        assert!((mahalanobis_sq(&x, &mu, &inv).unwrap() - naive).abs() < 1e-10);
    }

    fn single(mu: DVector<f64>, sigma: DMatrix<f64>) -> MixtureModel {
        MixtureModel::new(vec![1.0], vec![mu], vec![sigma]).unwrap()
    }

    #[test]
    fn tau_at_mean_is_floored() {
        let model = single(DVector::zeros(3), DMatrix::identity(3, 3));
        let x = DMatrix::zeros(1, 3);
        let t = estimate_tau(&x, &model, &GeneratorMap::Shared(DensityGenerator::Gaussian), 1e-12)
            .unwrap();
        assert_eq!(t.tau[(0, 0)], 1e-12);
    }

    #[test]
    fn gaussian_tau_divides_by_dimension() {
        let model = single(DVector::zeros(4), DMatrix::identity(4, 4));
        let x = DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]);
        let t = estimate_tau(&x, &model, &GeneratorMap::Shared(DensityGenerator::Gaussian), 1e-12)
            .unwrap();
        assert_eq!(t.tau[(0, 0)], 0.25);
    }

    #[test]
    fn tau_spread_shrinks_with_dimension() {
        // var(tau_hat - tau) = 2 tau^2 / m, so going from m = 10 to m = 50
        // should divide it by about 5
        let tau: f64 = 1.7;
        let var = |m: usize| {
            let n = 6000;
            let x = gaussian(n, m, &vec![tau.sqrt(); m], 40 + m as u64);
            let model = single(DVector::zeros(m), DMatrix::identity(m, m));
            let t = estimate_tau(&x, &model, &GeneratorMap::Shared(DensityGenerator::Gaussian), 1e-12)
                .unwrap();
            let d: Vec<f64> = t.tau.column(0).iter().map(|v| v - tau).collect();
            let mean = d.iter().sum::<f64>() / n as f64;
            d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        };
        let ratio = var(10) / var(50);
        assert!((3.0..=8.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn student_tau_uses_argsup() {
        // quadratic form 16 with identity scatter
        let model = single(DVector::zeros(8), DMatrix::identity(8, 8));
        let mut x = DMatrix::zeros(1, 8);
        x[(0, 0)] = 4.0;
        let gens = GeneratorMap::PerCluster(vec![DensityGenerator::StudentT { dof: 3.0 }]);
        let t = estimate_tau(&x, &model, &gens, 1e-12).unwrap();
        assert!((t.tau[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pi_updates() {
        let hard = DMatrix::from_fn(4, 2, |_, j| if j == 0 { 1.0 } else { 0.0 });
        assert_eq!(update_pi(&hard).as_slice(), &[1.0, 0.0]);
        let half = DMatrix::from_element(4, 2, 0.5);
        assert_eq!(update_pi(&half).as_slice(), &[0.5, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = DMatrix::from_fn(7, 3, |_, _| rng.random::<f64>());
        for mut r in p.row_iter_mut() {
            let s = r.sum();
            r /= s;
        }
        let pi = update_pi(&p);
        for k in 0..3 {
            let mut s = 0.0;
            for i in 0..7 {
                s += p[(i, k)];
            }
            assert!((pi[k] - s / 7.0).abs() < 1e-15);
        }
        assert!((pi.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_point_cluster_is_degenerate() {
        let x = gaussian(20, 3, &[1.0; 3], 4);
        let mut w = DVector::zeros(20);
        w[0] = 1.0;
        let err = fixed_point_mu_sigma(
            &x,
            &w,
            &DVector::from_element(3, 0.3),
            &DMatrix::identity(3, 3),
            &FixedPointConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "degenerate cluster 0");
    }

    #[test]
    fn uniform_weights_recover_gaussian_parameters() {
        let (n, m) = (2000, 10);
        let x = gaussian(n, m, &[1.0; 10], 21);
        let w = DVector::from_element(n, 1.0 / n as f64);
        let cfg = FixedPointConfig { max_iters: 200, ..Default::default() };
        for version in Version::ALL {
            let out = fixed_point_mu_sigma(
                &x,
                &w,
                &DVector::from_element(m, 0.5),
                &DMatrix::identity(m, m),
                &FixedPointConfig { version, ..cfg },
            )
            .unwrap();
            assert!(out.mu.amax() < 0.15, "{version}: {}", out.mu.amax());
            // asymptotic Tyler variances at the identity: (m+2)/(m n) off the
            // diagonal, 2(m+2)(m-1)/(m^2 n) on it
            let (nf, mf) = (n as f64, m as f64);
            let expected_sq = (mf * mf - mf) * (mf + 2.0) / (mf * nf)
                + mf * 2.0 * (mf + 2.0) * (mf - 1.0) / (mf * mf * nf);
            let err = (&out.sigma - DMatrix::identity(m, m)).norm() / mf;
            assert!(err < 1.5 * expected_sq.sqrt() / mf, "{version}: {err}");
            assert!((out.sigma.trace() - m as f64).abs() < 1e-10 * m as f64);
        }
    }

    #[test]
    fn fixed_location_matches_tyler() {
        let x = gaussian(500, 4, &[2.0, 1.0, 0.5, 1.0], 8);
        let mu = DVector::from_vec(vec![0.1, -0.2, 0.0, 0.05]);
        let w = DVector::from_element(500, 1.0);
        let cfg = FixedPointConfig { max_iters: 10_000, tol: 1e-14, ..Default::default() };
        let fp = fixed_point_sigma(&x, &w, &mu, &DMatrix::identity(4, 4), &cfg).unwrap();
        let tyler = tyler_estimator(&x, &mu, 10_000, 1e-14).unwrap();
        assert!((fp.sigma - tyler).norm() < 1e-8);
    }

    #[test]
    fn tyler_axis_data_is_singular() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -3.0, 0.0, 0.5, 0.0, -2.0, 0.0]);
        assert!(tyler_estimator(&x, &DVector::zeros(2), 50, 1e-10).is_err());
    }

    #[test]
    fn tyler_recovers_shape() {
        let x = gaussian(5000, 2, &[2.0, 1.0], 12);
        let s = tyler_estimator(&x, &DVector::zeros(2), 500, 1e-12).unwrap();
        // diag(4, 1) rescaled to trace 2
        assert!((s[(0, 0)] - 1.6).abs() < 0.05, "{s}");
        assert!((s[(1, 1)] - 0.4).abs() < 0.05);
        assert!(s[(0, 1)].abs() < 0.05);
    }

    #[test]
    fn tyler_is_scale_invariant() {
        let x = gaussian(300, 3, &[1.0, 2.0, 3.0], 2);
        let a = tyler_estimator(&x, &DVector::zeros(3), 1000, 1e-14).unwrap();
        let b = tyler_estimator(&(&x * 10.0), &DVector::zeros(3), 1000, 1e-14).unwrap();
        assert!((a - b).norm() < 1e-10);
    }

    #[test]
    fn version_codes() {
        for v in 1..=4u8 {
            assert_eq!(u8::from(Version::try_from(v).unwrap()), v);
        }
        assert!(Version::try_from(5).is_err());
    }
}
