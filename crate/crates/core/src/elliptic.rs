//! Elliptically symmetric distributions: density generators, samplers built on
//! the stochastic representation `x = mu + sqrt(Q) sqrt(tau) A u`, structured
//! scatter matrices and the synthetic benchmark setups.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::fem::MixtureModel;
use crate::linalg;
use crate::NOISE;

/// Radial profile `g` of an elliptical density `|Sigma|^{-1/2} g((x-mu)^T Sigma^{-1} (x-mu))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityGenerator {
    Gaussian,
    StudentT { dof: f64 },
    /// Compound Gaussian with a Gamma(shape, 1/shape) texture.
    KDist { shape: f64 },
    /// `g(t) = exp(-t^s / 2)`.
    GenGaussian { shape: f64 },
}

impl DensityGenerator {
    pub fn validate(&self) -> Result<()> {
        let (name, v) = match *self {
            DensityGenerator::Gaussian => return Ok(()),
            DensityGenerator::StudentT { dof } => ("dof", dof),
            DensityGenerator::KDist { shape } => ("shape", shape),
            DensityGenerator::GenGaussian { shape } => ("shape", shape),
        };
        if v.is_finite() && v > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
        }
    }

    /// `log g(t)` up to an additive constant that depends only on `m`.
    pub fn log_profile(&self, t: f64, m: usize) -> f64 {
        let m = m as f64;
        match *self {
            DensityGenerator::Gaussian => -0.5 * t,
            DensityGenerator::StudentT { dof } => -0.5 * (dof + m) * (t / dof).ln_1p(),
            DensityGenerator::GenGaussian { shape } => -0.5 * t.powf(shape),
            DensityGenerator::KDist { shape } => kdist_log_profile(t, m, shape),
        }
    }

    /// `log A + log g(t)` such that `A |Sigma|^{-1/2} tau^{-m/2} g(q / tau)` is a
    /// normalized density.
    pub fn log_normalized_profile(&self, t: f64, m: usize) -> Result<f64> {
        let mf = m as f64;
        match *self {
            DensityGenerator::Gaussian => Ok(-0.5 * mf * (2.0 * PI).ln() - 0.5 * t),
            DensityGenerator::StudentT { dof } => Ok(student_log_const(dof, mf)
                - 0.5 * mf * PI.ln()
                + self.log_profile(t, m)),
            // the texture integral is already a mixture of normalized Gaussians
            DensityGenerator::KDist { .. } => {
                Ok(-0.5 * mf * (2.0 * PI).ln() + self.log_profile(t, m))
            }
            DensityGenerator::GenGaussian { shape } => {
                let a = mf / (2.0 * shape);
                let radial = a * 2f64.ln() + ln_gamma(a) - shape.ln();
                Ok(ln_gamma(0.5 * mf) - 0.5 * mf * PI.ln() - radial + self.log_profile(t, m))
            }
        }
    }

    /// `log(A sup_t t^{m/2} g(t))`, the per-cluster factor of the Bayes E-step.
    pub fn log_peak(&self, m: usize) -> Result<f64> {
        let a = argsup_density(self, m)?;
        Ok(0.5 * m as f64 * a.ln() + self.log_normalized_profile(a, m)?)
    }

    /// Draws the modular variate `Q`, normalized so that `E[Q] = m`.
    pub fn sample_modular<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<f64> {
        self.validate()?;
        let mf = m as f64;
        let chi_m = ChiSquared::new(mf).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let q = match *self {
            DensityGenerator::Gaussian => chi_m.sample(rng),
            DensityGenerator::StudentT { dof } => {
                if dof <= 2.0 {
                    return Err(Error::InvalidParameter(format!(
                        "Student-t with dof {dof} has no finite second moment"
                    )));
                }
                let chi_nu =
                    ChiSquared::new(dof).map_err(|e| Error::InvalidParameter(e.to_string()))?;
                chi_m.sample(rng) * (dof - 2.0) / chi_nu.sample(rng)
            }
            DensityGenerator::KDist { shape } => {
                let texture = Gamma::new(shape, 1.0 / shape)
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?;
                texture.sample(rng) * chi_m.sample(rng)
            }
            DensityGenerator::GenGaussian { shape } => {
                // q^s / 2 ~ Gamma(m / (2s), 1)
                let a = mf / (2.0 * shape);
                let b = (mf + 2.0) / (2.0 * shape);
                let v: f64 = Gamma::new(a, 1.0)
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?
                    .sample(rng);
                mf * (v.ln() / shape + ln_gamma(a) - ln_gamma(b)).exp()
            }
        };
        Ok(q)
    }
}

/// `log Gamma((nu+m)/2) - log Gamma(nu/2) - (m/2) log nu`.
fn student_log_const(dof: f64, m: f64) -> f64 {
    ln_gamma(0.5 * (dof + m)) - ln_gamma(0.5 * dof) - 0.5 * m * dof.ln()
}

/// Texture integral `log int eta^{-m/2} exp(-t / (2 eta)) p(eta) d eta` with
/// `p` the Gamma(shape, 1/shape) density.
///
/// In `u = log eta` the log-integrand is strictly concave, so the region where
/// it is within 50 of its peak is an interval; the trapezoid rule runs over
/// that interval only.
fn kdist_log_profile(t: f64, m: f64, shape: f64) -> f64 {
    const DROP: f64 = 50.0;
    const STEPS: usize = 600;
    let nu = shape - 0.5 * m;
    let c = shape * shape.ln() - ln_gamma(shape);
    let phi = |u: f64| c + nu * u - 0.5 * t * (-u).exp() - shape * u.exp();
    let slope = |u: f64| nu + 0.5 * t * (-u).exp() - shape * u.exp();
    let bisect = |mut lo: f64, mut hi: f64, above: &dyn Fn(f64) -> bool| {
        // `above(lo)` and `!above(hi)`
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if above(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
            if (hi - lo).abs() < 1e-9 {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    const LIMIT: f64 = 700.0;
    let peak = bisect(-LIMIT, LIMIT, &|u| slope(u) > 0.0);
    let target = phi(peak) - DROP;
    let left = if phi(-LIMIT) >= target {
        -LIMIT
    } else {
        bisect(peak, -LIMIT, &|u| phi(u) >= target)
    };
    let right = if phi(LIMIT) >= target {
        LIMIT
    } else {
        bisect(peak, LIMIT, &|u| phi(u) >= target)
    };
    let h = (right - left) / STEPS as f64;
    let terms: Vec<f64> = (0..=STEPS).map(|j| phi(left + h * j as f64)).collect();
    linalg::log_sum_exp(&terms) + h.ln()
}

/// Global maximizer of `t -> t^{m/2} g(t)` over `t > 0`.
///
/// Closed form (`m`) for the Gaussian and Student-t generators, numerical
/// otherwise.
pub fn argsup_density(gen: &DensityGenerator, m: usize) -> Result<f64> {
    gen.validate()?;
    if m == 0 {
        return Err(Error::InvalidParameter("dimension must be at least 1".into()));
    }
    match gen {
        DensityGenerator::Gaussian | DensityGenerator::StudentT { .. } => Ok(m as f64),
        _ => argsup_numeric(gen, m),
    }
}

/// Numerical maximizer of `t^{m/2} g(t)` regardless of generator kind.
pub fn argsup_numeric(gen: &DensityGenerator, m: usize) -> Result<f64> {
    gen.validate()?;
    argsup_profile(|t| gen.log_profile(t, m), m)
}

/// Maximizes `(m/2) log t + log_g(t)` by a coarse scan over `log t` followed by
/// golden-section refinement. A maximum on the edge of the scan range means the
/// profile has no finite maximizer.
pub fn argsup_profile<F: Fn(f64) -> f64>(log_g: F, m: usize) -> Result<f64> {
    const LO: f64 = -60.0;
    const HI: f64 = 60.0;
    const STEPS: usize = 480;
    let half_m = 0.5 * m as f64;
    let objective = |u: f64| half_m * u + log_g(u.exp());

    let h = (HI - LO) / STEPS as f64;
    let mut best = (0, f64::NEG_INFINITY);
    for j in 0..=STEPS {
        let v = objective(LO + h * j as f64);
        if v > best.1 {
            best = (j, v);
        }
    }
    if !best.1.is_finite() || best.0 == 0 || best.0 == STEPS {
        return Err(Error::NoFiniteMaximizer);
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (LO + h * (best.0 - 1) as f64, LO + h * (best.0 + 1) as f64);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    // |du| is the relative error on t
    while b - a > 1e-12 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    // The objective is flat at the top, so comparisons alone resolve u only to
    // about sqrt(eps); finish with finite-difference Newton steps.
    let mut u = 0.5 * (a + b);
    let dh = 1e-4;
    for _ in 0..2 {
        let (fl, f0, fr) = (objective(u - dh), objective(u), objective(u + dh));
        let d1 = (fr - fl) / (2.0 * dh);
        let d2 = (fr - 2.0 * f0 + fl) / (dh * dh);
        if !(d2 < 0.0) {
            break;
        }
        let next = u - d1 / d2;
        if !next.is_finite() || (next - u).abs() > h {
            break;
        }
        u = next;
    }
    Ok(u.exp())
}

/// Structured scatter matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceKind {
    Identity { scale: f64 },
    Diagonal { entries: Vec<f64> },
    /// Entries `rho^{|i-j|}`.
    Toeplitz { rho: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    #[serde(flatten)]
    pub kind: CovarianceKind,
    /// Rescale to this trace; `None` keeps the matrix as given.
    #[serde(default)]
    pub target_trace: Option<f64>,
}

impl CovarianceSpec {
    pub fn new(kind: CovarianceKind) -> Self {
        Self { kind, target_trace: None }
    }

    pub fn with_trace(kind: CovarianceKind, trace: f64) -> Self {
        Self { kind, target_trace: Some(trace) }
    }
}

pub fn make_covariance(spec: &CovarianceSpec, m: usize) -> Result<DMatrix<f64>> {
    if m == 0 {
        return Err(Error::InvalidParameter("dimension must be at least 1".into()));
    }
    let mut sigma = match &spec.kind {
        CovarianceKind::Identity { scale } => {
            if !(scale.is_finite() && *scale > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "identity scale must be positive, got {scale}"
                )));
            }
            DMatrix::identity(m, m) * *scale
        }
        CovarianceKind::Diagonal { entries } => {
            if entries.len() != m {
                return Err(Error::DimensionMismatch { expected: m, found: entries.len() });
            }
            if let Some(bad) = entries.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::InvalidParameter(format!(
                    "diagonal entries must be positive, got {bad}"
                )));
            }
            DMatrix::from_diagonal(&DVector::from_column_slice(entries))
        }
        CovarianceKind::Toeplitz { rho } => {
            if !(0.0..1.0).contains(rho) {
                return Err(Error::InvalidParameter(format!("rho must lie in [0, 1), got {rho}")));
            }
            DMatrix::from_fn(m, m, |i, j| rho.powi(i.abs_diff(j) as i32))
        }
    };
    if let Some(target) = spec.target_trace {
        if !(target.is_finite() && target > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "target trace must be positive, got {target}"
            )));
        }
        sigma *= target / sigma.trace();
    }
    Ok(sigma)
}

/// Draws from `ES(mu, tau Sigma, g)` with a cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct EllipticalSampler {
    mu: DVector<f64>,
    factor: DMatrix<f64>,
    gen: DensityGenerator,
}

impl EllipticalSampler {
    pub fn new(mu: DVector<f64>, sigma: &DMatrix<f64>, gen: DensityGenerator) -> Result<Self> {
        if sigma.nrows() != mu.len() || !sigma.is_square() {
            return Err(Error::DimensionMismatch { expected: mu.len(), found: sigma.nrows() });
        }
        gen.validate()?;
        let factor = linalg::cholesky_lower(sigma)?;
        Ok(Self { mu, factor, gen })
    }

    pub fn sample<R: Rng + ?Sized>(&self, tau: f64, rng: &mut R) -> Result<DVector<f64>> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        let m = self.mu.len();
        let q = self.gen.sample_modular(m, rng)?;
        let u = uniform_on_sphere(m, rng);
        Ok(&self.mu + &self.factor * u * (q * tau).sqrt())
    }
}

/// One draw `mu + sqrt(Q tau) A u`; see [`EllipticalSampler`] for repeated draws.
pub fn sample_elliptical<R: Rng + ?Sized>(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    tau: f64,
    gen: &DensityGenerator,
    rng: &mut R,
) -> Result<DVector<f64>> {
    EllipticalSampler::new(mu.clone(), sigma, *gen)?.sample(tau, rng)
}

fn uniform_on_sphere<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = z.norm();
        if norm > 0.0 {
            return z / norm;
        }
    }
}

/// How a cluster mean is realized for each generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanRule {
    Fixed { values: Vec<f64> },
    /// `value * 1_m`.
    Constant { value: f64 },
    /// `value * 1_m + first * e_1`.
    ConstantPlusBasis { value: f64, first: f64 },
    /// Every coordinate uniform on `[low, high)`.
    Uniform { low: f64, high: f64 },
    /// `value * 1_m + N(0, variance I)`.
    ConstantPlusGaussian { value: f64, variance: f64 },
}

impl MeanRule {
    fn realize<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<DVector<f64>> {
        Ok(match self {
            MeanRule::Fixed { values } => {
                if values.len() != m {
                    return Err(Error::DimensionMismatch { expected: m, found: values.len() });
                }
                DVector::from_column_slice(values)
            }
            MeanRule::Constant { value } => DVector::from_element(m, *value),
            MeanRule::ConstantPlusBasis { value, first } => {
                let mut v = DVector::from_element(m, *value);
                v[0] += first;
                v
            }
            MeanRule::Uniform { low, high } => {
                if !(low < high) {
                    return Err(Error::InvalidParameter(format!("empty range [{low}, {high})")));
                }
                DVector::from_fn(m, |_, _| rng.random_range(*low..*high))
            }
            MeanRule::ConstantPlusGaussian { value, variance } => {
                if *variance < 0.0 {
                    return Err(Error::InvalidParameter("negative variance".into()));
                }
                let sd = variance.sqrt();
                DVector::from_fn(m, |_, _| value + sd * rng.sample::<f64, _>(StandardNormal))
            }
        })
    }
}

/// How a cluster scatter matrix is realized for each generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ScatterRule {
    Fixed(CovarianceSpec),
    /// Diagonal entries uniform on `[low, high)`, rescaled to `trace`.
    RandomDiagonal { low: f64, high: f64, trace: f64 },
}

impl ScatterRule {
    fn realize<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        match self {
            ScatterRule::Fixed(spec) => make_covariance(spec, m),
            ScatterRule::RandomDiagonal { low, high, trace } => {
                if !(0.0 < *low && low < high) {
                    return Err(Error::InvalidParameter(format!(
                        "diagonal range must satisfy 0 < low < high, got [{low}, {high})"
                    )));
                }
                let entries = (0..m).map(|_| rng.random_range(*low..*high)).collect();
                make_covariance(
                    &CovarianceSpec::with_trace(CovarianceKind::Diagonal { entries }, *trace),
                    m,
                )
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedGenerator {
    pub weight: f64,
    pub generator: DensityGenerator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub mean: MeanRule,
    pub scatter: ScatterRule,
    /// Within-cluster mixture of generators; weights sum to one.
    pub generators: Vec<WeightedGenerator>,
    /// Per-observation scale factor.
    #[serde(default)]
    pub tau: ScaleRule,
}

/// How the nuisance scale of each observation is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScaleRule {
    Fixed(f64),
    /// Independent draw per observation, uniform on `[low, high]`.
    Uniform { low: f64, high: f64 },
}

impl Default for ScaleRule {
    fn default() -> Self {
        ScaleRule::Fixed(1.0)
    }
}

impl ScaleRule {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScaleRule::Fixed(t) => t.is_finite() && t > 0.0,
            ScaleRule::Uniform { low, high } => low > 0.0 && high.is_finite() && low <= high,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("tau must be positive, got {self:?}")))
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ScaleRule::Fixed(t) => t,
            ScaleRule::Uniform { low, high } => rng.random_range(low..=high),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Proportions {
    Fixed { weights: Vec<f64> },
    /// Dirichlet(concentration) draws rejected until every weight reaches `min`.
    RandomAdmissible { concentration: f64, min: f64 },
}

impl Default for Proportions {
    fn default() -> Self {
        Proportions::RandomAdmissible { concentration: 5.0, min: 0.15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupSpec {
    #[serde(default)]
    pub setup_id: Option<u8>,
    pub m: usize,
    pub n: usize,
    pub clusters: Vec<ClusterSpec>,
    #[serde(default)]
    pub noise_fraction: f64,
    #[serde(default = "default_noise_box")]
    pub noise_box: [f64; 2],
    #[serde(default)]
    pub proportions: Proportions,
}

fn default_noise_box() -> [f64; 2] {
    [0.0, 14.0]
}

const MAX_DRAW_RETRIES: usize = 100;
const MAX_PROPORTION_DRAWS: usize = 10_000;

impl SetupSpec {
    /// The five synthetic benchmark setups.
    pub fn builtin(id: u8) -> Result<Self> {
        use DensityGenerator::*;
        let plain = |g: DensityGenerator| vec![WeightedGenerator { weight: 1.0, generator: g }];
        let fixed = |kind: CovarianceKind| ScatterRule::Fixed(CovarianceSpec::new(kind));
        let toep = |rho: f64| fixed(CovarianceKind::Toeplitz { rho });
        let identity = || fixed(CovarianceKind::Identity { scale: 1.0 });
        let random_diag = |trace: f64| ScatterRule::RandomDiagonal { low: 0.2, high: 3.5, trace };
        let cluster = |mean: MeanRule, scatter: ScatterRule, generators| ClusterSpec {
            mean,
            scatter,
            generators,
            tau: ScaleRule::default(),
        };
        let constant = |value: f64| MeanRule::Constant { value };

        let (m, n, clusters, noise_fraction) = match id {
            1 => {
                let m = 8;
                let t3 = || plain(StudentT { dof: 3.0 });
                (
                    m,
                    1000,
                    vec![
                        cluster(MeanRule::Uniform { low: 0.0, high: 1.0 }, random_diag(m as f64), t3()),
                        cluster(constant(6.0), random_diag(12.0), t3()),
                        cluster(
                            MeanRule::ConstantPlusBasis { value: 1.5, first: 3.0 },
                            fixed(CovarianceKind::Identity { scale: 4.0 / m as f64 }),
                            t3(),
                        ),
                    ],
                    0.0,
                )
            }
            2 => {
                let m = 8;
                let t10 = || plain(StudentT { dof: 10.0 });
                (
                    m,
                    1000,
                    vec![
                        cluster(MeanRule::Uniform { low: 0.0, high: 1.0 }, random_diag(m as f64), t10()),
                        cluster(constant(5.0), random_diag(m as f64), t10()),
                        cluster(
                            MeanRule::ConstantPlusGaussian { value: 1.5, variance: 0.1 },
                            identity(),
                            t10(),
                        ),
                    ],
                    0.0,
                )
            }
            3 => (
                40,
                1300,
                vec![
                    cluster(constant(2.0), toep(0.2), plain(KDist { shape: 3.0 })),
                    cluster(constant(6.0), identity(), plain(StudentT { dof: 6.0 })),
                    cluster(constant(7.0), toep(0.5), plain(Gaussian)),
                ],
                0.0,
            ),
            4 => (
                8,
                1200,
                vec![
                    cluster(constant(5.0), toep(0.2), plain(Gaussian)),
                    cluster(constant(7.0), identity(), plain(Gaussian)),
                    cluster(constant(9.0), toep(0.5), plain(Gaussian)),
                ],
                0.1,
            ),
            5 => (
                6,
                1200,
                vec![
                    cluster(
                        MeanRule::Uniform { low: 0.0, high: 0.2 },
                        toep(0.4),
                        vec![
                            WeightedGenerator { weight: 0.7, generator: Gaussian },
                            WeightedGenerator { weight: 0.3, generator: GenGaussian { shape: 0.1 } },
                        ],
                    ),
                    cluster(
                        constant(2.0),
                        identity(),
                        vec![
                            WeightedGenerator { weight: 0.6, generator: Gaussian },
                            WeightedGenerator { weight: 0.4, generator: StudentT { dof: 2.3 } },
                        ],
                    ),
                    cluster(
                        MeanRule::ConstantPlusBasis { value: 4.0, first: 2.0 },
                        toep(0.7),
                        plain(Gaussian),
                    ),
                ],
                0.0,
            ),
            other => {
                return Err(Error::InvalidParameter(format!("unknown setup {other}; expected 1..=5")))
            }
        };
        Ok(Self {
            setup_id: Some(id),
            m,
            n,
            clusters,
            noise_fraction,
            noise_box: default_noise_box(),
            proportions: Proportions::default(),
        })
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidParameter(msg));
        if self.m == 0 || self.clusters.is_empty() {
            return invalid("setup needs m >= 1 and at least one cluster".into());
        }
        if !(0.0..0.5).contains(&self.noise_fraction) {
            return invalid(format!("noise_fraction must lie in [0, 0.5), got {}", self.noise_fraction));
        }
        if !(self.noise_box[0] < self.noise_box[1]) {
            return invalid("noise_box must be a non-empty interval".into());
        }
        if self.cluster_points() < self.k() {
            return invalid(format!("n = {} too small for {} clusters", self.n, self.k()));
        }
        for (k, c) in self.clusters.iter().enumerate() {
            if c.generators.is_empty() {
                return invalid(format!("cluster {k} has no generator"));
            }
            let total: f64 = c.generators.iter().map(|g| g.weight).sum();
            if c.generators.iter().any(|g| g.weight < 0.0) || (total - 1.0).abs() > 1e-9 {
                return invalid(format!("cluster {k}: generator weights must sum to 1"));
            }
            for g in &c.generators {
                g.generator.validate()?;
            }
            c.tau.validate()?;
        }
        match &self.proportions {
            Proportions::Fixed { weights } => {
                if weights.len() != self.k() {
                    return Err(Error::DimensionMismatch { expected: self.k(), found: weights.len() });
                }
                let total: f64 = weights.iter().sum();
                if weights.iter().any(|w| *w <= 0.0) || (total - 1.0).abs() > 1e-9 {
                    return invalid("proportions must be positive and sum to 1".into());
                }
            }
            Proportions::RandomAdmissible { concentration, min } => {
                if *concentration <= 0.0 || *min < 0.0 || *min * self.k() as f64 >= 1.0 {
                    return invalid("admissible proportions need concentration > 0 and min * K < 1".into());
                }
            }
        }
        Ok(())
    }

    fn noise_points(&self) -> usize {
        (self.n as f64 * self.noise_fraction).round() as usize
    }

    fn cluster_points(&self) -> usize {
        self.n - self.noise_points().min(self.n)
    }
}

/// A generated dataset with its ground truth.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    /// `n x m`, one observation per row.
    pub data: DMatrix<f64>,
    /// Cluster index per row, or [`NOISE`].
    pub labels: Vec<i64>,
    /// Generating model with scatter matrices normalized to trace `m`.
    pub truth: MixtureModel,
    /// Generating scatter matrices before trace normalization.
    pub scatter: Vec<DMatrix<f64>>,
}

fn draw_proportions<R: Rng + ?Sized>(spec: &SetupSpec, rng: &mut R) -> Result<Vec<f64>> {
    match &spec.proportions {
        Proportions::Fixed { weights } => Ok(weights.clone()),
        Proportions::RandomAdmissible { concentration, min } => {
            let gamma = Gamma::new(*concentration, 1.0)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            for _ in 0..MAX_PROPORTION_DRAWS {
                let draws: Vec<f64> = (0..spec.k()).map(|_| gamma.sample(rng)).collect();
                let total: f64 = draws.iter().sum();
                let w: Vec<f64> = draws.iter().map(|d| d / total).collect();
                if w.iter().all(|v| v >= min) {
                    return Ok(w);
                }
            }
            Err(Error::InvalidParameter("could not draw admissible proportions".into()))
        }
    }
}

fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

pub fn generate_setup<R: Rng + ?Sized>(spec: &SetupSpec, rng: &mut R) -> Result<LabeledSample> {
    spec.validate()?;
    let m = spec.m;
    let k = spec.k();

    let mut means = Vec::with_capacity(k);
    let mut scatter = Vec::with_capacity(k);
    for c in &spec.clusters {
        means.push(c.mean.realize(m, rng)?);
        scatter.push(c.scatter.realize(m, rng)?);
    }
    let pi = draw_proportions(spec, rng)?;

    let n_clusters = spec.cluster_points();
    let mut assignment = Vec::new();
    for attempt in 0.. {
        if attempt == MAX_DRAW_RETRIES {
            return Err(Error::EmptyCluster { retries: MAX_DRAW_RETRIES });
        }
        assignment = (0..n_clusters).map(|_| categorical(&pi, rng)).collect::<Vec<_>>();
        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            break;
        }
    }

    let samplers = spec
        .clusters
        .iter()
        .zip(means.iter().zip(&scatter))
        .map(|(c, (mu, sigma))| {
            c.generators
                .iter()
                .map(|g| EllipticalSampler::new(mu.clone(), sigma, g.generator))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut data = DMatrix::zeros(spec.n, m);
    let mut labels = Vec::with_capacity(spec.n);
    for (row, &a) in assignment.iter().enumerate() {
        let cluster = &spec.clusters[a];
        let weights: Vec<f64> = cluster.generators.iter().map(|g| g.weight).collect();
        let which = if weights.len() == 1 { 0 } else { categorical(&weights, rng) };
        let tau = cluster.tau.draw(rng);
        let x = samplers[a][which].sample(tau, rng)?;
        data.row_mut(row).copy_from(&x.transpose());
        labels.push(a as i64);
    }
    let [lo, hi] = spec.noise_box;
    for row in n_clusters..spec.n {
        for j in 0..m {
            data[(row, j)] = rng.random_range(lo..hi);
        }
        labels.push(NOISE);
    }

    let normalized = scatter
        .iter()
        .map(|s| s * (m as f64 / s.trace()))
        .collect();
    let truth = MixtureModel::new(pi, means, normalized)?;
    Ok(LabeledSample { data, labels, truth, scatter })
}
