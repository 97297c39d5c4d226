//! Holding providers accountable for only part of the between-provider
//! variance.
//!
//! A fraction `lambda` of that variance is treated as incomplete risk
//! adjustment and allowed for in the reference distribution; the rest is
//! attributed to quality of care. `lambda = 1` is the full empirical null,
//! `lambda = 0` the fixed-effects reference.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ProfilingError, Result};
use crate::smoothed::check_rho;
use crate::stats::{derive_seed, quantile_in_place, upper_quantile};
use crate::types::{FlagReport, LinearVarianceComponents, NullParams, ProviderScore};

/// Largest IUR returned by [`iur_from_null_variance`].
pub const MAX_IUR: f64 = 1.0 - 1e-6;
pub const MIN_DRAWS: usize = 1000;
pub const DEFAULT_DRAWS: usize = 100_000;
/// Monte Carlo draws per independently seeded chunk.
const CHUNK: usize = 500;

/// Inter-unit reliability `sigma_a^2 / (sigma_a^2 + sigma_w^2 / n)`.
pub fn iur_linear(c: &LinearVarianceComponents, n: f64) -> f64 {
    let sa2 = c.sigma_alpha * c.sigma_alpha;
    let denom = sa2 + c.sigma_w * c.sigma_w / n;
    if denom > 0.0 {
        sa2 / denom
    } else {
        0.0
    }
}

/// Inverts `sigma^2 ~ 1 / (1 - r)`, clipped to `[0, 1 - 1e-6]`.
pub fn iur_from_null_variance(sigma2: f64) -> f64 {
    if !(sigma2 > 1.0) {
        return 0.0;
    }
    (1.0 - 1.0 / sigma2).clamp(0.0, MAX_IUR)
}

/// `[1 - r (1 - lambda)] sigma^2`.
pub fn relaxed_variance(sigma2: f64, r: f64, lambda: f64) -> f64 {
    (1.0 - r * (1.0 - lambda)) * sigma2
}

fn relaxed_sd(null: &NullParams, r: f64, lambda: f64) -> f64 {
    // written on the sd scale so lambda = 1 returns the null sd bit for bit
    null.sd * (1.0 - r * (1.0 - lambda)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaPrior {
    PointMass { lambda: f64 },
    Beta { a: f64, b: f64 },
    /// Piecewise-linear density through `(grid[k], density[k])`; need not
    /// be normalized.
    Tabulated { grid: Vec<f64>, density: Vec<f64> },
}

impl LambdaPrior {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ProfilingError::InvalidParameter(m));
        match self {
            LambdaPrior::PointMass { lambda } if !(0.0..=1.0).contains(lambda) => {
                bad(format!("lambda must lie in [0, 1], got {lambda}"))
            }
            LambdaPrior::Beta { a, b } if !(*a > 0.0 && *b > 0.0 && a.is_finite() && b.is_finite()) => {
                bad(format!("beta prior needs a, b > 0, got ({a}, {b})"))
            }
            LambdaPrior::Tabulated { grid, density } => {
                if grid.len() < 2 || grid.len() != density.len() {
                    return bad("tabulated prior needs matching grid and density of length >= 2".into());
                }
                if grid.windows(2).any(|w| !(w[1] > w[0])) || grid[0] < 0.0 || grid[grid.len() - 1] > 1.0 {
                    return bad("tabulated grid must increase within [0, 1]".into());
                }
                if density.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
                    return bad("tabulated density must be finite and nonnegative".into());
                }
                if tabulated_masses(grid, density).iter().sum::<f64>() <= 0.0 {
                    return bad("tabulated density has zero mass".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            LambdaPrior::PointMass { lambda } => *lambda,
            LambdaPrior::Beta { a, b } => a / (a + b),
            LambdaPrior::Tabulated { grid, density } => {
                let mut mass = 0.0;
                let mut first = 0.0;
                for k in 0..grid.len() - 1 {
                    let (x0, x1) = (grid[k], grid[k + 1]);
                    let (f0, f1) = (density[k], density[k + 1]);
                    let h = x1 - x0;
                    mass += 0.5 * h * (f0 + f1);
                    first += h * (f0 * (2.0 * x0 + x1) + f1 * (x0 + 2.0 * x1)) / 6.0;
                }
                first / mass
            }
        }
    }

    fn sampler(&self) -> Result<PriorSampler> {
        self.validate()?;
        Ok(match self {
            LambdaPrior::PointMass { lambda } => PriorSampler::Point(*lambda),
            LambdaPrior::Beta { a, b } => PriorSampler::Beta(
                Beta::new(*a, *b).map_err(|e| ProfilingError::InvalidParameter(e.to_string()))?,
            ),
            LambdaPrior::Tabulated { grid, density } => {
                let masses = tabulated_masses(grid, density);
                let total: f64 = masses.iter().sum();
                let mut cdf = Vec::with_capacity(grid.len());
                let mut acc = 0.0;
                cdf.push(0.0);
                for m in &masses {
                    acc += m / total;
                    cdf.push(acc);
                }
                PriorSampler::Table {
                    grid: grid.clone(),
                    density: density.iter().map(|d| d / total).collect(),
                    cdf,
                }
            }
        })
    }
}

fn tabulated_masses(grid: &[f64], density: &[f64]) -> Vec<f64> {
    grid.windows(2)
        .zip(density.windows(2))
        .map(|(x, f)| 0.5 * (x[1] - x[0]) * (f[0] + f[1]))
        .collect()
}

impl FromStr for LambdaPrior {
    type Err = ProfilingError;

    /// `beta:a,b` or `point:x`.
    fn from_str(s: &str) -> Result<Self> {
        let err = || ProfilingError::InvalidParameter(format!("cannot parse lambda prior '{s}'"));
        let (kind, args) = s.split_once(':').ok_or_else(err)?;
        let nums: Vec<f64> = args
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err())?;
        let prior = match (kind.trim().to_ascii_lowercase().as_str(), nums.as_slice()) {
            ("beta", [a, b]) => LambdaPrior::Beta { a: *a, b: *b },
            ("point", [x]) => LambdaPrior::PointMass { lambda: *x },
            _ => return Err(err()),
        };
        prior.validate()?;
        Ok(prior)
    }
}

enum PriorSampler {
    Point(f64),
    Beta(Beta<f64>),
    Table {
        grid: Vec<f64>,
        density: Vec<f64>,
        cdf: Vec<f64>,
    },
}

impl PriorSampler {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            PriorSampler::Point(x) => *x,
            PriorSampler::Beta(d) => d.sample(rng),
            PriorSampler::Table { grid, density, cdf } => {
                let u: f64 = rng.random();
                let k = cdf.partition_point(|&c| c <= u).clamp(1, grid.len() - 1) - 1;
                // invert f0 t + s t^2 / 2 = u - F(x_k) on the linear segment
                let (x0, x1) = (grid[k], grid[k + 1]);
                let f0 = density[k];
                let s = (density[k + 1] - f0) / (x1 - x0);
                let rem = (u - cdf[k]).max(0.0);
                let t = if s.abs() < 1e-12 * f0.max(1e-300) {
                    if f0 > 0.0 {
                        rem / f0
                    } else {
                        0.0
                    }
                } else {
                    let disc = (f0 * f0 + 2.0 * s * rem).max(0.0);
                    2.0 * rem / (f0 + disc.sqrt())
                };
                (x0 + t).clamp(x0, x1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaPolicy {
    Fixed { lambda: f64 },
    Prior { prior: LambdaPrior },
}

impl LambdaPolicy {
    /// The fixed value, or the prior mean.
    pub fn representative(&self) -> f64 {
        match self {
            LambdaPolicy::Fixed { lambda } => *lambda,
            LambdaPolicy::Prior { prior } => prior.mean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaConfig {
    pub policy: LambdaPolicy,
    pub draws: usize,
    pub seed: u64,
}

impl LambdaConfig {
    pub fn fixed(lambda: f64) -> Self {
        LambdaConfig {
            policy: LambdaPolicy::Fixed { lambda },
            draws: DEFAULT_DRAWS,
            seed: 0,
        }
    }

    pub fn prior(prior: LambdaPrior, draws: usize, seed: u64) -> Self {
        LambdaConfig {
            policy: LambdaPolicy::Prior { prior },
            draws,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.policy {
            LambdaPolicy::Fixed { lambda } if !(0.0..=1.0).contains(lambda) => Err(
                ProfilingError::InvalidParameter(format!("lambda must lie in [0, 1], got {lambda}")),
            ),
            LambdaPolicy::Fixed { .. } => Ok(()),
            LambdaPolicy::Prior { prior } => {
                prior.validate()?;
                if self.draws < MIN_DRAWS {
                    return Err(ProfilingError::InvalidParameter(format!(
                        "at least {MIN_DRAWS} Monte Carlo draws required, got {}",
                        self.draws
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxedNull {
    pub mean: f64,
    pub base_variance: f64,
    pub iur: f64,
    pub variance: f64,
    pub critical_upper: f64,
    pub critical_lower: f64,
}

pub fn relaxed_null(null: &NullParams, r: f64, lambda: f64, rho: f64) -> RelaxedNull {
    let sd = relaxed_sd(null, r, lambda);
    let zr = upper_quantile(rho);
    RelaxedNull {
        mean: null.mean,
        base_variance: null.variance(),
        iur: r,
        variance: sd * sd,
        critical_upper: null.mean + zr * sd,
        critical_lower: null.mean - zr * sd,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalQuantile {
    /// Upper-rho quantile of the marginal null.
    pub upper: f64,
    /// Lower-rho quantile.
    pub lower: f64,
    /// Batch-means standard error of `upper`.
    pub upper_se: f64,
    pub sample_mean: f64,
    pub sample_variance: f64,
    pub draws: usize,
}

/// Monte Carlo quantiles of `int N(mean, sigma^2_lambda) f(lambda) dlambda`.
///
/// Draws are generated in fixed-size chunks, each seeded from `(seed,
/// chunk index)`, so results do not depend on the thread count.
pub fn marginal_null_quantile(
    null: &NullParams,
    r: f64,
    prior: &LambdaPrior,
    rho: f64,
    draws: usize,
    seed: u64,
) -> Result<MarginalQuantile> {
    check_rho(rho)?;
    if draws < MIN_DRAWS {
        return Err(ProfilingError::InvalidParameter(format!(
            "at least {MIN_DRAWS} Monte Carlo draws required, got {draws}"
        )));
    }
    if !(0.0..1.0).contains(&r) {
        return Err(ProfilingError::InvalidParameter(format!("IUR must lie in [0, 1), got {r}")));
    }
    let sampler = prior.sampler()?;
    let chunks = draws.div_ceil(CHUNK);
    let mut samples: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = CHUNK.min(draws - c * CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
            (0..len)
                .map(|_| {
                    let lambda = sampler.sample(&mut rng);
                    let e: f64 = rng.sample(StandardNormal);
                    null.mean + relaxed_sd(null, r, lambda) * e
                })
                .collect()
        })
        .collect();

    let n = draws as f64;
    let all: Vec<f64> = samples.iter().flatten().copied().collect();
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1.0);

    // batch means over full chunks
    let batch_q: Vec<f64> = samples
        .iter_mut()
        .filter(|c| c.len() == CHUNK)
        .map(|c| quantile_in_place(c, 1.0 - rho))
        .collect();
    let upper_se = if batch_q.len() >= 2 {
        let k = batch_q.len() as f64;
        let m = batch_q.iter().sum::<f64>() / k;
        (batch_q.iter().map(|q| (q - m).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    } else {
        f64::NAN
    };

    let mut all = all;
    let upper = quantile_in_place(&mut all, 1.0 - rho);
    let lower = quantile_in_place(&mut all, rho);
    Ok(MarginalQuantile {
        upper,
        lower,
        upper_se,
        sample_mean: mean,
        sample_variance: var,
        draws,
    })
}

/// Flags against `N(mean_i, sigma^2_lambda,i)` for a fixed lambda, or
/// against the Monte Carlo marginal under a prior.
///
/// `iur` gives `r_i` per provider; when absent it is recovered from the
/// null variances with [`iur_from_null_variance`]. Reports carry the fixed
/// lambda or the prior mean.
pub fn flag_with_lambda(
    scores: &[ProviderScore],
    nulls: &[NullParams],
    iur: Option<&[f64]>,
    cfg: &LambdaConfig,
    rho: f64,
    two_sided: bool,
) -> Result<Vec<FlagReport>> {
    check_rho(rho)?;
    cfg.validate()?;
    if scores.len() != nulls.len() || iur.is_some_and(|r| r.len() != scores.len()) {
        return Err(ProfilingError::InvalidParameter(
            "scores, nulls and IUR differ in length".into(),
        ));
    }
    let rs: Vec<f64> = match iur {
        Some(r) => {
            if let Some(bad) = r.iter().find(|v| !(0.0..1.0).contains(*v)) {
                return Err(ProfilingError::InvalidParameter(format!(
                    "IUR must lie in [0, 1), got {bad}"
                )));
            }
            r.to_vec()
        }
        None => nulls.iter().map(|n| iur_from_null_variance(n.variance())).collect(),
    };
    let lambda_used = cfg.policy.representative();
    let make = |i: usize, sd: f64, upper: f64, lower: f64| {
        let s = &scores[i];
        FlagReport {
            provider_id: s.provider_id.clone(),
            z_fe: s.z_fe,
            null_mean: nulls[i].mean,
            null_sd_effective: sd,
            threshold_upper: upper,
            threshold_lower: lower,
            decision: FlagReport::decide(s.z_fe, upper, lower, two_sided),
            rho,
            lambda: lambda_used,
        }
    };
    match &cfg.policy {
        LambdaPolicy::Fixed { lambda } => {
            let zr = upper_quantile(rho);
            Ok((0..scores.len())
                .map(|i| {
                    let sd = relaxed_sd(&nulls[i], rs[i], *lambda);
                    let m = nulls[i].mean;
                    make(i, sd, m + zr * sd, m - zr * sd)
                })
                .collect())
        }
        LambdaPolicy::Prior { prior } => (0..scores.len())
            .map(|i| {
                let q = marginal_null_quantile(
                    &nulls[i],
                    rs[i],
                    prior,
                    rho,
                    cfg.draws,
                    derive_seed(cfg.seed, i as u64),
                )?;
                Ok(make(i, q.sample_variance.sqrt(), q.upper, q.lower))
            })
            .collect(),
    }
}
