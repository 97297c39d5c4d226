//! Robust estimation of a single normal empirical null from a set of
//! Z-scores: a Tukey-biweight initializer followed by maximum likelihood on
//! the truncated two-component mixture, profiled over a grid of null
//! proportions.
//!
//! The mixture likelihood only uses the shape of the null inside the
//! interval `[A, B] = mu0 +/- zeta0 * sigma0`; scores outside contribute
//! through the binomial count `N1` alone, so outliers never enter the
//! density term.

use serde::{Deserialize, Serialize};

use crate::error::{ProfilingError, Result};
use crate::optim::NelderMead;
use crate::stats::{self, ln_normal_pdf, norm_interval};
use crate::types::NullParams;

/// Biweight tuning constant (95% efficiency at the normal).
pub const BIWEIGHT_C: f64 = 4.685;
/// Consistency factor turning the MAD into a normal standard deviation.
pub const MAD_FACTOR: f64 = 0.6745;
pub const MIN_SCORES: usize = 20;
pub const MIN_INSIDE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProfileStrategy {
    /// Maximize `max_p L(mu, sigma, p)` jointly: for fixed (mu, sigma) the
    /// likelihood is concave in p, so the best grid point is one of the two
    /// neighbours of `N0 / (N Q)`. Exchanging the two maxima gives the same
    /// grid maximizer as `FullGrid` with one simplex run.
    Exchange,
    /// Run the simplex at every grid point from the biweight start.
    FullGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleFitConfig {
    pub zeta0: f64,
    pub p_lo: f64,
    pub p_hi: f64,
    pub p_step: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    pub strategy: ProfileStrategy,
}

impl Default for MleFitConfig {
    fn default() -> Self {
        MleFitConfig {
            zeta0: 1.64,
            p_lo: 0.5,
            p_hi: 1.0,
            p_step: 0.001,
            tolerance: 1e-8,
            max_iter: 500,
            strategy: ProfileStrategy::Exchange,
        }
    }
}

impl MleFitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.zeta0 > 0.0
            && self.p_lo > 0.0
            && self.p_lo <= self.p_hi
            && self.p_hi <= 1.0
            && self.p_step > 0.0
            && self.tolerance > 0.0
            && self.max_iter > 0;
        if ok {
            Ok(())
        } else {
            Err(ProfilingError::InvalidParameter(format!(
                "invalid MLE fitting configuration {self:?}"
            )))
        }
    }

    /// The profile grid `p_lo, p_lo + step, ..., p_hi`.
    pub fn grid(&self) -> Vec<f64> {
        let k = ((self.p_hi - self.p_lo) / self.p_step + 1e-9).floor() as usize;
        let mut g: Vec<f64> = (0..=k)
            .map(|i| (self.p_lo + i as f64 * self.p_step).min(self.p_hi))
            .collect();
        if *g.last().unwrap() < self.p_hi - 1e-12 {
            g.push(self.p_hi);
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustLocationScale {
    pub location: f64,
    pub scale: f64,
    /// Set when the MAD is zero; `scale` is then 0.
    pub degenerate: bool,
}

/// Tukey-biweight M-estimate of location with an iterated MAD scale.
pub fn biweight_initial(z: &[f64]) -> Result<RobustLocationScale> {
    if z.len() < 3 {
        return Err(ProfilingError::InsufficientData(format!(
            "biweight needs at least 3 scores, got {}",
            z.len()
        )));
    }
    let mut loc = stats::median(z);
    let mut dev: Vec<f64> = Vec::with_capacity(z.len());
    let mad_about = |center: f64, dev: &mut Vec<f64>| {
        dev.clear();
        dev.extend(z.iter().map(|v| (v - center).abs()));
        stats::median_in_place(dev) / MAD_FACTOR
    };
    let mut scale = mad_about(loc, &mut dev);
    if !(scale > 0.0) {
        return Ok(RobustLocationScale {
            location: loc,
            scale: 0.0,
            degenerate: true,
        });
    }
    for _ in 0..50 {
        let (mut sw, mut swz) = (0.0, 0.0);
        for &v in z {
            let u = (v - loc) / (BIWEIGHT_C * scale);
            if u.abs() < 1.0 {
                let w = (1.0 - u * u) * (1.0 - u * u);
                sw += w;
                swz += w * v;
            }
        }
        let new_loc = if sw > 0.0 { swz / sw } else { loc };
        let new_scale = mad_about(new_loc, &mut dev);
        if !(new_scale > 0.0) {
            return Ok(RobustLocationScale {
                location: new_loc,
                scale: 0.0,
                degenerate: true,
            });
        }
        let change = ((new_loc - loc).abs() / scale).max((new_scale - scale).abs() / scale);
        loc = new_loc;
        scale = new_scale;
        if change < 1e-8 {
            break;
        }
    }
    Ok(RobustLocationScale {
        location: loc,
        scale,
        degenerate: false,
    })
}

/// Log of the truncated-mixture likelihood, summed directly over the scores.
///
/// Returns `-inf` when the parameters make the observed counts impossible.
pub fn truncated_mixture_loglik(z: &[f64], mu: f64, sigma: f64, p: f64, interval: (f64, f64)) -> f64 {
    let (a, b) = interval;
    let q = norm_interval((a - mu) / sigma, (b - mu) / sigma);
    let theta = p * q;
    let mut n0 = 0usize;
    let mut dens = 0.0;
    for &v in z {
        if v >= a && v <= b {
            n0 += 1;
            dens += ln_normal_pdf(v, mu, sigma);
        }
    }
    let n1 = z.len() - n0;
    mixture_terms(n0, n1, theta, q, dens)
}

fn mixture_terms(n0: usize, n1: usize, theta: f64, q: f64, dens: f64) -> f64 {
    let n0f = n0 as f64;
    let n1f = n1 as f64;
    let mut ll = 0.0;
    if n0 > 0 {
        if !(theta > 0.0) || !(q > 0.0) {
            return f64::NEG_INFINITY;
        }
        ll += n0f * theta.ln() + dens - n0f * q.ln();
    }
    if n1 > 0 {
        if theta >= 1.0 {
            return f64::NEG_INFINITY;
        }
        ll += n1f * (-theta).ln_1p();
    }
    ll
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleFitResult {
    pub null: NullParams,
    pub interval: (f64, f64),
    pub n0: usize,
    pub n1: usize,
    pub loglik: f64,
    pub initial: (f64, f64),
}

/// Sufficient statistics of the scores inside `[A, B]`, centred at the
/// initial location and scaled by the initial scale so the likelihood is
/// O(1) to evaluate.
struct Inside {
    n0: usize,
    n1: usize,
    s1: f64,
    s2: f64,
    // interval in standardized units
    a: f64,
    b: f64,
    ln_scale: f64,
}

impl Inside {
    /// Log-likelihood at standardized location `m` and log-scale `v`
    /// (mu = mu0 + sigma0 m, sigma = sigma0 e^v).
    fn loglik(&self, m: f64, v: f64, p: f64) -> f64 {
        let s = v.exp();
        let q = norm_interval((self.a - m) / s, (self.b - m) / s);
        let n0f = self.n0 as f64;
        let ss = self.s2 - 2.0 * m * self.s1 + n0f * m * m;
        let dens = -n0f * (0.918_938_533_204_672_8 + v + self.ln_scale) - ss / (2.0 * s * s);
        mixture_terms(self.n0, self.n1, p * q, q, dens)
    }

    /// Best grid index for fixed (m, v); ties go to the larger p.
    fn best_grid(&self, m: f64, v: f64, grid: &[f64]) -> (usize, f64) {
        let s = v.exp();
        let q = norm_interval((self.a - m) / s, (self.b - m) / s);
        let n = (self.n0 + self.n1) as f64;
        let last = grid.len() - 1;
        let target = if self.n1 == 0 || !(q > 0.0) {
            f64::INFINITY
        } else {
            self.n0 as f64 / (n * q)
        };
        let k = grid.partition_point(|&g| g <= target);
        let mut cands = [k.saturating_sub(1).min(last), k.min(last)];
        cands.sort_unstable();
        let mut best = (cands[1], self.loglik(m, v, grid[cands[1]]));
        let other = (cands[0], self.loglik(m, v, grid[cands[0]]));
        if other.1 > best.1 + 1e-10 {
            best = other;
        }
        best
    }
}

/// Fits the empirical null N(mu_M, sigma_M^2) and null proportion p_M.
pub fn mle_fit(z: &[f64], config: &MleFitConfig) -> Result<MleFitResult> {
    config.validate()?;
    if z.len() < MIN_SCORES {
        return Err(ProfilingError::InsufficientData(format!(
            "{} scores; null fitting needs at least {MIN_SCORES}",
            z.len()
        )));
    }
    if let Some(k) = z.iter().position(|v| !v.is_finite()) {
        return Err(ProfilingError::NonFinite {
            row: k + 1,
            column: "z".into(),
        });
    }
    let init = biweight_initial(z)?;
    if init.degenerate {
        return Err(ProfilingError::DegenerateScale);
    }
    let (mu0, sigma0) = (init.location, init.scale);
    let a = mu0 - config.zeta0 * sigma0;
    let b = mu0 + config.zeta0 * sigma0;

    let mut n0 = 0usize;
    let (mut s1, mut s2) = (0.0, 0.0);
    for &v in z {
        if v >= a && v <= b {
            n0 += 1;
            let c = (v - mu0) / sigma0;
            s1 += c;
            s2 += c * c;
        }
    }
    if n0 < MIN_INSIDE {
        return Err(ProfilingError::TooFewInInterval {
            inside: n0,
            required: MIN_INSIDE,
        });
    }
    let inside = Inside {
        n0,
        n1: z.len() - n0,
        s1,
        s2,
        a: -config.zeta0,
        b: config.zeta0,
        ln_scale: sigma0.ln(),
    };
    let grid = config.grid();
    let nm = NelderMead {
        ftol: config.tolerance,
        xtol: config.tolerance.sqrt() * 1e-3,
        max_iter: config.max_iter,
        step: 0.1,
    };

    let fit_at = |p: f64, start: &[f64]| {
        let m = nm.minimize(|x| -inside.loglik(x[0], x[1], p), start);
        (m.x, -m.value)
    };

    let (k_best, x_best, ll_best) = match config.strategy {
        ProfileStrategy::FullGrid => {
            let mut best: Option<(usize, Vec<f64>, f64)> = None;
            for (k, &p) in grid.iter().enumerate() {
                let (x, ll) = fit_at(p, &[0.0, 0.0]);
                // ascending grid: ">=" within tolerance keeps the largest p
                if best.as_ref().is_none_or(|b| ll >= b.2 - 1e-10) {
                    best = Some((k, x, ll));
                }
            }
            best.unwrap()
        }
        ProfileStrategy::Exchange => {
            let joint = nm.minimize(|x| -inside.best_grid(x[0], x[1], &grid).1, &[0.0, 0.0]);
            let (k0, _) = inside.best_grid(joint.x[0], joint.x[1], &grid);
            // polish at the selected grid point and its neighbours
            let lo = k0.saturating_sub(1);
            let hi = (k0 + 1).min(grid.len() - 1);
            let mut best: Option<(usize, Vec<f64>, f64)> = None;
            for (k, &p) in grid.iter().enumerate().take(hi + 1).skip(lo) {
                let (x, ll) = fit_at(p, &joint.x);
                if best.as_ref().is_none_or(|b| ll >= b.2 - 1e-10) {
                    best = Some((k, x, ll));
                }
            }
            best.unwrap()
        }
    };

    if !ll_best.is_finite() {
        return Err(ProfilingError::NonConvergence {
            what: "empirical null likelihood",
            iterations: config.max_iter,
        });
    }
    let mu = mu0 + sigma0 * x_best[0];
    let sigma = sigma0 * x_best[1].exp();
    Ok(MleFitResult {
        null: NullParams {
            mean: mu,
            sd: sigma,
            null_prop: grid[k_best],
        },
        interval: (a, b),
        n0,
        n1: z.len() - n0,
        loglik: ll_best,
        initial: (mu0, sigma0),
    })
}
