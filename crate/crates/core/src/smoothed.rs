//! Size-adaptive empirical nulls.
//!
//! Providers are grouped by size quantiles, a robust null is fitted within
//! each group, and the group variances and means are regressed on the group
//! median size: a line for the variance (iteratively re-weighted) and a
//! weighted smoothing spline for the mean. Each provider is then referred to
//! its own `N(Z_i, sigma_i^2)`. The stratified procedure is the piecewise
//! constant special case.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ProfilingError, Result};
use crate::null_mle::{mle_fit, MleFitConfig, MleFitResult};
use crate::spline::{weighted_line, Penalty, SmoothingSpline};
use crate::stats::upper_quantile;
use crate::types::{validate_scores, FlagReport, NullParams, ProviderScore};

pub const MIN_GROUP_SIZE: usize = 20;
/// Lower bound on every provider's null variance.
pub const VARIANCE_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SizeGroup {
    pub index: usize,
    /// Positions of the members in the score slice the groups were built from.
    pub members: Vec<usize>,
    pub median_size: f64,
    pub fit: Option<MleFitResult>,
}

impl SizeGroup {
    pub fn count(&self) -> usize {
        self.members.len()
    }

    pub fn member_ids<'a>(&'a self, scores: &'a [ProviderScore]) -> impl Iterator<Item = &'a str> {
        self.members.iter().map(move |&i| scores[i].provider_id.as_str())
    }

    /// Robust group mean z~_g, once fitted.
    pub fn robust_mean(&self) -> Option<f64> {
        self.fit.map(|f| f.null.mean)
    }

    /// Robust group variance sigma~_g^2, once fitted.
    pub fn robust_variance(&self) -> Option<f64> {
        self.fit.map(|f| f.null.sd * f.null.sd)
    }

    fn fitted(&self) -> Result<&MleFitResult> {
        self.fit.as_ref().ok_or_else(|| {
            ProfilingError::InvalidParameter(format!("group {} has not been fitted", self.index))
        })
    }
}

fn sorted_by_size(scores: &[ProviderScore]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .size
            .total_cmp(&scores[b].size)
            .then_with(|| scores[a].provider_id.cmp(&scores[b].provider_id))
    });
    order
}

/// Splits providers, sorted by (size, provider_id), into `g` contiguous
/// blocks whose sizes differ by at most one (larger blocks first).
pub fn group_by_size(scores: &[ProviderScore], g: usize, min_group: usize) -> Result<Vec<SizeGroup>> {
    let n = scores.len();
    if g == 0 {
        return Err(ProfilingError::InvalidParameter("group count must be positive".into()));
    }
    if n / g < min_group.max(1) {
        return Err(ProfilingError::InvalidParameter(format!(
            "{g} groups too many for {n} providers (need at least {min_group} per group)"
        )));
    }
    let order = sorted_by_size(scores);
    let base = n / g;
    let extra = n % g;
    let mut groups = Vec::with_capacity(g);
    let mut start = 0;
    for index in 0..g {
        let len = base + usize::from(index < extra);
        let members: Vec<usize> = order[start..start + len].to_vec();
        start += len;
        let sizes: Vec<f64> = members.iter().map(|&i| scores[i].size).collect();
        // members are sorted by size
        let median_size = if len % 2 == 1 {
            sizes[len / 2]
        } else {
            0.5 * (sizes[len / 2 - 1] + sizes[len / 2])
        };
        groups.push(SizeGroup {
            index,
            members,
            median_size,
            fit: None,
        });
    }
    Ok(groups)
}

/// Fits the robust null within every group, in parallel.
pub fn fit_group_nulls(
    groups: &mut [SizeGroup],
    scores: &[ProviderScore],
    config: &MleFitConfig,
) -> Result<()> {
    let fits: Vec<Result<MleFitResult>> = groups
        .par_iter()
        .map(|grp| {
            let z: Vec<f64> = grp.members.iter().map(|&i| scores[i].z_fe).collect();
            mle_fit(&z, config).map_err(|e| ProfilingError::Group {
                group: grp.index,
                source: Box::new(e),
            })
        })
        .collect();
    for (grp, fit) in groups.iter_mut().zip(fits) {
        grp.fit = Some(fit?);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceLine {
    pub gamma0: f64,
    pub gamma1: f64,
    pub iterations: usize,
}

impl VarianceLine {
    pub fn raw(&self, size: f64) -> f64 {
        self.gamma0 + self.gamma1 * size
    }

    /// Linear in size everywhere, floored at [`VARIANCE_FLOOR`].
    pub fn evaluate(&self, size: f64) -> f64 {
        self.raw(size).max(VARIANCE_FLOOR)
    }
}

fn wls(m: &[f64], v: &[f64], w: &[f64]) -> (f64, f64) {
    weighted_line(m, v, w)
}

/// Iteratively re-weighted regression of group variances on group median
/// sizes with weights `N_g / (gamma0 + gamma1 m_g)^2`.
pub fn fit_variance_line(groups: &[SizeGroup]) -> Result<VarianceLine> {
    if groups.len() < 3 {
        return Err(ProfilingError::InsufficientData(format!(
            "variance line needs at least 3 groups, got {}",
            groups.len()
        )));
    }
    let m: Vec<f64> = groups.iter().map(|g| g.median_size).collect();
    let v: Vec<f64> = groups
        .iter()
        .map(|g| g.fitted().map(|f| f.null.sd * f.null.sd))
        .collect::<Result<_>>()?;
    let counts: Vec<f64> = groups.iter().map(|g| g.count() as f64).collect();
    let m_scale = m.iter().map(|x| x.abs()).sum::<f64>() / m.len() as f64;

    let (mut g0, mut g1) = wls(&m, &v, &vec![1.0; m.len()]);
    for it in 1..=100 {
        let mut w = Vec::with_capacity(m.len());
        for (k, &mk) in m.iter().enumerate() {
            let fit = g0 + g1 * mk;
            if !(fit > 0.0) {
                return Err(ProfilingError::NonPositiveVariance { size: mk, value: fit });
            }
            w.push(counts[k] / (fit * fit));
        }
        let (n0, n1) = wls(&m, &v, &w);
        let change = (n0 - g0).abs().max((n1 - g1).abs() * m_scale);
        let size = n0.abs().max(n1.abs() * m_scale);
        g0 = n0;
        g1 = n1;
        if change <= 1e-6 * size || change == 0.0 {
            for &mk in &m {
                let fit = g0 + g1 * mk;
                if !(fit > 0.0) {
                    return Err(ProfilingError::NonPositiveVariance { size: mk, value: fit });
                }
            }
            return Ok(VarianceLine {
                gamma0: g0,
                gamma1: g1,
                iterations: it,
            });
        }
    }
    Err(ProfilingError::NonConvergence {
        what: "variance line",
        iterations: 100,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanCurve {
    Spline(SmoothingSpline),
    /// Weighted line used when fewer than four distinct group sizes exist.
    Linear {
        intercept: f64,
        slope: f64,
        min: f64,
        max: f64,
    },
}

impl MeanCurve {
    pub fn range(&self) -> (f64, f64) {
        match self {
            MeanCurve::Spline(s) => s.range(),
            MeanCurve::Linear { min, max, .. } => (*min, *max),
        }
    }

    /// Curve value; flat at the boundary value outside the fitted range.
    pub fn evaluate(&self, size: f64) -> f64 {
        let (lo, hi) = self.range();
        let x = size.clamp(lo, hi);
        match self {
            MeanCurve::Spline(s) => s.evaluate(x),
            MeanCurve::Linear { intercept, slope, .. } => intercept + slope * x,
        }
    }

    pub fn is_fallback(&self) -> bool {
        matches!(self, MeanCurve::Linear { .. })
    }
}

/// Weighted smoothing of group means on group median sizes, weights
/// inversely proportional to the fitted variance at each median.
pub fn fit_mean_curve(groups: &[SizeGroup], variance: &VarianceLine) -> Result<MeanCurve> {
    if groups.is_empty() {
        return Err(ProfilingError::InsufficientData("no groups".into()));
    }
    let m: Vec<f64> = groups.iter().map(|g| g.median_size).collect();
    let z: Vec<f64> = groups
        .iter()
        .map(|g| g.fitted().map(|f| f.null.mean))
        .collect::<Result<_>>()?;
    let w: Vec<f64> = m.iter().map(|&x| 1.0 / variance.evaluate(x)).collect();
    match SmoothingSpline::fit(&m, &z, &w, Penalty::Gcv) {
        Ok(s) => Ok(MeanCurve::Spline(s)),
        Err(ProfilingError::InsufficientData(_)) => {
            let (intercept, slope) = weighted_line(&m, &z, &w);
            let min = m.iter().copied().fold(f64::INFINITY, f64::min);
            let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(MeanCurve::Linear {
                intercept,
                slope,
                min,
                max,
            })
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub index: usize,
    pub count: usize,
    pub median_size: f64,
    pub mean: f64,
    pub variance: f64,
    pub null_prop: f64,
}

impl GroupSummary {
    fn from_group(g: &SizeGroup) -> Result<Self> {
        let f = g.fitted()?;
        Ok(GroupSummary {
            index: g.index,
            count: g.count(),
            median_size: g.median_size,
            mean: f.null.mean,
            variance: f.null.sd * f.null.sd,
            null_prop: f.null.null_prop,
        })
    }
}

/// Fitted mean curve and variance line mapping provider size to a null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedNullModel {
    pub variance: VarianceLine,
    pub mean: MeanCurve,
    pub size_range: (f64, f64),
    pub groups: Vec<GroupSummary>,
}

impl SmoothedNullModel {
    pub fn fit(groups: &[SizeGroup]) -> Result<Self> {
        let variance = fit_variance_line(groups)?;
        let mean = fit_mean_curve(groups, &variance)?;
        let summaries = groups.iter().map(GroupSummary::from_group).collect::<Result<Vec<_>>>()?;
        let lo = summaries.iter().map(|g| g.median_size).fold(f64::INFINITY, f64::min);
        let hi = summaries.iter().map(|g| g.median_size).fold(f64::NEG_INFINITY, f64::max);
        Ok(SmoothedNullModel {
            variance,
            mean,
            size_range: (lo, hi),
            groups: summaries,
        })
    }

    pub fn mean_at(&self, size: f64) -> f64 {
        self.mean.evaluate(size)
    }

    pub fn variance_at(&self, size: f64) -> f64 {
        self.variance.evaluate(size)
    }

    pub fn null_at(&self, size: f64) -> NullParams {
        NullParams::new(self.mean_at(size), self.variance_at(size).sqrt())
    }

    pub fn fallback_linear(&self) -> bool {
        self.mean.is_fallback()
    }
}

/// Default group count: about 100 providers per group, kept within 50 to
/// 300 providers per group.
pub fn default_group_count(n: usize) -> usize {
    let target = ((n as f64) / 100.0).round().max(1.0) as usize;
    let lo = n.div_ceil(300).max(1);
    let hi = (n / 50).max(1);
    target.clamp(lo, hi.max(lo))
}

/// Groups, fits and smooths in one call.
pub fn fit_smoothed_null(
    scores: &[ProviderScore],
    groups: usize,
    config: &MleFitConfig,
) -> Result<SmoothedNullModel> {
    validate_scores(scores)?;
    let mut g = group_by_size(scores, groups, MIN_GROUP_SIZE)?;
    fit_group_nulls(&mut g, scores, config)?;
    SmoothedNullModel::fit(&g)
}

/// Per-provider nulls from a fitted model, in score order.
pub fn provider_nulls(model: &SmoothedNullModel, scores: &[ProviderScore]) -> Vec<NullParams> {
    scores.iter().map(|s| model.null_at(s.size)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedNulls {
    pub groups: Vec<SizeGroup>,
    /// One null per provider, in score order.
    pub nulls: Vec<NullParams>,
}

/// Piecewise-constant nulls from size strata; one stratum is a plain fit on
/// all scores.
pub fn stratified_nulls(
    scores: &[ProviderScore],
    n_strata: usize,
    config: &MleFitConfig,
) -> Result<StratifiedNulls> {
    validate_scores(scores)?;
    let mut groups = group_by_size(scores, n_strata, MIN_GROUP_SIZE)?;
    fit_group_nulls(&mut groups, scores, config)?;
    let mut nulls = vec![NullParams::standard(); scores.len()];
    for g in &groups {
        let f = g.fitted()?;
        for &i in &g.members {
            nulls[i] = f.null;
        }
    }
    Ok(StratifiedNulls { groups, nulls })
}

/// Flags providers against their nulls at one-sided level `rho`.
pub fn flag(
    scores: &[ProviderScore],
    nulls: &[NullParams],
    rho: f64,
    two_sided: bool,
) -> Result<Vec<FlagReport>> {
    check_rho(rho)?;
    if scores.len() != nulls.len() {
        return Err(ProfilingError::InvalidParameter(
            "scores and nulls differ in length".into(),
        ));
    }
    let zr = upper_quantile(rho);
    Ok(scores
        .iter()
        .zip(nulls)
        .map(|(s, n)| {
            let upper = n.mean + zr * n.sd;
            let lower = n.mean - zr * n.sd;
            FlagReport {
                provider_id: s.provider_id.clone(),
                z_fe: s.z_fe,
                null_mean: n.mean,
                null_sd_effective: n.sd,
                threshold_upper: upper,
                threshold_lower: lower,
                decision: FlagReport::decide(s.z_fe, upper, lower, two_sided),
                rho,
                lambda: 1.0,
            }
        })
        .collect())
}

pub(crate) fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 0.5 {
        Ok(())
    } else {
        Err(ProfilingError::InvalidParameter(format!(
            "rho must lie in (0, 0.5), got {rho}"
        )))
    }
}

/// One row of a funnel display: size, score and the two thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunnelPoint {
    pub size: f64,
    pub z: f64,
    pub upper: f64,
    pub lower: f64,
}

pub fn funnel_points(scores: &[ProviderScore], reports: &[FlagReport]) -> Vec<FunnelPoint> {
    let mut pts: Vec<FunnelPoint> = scores
        .iter()
        .zip(reports)
        .map(|(s, r)| FunnelPoint {
            size: s.size,
            z: s.z_fe,
            upper: r.threshold_upper,
            lower: r.threshold_lower,
        })
        .collect();
    pts.sort_by(|a, b| a.size.total_cmp(&b.size));
    pts
}
