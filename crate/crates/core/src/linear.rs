//! Linear-model profiling: within-provider risk adjustment, one-way
//! variance components, and FE / RE / FERE Z-scores.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ProfilingError, Result};
use crate::types::{LinearDataset, LinearVarianceComponents, ProviderScore};

#[derive(Debug, Clone, PartialEq)]
pub struct FixedEffectsFit {
    pub beta: Vec<f64>,
    pub sigma_w: f64,
}

/// Per-provider means of outcomes and covariates.
struct ProviderMeans {
    ybar: Vec<f64>,
    xbar: Vec<f64>,
}

fn provider_means(ds: &LinearDataset) -> ProviderMeans {
    let n = ds.n_providers();
    let p = ds.p;
    let mut ybar = vec![0.0; n];
    let mut xbar = vec![0.0; n * p];
    for j in 0..ds.n_patients() {
        let i = ds.provider_of[j];
        ybar[i] += ds.outcomes[j];
        for (acc, x) in xbar[i * p..(i + 1) * p].iter_mut().zip(ds.row(j)) {
            *acc += x;
        }
    }
    for i in 0..n {
        let ni = ds.sizes[i] as f64;
        ybar[i] /= ni;
        xbar[i * p..(i + 1) * p].iter_mut().for_each(|v| *v /= ni);
    }
    ProviderMeans { ybar, xbar }
}

/// Least-squares β from the within-provider-centered regression, with the
/// residual standard deviation on `sum(n_i) - N - p` degrees of freedom.
pub fn fit_fixed_effects_beta(ds: &LinearDataset) -> Result<FixedEffectsFit> {
    let total = ds.n_patients();
    let n = ds.n_providers();
    let p = ds.p;
    if total <= n + p {
        return Err(ProfilingError::InsufficientData(format!(
            "{total} records cannot support {n} provider means and {p} covariates"
        )));
    }
    let means = provider_means(ds);

    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut tss = 0.0;
    let mut xc = vec![0.0; p];
    for j in 0..total {
        let i = ds.provider_of[j];
        let yc = ds.outcomes[j] - means.ybar[i];
        tss += yc * yc;
        for (k, (x, m)) in ds.row(j).iter().zip(&means.xbar[i * p..(i + 1) * p]).enumerate() {
            xc[k] = x - m;
        }
        for a in 0..p {
            xty[a] += xc[a] * yc;
            for b in 0..=a {
                xtx[(a, b)] += xc[a] * xc[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
    }

    let beta = if p == 0 {
        DVector::zeros(0)
    } else {
        let scale = (0..p).map(|a| xtx[(a, a)]).fold(0.0, f64::max);
        if !(scale > 0.0) {
            return Err(ProfilingError::Singular("centered design matrix"));
        }
        let chol = xtx
            .clone()
            .cholesky()
            .ok_or(ProfilingError::Singular("centered design matrix"))?;
        // reject near-singular designs that Cholesky lets through
        let min_pivot = chol.l().diagonal().iter().map(|d| d * d).fold(f64::INFINITY, f64::min);
        if min_pivot <= 1e-12 * scale {
            return Err(ProfilingError::Singular("centered design matrix"));
        }
        chol.solve(&xty)
    };

    let mut rss = 0.0;
    for j in 0..total {
        let i = ds.provider_of[j];
        let mut fit = 0.0;
        for (k, (x, m)) in ds.row(j).iter().zip(&means.xbar[i * p..(i + 1) * p]).enumerate() {
            fit += beta[k] * (x - m);
        }
        let r = ds.outcomes[j] - means.ybar[i] - fit;
        rss += r * r;
    }
    if rss <= 1e-24 * tss || rss == 0.0 {
        return Err(ProfilingError::ZeroResidualVariance);
    }
    let dof = (total - n - p) as f64;
    Ok(FixedEffectsFit {
        beta: beta.iter().copied().collect(),
        sigma_w: (rss / dof).sqrt(),
    })
}

/// Risk-adjusted responses `Y = Y* - beta' X`.
pub fn adjust_outcomes(ds: &LinearDataset, beta: &[f64]) -> Result<LinearDataset> {
    if beta.len() != ds.p {
        return Err(ProfilingError::InvalidParameter(format!(
            "beta has length {}, dataset has {} covariates",
            beta.len(),
            ds.p
        )));
    }
    let mut out = ds.clone();
    for j in 0..ds.n_patients() {
        let shift: f64 = ds.row(j).iter().zip(beta).map(|(x, b)| x * b).sum();
        out.outcomes[j] = ds.outcomes[j] - shift;
    }
    Ok(out)
}

/// Sufficient statistics of `Y_ij = mu + alpha_i + e_ij`: provider sizes,
/// provider means and the pooled within-provider sum of squares.
#[derive(Debug, Clone, PartialEq)]
pub struct OneWaySummary {
    pub sizes: Vec<usize>,
    pub ybar: Vec<f64>,
    pub ssw: f64,
}

impl OneWaySummary {
    pub fn from_dataset(adj: &LinearDataset) -> Self {
        let means = provider_means(adj);
        let ssw: f64 = (0..adj.n_patients())
            .map(|j| {
                let r = adj.outcomes[j] - means.ybar[adj.provider_of[j]];
                r * r
            })
            .sum();
        OneWaySummary {
            sizes: adj.sizes.clone(),
            ybar: means.ybar,
            ssw,
        }
    }
}

/// Unbalanced one-way ANOVA method-of-moments estimates of (mu, sigma_alpha,
/// sigma_w) for `Y_ij = mu + alpha_i + e_ij`. `beta` is left empty.
pub fn estimate_variance_components(adj: &LinearDataset) -> Result<LinearVarianceComponents> {
    variance_components_from_summary(&OneWaySummary::from_dataset(adj))
}

pub fn variance_components_from_summary(s: &OneWaySummary) -> Result<LinearVarianceComponents> {
    let n = s.sizes.len();
    if n < 2 {
        return Err(ProfilingError::InsufficientData(
            "variance components need at least two providers".into(),
        ));
    }
    let total: usize = s.sizes.iter().sum();
    if total == n {
        return Err(ProfilingError::InsufficientData(
            "every provider has a single record; within variance not estimable".into(),
        ));
    }
    let total_f = total as f64;
    let mu: f64 = s
        .ybar
        .iter()
        .zip(&s.sizes)
        .map(|(y, &ni)| y * ni as f64)
        .sum::<f64>()
        / total_f;
    let ssb: f64 = s
        .ybar
        .iter()
        .zip(&s.sizes)
        .map(|(y, &ni)| ni as f64 * (y - mu) * (y - mu))
        .sum();
    let msw = s.ssw / (total - n) as f64;
    if !(msw > 0.0) {
        return Err(ProfilingError::ZeroResidualVariance);
    }
    let msb = ssb / (n - 1) as f64;
    let sum_sq: f64 = s.sizes.iter().map(|&ni| (ni * ni) as f64).sum();
    let n0 = (total_f - sum_sq / total_f) / (n - 1) as f64;
    let sigma_alpha2 = ((msb - msw) / n0).max(0.0);
    Ok(LinearVarianceComponents {
        mu,
        sigma_alpha: sigma_alpha2.sqrt(),
        sigma_w: msw.sqrt(),
        beta: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProviderScore {
    pub provider_id: String,
    pub n: usize,
    pub ybar: f64,
    pub z_fe: f64,
    pub z_re: f64,
    pub z_fere: f64,
    /// Shrinkage factor R_i.
    pub shrinkage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearScoreSet {
    pub scores: Vec<LinearProviderScore>,
}

impl LinearScoreSet {
    /// FE scores with patient counts as the size measure.
    pub fn provider_scores(&self) -> Vec<ProviderScore> {
        self.scores
            .iter()
            .map(|s| ProviderScore::new(s.provider_id.clone(), s.n as f64, s.z_fe))
            .collect()
    }
}

pub fn shrinkage_factor(sigma_alpha: f64, sigma_w: f64, n: f64) -> f64 {
    let va = sigma_alpha * sigma_alpha;
    va / (va + sigma_w * sigma_w / n)
}

pub fn compute_z_scores(
    adj: &LinearDataset,
    comps: &LinearVarianceComponents,
) -> Result<LinearScoreSet> {
    if !(comps.sigma_w > 0.0) {
        return Err(ProfilingError::ZeroResidualVariance);
    }
    if !(comps.sigma_alpha >= 0.0) {
        return Err(ProfilingError::InvalidParameter(
            "sigma_alpha must be nonnegative".into(),
        ));
    }
    let means = provider_means(adj);
    let scores = (0..adj.n_providers())
        .map(|i| {
            let n = adj.sizes[i];
            let t = score_triplet(n as f64, means.ybar[i], comps);
            LinearProviderScore {
                provider_id: adj.providers.id(i).to_owned(),
                n,
                ybar: means.ybar[i],
                z_fe: t.z_fe,
                z_re: t.z_re,
                z_fere: t.z_fere,
                shrinkage: t.shrinkage,
            }
        })
        .collect();
    Ok(LinearScoreSet { scores })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreTriplet {
    pub z_fe: f64,
    pub z_re: f64,
    pub z_fere: f64,
    pub shrinkage: f64,
}

/// FE, RE and FERE scores of one provider with `n` records and mean `ybar`.
pub fn score_triplet(n: f64, ybar: f64, comps: &LinearVarianceComponents) -> ScoreTriplet {
    let va = comps.sigma_alpha * comps.sigma_alpha;
    let vw = comps.sigma_w * comps.sigma_w;
    let dev = ybar - comps.mu;
    let z_fe = n.sqrt() * dev / comps.sigma_w;
    let r = shrinkage_factor(comps.sigma_alpha, comps.sigma_w, n);
    ScoreTriplet {
        z_fe,
        z_re: r.sqrt() * z_fe,
        z_fere: dev / (va + vw / n).sqrt(),
        shrinkage: r,
    }
}

/// Full linear pipeline: β, adjustment, variance components, Z-scores.
#[derive(Debug, Clone)]
pub struct LinearProfile {
    pub fixed: FixedEffectsFit,
    pub components: LinearVarianceComponents,
    pub scores: LinearScoreSet,
}

pub fn profile_linear(ds: &LinearDataset) -> Result<LinearProfile> {
    let fixed = fit_fixed_effects_beta(ds)?;
    let adj = adjust_outcomes(ds, &fixed.beta)?;
    let mut components = estimate_variance_components(&adj)?;
    components.beta = fixed.beta.clone();
    let scores = compute_z_scores(&adj, &components)?;
    Ok(LinearProfile {
        fixed,
        components,
        scores,
    })
}

/// Conditional mean squared errors of the FE and RE effect estimates given
/// the true effect.
#[derive(Debug, Clone, PartialEq)]
pub struct MseCurves {
    pub alpha: Vec<f64>,
    pub fe: Vec<f64>,
    pub re: Vec<f64>,
}

pub fn conditional_mse_curves(sigma_alpha: f64, sigma_w: f64, n: f64, grid: &[f64]) -> MseCurves {
    let r = shrinkage_factor(sigma_alpha, sigma_w, n);
    let fe_mse = sigma_w * sigma_w / n;
    MseCurves {
        alpha: grid.to_vec(),
        fe: vec![fe_mse; grid.len()],
        re: grid
            .iter()
            .map(|a| r * r * fe_mse + (1.0 - r) * (1.0 - r) * a * a)
            .collect(),
    }
}

/// Positive effect size at which the RE and FE conditional MSEs coincide.
pub fn mse_crossing(sigma_alpha: f64, sigma_w: f64, n: f64) -> f64 {
    let r = shrinkage_factor(sigma_alpha, sigma_w, n);
    (sigma_w * sigma_w / n * (1.0 + r) / (1.0 - r)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{PatientRecord, ProviderIndex};
    use approx::assert_abs_diff_eq;

    fn dataset(rows: &[(&str, f64, &[f64])]) -> LinearDataset {
        let recs: Vec<PatientRecord> = rows
            .iter()
            .map(|(id, y, x)| PatientRecord {
                provider_id: id.to_string(),
                outcome: *y,
                covariates: x.to_vec(),
            })
            .collect();
        LinearDataset::from_records(&recs).unwrap()
    }

    #[test]
    fn zero_covariates_give_zero_beta_and_pooled_sd() {
        let ds = dataset(&[
            ("A", 1.0, &[0.0]),
            ("A", 3.0, &[0.0]),
            ("B", 10.0, &[0.0]),
            ("B", 14.0, &[0.0]),
            ("B", 12.0, &[0.0]),
        ]);
        // zero covariate column is singular; use p = 0 instead
        assert!(matches!(
            fit_fixed_effects_beta(&ds),
            Err(ProfilingError::Singular(_))
        ));
        let ds0 = dataset(&[
            ("A", 1.0, &[]),
            ("A", 3.0, &[]),
            ("B", 10.0, &[]),
            ("B", 14.0, &[]),
            ("B", 12.0, &[]),
        ]);
        let fit = fit_fixed_effects_beta(&ds0).unwrap();
        assert!(fit.beta.is_empty());
        // pooled within SS = 2 + 8 = 10 on 3 dof
        assert_abs_diff_eq!(fit.sigma_w, (10.0f64 / 3.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn exact_fit_is_degenerate() {
        let rows: Vec<(String, f64, Vec<f64>)> = (0..12)
            .map(|k| {
                let id = format!("P{}", k % 3);
                let x = k as f64 * 0.7 - 2.0;
                let alpha = (k % 3) as f64;
                (id, alpha + 2.0 * x, vec![x])
            })
            .collect();
        let view: Vec<(&str, f64, &[f64])> =
            rows.iter().map(|(a, b, c)| (a.as_str(), *b, c.as_slice())).collect();
        let err = fit_fixed_effects_beta(&dataset(&view)).unwrap_err();
        assert_eq!(err.to_string(), "zero residual variance");
    }

    #[test]
    fn adjust_is_exact_subtraction() {
        let ds = dataset(&[("A", 3.0, &[1.0, 0.0]), ("A", 5.0, &[0.0, 2.0])]);
        let adj = adjust_outcomes(&ds, &[1.0, 0.5]).unwrap();
        assert_eq!(adj.outcomes, vec![2.0, 4.0]);
        let same = adjust_outcomes(&ds, &[0.0, 0.0]).unwrap();
        assert_eq!(same, ds);
        assert!(adjust_outcomes(&ds, &[1.0]).is_err());
    }

    #[test]
    fn no_between_variation() {
        // each provider: mean 5, within values 5 +/- 4
        let mut rows = Vec::new();
        for id in ["A", "B", "C"] {
            rows.push((id, 1.0, &[][..]));
            rows.push((id, 9.0, &[][..]));
        }
        let c = estimate_variance_components(&dataset(&rows)).unwrap();
        assert_eq!(c.sigma_alpha, 0.0);
        assert_abs_diff_eq!(c.sigma_w * c.sigma_w, 32.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.mu, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn single_provider_rejected() {
        let ds = dataset(&[("A", 1.0, &[]), ("A", 2.0, &[])]);
        assert!(estimate_variance_components(&ds).is_err());
        let singletons = dataset(&[("A", 1.0, &[]), ("B", 2.0, &[])]);
        assert!(estimate_variance_components(&singletons).is_err());
    }

    #[test]
    fn z_score_arithmetic() {
        // one provider of 100 with mean 1 above mu, another balancing it
        let mut idx = ProviderIndex::new();
        idx.intern("A");
        idx.intern("B");
        let mut provider_of = vec![0; 100];
        provider_of.extend(vec![1; 100]);
        let mut outcomes = vec![1.0; 100];
        outcomes.extend(vec![-1.0; 100]);
        let ds = LinearDataset::from_columns(idx, provider_of, outcomes, vec![], 0).unwrap();
        let comps = LinearVarianceComponents {
            mu: 0.0,
            sigma_alpha: 1.0,
            sigma_w: 5.0,
            beta: vec![],
        };
        let s = compute_z_scores(&ds, &comps).unwrap();
        let a = &s.scores[0];
        assert_abs_diff_eq!(a.z_fe, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.shrinkage, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(a.z_re, 0.8f64.sqrt() * 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.z_re, 1.7889, epsilon = 1e-4);
        assert_abs_diff_eq!(a.z_fere, 1.0 / 1.25f64.sqrt(), epsilon = 1e-12);

        let c4 = LinearVarianceComponents {
            sigma_w: 4.0,
            ..comps.clone()
        };
        let s4 = compute_z_scores(&ds, &c4).unwrap();
        assert_abs_diff_eq!(s4.scores[0].z_fe, 2.5, epsilon = 1e-12);

        let c0 = LinearVarianceComponents {
            sigma_w: 0.0,
            ..comps
        };
        assert!(compute_z_scores(&ds, &c0).is_err());
    }

    #[test]
    fn mse_closed_forms() {
        let m = conditional_mse_curves(1.0, 5.0, 100.0, &[0.0, 1.5, 100.0]);
        assert_abs_diff_eq!(m.fe[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(m.re[0], 0.16, epsilon = 1e-12);
        // crossing at 1.5 for these parameters
        assert_abs_diff_eq!(mse_crossing(1.0, 5.0, 100.0), 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.re[1], m.fe[1], epsilon = 1e-12);
        assert!(m.re[2] > 100.0 * m.fe[2]);
        assert_eq!(m.fe[2], 0.25);
    }
}
