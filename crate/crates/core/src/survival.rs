//! Standardized mortality ratios from a two-stage Cox fit.
//!
//! Stage one estimates covariate effects from a Cox model stratified by
//! provider. Stage two holds those effects fixed as an offset and estimates
//! a single population baseline hazard with the Breslow estimator. Expected
//! events follow by integrating the baseline against each patient's risk,
//! and each provider's observed count is referred to Poisson(E_i) through a
//! one-sided mid p-value.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{ProfilingError, Result};
use crate::stats::norm_quantile;
use crate::types::{ProviderScore, SurvivalDataset};

pub const MAX_COX_ITER: usize = 50;
pub const MAX_BETA_NORM: f64 = 50.0;
pub const P_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub beta: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

/// Partial-likelihood value, score and information at one β.
struct CoxEval {
    loglik: f64,
    grad: DVector<f64>,
    info: DMatrix<f64>,
}

struct StratifiedLayout {
    /// Patient indices grouped by provider, descending time within provider.
    order: Vec<usize>,
    bounds: Vec<(usize, usize)>,
    /// Covariates centred at their overall mean (row-major).
    xc: Vec<f64>,
}

impl StratifiedLayout {
    fn new(ds: &SurvivalDataset) -> Self {
        let p = ds.p;
        let n = ds.n_patients();
        let mut mean = vec![0.0; p];
        for j in 0..n {
            for (m, x) in mean.iter_mut().zip(ds.row(j)) {
                *m += x / n as f64;
            }
        }
        let mut xc = Vec::with_capacity(n * p);
        for j in 0..n {
            xc.extend(ds.row(j).iter().zip(&mean).map(|(x, m)| x - m));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            ds.provider_of[a]
                .cmp(&ds.provider_of[b])
                .then_with(|| ds.time[b].total_cmp(&ds.time[a]))
        });
        let mut bounds = Vec::with_capacity(ds.n_providers());
        let mut start = 0;
        for k in 1..=n {
            if k == n || ds.provider_of[order[k]] != ds.provider_of[order[start]] {
                bounds.push((start, k));
                start = k;
            }
        }
        StratifiedLayout { order, bounds, xc }
    }

    fn evaluate(&self, ds: &SurvivalDataset, beta: &[f64]) -> CoxEval {
        let p = beta.len();
        let mut loglik = 0.0;
        let mut grad = DVector::<f64>::zeros(p);
        let mut info = DMatrix::<f64>::zeros(p, p);
        let mut s1 = vec![0.0; p];
        let mut s2 = vec![0.0; p * p];
        let mut xe = vec![0.0; p];
        for &(lo, hi) in &self.bounds {
            let mut s0 = 0.0;
            s1.iter_mut().for_each(|v| *v = 0.0);
            s2.iter_mut().for_each(|v| *v = 0.0);
            let mut k = lo;
            while k < hi {
                let t = ds.time[self.order[k]];
                let mut end = k;
                let mut d = 0usize;
                xe.iter_mut().for_each(|v| *v = 0.0);
                let mut eta_events = 0.0;
                while end < hi && ds.time[self.order[end]] == t {
                    let j = self.order[end];
                    let x = &self.xc[j * p..(j + 1) * p];
                    let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
                    let r = eta.exp();
                    s0 += r;
                    for a in 0..p {
                        s1[a] += r * x[a];
                        for b in 0..=a {
                            s2[a * p + b] += r * x[a] * x[b];
                        }
                    }
                    if ds.event[j] {
                        d += 1;
                        eta_events += eta;
                        for a in 0..p {
                            xe[a] += x[a];
                        }
                    }
                    end += 1;
                }
                if d > 0 {
                    let df = d as f64;
                    loglik += eta_events - df * s0.ln();
                    for a in 0..p {
                        grad[a] += xe[a] - df * s1[a] / s0;
                        for b in 0..=a {
                            let v = df * (s2[a * p + b] / s0 - s1[a] * s1[b] / (s0 * s0));
                            info[(a, b)] += v;
                        }
                    }
                }
                k = end;
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        CoxEval { loglik, grad, info }
    }
}

/// Maximizes the provider-stratified Breslow partial likelihood by
/// Newton-Raphson with step halving.
pub fn fit_stratified_cox(ds: &SurvivalDataset) -> Result<CoxFit> {
    let total_events = ds.event.iter().filter(|&&e| e).count();
    if total_events == 0 {
        return Err(ProfilingError::NoEvents);
    }
    let mut has_event = vec![false; ds.n_providers()];
    for j in 0..ds.n_patients() {
        if ds.event[j] {
            has_event[ds.provider_of[j]] = true;
        }
    }
    if has_event.iter().filter(|&&h| h).count() < 2 {
        return Err(ProfilingError::InsufficientData(
            "stratified Cox fit needs events in at least two providers".into(),
        ));
    }
    let layout = StratifiedLayout::new(ds);
    let p = ds.p;
    let mut beta = vec![0.0; p];
    let mut cur = layout.evaluate(ds, &beta);
    if p == 0 {
        return Ok(CoxFit {
            beta,
            loglik: cur.loglik,
            iterations: 0,
            converged: true,
            gradient_norm: 0.0,
        });
    }

    for iter in 1..=MAX_COX_ITER {
        let chol = cur
            .info
            .clone()
            .cholesky()
            .ok_or(ProfilingError::Singular("Cox information matrix"))?;
        let step = chol.solve(&cur.grad);
        let decrement = cur.grad.dot(&step);
        let mut scale = 1.0;
        let mut trial: Vec<f64>;
        let mut next;
        loop {
            trial = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            next = layout.evaluate(ds, &trial);
            if next.loglik >= cur.loglik - 1e-12 * cur.loglik.abs().max(1.0) || scale < 1e-6 {
                break;
            }
            scale *= 0.5;
        }
        let delta = next.loglik - cur.loglik;
        beta = trial;
        cur = next;
        let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        if norm > MAX_BETA_NORM || !norm.is_finite() {
            return Err(ProfilingError::MonotoneLikelihood(MAX_BETA_NORM));
        }
        let gnorm = cur.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if (delta.abs() < 1e-9 || decrement < 2e-9) && gnorm < 1e-6 {
            return Ok(CoxFit {
                beta,
                loglik: cur.loglik,
                iterations: iter,
                converged: true,
                gradient_norm: gnorm,
            });
        }
    }
    Err(ProfilingError::NonConvergence {
        what: "stratified Cox fit",
        iterations: MAX_COX_ITER,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    /// Distinct event times, strictly increasing.
    pub times: Vec<f64>,
    pub increments: Vec<f64>,
}

impl BaselineHazard {
    /// Cumulative hazard at `t` (sum of increments at times <= t).
    pub fn cumulative(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        self.increments[..k].iter().sum()
    }

    pub fn cumulative_series(&self) -> Vec<f64> {
        self.increments
            .iter()
            .scan(0.0, |acc, d| {
                *acc += d;
                Some(*acc)
            })
            .collect()
    }
}

fn linear_predictor(ds: &SurvivalDataset, beta: &[f64], j: usize) -> f64 {
    ds.row(j).iter().zip(beta).map(|(x, b)| x * b).sum()
}

/// Breslow estimator of the unstratified baseline with `beta' X` as offset.
pub fn breslow_baseline_with_offset(ds: &SurvivalDataset, beta: &[f64]) -> Result<BaselineHazard> {
    if beta.len() != ds.p || beta.iter().any(|b| !b.is_finite()) {
        return Err(ProfilingError::InvalidParameter(
            "beta must be finite with one entry per covariate".into(),
        ));
    }
    let n = ds.n_patients();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ds.time[b].total_cmp(&ds.time[a]));
    let mut times = Vec::new();
    let mut increments = Vec::new();
    let mut s0 = 0.0;
    let mut k = 0;
    while k < n {
        let t = ds.time[order[k]];
        let mut d = 0usize;
        while k < n && ds.time[order[k]] == t {
            let j = order[k];
            s0 += linear_predictor(ds, beta, j).exp();
            d += usize::from(ds.event[j]);
            k += 1;
        }
        if d > 0 {
            if !(s0 > 0.0) {
                return Err(ProfilingError::InvalidParameter(format!(
                    "empty risk set at time {t}"
                )));
            }
            times.push(t);
            increments.push(d as f64 / s0);
        }
    }
    times.reverse();
    increments.reverse();
    Ok(BaselineHazard { times, increments })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedEvents {
    pub per_patient: Vec<f64>,
    pub per_provider: Vec<f64>,
}

/// `E_ij = exp(beta' X_ij) * Lambda0(min(T_ij, tau))` and provider totals,
/// with tau the largest observed follow-up.
pub fn expected_events(ds: &SurvivalDataset, beta: &[f64], baseline: &BaselineHazard) -> ExpectedEvents {
    let tau = ds.time.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cum = baseline.cumulative_series();
    let per_patient: Vec<f64> = (0..ds.n_patients())
        .into_par_iter()
        .map(|j| {
            let t = ds.time[j].min(tau);
            let k = baseline.times.partition_point(|&s| s <= t);
            if k == 0 {
                0.0
            } else {
                linear_predictor(ds, beta, j).exp() * cum[k - 1]
            }
        })
        .collect();
    let mut per_provider = vec![0.0; ds.n_providers()];
    for (j, e) in per_patient.iter().enumerate() {
        per_provider[ds.provider_of[j]] += e;
    }
    ExpectedEvents {
        per_patient,
        per_provider,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MidP {
    /// P(X = O)/2 + P(X > O), clamped away from 0 and 1.
    pub mid_p: f64,
    pub z: f64,
}

fn ln_pmf(k: u64, mean: f64) -> f64 {
    k as f64 * mean.ln() - mean - ln_gamma(k as f64 + 1.0)
}

/// One-sided mid p-value of `observed` under Poisson(`expected`) and its
/// Z-score `Phi^-1(1 - p)`.
pub fn midp_z(observed: u64, expected: f64) -> Result<MidP> {
    if !(expected > 0.0) || !expected.is_finite() {
        return Err(ProfilingError::InvalidParameter(format!(
            "expected count must be positive, got {expected}"
        )));
    }
    let pmf_o = ln_pmf(observed, expected).exp();
    // upper = P(X > O) + pmf/2, lower = P(X < O) + pmf/2 = 1 - upper;
    // only the smaller tail is summed directly.
    let (upper, lower) = if observed as f64 >= expected {
        let first = observed + 1;
        let mut term = 1.0;
        let mut rel = 0.0;
        let mut k = first;
        loop {
            rel += term;
            term *= expected / (k + 1) as f64;
            k += 1;
            if term < 1e-17 * rel {
                break;
            }
        }
        let tail = (ln_pmf(first, expected) + rel.ln()).exp();
        let upper = tail + 0.5 * pmf_o;
        (upper, 1.0 - upper)
    } else {
        let mut tail = 0.0;
        if observed > 0 {
            let mut term = 1.0;
            let mut rel = 0.0;
            let mut k = observed - 1;
            loop {
                rel += term;
                if k == 0 {
                    break;
                }
                term *= k as f64 / expected;
                k -= 1;
                if term < 1e-17 * rel {
                    break;
                }
            }
            tail = (ln_pmf(observed - 1, expected) + rel.ln()).exp();
        }
        let lower = tail + 0.5 * pmf_o;
        (1.0 - lower, lower)
    };
    let mid_p = upper.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let z = if upper < 0.5 {
        -norm_quantile(mid_p)
    } else {
        norm_quantile(lower.clamp(P_CLAMP, 1.0 - P_CLAMP))
    };
    Ok(MidP { mid_p, z })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmrScore {
    pub provider_id: String,
    pub patients: usize,
    pub patient_years: f64,
    pub observed: u64,
    pub expected: f64,
    pub smr: f64,
    pub mid_p: f64,
    pub z_fe: f64,
}

#[derive(Debug, Clone)]
pub struct SmrResult {
    pub cox: CoxFit,
    pub baseline: BaselineHazard,
    pub scores: Vec<SmrScore>,
    /// Providers dropped for expected counts below the threshold.
    pub excluded: Vec<(String, f64)>,
}

/// Size measure attached to SMR scores for null fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeMeasure {
    #[default]
    PatientYears,
    Patients,
}

impl std::str::FromStr for SizeMeasure {
    type Err = ProfilingError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "patient_years" | "years" => Ok(SizeMeasure::PatientYears),
            "patients" | "count" => Ok(SizeMeasure::Patients),
            _ => Err(ProfilingError::InvalidParameter(format!(
                "unknown size measure '{s}' (expected patient-years or patients)"
            ))),
        }
    }
}

impl SmrResult {
    /// Scores for null fitting, sized by patient-years.
    pub fn provider_scores(&self) -> Vec<ProviderScore> {
        self.provider_scores_by(SizeMeasure::PatientYears)
    }

    pub fn provider_scores_by(&self, measure: SizeMeasure) -> Vec<ProviderScore> {
        self.scores
            .iter()
            .map(|s| ProviderScore {
                provider_id: s.provider_id.clone(),
                size: match measure {
                    SizeMeasure::PatientYears => s.patient_years,
                    SizeMeasure::Patients => s.patients as f64,
                },
                z_fe: s.z_fe,
                observed: Some(s.observed as f64),
                expected: Some(s.expected),
            })
            .collect()
    }
}

pub const DEFAULT_MIN_EXPECTED: f64 = 3.0;

/// Both stages, mid-p Z-scores, and exclusion of providers with
/// `E_i < min_expected`.
pub fn smr_pipeline(ds: &SurvivalDataset, min_expected: f64) -> Result<SmrResult> {
    let cox = fit_stratified_cox(ds)?;
    let baseline = breslow_baseline_with_offset(ds, &cox.beta)?;
    let expected = expected_events(ds, &cox.beta, &baseline);
    let n = ds.n_providers();
    let mut observed = vec![0u64; n];
    let mut years = vec![0.0; n];
    for j in 0..ds.n_patients() {
        let i = ds.provider_of[j];
        observed[i] += u64::from(ds.event[j]);
        years[i] += ds.time[j];
    }
    let mut scores = Vec::with_capacity(n);
    let mut excluded = Vec::new();
    for i in 0..n {
        let e = expected.per_provider[i];
        let id = ds.providers.id(i).to_owned();
        if !(e >= min_expected) || !(e > 0.0) {
            excluded.push((id, e));
            continue;
        }
        let m = midp_z(observed[i], e)?;
        scores.push(SmrScore {
            provider_id: id,
            patients: ds.sizes[i],
            patient_years: years[i],
            observed: observed[i],
            expected: e,
            smr: observed[i] as f64 / e,
            mid_p: m.mid_p,
            z_fe: m.z,
        });
    }
    Ok(SmrResult {
        cox,
        baseline,
        scores,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Status, SurvivalRecord};
    use approx::assert_abs_diff_eq;

    fn ds(rows: &[(&str, f64, bool, &[f64])]) -> SurvivalDataset {
        let recs: Vec<SurvivalRecord> = rows
            .iter()
            .map(|(id, t, e, x)| SurvivalRecord {
                provider_id: id.to_string(),
                time: *t,
                status: if *e { Status::Event } else { Status::Censored },
                covariates: x.to_vec(),
            })
            .collect();
        SurvivalDataset::from_records(&recs).unwrap()
    }

    #[test]
    fn hand_breslow() {
        let d = ds(&[("A", 1.0, true, &[]), ("B", 2.0, true, &[])]);
        let b = breslow_baseline_with_offset(&d, &[]).unwrap();
        assert_eq!(b.times, vec![1.0, 2.0]);
        assert_eq!(b.increments, vec![0.5, 1.0]);
        assert_eq!(b.cumulative_series(), vec![0.5, 1.5]);
        let e = expected_events(&d, &[], &b);
        assert_eq!(e.per_provider, vec![0.5, 1.5]);
        assert_eq!(e.per_patient.iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn doubling_risk_halves_increments() {
        let d = ds(&[
            ("A", 1.0, true, &[0.3]),
            ("A", 2.5, false, &[-1.0]),
            ("B", 2.0, true, &[0.7]),
            ("B", 3.0, true, &[0.1]),
        ]);
        let b1 = breslow_baseline_with_offset(&d, &[0.4]).unwrap();
        // shifting every covariate by ln2 / beta doubles every exp(beta'x)
        let shift = 2f64.ln() / 0.4;
        let mut d2 = d.clone();
        d2.covariates.iter_mut().for_each(|x| *x += shift);
        let b2 = breslow_baseline_with_offset(&d2, &[0.4]).unwrap();
        for (a, b) in b1.increments.iter().zip(&b2.increments) {
            assert_abs_diff_eq!(*a, 2.0 * b, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_covariates_give_nelson_aalen() {
        let d = ds(&[
            ("A", 1.0, true, &[0.0]),
            ("A", 2.0, false, &[0.0]),
            ("B", 3.0, true, &[0.0]),
            ("B", 3.0, true, &[0.0]),
            ("C", 4.0, true, &[0.0]),
        ]);
        let b = breslow_baseline_with_offset(&d, &[1.7]).unwrap();
        assert_eq!(b.times, vec![1.0, 3.0, 4.0]);
        assert_abs_diff_eq!(b.increments[0], 1.0 / 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.increments[1], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.increments[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn followup_before_first_event() {
        let d = ds(&[("A", 0.5, false, &[]), ("A", 1.0, true, &[]), ("B", 2.0, true, &[])]);
        let b = breslow_baseline_with_offset(&d, &[]).unwrap();
        let e = expected_events(&d, &[], &b);
        assert_eq!(e.per_patient[0], 0.0);
    }

    #[test]
    fn all_censored_has_no_events() {
        let d = ds(&[("A", 1.0, false, &[0.1]), ("B", 2.0, false, &[0.2])]);
        assert!(matches!(fit_stratified_cox(&d), Err(ProfilingError::NoEvents)));
    }

    #[test]
    fn dimension_zero_cox() {
        let d = ds(&[
            ("A", 1.0, true, &[]),
            ("A", 2.0, true, &[]),
            ("B", 1.5, true, &[]),
            ("B", 3.0, false, &[]),
        ]);
        let f = fit_stratified_cox(&d).unwrap();
        assert!(f.beta.is_empty());
        // stratum A: -ln 2 - ln 1; stratum B: -ln 2
        assert_abs_diff_eq!(f.loglik, -2.0 * 2f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn midp_values() {
        let a = midp_z(0, 3.0).unwrap();
        assert_abs_diff_eq!(a.mid_p, 1.0 - (-3f64).exp() / 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(a.mid_p, 0.975106, epsilon = 1e-6);
        assert_abs_diff_eq!(a.z, -1.9617, epsilon = 1e-3);
        let b = midp_z(5, 3.0).unwrap();
        assert_abs_diff_eq!(b.mid_p, 0.134327, epsilon = 1e-6);
        assert_abs_diff_eq!(b.z, 1.1054, epsilon = 1e-3);
        let c = midp_z(0, 1e-9).unwrap();
        assert!(c.mid_p > 0.5 && c.mid_p < 0.5 + 1e-8);
        assert!(c.z < 0.0 && c.z > -1e-8);
        assert!(midp_z(1, 0.0).is_err());
    }

    #[test]
    fn midp_extremes_stay_finite() {
        let hi = midp_z(500, 10.0).unwrap();
        assert_eq!(hi.mid_p, P_CLAMP);
        assert!(hi.z.is_finite() && hi.z > 7.0);
        let lo = midp_z(0, 200.0).unwrap();
        assert!(lo.z.is_finite() && lo.z < -7.0);
    }

    #[test]
    fn smr_ratio_and_exclusion() {
        // expected counts of a Breslow fit always total the events, so build
        // a small two-provider set with a known split
        let d = ds(&[("A", 1.0, true, &[]), ("B", 2.0, true, &[])]);
        let r = smr_pipeline(&d, 1.0).unwrap();
        assert_eq!(r.scores.len(), 1);
        assert_eq!(r.scores[0].provider_id, "B");
        assert_abs_diff_eq!(r.scores[0].smr, 1.0 / 1.5, epsilon = 1e-14);
        assert_eq!(r.excluded, vec![("A".to_string(), 0.5)]);
    }
}
