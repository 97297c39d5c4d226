//! Browser demo: funnel plot with smoothed vs stratified thresholds, FE/RE
//! error curves, and thresholds as a function of the relaxation weight.
//!
//! Each export returns a JSON string; `www/index.html` draws it on a canvas.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use enprof::lambda::{iur_from_null_variance, marginal_null_quantile, relaxed_null, LambdaPrior};
use enprof::linear::{conditional_mse_curves, mse_crossing};
use enprof::null_mle::MleFitConfig;
use enprof::simulation::{gen_survival, survival_sizes, Scenario};
use enprof::smoothed::{fit_smoothed_null, flag, provider_nulls, stratified_nulls};
use enprof::stats::upper_quantile;
use enprof::survival::{smr_pipeline, SizeMeasure};
use enprof::{NullParams, Result};

#[derive(Debug, Serialize)]
pub struct FunnelProvider {
    pub size: f64,
    pub z: f64,
    pub flagged_smoothed: bool,
    pub flagged_stratified: bool,
}

#[derive(Debug, Serialize)]
pub struct ThresholdPoint {
    pub size: f64,
    pub smoothed: f64,
    pub stratified: f64,
}

#[derive(Debug, Serialize)]
pub struct Funnel {
    pub providers: Vec<FunnelProvider>,
    pub thresholds: Vec<ThresholdPoint>,
    pub gamma0: f64,
    pub gamma1: f64,
    pub flagged_smoothed: usize,
    pub flagged_stratified: usize,
}

/// Simulates survival data, computes SMR scores, and flags them against a
/// smoothed and a stratified null.
pub fn funnel(n_providers: usize, groups: usize, strata: usize, rho: f64, seed: u64) -> Result<Funnel> {
    let mut sc = Scenario::preset("fig5")?;
    sc.n_providers = n_providers;
    sc.seed = seed;
    let sizes = survival_sizes(&sc);
    let ds = gen_survival(&sc, &sizes, seed)?;
    let scores = smr_pipeline(&ds, sc.min_expected)?.provider_scores_by(SizeMeasure::Patients);

    let cfg = MleFitConfig::default();
    let model = fit_smoothed_null(&scores, groups, &cfg)?;
    let smooth = flag(&scores, &provider_nulls(&model, &scores), rho, false)?;
    let strat = stratified_nulls(&scores, strata, &cfg)?;
    let strat_flags = flag(&scores, &strat.nulls, rho, false)?;

    let zr = upper_quantile(rho);
    let upper = |n: &NullParams| n.mean + zr * n.sd;
    let mut by_size: Vec<(f64, f64)> = scores.iter().zip(&strat.nulls).map(|(s, n)| (s.size, upper(n))).collect();
    by_size.sort_by(|a, b| a.0.total_cmp(&b.0));
    by_size.dedup_by(|a, b| a.0 == b.0);
    let thresholds = by_size
        .into_iter()
        .map(|(size, stratified)| ThresholdPoint {
            size,
            smoothed: upper(&model.null_at(size)),
            stratified,
        })
        .collect();

    let worse = |r: &enprof::FlagReport| r.decision == enprof::Decision::Worse;
    let providers: Vec<FunnelProvider> = scores
        .iter()
        .zip(smooth.iter().zip(&strat_flags))
        .map(|(s, (a, b))| FunnelProvider {
            size: s.size,
            z: s.z_fe,
            flagged_smoothed: worse(a),
            flagged_stratified: worse(b),
        })
        .collect();
    Ok(Funnel {
        flagged_smoothed: providers.iter().filter(|p| p.flagged_smoothed).count(),
        flagged_stratified: providers.iter().filter(|p| p.flagged_stratified).count(),
        providers,
        thresholds,
        gamma0: model.variance.gamma0,
        gamma1: model.variance.gamma1,
    })
}

#[derive(Debug, Serialize)]
pub struct MseView {
    pub alpha: Vec<f64>,
    pub fe: Vec<f64>,
    pub re: Vec<f64>,
    pub crossing: f64,
    pub shrinkage: f64,
}

pub fn mse(sigma_alpha: f64, sigma_w: f64, n: f64, alpha_max: f64) -> Result<MseView> {
    if !(sigma_alpha > 0.0 && sigma_w > 0.0 && n > 0.0 && alpha_max > 0.0) {
        return Err(enprof::ProfilingError::InvalidParameter(
            "all inputs must be positive".into(),
        ));
    }
    let grid: Vec<f64> = (0..=200).map(|k| alpha_max * k as f64 / 200.0).collect();
    let c = conditional_mse_curves(sigma_alpha, sigma_w, n, &grid);
    Ok(MseView {
        alpha: c.alpha,
        fe: c.fe,
        re: c.re,
        crossing: mse_crossing(sigma_alpha, sigma_w, n),
        shrinkage: enprof::linear::shrinkage_factor(sigma_alpha, sigma_w, n),
    })
}

#[derive(Debug, Serialize)]
pub struct LambdaView {
    pub lambda: Vec<f64>,
    pub upper: Vec<f64>,
    pub iur: f64,
    /// Marginal threshold under the Beta prior, with its mean weight.
    pub prior_upper: f64,
    pub prior_mean: f64,
}

/// Upper thresholds of `N(mean, sd^2)` relaxed by lambda over [0, 1], plus
/// the marginal threshold under a Beta(a, b) prior.
pub fn lambda_curve(mean: f64, sd: f64, rho: f64, a: f64, b: f64, seed: u64) -> Result<LambdaView> {
    if sd.is_nan() || sd <= 0.0 {
        return Err(enprof::ProfilingError::DegenerateScale);
    }
    let null = NullParams::new(mean, sd);
    let r = iur_from_null_variance(null.variance());
    let lambda: Vec<f64> = (0..=50).map(|k| k as f64 / 50.0).collect();
    let upper = lambda.iter().map(|&l| relaxed_null(&null, r, l, rho).critical_upper).collect();
    let prior = LambdaPrior::Beta { a, b };
    prior.validate()?;
    let q = marginal_null_quantile(&null, r, &prior, rho, 20_000, seed)?;
    Ok(LambdaView {
        lambda,
        upper,
        iur: r,
        prior_upper: q.upper,
        prior_mean: prior.mean(),
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = funnelJson)]
pub fn funnel_json(n_providers: usize, groups: usize, strata: usize, rho: f64, seed: u64) -> std::result::Result<String, JsError> {
    to_js(funnel(n_providers, groups, strata, rho, seed))
}

#[wasm_bindgen(js_name = mseJson)]
pub fn mse_json(sigma_alpha: f64, sigma_w: f64, n: f64, alpha_max: f64) -> std::result::Result<String, JsError> {
    to_js(mse(sigma_alpha, sigma_w, n, alpha_max))
}

#[wasm_bindgen(js_name = lambdaJson)]
pub fn lambda_json(mean: f64, sd: f64, rho: f64, a: f64, b: f64, seed: u64) -> std::result::Result<String, JsError> {
    to_js(lambda_curve(mean, sd, rho, a, b, seed))
}
