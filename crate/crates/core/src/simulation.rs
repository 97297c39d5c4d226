//! Seeded scenario generators and a replication engine for operating
//! characteristics: signal probabilities of one provider as its effect
//! grows (linear scenarios) and per-size-tertile flag rates (survival).
//!
//! Replication `r` draws from its own stream seeded by
//! `derive_seed(seed, r)`, so replications may run in any order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Exp, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ProfilingError, Result};
use crate::lambda::{flag_with_lambda, LambdaConfig};
use crate::linear::{score_triplet, variance_components_from_summary, OneWaySummary};
use crate::null_mle::MleFitConfig;
use crate::smoothed::{default_group_count, fit_smoothed_null, flag, provider_nulls, stratified_nulls};
use crate::stats::{derive_seed, upper_quantile};
use crate::survival::{smr_pipeline, SizeMeasure};
use crate::types::{
    Decision, FlagReport, LinearDataset, NullParams, ProviderIndex, ProviderScore, SurvivalDataset,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    LinearEqualN,
    LinearOutliers,
    SurvivalSmr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FE")]
    Fe,
    #[serde(rename = "RE")]
    Re,
    #[serde(rename = "FERE")]
    Fere,
    #[serde(rename = "EN_stratified")]
    EnStratified,
    #[serde(rename = "EN_smoothed")]
    EnSmoothed,
    #[serde(rename = "EN_lambda")]
    EnLambda,
    /// Known-variance reference: FERE with the true sigma_alpha, sigma_w.
    #[serde(rename = "Oracle")]
    Oracle,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Fe => "FE",
            Method::Re => "RE",
            Method::Fere => "FERE",
            Method::EnStratified => "EN_stratified",
            Method::EnSmoothed => "EN_smoothed",
            Method::EnLambda => "EN_lambda",
            Method::Oracle => "Oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        [
            Method::Fe,
            Method::Re,
            Method::Fere,
            Method::EnStratified,
            Method::EnSmoothed,
            Method::EnLambda,
            Method::Oracle,
        ]
        .into_iter()
        .find(|m| m.label().eq_ignore_ascii_case(s.trim()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub kind: ScenarioKind,
    pub n_providers: usize,
    /// Common size per run (equal-n) or provider 1's size (outliers); one
    /// curve set per entry. Unused for survival.
    pub focal_sizes: Vec<usize>,
    /// Inclusive integer size range for randomly sized providers.
    pub size_min: usize,
    pub size_max: usize,
    pub mu: f64,
    pub sigma_alpha: f64,
    pub sigma_w: f64,
    pub alpha_grid: Vec<f64>,
    pub outlier_fraction: f64,
    /// Outlier effects are +/- this multiple of sigma_alpha.
    pub outlier_multiplier: f64,
    pub base_hazard: f64,
    pub beta: Vec<f64>,
    pub censor_min: f64,
    pub censor_max: f64,
    pub min_expected: f64,
    /// Size attached to SMR scores (survival scenarios).
    pub size_measure: SizeMeasure,
    /// Smoothing groups; `None` uses the default for the provider count.
    pub groups: Option<usize>,
    pub strata: usize,
    pub zeta0: f64,
    pub lambdas: Vec<f64>,
    pub rho: f64,
    pub replications: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
}

fn default_alpha_grid() -> Vec<f64> {
    (0..=14).map(|k| 0.25 * k as f64).collect()
}

impl Scenario {
    /// `fig3`: equal sizes, no outliers. `fig4`: random sizes, 5% outliers.
    /// `fig5` (alias `fig5c`): survival outcomes with lambda sweep.
    pub fn preset(name: &str) -> Result<Scenario> {
        let linear = Scenario {
            name: name.to_owned(),
            kind: ScenarioKind::LinearEqualN,
            n_providers: 200,
            focal_sizes: vec![10, 25, 50, 100],
            size_min: 10,
            size_max: 150,
            mu: 0.0,
            sigma_alpha: 1.0,
            sigma_w: 4.0,
            alpha_grid: default_alpha_grid(),
            outlier_fraction: 0.0,
            outlier_multiplier: 4.0,
            base_hazard: 0.1,
            beta: vec![1.0, -1.0],
            censor_min: 10.0,
            censor_max: 30.0,
            min_expected: 3.0,
            size_measure: SizeMeasure::Patients,
            groups: None,
            strata: 1,
            zeta0: 1.64,
            lambdas: vec![1.0],
            rho: 0.05,
            replications: 1000,
            seed: 1,
            methods: vec![Method::Fe, Method::Re, Method::Fere, Method::EnStratified],
        };
        match name {
            "fig3" => Ok(linear),
            "fig4" => Ok(Scenario {
                kind: ScenarioKind::LinearOutliers,
                n_providers: 3000,
                focal_sizes: vec![25, 50, 100, 125],
                outlier_fraction: 0.05,
                strata: 3,
                methods: vec![
                    Method::Fe,
                    Method::Re,
                    Method::Fere,
                    Method::EnSmoothed,
                    Method::Oracle,
                ],
                ..linear
            }),
            "fig5" | "fig5c" => Ok(Scenario {
                kind: ScenarioKind::SurvivalSmr,
                n_providers: 2000,
                focal_sizes: vec![],
                size_min: 10,
                size_max: 200,
                sigma_alpha: 0.2,
                alpha_grid: vec![],
                groups: Some(20),
                strata: 3,
                lambdas: vec![0.0, 0.5, 0.75, 1.0],
                replications: 500,
                methods: vec![Method::Fe, Method::EnLambda, Method::EnSmoothed, Method::EnStratified],
                ..linear
            }),
            other => Err(ProfilingError::InvalidParameter(format!(
                "unknown preset '{other}' (expected fig3, fig4, fig5 or fig5c)"
            ))),
        }
    }

    /// Applies one `key=value` override. List values are comma separated.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || ProfilingError::InvalidParameter(format!("bad value '{value}' for '{key}'"));
        let f = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let u = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        let list_f = |v: &str| -> Result<Vec<f64>> {
            if v.trim().is_empty() {
                return Ok(vec![]);
            }
            v.split(',').map(f).collect()
        };
        match key.trim() {
            "name" => self.name = value.to_owned(),
            "kind" => {
                self.kind = serde_json::from_value(serde_json::Value::String(value.trim().to_owned()))
                    .map_err(|_| bad())?
            }
            "n_providers" => self.n_providers = u(value)?,
            "focal_sizes" | "n" => self.focal_sizes = value.split(',').map(u).collect::<Result<_>>()?,
            "size_min" => self.size_min = u(value)?,
            "size_max" => self.size_max = u(value)?,
            "mu" => self.mu = f(value)?,
            "sigma_alpha" => self.sigma_alpha = f(value)?,
            "sigma_w" => self.sigma_w = f(value)?,
            "alpha_grid" => self.alpha_grid = list_f(value)?,
            "outlier_fraction" => self.outlier_fraction = f(value)?,
            "outlier_multiplier" => self.outlier_multiplier = f(value)?,
            "base_hazard" => self.base_hazard = f(value)?,
            "beta" => self.beta = list_f(value)?,
            "censor_min" => self.censor_min = f(value)?,
            "censor_max" => self.censor_max = f(value)?,
            "min_expected" => self.min_expected = f(value)?,
            "size_measure" => self.size_measure = value.parse()?,
            "groups" => {
                self.groups = match value.trim() {
                    "" | "auto" => None,
                    v => Some(u(v)?),
                }
            }
            "strata" => self.strata = u(value)?,
            "zeta0" => self.zeta0 = f(value)?,
            "lambdas" | "lambda" => self.lambdas = list_f(value)?,
            "rho" => self.rho = f(value)?,
            "replications" => self.replications = u(value)?,
            "seed" => self.seed = value.trim().parse().map_err(|_| bad())?,
            "methods" => {
                self.methods = value
                    .split(',')
                    .map(|m| Method::parse(m).ok_or_else(bad))
                    .collect::<Result<_>>()?
            }
            other => {
                return Err(ProfilingError::InvalidParameter(format!(
                    "unknown scenario key '{other}'"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ProfilingError::InvalidParameter(m.to_owned()));
        if self.replications == 0 {
            return bad("replications must be positive");
        }
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        if !(self.rho > 0.0 && self.rho < 0.5) {
            return bad("rho must lie in (0, 0.5)");
        }
        if self.n_providers < 20 {
            return bad("at least 20 providers are required");
        }
        if !(self.sigma_alpha >= 0.0) || !(self.zeta0 > 0.0) {
            return bad("sigma_alpha must be nonnegative and zeta0 positive");
        }
        if self.size_min == 0 || self.size_max < self.size_min {
            return bad("size range must satisfy 1 <= size_min <= size_max");
        }
        if self.strata == 0 {
            return bad("strata must be positive");
        }
        if self.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad("lambdas must lie in [0, 1]");
        }
        match self.kind {
            ScenarioKind::LinearEqualN | ScenarioKind::LinearOutliers => {
                if !(self.sigma_w > 0.0) {
                    return bad("sigma_w must be positive");
                }
                if self.focal_sizes.is_empty() || self.focal_sizes.iter().any(|&n| n < 2) {
                    return bad("focal sizes must be nonempty and at least 2");
                }
                if self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !a.is_finite()) {
                    return bad("alpha grid must be nonempty and finite");
                }
                if !(0.0..0.5).contains(&self.outlier_fraction) {
                    return bad("outlier fraction must lie in [0, 0.5)");
                }
            }
            ScenarioKind::SurvivalSmr => {
                if !(self.base_hazard > 0.0) || !(self.censor_min > 0.0 && self.censor_max >= self.censor_min)
                {
                    return bad("hazard and censoring window must be positive");
                }
                if self.lambdas.is_empty() {
                    return bad("survival scenarios need at least one lambda");
                }
            }
        }
        Ok(())
    }

    fn mle_config(&self) -> MleFitConfig {
        MleFitConfig {
            zeta0: self.zeta0,
            ..MleFitConfig::default()
        }
    }

    fn group_count(&self, n: usize) -> usize {
        self.groups.unwrap_or_else(|| default_group_count(n))
    }

    fn has(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }
}

fn provider_index(n: usize) -> ProviderIndex {
    let mut idx = ProviderIndex::new();
    for i in 0..n {
        idx.intern(&provider_label(i));
    }
    idx
}

fn provider_label(i: usize) -> String {
    format!("P{}", i + 1)
}

/// Provider sizes and effects for a linear scenario, with provider 1's
/// effect left at zero.
struct LinearDesign {
    sizes: Vec<usize>,
    alpha: Vec<f64>,
}

fn linear_design<R: Rng>(sc: &Scenario, focal: usize, rng: &mut R) -> LinearDesign {
    let n = sc.n_providers;
    let sizes: Vec<usize> = match sc.kind {
        ScenarioKind::LinearEqualN => vec![focal; n],
        _ => {
            let u = Uniform::new_inclusive(sc.size_min, sc.size_max).expect("validated size range");
            std::iter::once(focal).chain((1..n).map(|_| u.sample(rng))).collect()
        }
    };
    let n_out = match sc.kind {
        ScenarioKind::LinearOutliers => (sc.outlier_fraction * n as f64).round() as usize,
        _ => 0,
    }
    .min(n - 1);
    let mut alpha = vec![0.0; n];
    for (i, a) in alpha.iter_mut().enumerate().skip(1) {
        let z: f64 = rng.sample(StandardNormal);
        *a = sc.sigma_alpha * z;
        // the last n_out providers are outliers, alternating in sign
        if i >= n - n_out {
            let k = i - (n - n_out);
            let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
            *a = sign * sc.outlier_multiplier * sc.sigma_alpha;
        }
    }
    LinearDesign { sizes, alpha }
}

/// Number of outlying providers and their (+, -) split.
pub fn outlier_counts(sc: &Scenario) -> (usize, usize, usize) {
    let n_out = (sc.outlier_fraction * sc.n_providers as f64).round() as usize;
    let n_out = n_out.min(sc.n_providers.saturating_sub(1));
    (n_out, n_out.div_ceil(2), n_out / 2)
}

fn gen_linear(sc: &Scenario, focal: usize, alpha1: f64, seed: u64) -> Result<LinearDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let design = linear_design(sc, focal, &mut rng);
    let total: usize = design.sizes.iter().sum();
    let mut provider_of = Vec::with_capacity(total);
    let mut outcomes = Vec::with_capacity(total);
    for (i, &ni) in design.sizes.iter().enumerate() {
        let a = if i == 0 { alpha1 } else { design.alpha[i] };
        for _ in 0..ni {
            let e: f64 = rng.sample(StandardNormal);
            provider_of.push(i);
            outcomes.push(sc.mu + a + sc.sigma_w * e);
        }
    }
    LinearDataset::from_columns(provider_index(sc.n_providers), provider_of, outcomes, vec![], 0)
}

/// Equal-size linear data, provider 1 with effect `alpha1`.
pub fn gen_linear_equal_n(sc: &Scenario, n: usize, alpha1: f64, seed: u64) -> Result<LinearDataset> {
    let mut s = sc.clone();
    s.kind = ScenarioKind::LinearEqualN;
    gen_linear(&s, n, alpha1, seed)
}

/// Randomly sized linear data with outlying providers; provider 1 has
/// size `n1` and effect `alpha1`.
pub fn gen_linear_outliers(sc: &Scenario, n1: usize, alpha1: f64, seed: u64) -> Result<LinearDataset> {
    let mut s = sc.clone();
    s.kind = ScenarioKind::LinearOutliers;
    gen_linear(&s, n1, alpha1, seed)
}

/// Draws provider means and the pooled within sum of squares directly from
/// their sampling distributions (same law as summarizing
/// patient-level data from [`gen_linear`]). Provider 1's effect is zero.
fn gen_linear_summary(sc: &Scenario, focal: usize, seed: u64) -> OneWaySummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let design = linear_design(sc, focal, &mut rng);
    let ybar = design
        .sizes
        .iter()
        .zip(&design.alpha)
        .map(|(&ni, a)| {
            let e: f64 = rng.sample(StandardNormal);
            sc.mu + a + sc.sigma_w / (ni as f64).sqrt() * e
        })
        .collect();
    let df = design.sizes.iter().sum::<usize>() - design.sizes.len();
    let chi = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    OneWaySummary {
        sizes: design.sizes,
        ybar,
        ssw: sc.sigma_w * sc.sigma_w * chi.sample(&mut rng),
    }
}

/// Provider sizes for a survival scenario, drawn once from the base seed.
pub fn survival_sizes(sc: &Scenario) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sc.seed, u64::MAX));
    let u = Uniform::new_inclusive(sc.size_min, sc.size_max).expect("validated size range");
    (0..sc.n_providers).map(|_| u.sample(&mut rng)).collect()
}

/// Exponential survival with hazard `h0 exp(alpha_i + beta' X)`, standard
/// normal covariates and uniform censoring.
pub fn gen_survival(sc: &Scenario, sizes: &[usize], seed: u64) -> Result<SurvivalDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = sc.beta.len();
    let total: usize = sizes.iter().sum();
    let mut provider_of = Vec::with_capacity(total);
    let mut time = Vec::with_capacity(total);
    let mut event = Vec::with_capacity(total);
    let mut covariates = Vec::with_capacity(total * p);
    let censor = Uniform::new_inclusive(sc.censor_min, sc.censor_max)
        .map_err(|e| ProfilingError::InvalidParameter(e.to_string()))?;
    let unit = Exp::new(1.0).expect("unit rate");
    for (i, &ni) in sizes.iter().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        let a = sc.sigma_alpha * z;
        for _ in 0..ni {
            let mut eta = a;
            for b in &sc.beta {
                let x: f64 = rng.sample(StandardNormal);
                covariates.push(x);
                eta += b * x;
            }
            let t = unit.sample(&mut rng) / (sc.base_hazard * eta.exp());
            let c = censor.sample(&mut rng);
            provider_of.push(i);
            time.push(t.min(c));
            event.push(t <= c);
        }
    }
    SurvivalDataset::from_columns(provider_index(sizes.len()), provider_of, time, event, covariates, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub n: usize,
    pub alpha1: f64,
    pub prob: f64,
    pub se: f64,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataRate {
    pub method: String,
    pub lambda: f64,
    pub stratum: String,
    pub rate: f64,
    pub se: f64,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    pub scenario: Scenario,
    pub curves: Vec<CurvePoint>,
    pub strata: Vec<StrataRate>,
    pub failures: usize,
    /// First few failure messages.
    pub failure_messages: Vec<String>,
}

impl SimulationOutput {
    pub fn curve(&self, method: &str, n: usize) -> Vec<&CurvePoint> {
        self.curves.iter().filter(|c| c.method == method && c.n == n).collect()
    }

    pub fn rate(&self, method: &str, lambda: f64, stratum: &str) -> Option<&StrataRate> {
        self.strata
            .iter()
            .find(|s| s.method == method && s.lambda == lambda && s.stratum == stratum)
    }
}

pub fn run_replications(sc: &Scenario) -> Result<SimulationOutput> {
    sc.validate()?;
    match sc.kind {
        ScenarioKind::SurvivalSmr => run_survival(sc),
        _ => run_linear(sc),
    }
}

const KEEP_MESSAGES: usize = 5;

/// Signal indicators of provider 1 per (method, focal size, alpha).
type LinearRep = Vec<Vec<Vec<bool>>>;

fn linear_methods(sc: &Scenario) -> Vec<Method> {
    let all = [
        Method::Fe,
        Method::Re,
        Method::Fere,
        Method::EnStratified,
        Method::EnSmoothed,
        Method::Oracle,
    ];
    all.into_iter().filter(|m| sc.has(*m)).collect()
}

fn linear_replication(sc: &Scenario, methods: &[Method], rep: u64) -> Result<LinearRep> {
    let zr = upper_quantile(sc.rho);
    let cfg = sc.mle_config();
    let rep_seed = derive_seed(sc.seed, rep);
    let mut out = vec![vec![Vec::with_capacity(sc.alpha_grid.len()); sc.focal_sizes.len()]; methods.len()];
    for (k, &focal) in sc.focal_sizes.iter().enumerate() {
        let base = gen_linear_summary(sc, focal, derive_seed(rep_seed, k as u64));
        let mut scores: Vec<ProviderScore> = (0..sc.n_providers)
            .map(|i| ProviderScore::new(provider_label(i), base.sizes[i] as f64, 0.0))
            .collect();
        for &a1 in &sc.alpha_grid {
            let mut s = base.clone();
            s.ybar[0] += a1;
            let comps = variance_components_from_summary(&s)?;
            for (sc_i, (&ni, &yb)) in scores.iter_mut().zip(s.sizes.iter().zip(&s.ybar)) {
                sc_i.z_fe = score_triplet(ni as f64, yb, &comps).z_fe;
            }
            let n1 = focal as f64;
            let t = score_triplet(n1, s.ybar[0], &comps);
            for (m, method) in methods.iter().enumerate() {
                let upper = match method {
                    Method::Fe | Method::Re | Method::Fere | Method::Oracle => zr,
                    Method::EnStratified => {
                        let st = stratified_nulls(&scores, sc.strata, &cfg)?;
                        let nl = st.nulls[0];
                        nl.mean + zr * nl.sd
                    }
                    Method::EnSmoothed => {
                        let model = fit_smoothed_null(&scores, sc.group_count(sc.n_providers), &cfg)?;
                        let nl = model.null_at(n1);
                        nl.mean + zr * nl.sd
                    }
                    Method::EnLambda => unreachable!("not a linear method"),
                };
                let z = match method {
                    Method::Fe | Method::EnStratified | Method::EnSmoothed => t.z_fe,
                    Method::Re => t.z_re,
                    Method::Fere => t.z_fere,
                    Method::Oracle => {
                        let (sa, sw) = (sc.sigma_alpha, sc.sigma_w);
                        (s.ybar[0] - comps.mu) / (sa * sa + sw * sw / n1).sqrt()
                    }
                    Method::EnLambda => unreachable!(),
                };
                out[m][k].push(FlagReport::decide(z, upper, f64::NEG_INFINITY, false) == Decision::Worse);
            }
        }
    }
    Ok(out)
}

fn collect_failures<T>(results: Vec<Result<T>>) -> (Vec<T>, usize, Vec<String>) {
    let mut ok = Vec::with_capacity(results.len());
    let mut failures = 0;
    let mut messages = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failures += 1;
                if messages.len() < KEEP_MESSAGES {
                    messages.push(e.to_string());
                }
            }
        }
    }
    (ok, failures, messages)
}

fn run_linear(sc: &Scenario) -> Result<SimulationOutput> {
    let methods = linear_methods(sc);
    if methods.is_empty() {
        return Err(ProfilingError::InvalidParameter(
            "no method applicable to a linear scenario".into(),
        ));
    }
    let results: Vec<Result<LinearRep>> = (0..sc.replications as u64)
        .into_par_iter()
        .map(|r| linear_replication(sc, &methods, r))
        .collect();
    let (reps, failures, failure_messages) = collect_failures(results);
    let used = reps.len();
    let mut curves = Vec::new();
    for (m, method) in methods.iter().enumerate() {
        for (k, &n) in sc.focal_sizes.iter().enumerate() {
            for (a, &alpha1) in sc.alpha_grid.iter().enumerate() {
                let hits = reps.iter().filter(|r| r[m][k][a]).count();
                let prob = if used > 0 { hits as f64 / used as f64 } else { f64::NAN };
                curves.push(CurvePoint {
                    method: method.label().to_owned(),
                    n,
                    alpha1,
                    prob,
                    se: (prob * (1.0 - prob) / used as f64).sqrt(),
                    replications: used,
                });
            }
        }
    }
    Ok(SimulationOutput {
        scenario: sc.clone(),
        curves,
        strata: vec![],
        failures,
        failure_messages,
    })
}

pub const TERTILE_LABELS: [&str; 3] = ["small", "medium", "large"];

/// Tertile (0, 1, 2) of each provider by patient count, ties broken by
/// provider order.
pub fn size_tertiles(sizes: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| (sizes[i], i));
    let n = sizes.len();
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = (rank * 3 / n).min(2);
    }
    out
}

/// Row key of a survival rate table: (method, lambda).
fn survival_rows(sc: &Scenario) -> Vec<(Method, f64)> {
    let mut rows = Vec::new();
    for &l in &sc.lambdas {
        if l == 0.0 && sc.has(Method::Fe) {
            rows.push((Method::Fe, 0.0));
        } else if l == 1.0 && sc.has(Method::EnSmoothed) {
            rows.push((Method::EnSmoothed, 1.0));
        } else if l > 0.0 && l < 1.0 && sc.has(Method::EnLambda) {
            rows.push((Method::EnLambda, l));
        }
    }
    if sc.has(Method::EnStratified) {
        rows.push((Method::EnStratified, 1.0));
    }
    rows
}

/// Per row and tertile: (flagged, scored) for one replication.
type SurvivalRep = Vec<[(usize, usize); 3]>;

fn survival_replication(
    sc: &Scenario,
    rows: &[(Method, f64)],
    sizes: &[usize],
    tertile: &[usize],
    rep: u64,
) -> Result<SurvivalRep> {
    let ds = gen_survival(sc, sizes, derive_seed(sc.seed, rep))?;
    let smr = smr_pipeline(&ds, sc.min_expected)?;
    let scores = smr.provider_scores_by(sc.size_measure);
    let cfg = sc.mle_config();
    let needs_smooth = rows.iter().any(|(m, _)| matches!(m, Method::EnSmoothed | Method::EnLambda));
    let nulls: Vec<NullParams> = if needs_smooth {
        let model = fit_smoothed_null(&scores, sc.group_count(scores.len()), &cfg)?;
        provider_nulls(&model, &scores)
    } else {
        vec![]
    };
    let tert: Vec<usize> = scores
        .iter()
        .map(|s| tertile[ds.providers.get(&s.provider_id).expect("provider from dataset")])
        .collect();
    let mut out = Vec::with_capacity(rows.len());
    for &(method, lambda) in rows {
        let reports = match method {
            Method::Fe => flag(&scores, &vec![NullParams::standard(); scores.len()], sc.rho, false)?,
            Method::EnSmoothed => flag(&scores, &nulls, sc.rho, false)?,
            Method::EnLambda => {
                flag_with_lambda(&scores, &nulls, None, &LambdaConfig::fixed(lambda), sc.rho, false)?
            }
            Method::EnStratified => {
                let st = stratified_nulls(&scores, sc.strata, &cfg)?;
                flag(&scores, &st.nulls, sc.rho, false)?
            }
            _ => unreachable!("not a survival method"),
        };
        let mut cell = [(0usize, 0usize); 3];
        for (r, &t) in reports.iter().zip(&tert) {
            cell[t].1 += 1;
            cell[t].0 += usize::from(r.decision == Decision::Worse);
        }
        out.push(cell);
    }
    Ok(out)
}

fn run_survival(sc: &Scenario) -> Result<SimulationOutput> {
    let rows = survival_rows(sc);
    if rows.is_empty() {
        return Err(ProfilingError::InvalidParameter(
            "no method applicable to a survival scenario".into(),
        ));
    }
    let sizes = survival_sizes(sc);
    let tertile = size_tertiles(&sizes);
    let results: Vec<Result<SurvivalRep>> = (0..sc.replications as u64)
        .into_par_iter()
        .map(|r| survival_replication(sc, &rows, &sizes, &tertile, r))
        .collect();
    let (reps, failures, failure_messages) = collect_failures(results);
    let used = reps.len();
    let mut strata = Vec::new();
    for (k, &(method, lambda)) in rows.iter().enumerate() {
        for (t, label) in TERTILE_LABELS.iter().enumerate() {
            // per-replication rates; the SE is across replications
            let rates: Vec<f64> = reps
                .iter()
                .filter(|r| r[k][t].1 > 0)
                .map(|r| r[k][t].0 as f64 / r[k][t].1 as f64)
                .collect();
            let m = rates.len() as f64;
            let rate = rates.iter().sum::<f64>() / m;
            let var = if rates.len() > 1 {
                rates.iter().map(|x| (x - rate).powi(2)).sum::<f64>() / (m - 1.0)
            } else {
                f64::NAN
            };
            strata.push(StrataRate {
                method: method.label().to_owned(),
                lambda,
                stratum: label.to_string(),
                rate,
                se: (var / m).sqrt(),
                replications: used,
            });
        }
    }
    Ok(SimulationOutput {
        scenario: sc.clone(),
        curves: vec![],
        strata,
        failures,
        failure_messages,
    })
}
