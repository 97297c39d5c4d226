use enprof::lambda::{flag_with_lambda, LambdaConfig, LambdaPrior};
use enprof::linear::profile_linear;
use enprof::null_mle::MleFitConfig;
use enprof::simulation::{gen_linear_outliers, gen_survival, run_replications, survival_sizes, Method, Scenario};
use enprof::smoothed::{fit_smoothed_null, flag, provider_nulls, VARIANCE_FLOOR};
use enprof::survival::{smr_pipeline, SizeMeasure};
use enprof::{Decision, ProviderScore};
use proptest::prelude::*;

fn small_fig3(reps: usize, seed: u64) -> Scenario {
    let mut sc = Scenario::preset("fig3").unwrap();
    sc.replications = reps;
    sc.seed = seed;
    sc.focal_sizes = vec![25, 100];
    sc
}

#[test]
fn fe_curve_is_monotone_under_common_random_numbers() {
    let out = run_replications(&small_fig3(200, 3)).unwrap();
    for n in [25, 100] {
        let c = out.curve("FE", n);
        assert!(c.windows(2).all(|w| w[1].prob >= w[0].prob), "n={n}");
        assert!(c.last().unwrap().prob > 0.9);
    }
}

#[test]
fn fe_size_at_zero_effect_is_nominal() {
    let out = run_replications(&small_fig3(600, 5)).unwrap();
    for n in [25, 100] {
        let p0 = out.curve("FE", n)[0].prob;
        assert!((p0 - 0.05).abs() < 0.03, "n={n}: {p0}");
    }
}

#[test]
fn simulation_is_reproducible_and_seed_sensitive() {
    let a = run_replications(&small_fig3(30, 8)).unwrap();
    let b = run_replications(&small_fig3(30, 8)).unwrap();
    let c = run_replications(&small_fig3(30, 9)).unwrap();
    assert_eq!(a.curves, b.curves);
    assert_ne!(a.curves, c.curves);
}

#[test]
fn re_signals_less_than_fe_for_large_effects() {
    let out = run_replications(&small_fig3(200, 2)).unwrap();
    for (fe, re) in out.curve("FE", 25).iter().zip(out.curve("RE", 25)) {
        assert!(re.prob <= fe.prob + 1e-12, "alpha {}", fe.alpha1);
    }
}

#[test]
fn linear_profile_scores_are_consistent() {
    let mut sc = Scenario::preset("fig4").unwrap();
    sc.n_providers = 300;
    let ds = gen_linear_outliers(&sc, 80, 1.0, 4).unwrap();
    let prof = profile_linear(&ds).unwrap();
    let c = &prof.components;
    assert!((c.sigma_w - 4.0).abs() < 0.2, "sigma_w {}", c.sigma_w);
    for s in &prof.scores.scores {
        assert!((s.z_re - s.shrinkage.sqrt() * s.z_fe).abs() < 1e-12);
        let fere = (s.ybar - c.mu) / (c.sigma_alpha.powi(2) + c.sigma_w.powi(2) / s.n as f64).sqrt();
        assert!((s.z_fere - fere).abs() < 1e-12);
    }
}

#[test]
fn smr_pipeline_keeps_every_event() {
    let mut sc = Scenario::preset("fig5").unwrap();
    sc.n_providers = 150;
    let sizes = survival_sizes(&sc);
    let ds = gen_survival(&sc, &sizes, 17).unwrap();
    let res = smr_pipeline(&ds, 0.0).unwrap();
    let observed: u64 = res.scores.iter().map(|s| s.observed).sum();
    let expected: f64 = res.scores.iter().map(|s| s.expected).sum();
    assert_eq!(observed as usize, ds.event.iter().filter(|&&e| e).count());
    assert!((expected - observed as f64).abs() < 1e-8);
    assert!((res.cox.beta[0] - 1.0).abs() < 0.1 && (res.cox.beta[1] + 1.0).abs() < 0.1);

    let by_patients = res.provider_scores_by(SizeMeasure::Patients);
    for (s, p) in res.scores.iter().zip(&by_patients) {
        assert_eq!(p.size, s.patients as f64);
        assert_eq!(p.observed, Some(s.observed as f64));
    }
}

#[test]
fn survival_scenario_reports_every_lambda_and_tertile() {
    let mut sc = Scenario::preset("fig5c").unwrap();
    sc.n_providers = 300;
    sc.groups = Some(5);
    sc.replications = 3;
    sc.methods = vec![Method::Fe, Method::EnLambda, Method::EnSmoothed];
    let out = run_replications(&sc).unwrap();
    assert_eq!(out.failures, 0, "{:?}", out.failure_messages);
    for t in ["small", "medium", "large"] {
        assert!(out.rate("FE", 0.0, t).is_some());
        assert!(out.rate("EN_lambda", 0.5, t).is_some());
        assert!(out.rate("EN_lambda", 0.75, t).is_some());
        assert!(out.rate("EN_smoothed", 1.0, t).is_some());
    }
}

fn score_set(z: &[f64]) -> Vec<ProviderScore> {
    z.iter()
        .enumerate()
        .map(|(i, &v)| ProviderScore::new(format!("p{i}"), 10.0 + (i % 190) as f64, v))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn smoothed_nulls_respect_floor_and_flag_rule(
        z in prop::collection::vec(-4.0f64..4.0, 400..600),
        rho in 0.01f64..0.2,
    ) {
        let scores = score_set(&z);
        let model = fit_smoothed_null(&scores, 4, &MleFitConfig::default()).unwrap();
        let nulls = provider_nulls(&model, &scores);
        let reports = flag(&scores, &nulls, rho, true).unwrap();
        for (n, r) in nulls.iter().zip(&reports) {
            prop_assert!(n.variance() >= VARIANCE_FLOOR - 1e-12);
            prop_assert!(r.threshold_lower < r.threshold_upper);
            let expect = if r.z_fe > r.threshold_upper {
                Decision::Worse
            } else if r.z_fe < r.threshold_lower {
                Decision::Better
            } else {
                Decision::None
            };
            prop_assert_eq!(r.decision, expect);
        }
    }

    #[test]
    fn relaxed_thresholds_shrink_with_lambda(
        z in prop::collection::vec(-3.0f64..3.0, 300..400),
        l1 in 0.0f64..1.0,
        l2 in 0.0f64..1.0,
    ) {
        let (lo, hi) = if l1 < l2 { (l1, l2) } else { (l2, l1) };
        let scores = score_set(&z);
        let model = fit_smoothed_null(&scores, 3, &MleFitConfig::default()).unwrap();
        let nulls = provider_nulls(&model, &scores);
        let a = flag_with_lambda(&scores, &nulls, None, &LambdaConfig::fixed(lo), 0.05, false).unwrap();
        let b = flag_with_lambda(&scores, &nulls, None, &LambdaConfig::fixed(hi), 0.05, false).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.threshold_upper <= y.threshold_upper + 1e-12);
            // a provider flagged under the wider null stays flagged
            if y.decision == Decision::Worse {
                prop_assert_eq!(x.decision, Decision::Worse);
            }
        }
    }
}

#[test]
fn point_mass_prior_approximates_fixed_lambda() {
    let z: Vec<f64> = (0..400).map(|i| ((i * 37 % 101) as f64 - 50.0) / 18.0).collect();
    let scores = score_set(&z);
    let model = fit_smoothed_null(&scores, 4, &MleFitConfig::default()).unwrap();
    let nulls = provider_nulls(&model, &scores);
    let fixed = flag_with_lambda(&scores, &nulls, None, &LambdaConfig::fixed(0.3), 0.05, false).unwrap();
    let cfg = LambdaConfig::prior(LambdaPrior::PointMass { lambda: 0.3 }, 20_000, 1);
    let prior = flag_with_lambda(&scores, &nulls, None, &cfg, 0.05, false).unwrap();
    // Monte Carlo quantile error is about 0.015 sd at 20k draws
    for (a, b) in fixed.iter().zip(&prior).step_by(25) {
        let tol = 0.06 * a.null_sd_effective;
        assert!((a.threshold_upper - b.threshold_upper).abs() < tol, "{} vs {}", a.threshold_upper, b.threshold_upper);
        assert_eq!(b.lambda, 0.3);
    }
}
