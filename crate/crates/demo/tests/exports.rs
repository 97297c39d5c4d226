use enprof_demo::{funnel, funnel_json, lambda_curve, mse, mse_json};

#[test]
fn funnel_thresholds_cover_every_size() {
    let f = funnel(400, 5, 3, 0.05, 3).unwrap();
    assert!(f.providers.len() > 300);
    let sizes: Vec<f64> = f.thresholds.iter().map(|t| t.size).collect();
    assert!(sizes.windows(2).all(|w| w[0] < w[1]));
    for p in &f.providers {
        assert!(sizes.binary_search_by(|s| s.total_cmp(&p.size)).is_ok());
    }
    // three strata give at most three distinct stratified thresholds
    let mut strat: Vec<f64> = f.thresholds.iter().map(|t| t.stratified).collect();
    strat.dedup();
    assert!(strat.len() <= 3);
    assert_eq!(
        f.flagged_smoothed,
        f.providers.iter().filter(|p| p.flagged_smoothed).count()
    );
}

#[test]
fn funnel_json_is_parseable() {
    let text = funnel_json(300, 4, 3, 0.05, 1).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["providers"].as_array().unwrap().len() > 200);
    assert!(v["gamma1"].is_number());
}

#[test]
fn mse_curves_cross_at_reported_point() {
    let m = mse(1.0, 4.0, 25.0, 4.0).unwrap();
    assert_eq!(m.alpha.len(), 201);
    let k = m.alpha.iter().position(|&a| a >= m.crossing).unwrap();
    assert!(m.re[k - 1] <= m.fe[k - 1] + 1e-12);
    assert!(m.re[k] >= m.fe[k] - 1e-12);
    assert!((m.shrinkage - 1.0 / (1.0 + 16.0 / 25.0)).abs() < 1e-12);
    let v: serde_json::Value = serde_json::from_str(&mse_json(1.0, 4.0, 25.0, 4.0).unwrap()).unwrap();
    assert_eq!(v["fe"].as_array().unwrap().len(), 201);
}

#[test]
fn lambda_curve_spans_wald_to_empirical_threshold() {
    let v = lambda_curve(0.2, 2.0, 0.05, 2.0, 2.0, 7).unwrap();
    let zr = 1.6448536269514722;
    assert!((v.upper[0] - (0.2 + zr)).abs() < 1e-9);
    assert!((v.upper[50] - (0.2 + 2.0 * zr)).abs() < 1e-9);
    assert!(v.upper.windows(2).all(|w| w[1] >= w[0]));
    assert!(v.prior_upper > v.upper[0] && v.prior_upper < v.upper[50]);
    assert_eq!(v.prior_mean, 0.5);
}

#[test]
fn invalid_inputs_are_errors() {
    assert!(mse(0.0, 4.0, 25.0, 4.0).is_err());
    assert!(lambda_curve(0.0, 0.0, 0.05, 1.0, 1.0, 1).is_err());
    assert!(lambda_curve(0.0, 1.5, 0.05, -1.0, 1.0, 1).is_err());
}
