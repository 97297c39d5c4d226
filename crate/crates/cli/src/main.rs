//! `enprof`: batch front end for empirical-null provider profiling.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use enprof::io::{self, write_csv_file, write_json_file};
use enprof::lambda::{flag_with_lambda, iur_linear, LambdaConfig, LambdaPrior, DEFAULT_DRAWS};
use enprof::linear::profile_linear;
use enprof::null_mle::MleFitConfig;
use enprof::simulation::{run_replications, Scenario};
use enprof::smoothed::{
    default_group_count, fit_smoothed_null, flag, funnel_points, provider_nulls, stratified_nulls,
};
use enprof::survival::{smr_pipeline, SizeMeasure, DEFAULT_MIN_EXPECTED};
use enprof::{
    FlagReport, LinearDataset, NullParams, ProfilingError, ProviderScore, SurvivalDataset,
};

#[derive(Parser, Debug)]
#[command(name = "enprof", version, about = "Provider profiling against empirical null distributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Linear outcomes: `provider_id,y,x1..xp`.
    ProfileLinear(ProfileArgs),
    /// Survival outcomes: `provider_id,time,status,x1..xp`.
    ProfileSmr(SmrArgs),
    /// Precomputed scores: `provider_id,size,z`.
    ProfileZ(ProfileArgs),
    /// Monte Carlo study from a preset and/or scenario file.
    Simulate(SimArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Random seed; every random draw derives from it.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ProfileArgs {
    #[arg(long)]
    input: PathBuf,
    /// One-sided flagging level.
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    /// Also flag better-than-expected providers.
    #[arg(long)]
    two_sided: bool,
    /// Size groups for the smoothed null (default grows with provider count).
    #[arg(long, conflicts_with = "strata")]
    groups: Option<usize>,
    /// Use a piecewise-constant null over this many size strata instead.
    #[arg(long)]
    strata: Option<usize>,
    /// Half-width of the null interval in initial-scale units.
    #[arg(long, default_value_t = 1.64)]
    zeta0: f64,
    /// Fixed relaxation weight in [0, 1].
    #[arg(long, conflicts_with = "lambda_prior")]
    lambda: Option<f64>,
    /// Prior on the relaxation weight: `beta:a,b` or `point:x`.
    #[arg(long)]
    lambda_prior: Option<String>,
    /// Monte Carlo draws for the marginal null under a prior.
    #[arg(long, default_value_t = DEFAULT_DRAWS)]
    draws: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SmrArgs {
    #[command(flatten)]
    profile: ProfileArgs,
    /// Providers with fewer expected events are excluded.
    #[arg(long, default_value_t = DEFAULT_MIN_EXPECTED)]
    min_expected: f64,
    /// Size attached to each provider: `patient_years` or `patients`.
    #[arg(long, default_value = "patient_years")]
    size_measure: String,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SimArgs {
    /// fig3, fig4, fig5 or fig5c.
    #[arg(long)]
    preset: Option<String>,
    /// Scenario file: `key=value` lines or a JSON object. A `preset` key
    /// selects the starting point.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the scenario replication count.
    #[arg(long)]
    replications: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Model(ProfilingError),
}

impl From<ProfilingError> for CliError {
    fn from(e: ProfilingError) -> Self {
        CliError::Model(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Model(e.into())
    }
}

impl CliError {
    fn record(&self) -> Value {
        match self {
            CliError::Usage(m) => json!({ "error": { "kind": "usage", "message": m } }),
            CliError::Model(e) => json!({
                "error": { "kind": e.kind(), "message": e.to_string(), "row": e.row() }
            }),
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Model(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct LinearScoreRow<'a> {
    provider_id: &'a str,
    n: usize,
    ybar: f64,
    z_fe: f64,
    z_re: f64,
    z_fere: f64,
    #[serde(rename = "R")]
    r: f64,
}

#[derive(Serialize)]
struct SmrRow<'a> {
    provider_id: &'a str,
    patient_years: f64,
    observed: u64,
    expected: f64,
    smr: f64,
    mid_p: f64,
    z_fe: f64,
}

#[derive(Serialize)]
struct ExcludedRow<'a> {
    provider_id: &'a str,
    expected: f64,
}

/// Collects written artifacts for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_owned(),
            files: Vec::new(),
        })
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CliResult<()> {
        write_csv_file(&self.dir.join(name), rows)?;
        self.files.push(name.to_owned());
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> CliResult<()> {
        write_json_file(&self.dir.join(name), value)?;
        self.files.push(name.to_owned());
        Ok(())
    }

    fn manifest(&mut self, command: &str, config: Value, inputs: &[PathBuf], summary: Value) -> CliResult<()> {
        let inputs: Vec<Value> = inputs.iter().map(|p| file_digest(p)).collect::<CliResult<_>>()?;
        let mut outputs = self.files.clone();
        outputs.push("manifest.json".into());
        let doc = json!({
            "tool": "enprof",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "argv": std::env::args().collect::<Vec<_>>(),
            "config": config,
            "inputs": inputs,
            "outputs": outputs,
            "summary": summary,
        });
        write_json_file(&self.dir.join("manifest.json"), &doc)?;
        Ok(())
    }
}

fn file_digest(path: &Path) -> CliResult<Value> {
    let bytes = fs::read(path)?;
    Ok(json!({
        "path": path.display().to_string(),
        "bytes": bytes.len(),
        "sha256": format!("{:x}", Sha256::digest(&bytes)),
    }))
}

fn check_input(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input file {} does not exist", path.display())))
    }
}

fn lambda_config(a: &ProfileArgs) -> CliResult<Option<LambdaConfig>> {
    let cfg = match (&a.lambda, &a.lambda_prior) {
        (Some(l), _) => LambdaConfig::fixed(*l),
        (None, Some(p)) => {
            let prior: LambdaPrior = p.parse()?;
            LambdaConfig::prior(prior, a.draws, a.common.seed)
        }
        (None, None) => return Ok(None),
    };
    cfg.validate()?;
    Ok(Some(cfg))
}

/// Fits the null model, flags, and writes the shared profiling artifacts.
fn profile_scores(
    a: &ProfileArgs,
    scores: &[ProviderScore],
    iur: Option<&[f64]>,
    out: &mut Outputs,
) -> CliResult<Value> {
    if !(a.rho > 0.0 && a.rho < 0.5) {
        return Err(CliError::Usage(format!("--rho must lie in (0, 0.5), got {}", a.rho)));
    }
    let lambda = lambda_config(a)?;
    let mle = MleFitConfig {
        zeta0: a.zeta0,
        ..MleFitConfig::default()
    };
    mle.validate()?;
    let (nulls, model_doc): (Vec<NullParams>, Value) = match a.strata {
        Some(k) => {
            let st = stratified_nulls(scores, k, &mle)?;
            let groups: Vec<Value> = st
                .groups
                .iter()
                .map(|g| {
                    let f = g.fit.as_ref().expect("stratum fitted");
                    json!({
                        "index": g.index,
                        "count": g.count(),
                        "median_size": g.median_size,
                        "mean": f.null.mean,
                        "sd": f.null.sd,
                        "null_prop": f.null.null_prop,
                        "interval": [f.interval.0, f.interval.1],
                    })
                })
                .collect();
            (st.nulls, json!({ "kind": "stratified", "strata": groups }))
        }
        None => {
            let g = a.groups.unwrap_or_else(|| default_group_count(scores.len()));
            let model = fit_smoothed_null(scores, g, &mle)?;
            let nulls = provider_nulls(&model, scores);
            (nulls, json!({ "kind": "smoothed", "groups": g, "model": model }))
        }
    };
    let reports: Vec<FlagReport> = match &lambda {
        Some(cfg) => flag_with_lambda(scores, &nulls, iur, cfg, a.rho, a.two_sided)?,
        None => flag(scores, &nulls, a.rho, a.two_sided)?,
    };
    out.csv("nulls.csv", &io::null_rows(scores, &nulls, &reports))?;
    out.json("null_model.json", &model_doc)?;
    out.csv("flags.csv", &reports)?;
    out.csv("funnel.csv", &funnel_points(scores, &reports))?;

    let count = |d: &str| reports.iter().filter(|r| r.decision.as_str() == d).count();
    Ok(json!({
        "providers": scores.len(),
        "worse": count("worse"),
        "better": count("better"),
        "lambda": lambda.as_ref().map(|c| c.policy.representative()).unwrap_or(1.0),
    }))
}

fn set_jobs(common: &Common) -> CliResult<()> {
    if let Some(j) = common.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run_linear(a: &ProfileArgs) -> CliResult<()> {
    check_input(&a.input)?;
    let records = io::read_linear_file(&a.input)?;
    let ds = LinearDataset::from_records(&records)?;
    let profile = profile_linear(&ds)?;
    let mut out = Outputs::new(&a.common.out)?;
    let rows: Vec<LinearScoreRow> = profile
        .scores
        .scores
        .iter()
        .map(|s| LinearScoreRow {
            provider_id: &s.provider_id,
            n: s.n,
            ybar: s.ybar,
            z_fe: s.z_fe,
            z_re: s.z_re,
            z_fere: s.z_fere,
            r: s.shrinkage,
        })
        .collect();
    out.csv("scores.csv", &rows)?;
    let scores = profile.scores.provider_scores();
    let iur: Vec<f64> = profile
        .scores
        .scores
        .iter()
        .map(|s| iur_linear(&profile.components, s.n as f64))
        .collect();
    let mut summary = profile_scores(a, &scores, Some(&iur), &mut out)?;
    summary["components"] = serde_json::to_value(&profile.components).map_err(ProfilingError::from)?;
    out.manifest("profile-linear", json!(a), std::slice::from_ref(&a.input), summary)
}

fn run_smr(a: &SmrArgs) -> CliResult<()> {
    let p = &a.profile;
    check_input(&p.input)?;
    let measure: SizeMeasure = a.size_measure.parse()?;
    let records = io::read_survival_file(&p.input)?;
    let ds = SurvivalDataset::from_records(&records)?;
    let result = smr_pipeline(&ds, a.min_expected)?;
    let mut out = Outputs::new(&p.common.out)?;
    let rows: Vec<SmrRow> = result
        .scores
        .iter()
        .map(|s| SmrRow {
            provider_id: &s.provider_id,
            patient_years: s.patient_years,
            observed: s.observed,
            expected: s.expected,
            smr: s.smr,
            mid_p: s.mid_p,
            z_fe: s.z_fe,
        })
        .collect();
    out.csv("smr.csv", &rows)?;
    let excluded: Vec<ExcludedRow> = result
        .excluded
        .iter()
        .map(|(id, e)| ExcludedRow {
            provider_id: id,
            expected: *e,
        })
        .collect();
    out.csv("excluded.csv", &excluded)?;
    let scores = result.provider_scores_by(measure);
    let mut summary = profile_scores(p, &scores, None, &mut out)?;
    summary["excluded"] = json!(excluded.len());
    summary["cox_beta"] = json!(result.cox.beta);
    summary["cox_iterations"] = json!(result.cox.iterations);
    out.manifest("profile-smr", json!(a), std::slice::from_ref(&p.input), summary)
}

fn run_z(a: &ProfileArgs) -> CliResult<()> {
    check_input(&a.input)?;
    let scores = io::read_scores_file(&a.input)?;
    let mut out = Outputs::new(&a.common.out)?;
    let summary = profile_scores(a, &scores, None, &mut out)?;
    out.manifest("profile-z", json!(a), std::slice::from_ref(&a.input), summary)
}

fn json_scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        Value::Array(items) => items.iter().map(json_scalar).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Reads a scenario file into ordered `(key, value)` pairs.
fn scenario_pairs(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    if text.trim_start().starts_with('{') {
        let doc: serde_json::Map<String, Value> =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("scenario file: {e}")))?;
        return Ok(doc.iter().map(|(k, v)| (k.clone(), json_scalar(v))).collect());
    }
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
                .ok_or_else(|| CliError::Usage(format!("scenario file: expected key=value, got '{l}'")))
        })
        .collect()
}

fn build_scenario(a: &SimArgs) -> CliResult<Scenario> {
    let mut pairs = match &a.config {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::Usage(format!("scenario file {} does not exist", p.display())));
            }
            scenario_pairs(p)?
        }
        None => Vec::new(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{o}'")))?;
        pairs.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    let file_preset = pairs.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.clone());
    let name = a
        .preset
        .clone()
        .or(file_preset)
        .ok_or_else(|| CliError::Usage("simulate needs --preset or a scenario file with a preset".into()))?;
    let mut sc = Scenario::preset(&name).map_err(|e| CliError::Usage(e.to_string()))?;
    sc.seed = a.common.seed;
    for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
        sc.set(k, v).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(r) = a.replications {
        sc.replications = r;
    }
    sc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(sc)
}

fn run_simulate(a: &SimArgs) -> CliResult<()> {
    let sc = build_scenario(a)?;
    let result = run_replications(&sc)?;
    let mut out = Outputs::new(&a.common.out)?;
    out.csv("curves.csv", &result.curves)?;
    out.csv("strata_rates.csv", &result.strata)?;
    let inputs: Vec<PathBuf> = a.config.iter().cloned().collect();
    let summary = json!({
        "failures": result.failures,
        "failure_messages": result.failure_messages,
    });
    out.manifest(
        "simulate",
        json!({ "args": a, "scenario": sc }),
        &inputs,
        summary,
    )
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::ProfileLinear(a) => {
            set_jobs(&a.common)?;
            run_linear(a)
        }
        Command::ProfileSmr(a) => {
            set_jobs(&a.profile.common)?;
            run_smr(a)
        }
        Command::ProfileZ(a) => {
            set_jobs(&a.common)?;
            run_z(a)
        }
        Command::Simulate(a) => {
            set_jobs(&a.common)?;
            run_simulate(a)
        }
    }
}

fn out_dir(cli: &Cli) -> &Path {
    match &cli.command {
        Command::ProfileLinear(a) | Command::ProfileZ(a) => &a.common.out,
        Command::ProfileSmr(a) => &a.profile.common.out,
        Command::Simulate(a) => &a.common.out,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = e.record();
            eprintln!("{record}");
            // best effort: leave the record next to the outputs
            let dir = out_dir(&cli);
            if fs::create_dir_all(dir).is_ok() {
                let _ = write_json_file(&dir.join("error.json"), &record);
            }
            ExitCode::from(e.code())
        }
    }
}
