//! Shared data model: patient records, validated datasets, provider scores,
//! null distributions and flag reports.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{ProfilingError, Result};

/// One patient with a continuous outcome (large values are poor outcomes).
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub provider_id: String,
    pub outcome: f64,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Event,
    Censored,
}

impl Status {
    pub fn from_code(code: &str) -> Option<Status> {
        match code.trim() {
            "1" => Some(Status::Event),
            "0" => Some(Status::Censored),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Status::Event => 1,
            Status::Censored => 0,
        }
    }
}

/// One patient's follow-up for the survival path.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord {
    pub provider_id: String,
    pub time: f64,
    pub status: Status,
    pub covariates: Vec<f64>,
}

/// Common view over record types used by [`validate_dataset`].
pub trait Record {
    fn provider_id(&self) -> &str;
    fn covariates(&self) -> &[f64];
    /// Record-specific checks beyond covariate dimension. `row` is 1-based.
    fn check(&self, row: usize) -> Result<()>;
}

impl Record for PatientRecord {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }
    fn covariates(&self) -> &[f64] {
        &self.covariates
    }
    fn check(&self, row: usize) -> Result<()> {
        if !self.outcome.is_finite() {
            return Err(ProfilingError::NonFinite {
                row,
                column: "y".into(),
            });
        }
        Ok(())
    }
}

impl Record for SurvivalRecord {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }
    fn covariates(&self) -> &[f64] {
        &self.covariates
    }
    fn check(&self, row: usize) -> Result<()> {
        if !self.time.is_finite() {
            return Err(ProfilingError::NonFinite {
                row,
                column: "time".into(),
            });
        }
        if self.time <= 0.0 {
            return Err(ProfilingError::NonPositiveTime {
                row,
                value: self.time,
            });
        }
        Ok(())
    }
}

/// Dense provider indices, assigned in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProviderIndex {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl ProviderIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index for `id`, inserting it if unseen.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.lookup.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.lookup.insert(id.to_owned(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub providers: ProviderIndex,
    /// Record count per provider, indexed like `providers`.
    pub sizes: Vec<usize>,
    /// Number of covariates.
    pub p: usize,
}

impl DatasetSummary {
    pub fn n_providers(&self) -> usize {
        self.providers.len()
    }
}

/// Checks a record list and builds the provider index.
pub fn validate_dataset<R: Record>(records: &[R]) -> Result<DatasetSummary> {
    let first = records.first().ok_or(ProfilingError::EmptyDataset)?;
    let p = first.covariates().len();
    let mut providers = ProviderIndex::new();
    let mut sizes = Vec::new();
    for (k, rec) in records.iter().enumerate() {
        let row = k + 1;
        let found = rec.covariates().len();
        if found != p {
            return Err(ProfilingError::DimensionMismatch {
                row,
                expected: p,
                found,
            });
        }
        if let Some(j) = rec.covariates().iter().position(|x| !x.is_finite()) {
            return Err(ProfilingError::NonFinite {
                row,
                column: format!("x{}", j + 1),
            });
        }
        rec.check(row)?;
        let i = providers.intern(rec.provider_id());
        if i == sizes.len() {
            sizes.push(0);
        }
        sizes[i] += 1;
    }
    Ok(DatasetSummary { providers, sizes, p })
}

/// Column-oriented linear-outcome dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDataset {
    pub providers: ProviderIndex,
    /// Provider index of each patient.
    pub provider_of: Vec<usize>,
    pub outcomes: Vec<f64>,
    /// Row-major `n_patients x p` covariate matrix.
    pub covariates: Vec<f64>,
    pub p: usize,
    pub sizes: Vec<usize>,
}

impl LinearDataset {
    pub fn from_records(records: &[PatientRecord]) -> Result<Self> {
        let summary = validate_dataset(records)?;
        let mut provider_of = Vec::with_capacity(records.len());
        let mut outcomes = Vec::with_capacity(records.len());
        let mut covariates = Vec::with_capacity(records.len() * summary.p);
        for rec in records {
            provider_of.push(summary.providers.get(&rec.provider_id).unwrap());
            outcomes.push(rec.outcome);
            covariates.extend_from_slice(&rec.covariates);
        }
        Ok(LinearDataset {
            providers: summary.providers,
            provider_of,
            outcomes,
            covariates,
            p: summary.p,
            sizes: summary.sizes,
        })
    }

    /// Builds a dataset from already-indexed columns (used by generators).
    pub fn from_columns(
        providers: ProviderIndex,
        provider_of: Vec<usize>,
        outcomes: Vec<f64>,
        covariates: Vec<f64>,
        p: usize,
    ) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(ProfilingError::EmptyDataset);
        }
        if provider_of.len() != outcomes.len() || covariates.len() != outcomes.len() * p {
            return Err(ProfilingError::InvalidParameter(
                "column lengths disagree".into(),
            ));
        }
        let mut sizes = vec![0usize; providers.len()];
        for &i in &provider_of {
            sizes[i] += 1;
        }
        if sizes.contains(&0) {
            return Err(ProfilingError::InvalidParameter(
                "provider with zero records".into(),
            ));
        }
        Ok(LinearDataset {
            providers,
            provider_of,
            outcomes,
            covariates,
            p,
            sizes,
        })
    }

    pub fn n_patients(&self) -> usize {
        self.outcomes.len()
    }

    pub fn n_providers(&self) -> usize {
        self.providers.len()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.covariates[j * self.p..(j + 1) * self.p]
    }

    pub fn to_records(&self) -> Vec<PatientRecord> {
        (0..self.n_patients())
            .map(|j| PatientRecord {
                provider_id: self.providers.id(self.provider_of[j]).to_owned(),
                outcome: self.outcomes[j],
                covariates: self.row(j).to_vec(),
            })
            .collect()
    }
}

/// Column-oriented survival dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    pub providers: ProviderIndex,
    pub provider_of: Vec<usize>,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    pub covariates: Vec<f64>,
    pub p: usize,
    pub sizes: Vec<usize>,
}

impl SurvivalDataset {
    pub fn from_records(records: &[SurvivalRecord]) -> Result<Self> {
        let summary = validate_dataset(records)?;
        let mut provider_of = Vec::with_capacity(records.len());
        let mut time = Vec::with_capacity(records.len());
        let mut event = Vec::with_capacity(records.len());
        let mut covariates = Vec::with_capacity(records.len() * summary.p);
        for rec in records {
            provider_of.push(summary.providers.get(&rec.provider_id).unwrap());
            time.push(rec.time);
            event.push(rec.status == Status::Event);
            covariates.extend_from_slice(&rec.covariates);
        }
        Ok(SurvivalDataset {
            providers: summary.providers,
            provider_of,
            time,
            event,
            covariates,
            p: summary.p,
            sizes: summary.sizes,
        })
    }

    pub fn from_columns(
        providers: ProviderIndex,
        provider_of: Vec<usize>,
        time: Vec<f64>,
        event: Vec<bool>,
        covariates: Vec<f64>,
        p: usize,
    ) -> Result<Self> {
        let n = time.len();
        if n == 0 {
            return Err(ProfilingError::EmptyDataset);
        }
        if provider_of.len() != n || event.len() != n || covariates.len() != n * p {
            return Err(ProfilingError::InvalidParameter(
                "column lengths disagree".into(),
            ));
        }
        if let Some(j) = time.iter().position(|&t| !(t > 0.0)) {
            return Err(ProfilingError::NonPositiveTime {
                row: j + 1,
                value: time[j],
            });
        }
        let mut sizes = vec![0usize; providers.len()];
        for &i in &provider_of {
            sizes[i] += 1;
        }
        if sizes.contains(&0) {
            return Err(ProfilingError::InvalidParameter(
                "provider with zero records".into(),
            ));
        }
        Ok(SurvivalDataset {
            providers,
            provider_of,
            time,
            event,
            covariates,
            p,
            sizes,
        })
    }

    pub fn n_patients(&self) -> usize {
        self.time.len()
    }

    pub fn n_providers(&self) -> usize {
        self.providers.len()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.covariates[j * self.p..(j + 1) * self.p]
    }

    pub fn to_records(&self) -> Vec<SurvivalRecord> {
        (0..self.n_patients())
            .map(|j| SurvivalRecord {
                provider_id: self.providers.id(self.provider_of[j]).to_owned(),
                time: self.time[j],
                status: if self.event[j] {
                    Status::Event
                } else {
                    Status::Censored
                },
                covariates: self.row(j).to_vec(),
            })
            .collect()
    }
}

/// Per-provider FE Z-score with its size measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderScore {
    pub provider_id: String,
    /// Patient count, or patient-years on the survival path.
    pub size: f64,
    pub z_fe: f64,
    /// Observed events (survival path only).
    pub observed: Option<f64>,
    /// Expected events (survival path only).
    pub expected: Option<f64>,
}

impl ProviderScore {
    pub fn new(provider_id: impl Into<String>, size: f64, z_fe: f64) -> Self {
        ProviderScore {
            provider_id: provider_id.into(),
            size,
            z_fe,
            observed: None,
            expected: None,
        }
    }
}

/// Checks a score list: positive sizes, finite scores, unique ids.
pub fn validate_scores(scores: &[ProviderScore]) -> Result<()> {
    if scores.is_empty() {
        return Err(ProfilingError::EmptyDataset);
    }
    let mut seen = std::collections::HashSet::with_capacity(scores.len());
    for (k, s) in scores.iter().enumerate() {
        if !s.z_fe.is_finite() {
            return Err(ProfilingError::NonFinite {
                row: k + 1,
                column: "z".into(),
            });
        }
        if !(s.size > 0.0) || !s.size.is_finite() {
            return Err(ProfilingError::InvalidParameter(format!(
                "row {}: size must be positive, got {}",
                k + 1,
                s.size
            )));
        }
        if !seen.insert(s.provider_id.as_str()) {
            return Err(ProfilingError::DuplicateProvider(s.provider_id.clone()));
        }
    }
    Ok(())
}

/// A normal reference distribution N(mean, sd^2) with its null proportion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullParams {
    pub mean: f64,
    pub sd: f64,
    pub null_prop: f64,
}

impl NullParams {
    pub fn new(mean: f64, sd: f64) -> Self {
        NullParams {
            mean,
            sd,
            null_prop: 1.0,
        }
    }

    pub fn standard() -> Self {
        Self::new(0.0, 1.0)
    }

    pub fn variance(&self) -> f64 {
        self.sd * self.sd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearVarianceComponents {
    pub mu: f64,
    pub sigma_alpha: f64,
    pub sigma_w: f64,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Worse,
    Better,
    None,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Worse => "worse",
            Decision::Better => "better",
            Decision::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagReport {
    pub provider_id: String,
    pub z_fe: f64,
    pub null_mean: f64,
    pub null_sd_effective: f64,
    pub threshold_upper: f64,
    pub threshold_lower: f64,
    pub decision: Decision,
    pub rho: f64,
    pub lambda: f64,
}

impl FlagReport {
    /// Applies the strict-inequality flagging rule against fixed thresholds.
    pub fn decide(z: f64, upper: f64, lower: f64, two_sided: bool) -> Decision {
        if z > upper {
            Decision::Worse
        } else if two_sided && z < lower {
            Decision::Better
        } else {
            Decision::None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, y: f64, x: &[f64]) -> PatientRecord {
        PatientRecord {
            provider_id: id.into(),
            outcome: y,
            covariates: x.to_vec(),
        }
    }

    #[test]
    fn counts_providers_in_first_appearance_order() {
        let recs = vec![
            rec("A", 1.0, &[0.0]),
            rec("B", 1.0, &[0.0]),
            rec("A", 1.0, &[0.0]),
            rec("A", 1.0, &[0.0]),
            rec("B", 1.0, &[0.0]),
        ];
        let s = validate_dataset(&recs).unwrap();
        assert_eq!(s.n_providers(), 2);
        assert_eq!(s.sizes, vec![3, 2]);
        assert_eq!(s.providers.id(0), "A");
        assert_eq!(s.providers.get("B"), Some(1));
        assert_eq!(s.p, 1);
    }

    #[test]
    fn empty_is_rejected() {
        let recs: Vec<PatientRecord> = vec![];
        let err = validate_dataset(&recs).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn covariate_dimension_mismatch() {
        let recs = vec![
            rec("A", 1.0, &[0.0, 1.0, 2.0]),
            rec("A", 1.0, &[0.0, 1.0]),
        ];
        match validate_dataset(&recs) {
            Err(ProfilingError::DimensionMismatch {
                row,
                expected,
                found,
            }) => assert_eq!((row, expected, found), (2, 3, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nonpositive_time_rejected() {
        let recs = vec![SurvivalRecord {
            provider_id: "A".into(),
            time: 0.0,
            status: Status::Event,
            covariates: vec![],
        }];
        assert!(matches!(
            validate_dataset(&recs),
            Err(ProfilingError::NonPositiveTime { row: 1, .. })
        ));
    }

    #[test]
    fn status_codes() {
        assert_eq!(Status::from_code("1"), Some(Status::Event));
        assert_eq!(Status::from_code("0"), Some(Status::Censored));
        assert_eq!(Status::from_code("2"), None);
        assert_eq!(Status::from_code("yes"), None);
    }

    #[test]
    fn duplicate_scores_rejected() {
        let scores = vec![
            ProviderScore::new("A", 10.0, 0.1),
            ProviderScore::new("A", 12.0, 0.3),
        ];
        assert!(matches!(
            validate_scores(&scores),
            Err(ProfilingError::DuplicateProvider(_))
        ));
    }

    #[test]
    fn strict_inequality_at_threshold() {
        assert_eq!(FlagReport::decide(1.5, 1.5, -1.5, true), Decision::None);
        assert_eq!(FlagReport::decide(-1.5, 1.5, -1.5, true), Decision::None);
        assert_eq!(FlagReport::decide(-1.6, 1.5, -1.5, false), Decision::None);
        assert_eq!(FlagReport::decide(-1.6, 1.5, -1.5, true), Decision::Better);
    }
}
