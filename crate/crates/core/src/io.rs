//! CSV ingestion and report writers.
//!
//! Input schemas (header row required):
//! - linear: `provider_id,y,x1,...,xp`
//! - survival: `provider_id,time,status,x1,...,xp`, status 1 = event
//! - scores: `provider_id,size,z`
//!
//! Floats are written with the shortest representation that parses back to
//! the same value. Files are written to a temporary sibling and renamed into
//! place.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{ProfilingError, Result};
use crate::types::{
    validate_scores, FlagReport, NullParams, PatientRecord, ProviderScore, Status, SurvivalRecord,
};

fn csv_err(row: usize, e: impl std::fmt::Display) -> ProfilingError {
    ProfilingError::Csv {
        row,
        message: e.to_string(),
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn check_header(rdr: &mut csv::Reader<impl Read>, leading: &[&str]) -> Result<usize> {
    let header = rdr.headers().map_err(|e| csv_err(0, e))?.clone();
    if header.len() < leading.len()
        || header
            .iter()
            .zip(leading)
            .any(|(h, want)| !h.trim_start_matches('\u{feff}').eq_ignore_ascii_case(want))
    {
        return Err(csv_err(
            0,
            format!("header must start with {}", leading.join(",")),
        ));
    }
    Ok(header.len() - leading.len())
}

fn parse_f64(row: usize, column: &str, field: &str) -> Result<f64> {
    if field.is_empty() {
        return Err(csv_err(row, format!("missing value in column {column}")));
    }
    let v: f64 = field
        .parse()
        .map_err(|_| csv_err(row, format!("cannot parse {field:?} in column {column}")))?;
    if !v.is_finite() {
        return Err(ProfilingError::NonFinite {
            row,
            column: column.to_owned(),
        });
    }
    Ok(v)
}

fn provider_field(row: usize, rec: &csv::StringRecord) -> Result<String> {
    match rec.get(0) {
        Some(id) if !id.is_empty() => Ok(id.to_owned()),
        _ => Err(csv_err(row, "missing provider_id")),
    }
}

fn covariate_fields(row: usize, rec: &csv::StringRecord, skip: usize, p: usize) -> Result<Vec<f64>> {
    let found = rec.len().saturating_sub(skip);
    if found != p {
        return Err(ProfilingError::DimensionMismatch {
            row,
            expected: p,
            found,
        });
    }
    (skip..rec.len())
        .map(|k| parse_f64(row, &format!("x{}", k - skip + 1), &rec[k]))
        .collect()
}

/// Reads `provider_id,y,x1..xp`. Rows are numbered from 1 after the header.
pub fn read_linear<R: Read>(input: R) -> Result<Vec<PatientRecord>> {
    let mut rdr = reader(input);
    let p = check_header(&mut rdr, &["provider_id", "y"])?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| csv_err(row, e))?;
        if rec.len() < 2 {
            return Err(csv_err(row, "expected at least provider_id,y"));
        }
        out.push(PatientRecord {
            provider_id: provider_field(row, &rec)?,
            outcome: parse_f64(row, "y", &rec[1])?,
            covariates: covariate_fields(row, &rec, 2, p)?,
        });
    }
    if out.is_empty() {
        return Err(ProfilingError::EmptyDataset);
    }
    Ok(out)
}

/// Reads `provider_id,time,status,x1..xp`; status must be 0 or 1.
pub fn read_survival<R: Read>(input: R) -> Result<Vec<SurvivalRecord>> {
    let mut rdr = reader(input);
    let p = check_header(&mut rdr, &["provider_id", "time", "status"])?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| csv_err(row, e))?;
        if rec.len() < 3 {
            return Err(csv_err(row, "expected at least provider_id,time,status"));
        }
        let time = parse_f64(row, "time", &rec[1])?;
        if !(time > 0.0) {
            return Err(ProfilingError::NonPositiveTime { row, value: time });
        }
        let status = Status::from_code(&rec[2]).ok_or_else(|| ProfilingError::UnknownStatus {
            row,
            value: rec[2].to_owned(),
        })?;
        out.push(SurvivalRecord {
            provider_id: provider_field(row, &rec)?,
            time,
            status,
            covariates: covariate_fields(row, &rec, 3, p)?,
        });
    }
    if out.is_empty() {
        return Err(ProfilingError::EmptyDataset);
    }
    Ok(out)
}

/// Reads `provider_id,size,z` and validates the scores.
pub fn read_scores<R: Read>(input: R) -> Result<Vec<ProviderScore>> {
    let mut rdr = reader(input);
    check_header(&mut rdr, &["provider_id", "size", "z"])?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| csv_err(row, e))?;
        if rec.len() != 3 {
            return Err(csv_err(row, format!("expected 3 fields, found {}", rec.len())));
        }
        let size = parse_f64(row, "size", &rec[1])?;
        if !(size > 0.0) {
            return Err(csv_err(row, format!("size must be positive, got {size}")));
        }
        out.push(ProviderScore::new(
            provider_field(row, &rec)?,
            size,
            parse_f64(row, "z", &rec[2])?,
        ));
    }
    validate_scores(&out)?;
    Ok(out)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn read_linear_file(path: &Path) -> Result<Vec<PatientRecord>> {
    read_linear(open(path)?)
}

pub fn read_survival_file(path: &Path) -> Result<Vec<SurvivalRecord>> {
    read_survival(open(path)?)
}

pub fn read_scores_file(path: &Path) -> Result<Vec<ProviderScore>> {
    read_scores(open(path)?)
}

/// Writes through `f` into a temporary file next to `path`, then renames it
/// over `path`.
pub fn write_atomic<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        f(&mut buf)?;
        buf.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| ProfilingError::Io(e.error))?;
    Ok(())
}

/// Serializes `rows` as CSV with a header taken from the field names.
pub fn write_rows<T: Serialize>(out: &mut dyn Write, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (k, r) in rows.iter().enumerate() {
        w.serialize(r).map_err(|e| csv_err(k + 1, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, |w| write_rows(w, rows))
}

pub fn write_json_file<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn write_header(w: &mut csv::Writer<&mut dyn Write>, lead: &[&str], p: usize) -> Result<()> {
    let mut header: Vec<String> = lead.iter().map(|s| s.to_string()).collect();
    header.extend((1..=p).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(|e| csv_err(0, e))
}

fn fmt(v: f64) -> String {
    // Display for f64 is the shortest round-tripping decimal form
    v.to_string()
}

/// Writes records in the linear input schema.
pub fn write_linear(out: &mut dyn Write, records: &[PatientRecord]) -> Result<()> {
    let p = records.first().map_or(0, |r| r.covariates.len());
    let mut w = csv::Writer::from_writer(out);
    write_header(&mut w, &["provider_id", "y"], p)?;
    for (k, r) in records.iter().enumerate() {
        let mut row = vec![r.provider_id.clone(), fmt(r.outcome)];
        row.extend(r.covariates.iter().map(|&x| fmt(x)));
        w.write_record(&row).map_err(|e| csv_err(k + 1, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes records in the survival input schema.
pub fn write_survival(out: &mut dyn Write, records: &[SurvivalRecord]) -> Result<()> {
    let p = records.first().map_or(0, |r| r.covariates.len());
    let mut w = csv::Writer::from_writer(out);
    write_header(&mut w, &["provider_id", "time", "status"], p)?;
    for (k, r) in records.iter().enumerate() {
        let mut row = vec![r.provider_id.clone(), fmt(r.time), r.status.code().to_string()];
        row.extend(r.covariates.iter().map(|&x| fmt(x)));
        w.write_record(&row).map_err(|e| csv_err(k + 1, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes scores in the `provider_id,size,z` input schema.
pub fn write_scores(out: &mut dyn Write, scores: &[ProviderScore]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["provider_id", "size", "z"]).map_err(|e| csv_err(0, e))?;
    for (k, s) in scores.iter().enumerate() {
        w.write_record([s.provider_id.clone(), fmt(s.size), fmt(s.z_fe)])
            .map_err(|e| csv_err(k + 1, e))?;
    }
    w.flush()?;
    Ok(())
}

/// One row of `nulls.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NullRow {
    pub provider_id: String,
    pub size: f64,
    pub z_fe: f64,
    pub null_mean: f64,
    pub null_sd: f64,
    pub flag: &'static str,
}

/// Joins scores, their reference nulls and decisions into `nulls.csv` rows.
pub fn null_rows(scores: &[ProviderScore], nulls: &[NullParams], reports: &[FlagReport]) -> Vec<NullRow> {
    scores
        .iter()
        .zip(nulls)
        .zip(reports)
        .map(|((s, n), r)| NullRow {
            provider_id: s.provider_id.clone(),
            size: s.size,
            z_fe: s.z_fe,
            null_mean: n.mean,
            null_sd: r.null_sd_effective,
            flag: r.decision.as_str(),
        })
        .collect()
}
