//! CSV schemas shared by the pipeline.
//!
//! Floats are serialized in C's `%.17g` format: round-trip exact, shortest
//! of fixed and scientific notation at 17 significant digits.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use blockperm_core::placement::TrialRecord;
use blockperm_core::robust::CovariateMatrix;
use blockperm_core::scoring::{SessionSeries, TrialEvent};

/// Formats a float like C's `printf("%.17g", x)`.
pub fn fmt_g17(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".to_string()
        } else if x > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        };
    }
    // Decimal exponent of the leading digit.
    let sci = format!("{:.16e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        let fixed = format!("{:.*}", decimals, x);
        trim_zeros(&fixed).to_string()
    } else {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn parse_f64(field: &str, file: &Path, line: u64, col: &str) -> Result<f64> {
    field.trim().parse::<f64>().with_context(|| {
        format!(
            "{}:{line}: column {col}: cannot parse {field:?} as a number",
            file.display()
        )
    })
}

fn parse_u64(field: &str, file: &Path, line: u64, col: &str) -> Result<u64> {
    field.trim().parse::<u64>().with_context(|| {
        format!(
            "{}:{line}: column {col}: cannot parse {field:?} as an integer",
            file.display()
        )
    })
}

fn parse_z(field: &str, file: &Path, line: u64) -> Result<bool> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => bail!("{}:{line}: column z must be 0 or 1, got {other:?}", file.display()),
    }
}

fn open_reader(path: &Path, columns: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let headers = reader
        .headers()
        .with_context(|| format!("{}: cannot read header", path.display()))?;
    let got: Vec<&str> = headers.iter().collect();
    if got.len() < columns.len() || &got[..columns.len()] != columns {
        bail!(
            "{}: expected columns {columns:?}, found {got:?}",
            path.display()
        );
    }
    Ok(reader)
}

/// Reads `series.csv` (block_id, t_index, value) into per-block series.
/// Rows must be grouped by block with contiguous 0-based t_index.
pub fn read_series(path: &Path, sample_interval_seconds: f64) -> Result<BTreeMap<String, SessionSeries>> {
    let mut reader = open_reader(path, &["block_id", "t_index", "value"])?;
    let mut out: BTreeMap<String, SessionSeries> = BTreeMap::new();
    for record in reader.records() {
        let record = record.with_context(|| format!("{}: bad row", path.display()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let block_id = record[0].to_string();
        let t_index = parse_u64(&record[1], path, line, "t_index")? as usize;
        let value = parse_f64(&record[2], path, line, "value")?;
        let entry = out.entry(block_id.clone()).or_insert_with(|| SessionSeries {
            block_id,
            values: Vec::new(),
            sample_interval_seconds,
        });
        if t_index != entry.values.len() {
            bail!(
                "{}:{line}: block {} expects t_index {} next, got {t_index} (rows must be sorted and contiguous)",
                path.display(),
                entry.block_id,
                entry.values.len()
            );
        }
        entry.values.push(value);
    }
    if out.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    Ok(out)
}

/// Reads `events.csv` (block_id, onset_index, z) grouped by block, in file
/// order within each block.
pub fn read_events(path: &Path) -> Result<BTreeMap<String, Vec<TrialEvent>>> {
    let mut reader = open_reader(path, &["block_id", "onset_index", "z"])?;
    let mut out: BTreeMap<String, Vec<TrialEvent>> = BTreeMap::new();
    let mut last_onset: BTreeMap<String, u64> = BTreeMap::new();
    for record in reader.records() {
        let record = record.with_context(|| format!("{}: bad row", path.display()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let block_id = record[0].to_string();
        let onset = parse_u64(&record[1], path, line, "onset_index")?;
        let treated = parse_z(&record[2], path, line)?;
        if let Some(prev) = last_onset.get(&block_id) {
            if onset <= *prev {
                bail!(
                    "{}:{line}: events of block {block_id} must be sorted by onset_index ({onset} after {prev})",
                    path.display()
                );
            }
        }
        last_onset.insert(block_id.clone(), onset);
        out.entry(block_id.clone()).or_default().push(TrialEvent {
            block_id,
            onset_index: onset as usize,
            treated,
        });
    }
    if out.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    Ok(out)
}

/// Writes `trials.csv` (block_id, trial_index, z, response).
pub fn write_trials(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    writer.write_record(["block_id", "trial_index", "z", "response"])?;
    for t in trials {
        writer.write_record([
            t.block_id.as_str(),
            &t.index.to_string(),
            if t.treated { "1" } else { "0" },
            &fmt_g17(t.response),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads `trials.csv`.
pub fn read_trials(path: &Path) -> Result<Vec<TrialRecord>> {
    let mut reader = open_reader(path, &["block_id", "trial_index", "z", "response"])?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.with_context(|| format!("{}: bad row", path.display()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        out.push(TrialRecord {
            block_id: record[0].to_string(),
            index: parse_u64(&record[1], path, line, "trial_index")? as u32,
            treated: parse_z(&record[2], path, line)?,
            response: parse_f64(&record[3], path, line, "response")?,
        });
    }
    if out.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    Ok(out)
}

/// Reads `covariates.csv` (block_id, trial_index, then one column per
/// covariate), returning the matrix aligned with `trials` sorted by
/// (block_id, trial_index).
pub fn read_covariates(path: &Path, trials: &[TrialRecord]) -> Result<CovariateMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let headers = reader
        .headers()
        .with_context(|| format!("{}: cannot read header", path.display()))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[0] != "block_id" || cols[1] != "trial_index" {
        bail!(
            "{}: expected columns block_id, trial_index, <covariates...>, found {cols:?}",
            path.display()
        );
    }
    let names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();

    let mut by_key: BTreeMap<(String, u32), Vec<f64>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.with_context(|| format!("{}: bad row", path.display()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let block = record[0].to_string();
        let index = parse_u64(&record[1], path, line, "trial_index")? as u32;
        let mut row = Vec::with_capacity(names.len());
        for (j, name) in names.iter().enumerate() {
            row.push(parse_f64(&record[2 + j], path, line, name)?);
        }
        if by_key.insert((block.clone(), index), row).is_some() {
            bail!(
                "{}:{line}: duplicate covariate row for ({block}, {index})",
                path.display()
            );
        }
    }

    let groups = blockperm_core::placement::group_trials(trials);
    let mut rows = Vec::new();
    for block in groups.values() {
        for t in block {
            let key = (t.block_id.clone(), t.index);
            match by_key.remove(&key) {
                Some(row) => rows.push(row),
                None => bail!(
                    "{}: missing covariate row for trial ({}, {})",
                    path.display(),
                    key.0,
                    key.1
                ),
            }
        }
    }
    if let Some(((block, index), _)) = by_key.into_iter().next() {
        bail!(
            "{}: covariate row ({block}, {index}) matches no trial",
            path.display()
        );
    }
    Ok(CovariateMatrix { names, rows })
}
