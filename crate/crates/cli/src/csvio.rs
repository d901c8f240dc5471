//! Series ingestion and the small CSV helpers shared by the report writers.

use std::io::Read;
use std::path::Path;

use dglm_core::{Observation, TimeSeries};
use nalgebra::DVector;

use crate::error::CliError;

/// Reads `t,value` rows. A first row whose `t` field is not numeric is
/// treated as a header; an empty value field is a missing observation.
pub fn parse_csv(path: &Path) -> Result<TimeSeries, CliError> {
    let mut text = String::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_string(&mut text)).map_err(|e| CliError::io(path, e))?;
    parse_csv_str(&text).map_err(|message| CliError::Input { path: path.to_path_buf(), message })
}

pub fn parse_csv_str(text: &str) -> Result<TimeSeries, String> {
    let mut reader =
        csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut points: Vec<Observation> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| format!("row {row}: {e}"))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != 2 {
            return Err(format!("row {row}: expected 2 fields `t,value`, found {}", record.len()));
        }
        let t_field = &record[0];
        let t = match t_field.parse::<u64>() {
            Ok(t) => t,
            Err(_) if row == 1 && t_field.parse::<f64>().is_err() => continue,
            Err(_) => return Err(format!("row {row}: time index `{t_field}` is not a non-negative integer")),
        };
        let y = match &record[1] {
            "" => None,
            v => Some(
                v.parse::<f64>()
                    .ok()
                    .filter(|y| y.is_finite())
                    .ok_or_else(|| format!("row {row}: value `{v}` is not a finite number"))?,
            ),
        };
        if let Some(prev) = points.last() {
            if t <= prev.t {
                return Err(format!("row {row}: time index {t} does not increase (previous {})", prev.t));
            }
        }
        points.push(Observation { t, y });
    }
    TimeSeries::new(points).map_err(|e| e.to_string())
}

/// Writes a series in the format [`parse_csv`] reads, with a `t,y` header.
pub fn series_to_csv(series: &TimeSeries) -> String {
    let mut out = String::from("t,y\n");
    for obs in series.iter() {
        out.push_str(&obs.t.to_string());
        out.push(',');
        if let Some(y) = obs.y {
            out.push_str(&fmt_f64(y));
        }
        out.push('\n');
    }
    out
}

/// Reference state means: `t` then one column per state component.
pub fn parse_reference(path: &Path, dim: usize) -> Result<Vec<(u64, DVector<f64>)>, CliError> {
    let bad = |message: String| CliError::Input { path: path.to_path_buf(), message };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| bad(format!("row {row}: {e}")))?;
        if record.len() != dim + 1 {
            return Err(bad(format!("row {row}: expected {} fields, found {}", dim + 1, record.len())));
        }
        let Ok(t) = record[0].parse::<u64>() else {
            if row == 1 {
                continue;
            }
            return Err(bad(format!("row {row}: bad time index `{}`", &record[0])));
        };
        let values = record
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|_| bad(format!("row {row}: bad value `{v}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push((t, DVector::from_vec(values)));
    }
    Ok(out)
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
