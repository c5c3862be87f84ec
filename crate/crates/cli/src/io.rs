//! CSV ingestion and emission.
//!
//! Input tables have a header row and one row per date; the first column
//! holds ISO dates (`YYYY-MM-DD` or `YYYY-MM`), the others numeric cells.
//! Empty, `NA` and `NaN` cells read as missing.

use std::collections::HashSet;
use std::fs::File;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use safcov::{ObservedFactors, ReturnPanel, SymMatrix};
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Dated columns read from a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub dates: Vec<String>,
    pub labels: Vec<String>,
    /// `T × K`, one row per date.
    pub values: DMatrix<f64>,
}

impl Table {
    /// Series in rows, `K × T`.
    pub fn series(&self) -> DMatrix<f64> {
        self.values.transpose()
    }

    /// Fails unless `dates` match this table's dates one for one.
    pub fn check_dates(&self, dates: &[String], path: &Path) -> CliResult<()> {
        if self.dates.len() != dates.len() {
            return Err(parse_err(path, 0, 1, format!("{} dates, expected {}", self.dates.len(), dates.len())));
        }
        match self.dates.iter().zip(dates).position(|(a, b)| a != b) {
            Some(k) => Err(parse_err(path, k + 2, 1, format!("date {} does not match {}", self.dates[k], dates[k]))),
            None => Ok(()),
        }
    }
}

fn parse_err(path: &Path, row: usize, col: usize, message: String) -> CliError {
    CliError::Parse { path: path.display().to_string(), row, col, message }
}

fn is_iso_date(s: &str) -> bool {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok() || NaiveDate::parse_from_str(&format!("{s}-01"), "%Y-%m-%d").is_ok()
}

fn parse_cell(s: &str) -> Option<f64> {
    match s {
        "" | "NA" | "NaN" | "nan" => Some(f64::NAN),
        _ => s.parse::<f64>().ok().filter(|v| v.is_finite()),
    }
}

/// Reads a dated table. Rows and columns in errors are 1-based file
/// positions, the header being row 1.
pub fn read_table(path: &Path) -> CliResult<Table> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 2 {
        return Err(parse_err(path, 1, 1, "need a date column and at least one series".into()));
    }
    let labels: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut seen_labels = HashSet::new();
    for (k, l) in labels.iter().enumerate() {
        if l.is_empty() || !seen_labels.insert(l) {
            return Err(parse_err(path, 1, k + 2, format!("empty or repeated column label '{l}'")));
        }
    }
    let mut dates = Vec::new();
    let mut seen = HashSet::new();
    let mut cells = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let row = record.position().map_or(dates.len() + 2, |p| p.line() as usize);
        let date = &record[0];
        if !is_iso_date(date) {
            return Err(parse_err(path, row, 1, format!("'{date}' is not an ISO date")));
        }
        if !seen.insert(date.to_string()) {
            return Err(CliError::DuplicateDate { path: path.display().to_string(), row, date: date.into() });
        }
        dates.push(date.to_string());
        for (k, cell) in record.iter().enumerate().skip(1) {
            let value = parse_cell(cell).ok_or_else(|| CliError::NonNumericCell {
                path: path.display().to_string(),
                row,
                col: k + 1,
                value: cell.into(),
            })?;
            cells.push(value);
        }
    }
    if dates.is_empty() {
        return Err(parse_err(path, 2, 1, "no data rows".into()));
    }
    let values = DMatrix::from_row_slice(dates.len(), labels.len(), &cells);
    Ok(Table { dates, labels, values })
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.kind() {
        csv::ErrorKind::Io(_) => CliError::Io { path: path.display().to_string(), source: std::io::Error::other(e.to_string()) },
        _ => parse_err(path, row, 0, e.to_string()),
    }
}

/// Loads an `N × T` panel from a dated CSV with one column per series. With
/// `standardize` every series is demeaned and scaled to unit variance, and
/// the removed scales are kept for mapping estimates back.
pub fn load_panel(path: &Path, standardize: bool) -> CliResult<ReturnPanel> {
    let table = read_table(path)?;
    let raw = table.series();
    let panel = if standardize {
        ReturnPanel::from_raw(raw, table.labels, table.dates)?
    } else {
        ReturnPanel::from_raw_unscaled(raw, table.labels, table.dates)?
    };
    Ok(panel)
}

/// Loads observed factor series aligned to `dates`.
pub fn load_factors(path: &Path, dates: &[String]) -> CliResult<ObservedFactors> {
    let table = read_table(path)?;
    table.check_dates(dates, path)?;
    Ok(ObservedFactors::new(table.series(), table.labels)?)
}

/// Loads a single risk-free column aligned to `dates`.
pub fn load_riskfree(path: &Path, dates: &[String]) -> CliResult<Vec<f64>> {
    let table = read_table(path)?;
    table.check_dates(dates, path)?;
    if table.labels.len() != 1 {
        return Err(parse_err(path, 1, 3, format!("expected one rate column, found {}", table.labels.len())));
    }
    Ok(table.values.column(0).iter().copied().collect())
}

/// 17 significant digits, enough to read back the identical double.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.16e}")
    }
}

fn writer(path: &Path) -> CliResult<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), source: std::io::Error::other(e.to_string()) }
}

/// Writes a dated table readable by [`read_table`]; `values` is `T × K`.
pub fn write_table(path: &Path, dates: &[String], labels: &[String], values: &DMatrix<f64>) -> CliResult<()> {
    let mut w = writer(path)?;
    let header = std::iter::once("date".to_string()).chain(labels.iter().cloned());
    w.write_record(header).map_err(|e| write_err(path, e))?;
    for (t, date) in dates.iter().enumerate() {
        let row: Vec<String> = std::iter::once(date.clone()).chain(values.row(t).iter().map(|v| fmt_f64(*v))).collect();
        w.write_record(row).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes a panel in its original units, one column per series.
pub fn write_panel(path: &Path, panel: &ReturnPanel) -> CliResult<()> {
    write_table(path, panel.dates(), panel.assets(), &panel.raw().transpose())
}

/// Writes a matrix with labelled rows and columns; `corner` heads the
/// row-label column.
pub fn write_labeled_matrix(
    path: &Path,
    corner: &str,
    rows: &[String],
    cols: &[String],
    values: &DMatrix<f64>,
) -> CliResult<()> {
    let mut w = writer(path)?;
    let header = std::iter::once(corner.to_string()).chain(cols.iter().cloned());
    w.write_record(header).map_err(|e| write_err(path, e))?;
    for (i, label) in rows.iter().enumerate() {
        let row: Vec<String> = std::iter::once(label.clone()).chain(values.row(i).iter().map(|v| fmt_f64(*v))).collect();
        w.write_record(row).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes a covariance matrix with the labels as header row and first column.
pub fn write_covariance(path: &Path, labels: &[String], sigma: &SymMatrix) -> CliResult<()> {
    write_labeled_matrix(path, "asset", labels, labels, sigma.as_matrix())
}

/// Reads a file written by [`write_covariance`].
pub fn read_covariance(path: &Path) -> CliResult<(Vec<String>, DMatrix<f64>)> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let labels: Vec<String> = reader.headers().map_err(|e| csv_err(path, e))?.iter().skip(1).map(String::from).collect();
    let n = labels.len();
    let mut cells = Vec::with_capacity(n * n);
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        if i >= n || record[0] != labels[i] {
            return Err(parse_err(path, i + 2, 1, format!("row label '{}' out of order", &record[0])));
        }
        for (k, cell) in record.iter().enumerate().skip(1) {
            let v = cell.parse::<f64>().map_err(|_| CliError::NonNumericCell {
                path: path.display().to_string(),
                row: i + 2,
                col: k + 1,
                value: cell.into(),
            })?;
            cells.push(v);
        }
    }
    if cells.len() != n * n {
        return Err(parse_err(path, n + 1, 1, format!("expected {n} rows")));
    }
    Ok((labels, DMatrix::from_row_slice(n, n, &cells)))
}

/// Writes serializable rows as a tidy CSV.
pub fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> CliResult<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Json { path: path.display().to_string(), source: e })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Month-start ISO dates for generated panels, beginning January 2000.
pub fn monthly_dates(t: usize) -> Vec<String> {
    (0..t).map(|k| format!("{:04}-{:02}-01", 2000 + k / 12, k % 12 + 1)).collect()
}
