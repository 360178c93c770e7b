//! Wide numeric CSV tables: leading label columns, then one column per time.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

pub fn time_headers(n_times: usize) -> impl Iterator<Item = String> {
    (1..=n_times).map(|t| format!("t{t}"))
}

pub fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Writes through `body` and flushes, attributing any failure to `path`.
pub fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> CliResult<()> {
    let mut w = create(path)?;
    body(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// Rows of `labels[i]` followed by `values.row(i)`.
pub fn write_wide(path: &Path, label_header: &[&str], labels: &[Vec<String>], values: &DMatrix<f64>) -> CliResult<()> {
    write_file(path, |w| {
        let header: Vec<String> = label_header
            .iter()
            .map(|s| s.to_string())
            .chain(time_headers(values.ncols()))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (i, label) in labels.iter().enumerate() {
            let row: Vec<String> = label
                .iter()
                .cloned()
                .chain(values.row(i).iter().map(|v| v.to_string()))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    })
}

/// Text labels and numeric values of a wide table with `n_labels` leading columns.
pub struct WideTable {
    pub labels: Vec<Vec<String>>,
    pub values: DMatrix<f64>,
}

pub fn read_wide(path: &Path, label_header: &[&str]) -> CliResult<WideTable> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let n_labels = label_header.len();
    if header.len() <= n_labels || header.iter().take(n_labels).ne(label_header.iter().copied()) {
        return Err(CliError::data(
            path,
            format!("expected header {},t1,..., found {:?}", label_header.join(","), header),
        ));
    }
    let n_times = header.len() - n_labels;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        labels.push(record.iter().take(n_labels).map(str::to_string).collect());
        for field in record.iter().skip(n_labels) {
            values.push(parse_number(path, line + 2, field)?);
        }
    }
    let rows = labels.len();
    Ok(WideTable {
        labels,
        values: DMatrix::from_row_slice(rows, n_times, &values),
    })
}

pub fn parse_number(path: &Path, line: usize, field: &str) -> CliResult<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| CliError::data(path, format!("line {line}: {field:?} is not a number")))
}

pub fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::io(path, source),
        other => CliError::data(path, format!("malformed CSV: {other:?}")),
    }
}
