use std::path::Path;

use crate::{CliError, CliResult};

/// A CSV file held as text cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Parses every cell of `name` as a number.
    pub fn numeric_column(&self, name: &str) -> CliResult<Vec<f64>> {
        let k = self.column(name).ok_or_else(|| {
            CliError::usage(format!("no column `{name}` (columns: {})", self.header.join(", ")))
        })?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row[k].trim().parse::<f64>().map_err(|_| {
                    CliError::usage(format!("row {}: `{name}` is not a number: `{}`", i + 1, row[k]))
                })
            })
            .collect()
    }
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::usage(format!("cannot read `{}`: {e}", path.display())))?;
    let bad = |e: csv::Error| CliError::usage(format!("{}: malformed CSV: {e}", path.display()));
    let header = reader.headers().map_err(bad)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        rows.push(record.map_err(bad)?.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

pub fn write_table(path: &Path, table: &Table) -> CliResult {
    let fail = |e: csv::Error| CliError::runtime(format!("cannot write `{}`: {e}", path.display()));
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(fail)?;
    writer.write_record(&table.header).map_err(fail)?;
    for row in &table.rows {
        writer.write_record(row).map_err(fail)?;
    }
    writer
        .flush()
        .map_err(|e| CliError::runtime(format!("cannot write `{}`: {e}", path.display())))
}
