use std::path::{Path, PathBuf};

use pseudolabel_kit::io::write_file;
use pseudolabel_kit::{Error, Result};
use serde::Serialize;

/// A header row plus string cells, rendered as CSV.
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        // writing into memory cannot fail
        w.write_record(&self.header).expect("in-memory csv");
        for row in &self.rows {
            w.write_record(row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv of utf-8 cells")
    }
}

/// Shortest representation that parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn json_string<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Path of the JSON mirror of a CSV output.
pub fn json_mirror(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes the CSV to `out` and the JSON mirror next to it, or prints the CSV
/// when no path is given.
pub fn emit<T: Serialize + ?Sized>(out: Option<&Path>, table: &Table, json: &T) -> Result<()> {
    match out {
        Some(path) => {
            if path.extension().is_some_and(|e| e == "json") {
                return Err(Error::InvalidArgument(format!(
                    "{}: table output must not use the .json extension of its mirror",
                    path.display()
                )));
            }
            write_file(path, &table.to_csv())?;
            write_file(&json_mirror(path), &json_string(json))
        }
        None => {
            print!("{}", table.to_csv());
            Ok(())
        }
    }
}
