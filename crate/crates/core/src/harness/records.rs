//! Versioned CSV persistence of run records.
//!
//! Every row carries the schema version in its first column so a reader can
//! refuse files written by a different layout. Wall-clock times are kept in
//! a separate sidecar so the run CSV itself is byte-identical across
//! same-seed invocations.

use std::path::Path;

use crate::coop::RunRecord;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Column names of a run CSV for `tasks` tasks and `coords` logged
/// coordinates.
pub fn header(tasks: usize, coords: usize) -> Vec<String> {
    let mut h = vec!["schema".to_string(), "iter".to_string()];
    let per_task = ["loss", "accuracy", "clamped", "max_shift"];
    for name in per_task {
        h.extend((1..=tasks).map(|t| format!("{name}_{t}")));
    }
    h.push("negative_transfer".into());
    h.extend((0..coords).map(|c| format!("x{c}")));
    h
}

/// Serializes records; `tasks` fixes the column count.
pub fn to_csv(records: &[RunRecord], tasks: usize) -> Result<String> {
    let coords = records
        .first()
        .and_then(|r| r.coordinates.as_ref())
        .map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid("csv", e.to_string());
    w.write_record(header(tasks, coords)).map_err(csv_err)?;
    for r in records {
        if r.loss.len() != tasks || r.clamped.len() != tasks || r.max_shift.len() != tasks {
            return Err(Error::invalid(
                "csv",
                format!("record {} does not have {tasks} tasks", r.iter),
            ));
        }
        let mut row = vec![SCHEMA_VERSION.to_string(), r.iter.to_string()];
        row.extend(r.loss.iter().map(|v| v.to_string()));
        match &r.accuracy {
            Some(a) if a.len() == tasks => row.extend(a.iter().map(|v| v.to_string())),
            Some(_) => {
                return Err(Error::invalid(
                    "csv",
                    format!("record {} accuracy width", r.iter),
                ))
            }
            None => row.extend(std::iter::repeat_n(String::new(), tasks)),
        }
        row.extend(r.clamped.iter().map(|v| v.to_string()));
        row.extend(r.max_shift.iter().map(|v| v.to_string()));
        row.push(
            r.negative_transfer
                .map(|b| u8::from(b).to_string())
                .unwrap_or_default(),
        );
        let c = r.coordinates.as_deref().unwrap_or(&[]);
        if c.len() != coords {
            return Err(Error::invalid(
                "csv",
                format!("record {} coordinate width", r.iter),
            ));
        }
        row.extend(c.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid("csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One parsed row; wall time is not part of the run CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub iter: usize,
    pub loss: Vec<f64>,
    pub accuracy: Option<Vec<f64>>,
    pub clamped: Vec<usize>,
    pub max_shift: Vec<f64>,
    pub negative_transfer: Option<bool>,
    pub coordinates: Vec<f64>,
}

/// A parsed run CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTable {
    pub tasks: usize,
    pub rows: Vec<Row>,
}

impl RunTable {
    /// Last recorded accuracy per task.
    pub fn final_accuracy(&self) -> Option<&[f64]> {
        self.rows.iter().rev().find_map(|r| r.accuracy.as_deref())
    }

    /// Fraction of outer iterations flagged as negative transfer, over the
    /// iterations where it was measured.
    pub fn negative_transfer_rate(&self) -> Option<f64> {
        let flags: Vec<bool> = self
            .rows
            .iter()
            .filter_map(|r| r.negative_transfer)
            .collect();
        (!flags.is_empty())
            .then(|| flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
    }
}

/// Parses a run CSV, naming the offending row and column on failure.
/// Row numbers count the header as row 1.
pub fn parse_csv(text: &str, path: &Path) -> Result<RunTable> {
    let err = |row: usize, column: &str, msg: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut records = rdr.records();
    let head = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(err(1, "", e.to_string())),
        None => return Err(err(1, "", "empty file".into())),
    };
    let names: Vec<String> = head.iter().map(str::to_string).collect();
    if names.first().map(String::as_str) != Some("schema") {
        return Err(err(
            1,
            names.first().map_or("", |s| s),
            "first column must be `schema`".into(),
        ));
    }
    let tasks = names.iter().filter(|n| n.starts_with("loss_")).count();
    let coords = names.iter().filter(|n| n.starts_with('x')).count();
    if tasks == 0 || names != header(tasks, coords) {
        return Err(err(1, "", format!("unexpected header {names:?}")));
    }
    let mut rows = Vec::new();
    for (k, rec) in records.enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| err(line, "", e.to_string()))?;
        if rec.len() != names.len() {
            return Err(err(
                line,
                "",
                format!("{} fields, expected {}", rec.len(), names.len()),
            ));
        }
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let num = |c: usize| -> Result<f64> {
            let v: f64 = cell(c)
                .parse()
                .map_err(|_| err(line, &names[c], format!("`{}` is not a number", cell(c))))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(
                    line,
                    &names[c],
                    format!("non-finite value `{}`", cell(c)),
                ))
            }
        };
        let int = |c: usize| -> Result<usize> {
            cell(c)
                .parse()
                .map_err(|_| err(line, &names[c], format!("`{}` is not a count", cell(c))))
        };
        let version: u32 = cell(0)
            .parse()
            .map_err(|_| err(line, "schema", format!("`{}` is not a version", cell(0))))?;
        if version != SCHEMA_VERSION {
            return Err(err(
                line,
                "schema",
                format!("schema version {version} is not supported (expected {SCHEMA_VERSION})"),
            ));
        }
        let iter = int(1)?;
        if let Some(prev) = rows.last().map(|r: &Row| r.iter) {
            if iter <= prev {
                return Err(err(
                    line,
                    "iter",
                    format!("iteration {iter} does not increase"),
                ));
            }
        }
        let base = 2;
        let loss = (0..tasks)
            .map(|t| num(base + t))
            .collect::<Result<Vec<_>>>()?;
        let acc_cols = base + tasks..base + 2 * tasks;
        let accuracy = if acc_cols.clone().all(|c| cell(c).is_empty()) {
            None
        } else {
            Some(acc_cols.map(num).collect::<Result<Vec<_>>>()?)
        };
        let clamped = (0..tasks)
            .map(|t| int(base + 2 * tasks + t))
            .collect::<Result<Vec<_>>>()?;
        let max_shift = (0..tasks)
            .map(|t| num(base + 3 * tasks + t))
            .collect::<Result<Vec<_>>>()?;
        let nt_col = base + 4 * tasks;
        let negative_transfer = match cell(nt_col) {
            "" => None,
            "0" => Some(false),
            "1" => Some(true),
            other => {
                return Err(err(
                    line,
                    &names[nt_col],
                    format!("`{other}` is not 0 or 1"),
                ))
            }
        };
        let coordinates = (0..coords)
            .map(|c| num(nt_col + 1 + c))
            .collect::<Result<Vec<_>>>()?;
        rows.push(Row {
            iter,
            loss,
            accuracy,
            clamped,
            max_shift,
            negative_transfer,
            coordinates,
        });
    }
    Ok(RunTable { tasks, rows })
}

/// Reads and parses a run CSV from disk.
pub fn read_csv(path: &Path) -> Result<RunTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

/// `iter,wall_ms` sidecar.
pub fn timing_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("iter,wall_ms\n");
    for r in records {
        s += &format!("{},{:.3}\n", r.iter, r.wall_ms);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(iter: usize, acc: bool) -> RunRecord {
        RunRecord {
            iter,
            loss: vec![0.1 + iter as f64, 1.0 / 3.0],
            accuracy: acc.then(|| vec![0.99, 0.5]),
            negative_transfer: Some(iter.is_multiple_of(2)),
            clamped: vec![3, 0],
            max_shift: vec![0.05, 1e-300],
            coordinates: None,
            wall_ms: 12.5,
        }
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let rs = vec![rec(0, false), rec(1, true), rec(2, true)];
        let text = to_csv(&rs, 2).unwrap();
        assert!(text.starts_with("schema,iter,loss_1,loss_2,accuracy_1,accuracy_2,"));
        let t = parse_csv(&text, Path::new("r.csv")).unwrap();
        assert_eq!(t.rows.len(), 3);
        for (row, r) in t.rows.iter().zip(&rs) {
            assert_eq!(row.loss, r.loss);
            assert_eq!(row.accuracy, r.accuracy);
            assert_eq!(row.max_shift, r.max_shift);
            assert_eq!(row.negative_transfer, r.negative_transfer);
        }
        assert_eq!(t.final_accuracy(), Some(&[0.99, 0.5][..]));
        assert!((t.negative_transfer_rate().unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn coordinates_round_trip() {
        let mut r = rec(0, false);
        r.coordinates = Some(vec![0.25, -1.0]);
        let text = to_csv(&[r], 2).unwrap();
        let t = parse_csv(&text, Path::new("r.csv")).unwrap();
        assert_eq!(t.rows[0].coordinates, vec![0.25, -1.0]);
    }

    #[test]
    fn version_mismatch_refused() {
        let text = to_csv(&[rec(0, true)], 2)
            .unwrap()
            .replacen("\n1,", "\n2,", 1);
        let e = parse_csv(&text, Path::new("r.csv"))
            .unwrap_err()
            .to_string();
        assert!(e.contains("schema version 2"), "{e}");
        assert!(e.contains("row 2"), "{e}");
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        let text = to_csv(&[rec(0, true), rec(1, true)], 2).unwrap();
        let text = text.replacen("0.99", "abc", 2);
        let e = parse_csv(&text, Path::new("r.csv")).unwrap_err();
        match e {
            Error::Csv { row, column, .. } => assert_eq!((row, column.as_str()), (2, "accuracy_1")),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn decreasing_iterations_rejected() {
        let text = to_csv(&[rec(1, true), rec(0, true)], 2).unwrap();
        assert!(parse_csv(&text, Path::new("r.csv")).is_err());
    }

    #[test]
    fn timing_sidecar_lists_every_record() {
        assert_eq!(timing_csv(&[rec(0, false)]), "iter,wall_ms\n0,12.500\n");
    }
}
