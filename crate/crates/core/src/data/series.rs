use std::path::Path;

use crate::error::{Error, Result};

/// A `T × V` table of observations with a native observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    pub names: Vec<String>,
    /// Row-major `T × V`; missing cells hold 0.
    pub values: Vec<f64>,
    /// Row-major `T × V`; `true` where observed.
    pub mask: Vec<bool>,
    pub domain: String,
}

impl MultivariateSeries {
    pub fn new(names: Vec<String>, values: Vec<f64>, mask: Vec<bool>, domain: impl Into<String>) -> Result<Self> {
        let v = names.len();
        if values.len() != mask.len() || (v > 0 && !values.len().is_multiple_of(v)) || (v == 0 && !values.is_empty()) {
            return Err(Error::Format(format!(
                "{} values / {} mask cells do not form a table with {v} columns",
                values.len(),
                mask.len()
            )));
        }
        Ok(MultivariateSeries {
            names,
            values,
            mask,
            domain: domain.into(),
        })
    }

    /// Builds a fully observed series from per-variable columns.
    pub fn from_columns(names: Vec<String>, columns: &[Vec<f64>], domain: impl Into<String>) -> Result<Self> {
        let t = columns.first().map_or(0, Vec::len);
        if columns.len() != names.len() || columns.iter().any(|c| c.len() != t) {
            return Err(Error::Format("columns must share one length and match names".into()));
        }
        let values = (0..t).flat_map(|r| columns.iter().map(move |c| c[r])).collect();
        Self::new(names, values, vec![true; t * columns.len()], domain)
    }

    pub fn len(&self) -> usize {
        if self.names.is_empty() {
            0
        } else {
            self.values.len() / self.names.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vars(&self) -> usize {
        self.names.len()
    }

    pub fn column(&self, v: usize) -> (Vec<f64>, Vec<bool>) {
        let n = self.vars();
        (
            self.values.iter().skip(v).step_by(n).copied().collect(),
            self.mask.iter().skip(v).step_by(n).copied().collect(),
        )
    }
}

/// Reads a CSV with a header row. A first column named `timestamp` is
/// skipped; empty (or `NaN`) cells are missing.
pub fn load_csv(path: &Path) -> Result<MultivariateSeries> {
    let domain = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = std::fs::File::open(path)?;
    parse_csv(file, domain)
}

pub fn parse_csv<R: std::io::Read>(reader: R, domain: impl Into<String>) -> Result<MultivariateSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let skip = usize::from(
        header
            .get(0)
            .is_some_and(|h| h.eq_ignore_ascii_case("timestamp")),
    );
    let names: Vec<String> = header.iter().skip(skip).map(str::to_string).collect();
    let mut values = Vec::new();
    let mut mask = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (c, cell) in rec.iter().enumerate().skip(skip) {
            if cell.is_empty() {
                values.push(0.0);
                mask.push(false);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: r + 2,
                column: c + 1,
                message: format!("`{cell}` is not a number"),
            })?;
            if v.is_nan() {
                values.push(0.0);
                mask.push(false);
            } else if v.is_infinite() {
                return Err(Error::Parse {
                    row: r + 2,
                    column: c + 1,
                    message: "infinite value".into(),
                });
            } else {
                values.push(v);
                mask.push(true);
            }
        }
    }
    MultivariateSeries::new(names, values, mask, domain)
}

/// Reads a 0/1 mask file with the same layout as the data file.
pub fn load_mask_csv(path: &Path, like: &MultivariateSeries) -> Result<Vec<bool>> {
    let m = load_csv(path)?;
    if m.vars() != like.vars() || m.len() != like.len() {
        return Err(Error::Format(format!(
            "mask is {}×{}, data is {}×{}",
            m.len(),
            m.vars(),
            like.len(),
            like.vars()
        )));
    }
    m.values
        .iter()
        .zip(&m.mask)
        .enumerate()
        .map(|(i, (&v, &obs))| match (obs, v) {
            (true, x) if x == 1.0 => Ok(true),
            (true, x) if x == 0.0 => Ok(false),
            _ => Err(Error::Parse {
                row: i / like.vars() + 2,
                column: i % like.vars() + 1,
                message: "mask cells must be 0 or 1".into(),
            }),
        })
        .collect()
}

/// Writes a table with a header row; `None` cells are left empty.
pub fn write_csv(path: &Path, names: &[String], rows: &[Vec<Option<f64>>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(names)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()))?;
    }
    w.flush()?;
    Ok(())
}
