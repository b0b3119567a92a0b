//! CSV and line-delimited JSON renderings of a [`BenchReport`].

use std::path::Path;

use serde::Serialize;

use super::protocol::{BenchReport, Cell};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::write_atomic;

pub const CSV_HEADER: &str = "model,pattern,rate,mse,mae,count";

/// One row per cell, then one `model,all,avg,...` row per model.
pub fn render_csv(report: &BenchReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for c in &report.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.model.as_str(),
            c.pattern.as_str(),
            c.rate,
            c.mse,
            c.mae,
            c.count
        ));
    }
    for a in report.averages() {
        out.push_str(&format!("{},all,avg,{},{},{}\n", a.model.as_str(), a.mse, a.mae, a.count));
    }
    out
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record<'a> {
    Header {
        metric_space: &'static str,
        seed: u64,
        train_variables: &'a [usize],
        test_variables: &'a [usize],
    },
    Cell(&'a Cell),
    Average(super::protocol::Average),
}

/// A header record naming the metric space and the variable sets, then
/// one record per cell and per model average.
pub fn render_jsonl(report: &BenchReport) -> String {
    let mut records = vec![Record::Header {
        metric_space: report.metric_space.as_str(),
        seed: report.seed,
        train_variables: &report.train_variables,
        test_variables: &report.test_variables,
    }];
    records.extend(report.cells.iter().map(Record::Cell));
    records.extend(report.averages().into_iter().map(Record::Average));
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

/// Writes `report.csv` and `report.jsonl` into `dir`, creating it.
pub fn render_report(report: &BenchReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("report.csv"), render_csv(report).as_bytes())?;
    write_atomic(&dir.join("report.jsonl"), render_jsonl(report).as_bytes())
}

/// Cells of an emitted CSV; average rows are skipped.
pub fn parse_report_csv(text: &str) -> Result<Vec<Cell>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Format(format!("report header is `{}`", header.join(","))));
    }
    let mut cells = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if &rec[1] == "all" {
            continue;
        }
        let bad = |column: usize| Error::Parse {
            row: i + 2,
            column: column + 1,
            message: format!("cannot parse `{}`", &rec[column]),
        };
        cells.push(Cell {
            model: rec[0].parse().map_err(|_| bad(0))?,
            pattern: rec[1].parse().map_err(|_| bad(1))?,
            rate: rec[2].parse().map_err(|_| bad(2))?,
            mse: rec[3].parse().map_err(|_| bad(3))?,
            mae: rec[4].parse().map_err(|_| bad(4))?,
            count: rec[5].parse().map_err(|_| bad(5))?,
        });
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::config::ModelKind;
    use crate::bench::metrics::MetricSpace;
    use crate::data::MissingPattern;

    fn report(models: &[ModelKind]) -> BenchReport {
        let mut cells = Vec::new();
        for (k, &m) in models.iter().enumerate() {
            for p in [MissingPattern::Random, MissingPattern::Continuous] {
                for i in 1..=9 {
                    let x = (k * 31 + i * 7) as f64 / 113.0;
                    cells.push(Cell {
                        model: m,
                        pattern: p,
                        rate: i as f64 / 10.0,
                        mse: x * x / 3.0,
                        mae: x.sqrt(),
                        count: 96 * i,
                    });
                }
            }
        }
        BenchReport {
            metric_space: MetricSpace::Normalized,
            seed: 1,
            train_variables: vec![0, 3],
            test_variables: vec![1, 2],
            cells,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = BenchReport {
            cells: vec![],
            ..report(&[])
        };
        assert_eq!(render_csv(&r), format!("{CSV_HEADER}\n"));
        assert_eq!(render_jsonl(&r).lines().count(), 1);
    }

    #[test]
    fn row_counts_and_roundtrip() {
        let r = report(&[ModelKind::Median, ModelKind::Model]);
        let text = render_csv(&r);
        assert_eq!(text.lines().count(), 1 + 36 + 2);
        assert_eq!(parse_report_csv(&text).unwrap(), r.cells);
        for a in r.averages() {
            let cells: Vec<f64> = r.cells.iter().filter(|c| c.model == a.model).map(|c| c.mse).collect();
            let mean = cells.iter().sum::<f64>() / cells.len() as f64;
            assert!((a.mse - mean).abs() < 1e-12);
        }
        let jl = render_jsonl(&r);
        let first: serde_json::Value = serde_json::from_str(jl.lines().next().unwrap()).unwrap();
        assert_eq!(first["kind"], "header");
        assert_eq!(first["metric_space"], "normalized");
        assert_eq!(jl.lines().count(), 1 + 36 + 2);
    }

    #[test]
    fn bad_csv_is_rejected() {
        assert!(parse_report_csv("a,b\n").is_err());
        assert!(matches!(
            parse_report_csv(&format!("{CSV_HEADER}\nmedian,random,x,1,1,1\n")),
            Err(Error::Parse { column: 3, .. })
        ));
    }
}
