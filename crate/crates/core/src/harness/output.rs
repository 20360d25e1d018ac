//! Result rows, CSV emission and per-experiment summaries.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numfmt::{format_f64, parse_f64};

pub const CSV_HEADER: [&str; 13] = [
    "experiment",
    "seed",
    "n_states",
    "n_actions",
    "horizon",
    "d",
    "samples_used",
    "max_q_error",
    "policy_subopt",
    "mu",
    "kappa",
    "gate_passed",
    "wall_time_ms",
];

/// One replicate's outcome. Undefined numeric fields hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub d: usize,
    pub samples_used: u64,
    pub max_q_error: f64,
    pub policy_subopt: f64,
    pub mu: f64,
    pub kappa: f64,
    pub gate_passed: bool,
    pub wall_time_ms: f64,
}

impl ResultRow {
    fn record(&self) -> [String; 13] {
        [
            self.experiment.clone(),
            self.seed.to_string(),
            self.n_states.to_string(),
            self.n_actions.to_string(),
            self.horizon.to_string(),
            self.d.to_string(),
            self.samples_used.to_string(),
            format_f64(self.max_q_error),
            format_f64(self.policy_subopt),
            format_f64(self.mu),
            format_f64(self.kappa),
            self.gate_passed.to_string(),
            format_f64(self.wall_time_ms),
        ]
    }

    fn from_record(rec: &csv::StringRecord, line: u64) -> Result<Self> {
        let bad = |field: &str| Error::Parse(format!("line {line}: bad {field}"));
        let get = |i: usize| rec.get(i).ok_or_else(|| bad(CSV_HEADER[i]));
        let int = |i: usize| get(i)?.parse::<u64>().map_err(|_| bad(CSV_HEADER[i]));
        let float = |i: usize| parse_f64(get(i)?).ok_or_else(|| bad(CSV_HEADER[i]));
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::Parse(format!("line {line}: expected {} fields", CSV_HEADER.len())));
        }
        Ok(ResultRow {
            experiment: get(0)?.to_string(),
            seed: int(1)?,
            n_states: int(2)? as usize,
            n_actions: int(3)? as usize,
            horizon: int(4)? as usize,
            d: int(5)? as usize,
            samples_used: int(6)?,
            max_q_error: float(7)?,
            policy_subopt: float(8)?,
            mu: float(9)?,
            kappa: float(10)?,
            gate_passed: get(11)?.parse().map_err(|_| bad("gate_passed"))?,
            wall_time_ms: float(12)?,
        })
    }
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.record()).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[ResultRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
}

pub fn emit_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, csv_string(rows)?)?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Parse("unexpected CSV header".into()));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| ResultRow::from_record(&rec.map_err(csv_err)?, i as u64 + 2))
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Aggregates for one experiment id. Errors ignore NaN rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub rows: usize,
    pub successes: usize,
    pub success_fraction: f64,
    pub mean_error: Option<f64>,
    pub max_error: Option<f64>,
    pub total_samples: u64,
}

pub fn summarize(rows: &[ResultRow]) -> BTreeMap<String, ExperimentSummary> {
    let mut groups: BTreeMap<String, Vec<&ResultRow>> = BTreeMap::new();
    for row in rows {
        groups.entry(row.experiment.clone()).or_default().push(row);
    }
    groups
        .into_iter()
        .map(|(id, rows)| {
            let successes = rows.iter().filter(|r| r.gate_passed).count();
            let errors: Vec<f64> = rows.iter().map(|r| r.max_q_error).filter(|e| !e.is_nan()).collect();
            let summary = ExperimentSummary {
                rows: rows.len(),
                successes,
                success_fraction: successes as f64 / rows.len() as f64,
                mean_error: (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64),
                max_error: errors.iter().copied().reduce(f64::max),
                total_samples: rows.iter().map(|r| r.samples_used).sum(),
            };
            (id, summary)
        })
        .collect()
}

pub fn emit_summary(rows: &[ResultRow]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&summarize(rows))?)
}

/// `h,eps_h,literal_v` rows in execution order.
pub fn recursion_csv(trace: &crate::algorithms::RecursionTrace) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["h", "eps_h", "literal_v"]).map_err(csv_err)?;
    for (k, (h, eps)) in trace.rows().enumerate() {
        w.write_record([h.to_string(), format_f64(eps), format_f64(trace.literal_v[k])])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: u64, ok: bool) -> ResultRow {
        ResultRow {
            experiment: "lrevi_tucker".into(),
            seed: i,
            n_states: 30,
            n_actions: 30,
            horizon: 5,
            d: 2,
            samples_used: 10 * i,
            max_q_error: 0.1 * i as f64,
            policy_subopt: f64::NAN,
            mu: 1.25,
            kappa: f64::INFINITY,
            gate_passed: ok,
            wall_time_ms: f64::NAN,
        }
    }

    #[test]
    fn empty_rows_give_header_only() {
        assert_eq!(csv_string(&[]).unwrap(), format!("{}\n", CSV_HEADER.join(",")));
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rows: Vec<ResultRow> = (0..5).map(|i| row(i, i % 2 == 0)).collect();
        rows[3].max_q_error = 0.1 + 0.2;
        let text = csv_string(&rows).unwrap();
        let back = read_csv(text.as_bytes()).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.max_q_error.to_bits(), b.max_q_error.to_bits());
            assert!(b.policy_subopt.is_nan());
            assert_eq!(b.kappa, f64::INFINITY);
            assert_eq!(a.gate_passed, b.gate_passed);
        }
        assert!(text.contains("3.0000000000000004e-1"));
    }

    #[test]
    fn success_fraction() {
        let rows: Vec<ResultRow> = (0..10).map(|i| row(i, i != 4)).collect();
        let s = &summarize(&rows)["lrevi_tucker"];
        assert_eq!(s.success_fraction, 0.9);
        assert_eq!(s.successes, 9);
        assert_eq!(s.total_samples, 450);
        assert!(emit_summary(&rows).unwrap().contains("\"success_fraction\": 0.9"));
    }
}
