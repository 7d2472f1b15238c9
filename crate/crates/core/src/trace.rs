//! Per-iteration run traces and their CSV form.
//!
//! Header: `iter,delta,eta,consumed,y,best_y,score,cost_s1..cost_sK,x_1..x_d`.
//! Floats use 17 significant digits. Warmup rows carry `NaN` in `score`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 1-based, warmup included.
    pub iter: usize,
    pub delta: usize,
    pub eta: f64,
    pub consumed: f64,
    pub y: f64,
    pub best_y: f64,
    /// Acquisition score of the chosen candidate; NaN for warmup points.
    pub score: f64,
    pub stage_costs: Vec<f64>,
    pub x: Vec<f64>,
}

impl TraceRecord {
    pub fn is_warmup(&self) -> bool {
        self.score.is_nan()
    }

    pub fn executed_cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
}

impl RunTrace {
    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn warmup(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| r.is_warmup())
    }

    pub fn post_warmup(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| !r.is_warmup())
    }

    pub fn post_warmup_iterations(&self) -> usize {
        self.post_warmup().count()
    }

    pub fn best_y(&self) -> f64 {
        self.records.last().map_or(f64::NEG_INFINITY, |r| r.best_y)
    }

    pub fn consumed(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.consumed)
    }

    /// Best objective at the end of warmup.
    pub fn warmup_best(&self) -> f64 {
        self.warmup().map(|r| r.y).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Post-warmup iterations that raised the best objective, split into
    /// (with memoization, total).
    pub fn improvement_counts(&self) -> (usize, usize) {
        let mut best = self.warmup_best();
        let (mut memo, mut total) = (0, 0);
        for r in self.post_warmup() {
            if r.y > best {
                total += 1;
                if r.delta > 0 {
                    memo += 1;
                }
                best = r.y;
            }
        }
        (memo, total)
    }

    pub fn stages(&self) -> usize {
        self.records.first().map_or(0, |r| r.stage_costs.len())
    }

    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.x.len())
    }

    pub fn header(stages: usize, dim: usize) -> Vec<String> {
        let mut h: Vec<String> = ["iter", "delta", "eta", "consumed", "y", "best_y", "score"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((1..=stages).map(|k| format!("cost_s{k}")));
        h.extend((1..=dim).map(|i| format!("x_{i}")));
        h
    }

    pub fn write_csv<W: Write>(&self, out: W, stages: usize, dim: usize) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(Self::header(stages, dim)).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![
                r.iter.to_string(),
                r.delta.to_string(),
                fmt_f64(r.eta),
                fmt_f64(r.consumed),
                fmt_f64(r.y),
                fmt_f64(r.best_y),
                fmt_f64(r.score),
            ];
            row.extend(r.stage_costs.iter().map(|v| fmt_f64(*v)));
            row.extend(r.x.iter().map(|v| fmt_f64(*v)));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path, stages: usize, dim: usize) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::storage(path, e))?;
        self.write_csv(std::io::BufWriter::new(f), stages, dim)
    }

    pub fn read_csv<R: Read>(input: R, name: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: name.to_path_buf(),
            message,
        };
        let mut rdr = csv::ReaderBuilder::new().from_reader(input);
        let header = rdr.headers().map_err(|e| parse_err(e.to_string()))?.clone();
        let stages = header.iter().filter(|h| h.starts_with("cost_s")).count();
        let dim = header.iter().filter(|h| h.starts_with("x_")).count();
        let expected = Self::header(stages, dim);
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(parse_err("unexpected trace header".into()));
        }
        let mut trace = RunTrace::default();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            let field = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| parse_err(format!("row {}: missing column {i}", line + 2)))?
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("row {}: {e}", line + 2)))
            };
            let int = |i: usize| -> Result<usize> {
                rec.get(i)
                    .unwrap_or_default()
                    .parse::<usize>()
                    .map_err(|e| parse_err(format!("row {}: {e}", line + 2)))
            };
            trace.push(TraceRecord {
                iter: int(0)?,
                delta: int(1)?,
                eta: field(2)?,
                consumed: field(3)?,
                y: field(4)?,
                best_y: field(5)?,
                score: field(6)?,
                stage_costs: (7..7 + stages).map(field).collect::<Result<_>>()?,
                x: (7 + stages..7 + stages + dim)
                    .map(field)
                    .collect::<Result<_>>()?,
            });
        }
        Ok(trace)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::storage(path, e))?;
        Self::read_csv(std::io::BufReader::new(f), path)
    }
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(iter: usize, y: f64, best: f64, warm: bool) -> TraceRecord {
        TraceRecord {
            iter,
            delta: iter % 3,
            eta: 0.5,
            consumed: iter as f64 * 1.25,
            y,
            best_y: best,
            score: if warm { f64::NAN } else { 0.1 },
            stage_costs: vec![0.1, 0.2],
            x: vec![0.3, 1.0 / 3.0, -2.0],
        }
    }

    #[test]
    fn header_layout() {
        assert_eq!(
            RunTrace::header(2, 3).join(","),
            "iter,delta,eta,consumed,y,best_y,score,cost_s1,cost_s2,x_1,x_2,x_3"
        );
    }

    #[test]
    fn improvement_counts_use_post_warmup_rows() {
        let mut t = RunTrace::default();
        t.push(record(1, 1.0, 1.0, true));
        t.push(record(2, 2.0, 2.0, false)); // delta 2, improves
        t.push(record(3, 1.5, 2.0, false)); // no
        t.push(record(4, 3.0, 3.0, false)); // delta 1, improves
        t.push(record(6, 4.0, 4.0, false)); // delta 0, improves
        assert_eq!(t.improvement_counts(), (2, 3));
        assert_eq!(t.post_warmup_iterations(), 4);
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(ys in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
            let mut t = RunTrace::default();
            let mut best = f64::NEG_INFINITY;
            for (i, y) in ys.iter().enumerate() {
                best = best.max(*y);
                t.push(record(i + 1, *y, best, i == 0));
            }
            let mut buf = Vec::new();
            t.write_csv(&mut buf, 2, 3).unwrap();
            let back = RunTrace::read_csv(buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.records.len(), t.records.len());
            for (a, b) in back.records.iter().zip(&t.records) {
                prop_assert_eq!(a.y.to_bits(), b.y.to_bits());
                prop_assert_eq!(a.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                                b.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                prop_assert_eq!(a.is_warmup(), b.is_warmup());
            }
        }
    }

    #[test]
    fn malformed_trace_names_file() {
        let err =
            RunTrace::read_csv("iter,delta\n1,2\n".as_bytes(), Path::new("bad.csv")).unwrap_err();
        match err {
            Error::Parse { path, .. } => assert_eq!(path, Path::new("bad.csv")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
