//! Per-solve records and their CSV form.
//!
//! Floats are written with 17 significant digits so every file reads back
//! to the same values. Totals rows leave `channel` and `band` empty.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::gauges::GaugeKind;
use crate::sternheimer::Method;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    /// `None` on a totals row.
    pub channel: Option<usize>,
    pub band: Option<usize>,
    pub method: Method,
    pub gauge: GaugeKind,
    /// `ε_{N+1} - ε_N` of the channel.
    pub gap: f64,
    pub iterations: usize,
    pub final_residual: f64,
    pub h_applies: u64,
}

impl SolverReport {
    pub fn is_total(&self) -> bool {
        self.channel.is_none()
    }
}

pub const CSV_HEADER: [&str; 8] = [
    "channel_id",
    "band_index",
    "method",
    "gauge",
    "gap",
    "iterations",
    "final_residual",
    "h_applies",
];

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Totals per method (in first-seen order): iterations, worst residual and
/// applications summed; `extra_applies` adds per-method setup cost.
pub fn totals(rows: &[SolverReport], extra_applies: &BTreeMap<String, u64>) -> Vec<SolverReport> {
    let mut order: Vec<(Method, GaugeKind)> = Vec::new();
    for r in rows.iter().filter(|r| !r.is_total()) {
        if !order.contains(&(r.method, r.gauge)) {
            order.push((r.method, r.gauge));
        }
    }
    order
        .into_iter()
        .map(|(method, gauge)| {
            let sel: Vec<&SolverReport> = rows
                .iter()
                .filter(|r| !r.is_total() && r.method == method && r.gauge == gauge)
                .collect();
            SolverReport {
                channel: None,
                band: None,
                method,
                gauge,
                gap: sel.iter().fold(f64::INFINITY, |a, r| a.min(r.gap)),
                iterations: sel.iter().map(|r| r.iterations).sum(),
                final_residual: sel.iter().fold(0.0, |a, r| a.max(r.final_residual)),
                h_applies: sel.iter().map(|r| r.h_applies).sum::<u64>()
                    + extra_applies.get(&method.to_string()).copied().unwrap_or(0),
            }
        })
        .collect()
}

/// Writes the header and one line per row, in order.
pub fn write_csv<W: Write>(out: W, rows: &[SolverReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            opt(r.channel),
            opt(r.band),
            r.method.to_string(),
            r.gauge.to_string(),
            format_float(r.gap),
            r.iterations.to_string(),
            format_float(r.final_residual),
            r.h_applies.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<SolverReport>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_HEADER {
        return Err(Error::Format(format!("unexpected report header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |what: &str| Error::Parse { line, msg: format!("bad {what}") };
        let optional = |s: &str| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad("index"))
            }
        };
        rows.push(SolverReport {
            channel: optional(&rec[0])?,
            band: optional(&rec[1])?,
            method: rec[2].parse()?,
            gauge: rec[3].parse()?,
            gap: rec[4].parse().map_err(|_| bad("gap"))?,
            iterations: rec[5].parse().map_err(|_| bad("iterations"))?,
            final_residual: rec[6].parse().map_err(|_| bad("residual"))?,
            h_applies: rec[7].parse().map_err(|_| bad("h_applies"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(channel: Option<usize>, band: usize, method: Method, gap: f64, it: usize, res: f64) -> SolverReport {
        SolverReport {
            channel,
            band: channel.map(|_| band),
            method,
            gauge: GaugeKind::Minimal,
            gap,
            iterations: it,
            final_residual: res,
            h_applies: it as u64,
        }
    }

    #[test]
    fn totals_per_method() {
        let rows = vec![
            row(Some(0), 0, Method::Direct, 0.1, 10, 1e-10),
            row(Some(0), 1, Method::Direct, 0.1, 12, 3e-10),
            row(Some(0), 0, Method::Schur, 0.1, 7, 2e-10),
        ];
        let mut extra = BTreeMap::new();
        extra.insert("schur".to_string(), 3);
        let t = totals(&rows, &extra);
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].iterations, t[0].h_applies), (22, 22));
        assert_eq!((t[1].iterations, t[1].h_applies), (7, 10));
        assert_eq!(t[0].final_residual, 3e-10);
    }

    proptest! {
        #[test]
        fn csv_round_trip(
            vals in proptest::collection::vec((any::<f64>(), 0usize..1000, -1e300f64..1e300, 0usize..4, any::<bool>()), 0..20)
        ) {
            let rows: Vec<SolverReport> = vals
                .iter()
                .map(|&(gap, it, res, b, total)| {
                    let gap = if gap.is_finite() { gap } else { 0.0 };
                    row(if total { None } else { Some(b) }, b, Method::ALL[b % 3], gap, it, res)
                })
                .collect();
            let mut buf = Vec::new();
            write_csv(&mut buf, &rows).unwrap();
            prop_assert_eq!(read_csv(buf.as_slice()).unwrap(), rows);
        }
    }
}
