//! Human-readable rendering of report CSVs. Metric values are stored as
//! ratios; percent formatting happens only here, at the reporting boundary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crpred::{Error, Result};

#[derive(Debug, Clone)]
struct Row {
    advertiser: String,
    period_start: i64,
    period_days: i64,
    model: String,
    llhn: Cell,
    uplift: Cell,
    level: Option<String>,
    n_events: u64,
}

#[derive(Debug, Clone, PartialEq)]
enum Cell {
    Value(f64),
    Insufficient,
    Undefined,
    Empty,
}

impl Cell {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "" => Cell::Empty,
            "insufficient" => Cell::Insufficient,
            "undefined" => Cell::Undefined,
            other => Cell::Value(other.parse::<f64>().map_err(|_| {
                Error::Parse { line: 0, message: format!("bad metric cell '{other}'") }
            })?),
        })
    }

    fn percent(&self, signed: bool) -> String {
        match self {
            Cell::Value(v) if signed => format!("{:+.2}%", v * 100.0),
            Cell::Value(v) => format!("{:.2}%", v * 100.0),
            Cell::Insufficient => "insufficient".into(),
            Cell::Undefined => "undefined".into(),
            Cell::Empty => "-".into(),
        }
    }
}

fn parse_rows(csv: &str) -> Result<Vec<Row>> {
    let mut lines = csv.lines();
    let header = lines.next().ok_or(Error::Parse { line: 1, message: "empty report".into() })?;
    let columns: Vec<&str> = header.split(',').collect();
    let want = [
        "advertiser", "period_start", "period_days", "model", "nll", "naive_nll", "llhn",
        "llhn_uplift", "nvi", "level", "n_events", "n_conversions",
    ];
    if columns != want {
        return Err(Error::Parse { line: 1, message: "not a crpred report CSV".into() });
    }

    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != want.len() {
            return Err(Error::Parse {
                line: i + 2,
                message: format!("expected {} columns, found {}", want.len(), f.len()),
            });
        }
        let int = |s: &str| -> Result<i64> {
            s.parse().map_err(|_| Error::Parse {
                line: i + 2,
                message: format!("bad integer '{s}'"),
            })
        };
        rows.push(Row {
            advertiser: f[0].to_string(),
            period_start: int(f[1])?,
            period_days: int(f[2])?,
            model: f[3].to_string(),
            llhn: Cell::parse(f[6])?,
            uplift: Cell::parse(f[7])?,
            level: (!f[9].is_empty()).then(|| f[9].to_string()),
            n_events: int(f[10])? as u64,
        });
    }
    Ok(rows)
}

pub fn summarize_report(csv: &str) -> Result<String> {
    let rows = parse_rows(csv)?;
    let mut out = String::new();
    writeln!(out, "crpred report summary").unwrap();
    writeln!(out, "=====================").unwrap();

    let global: Vec<&Row> = rows.iter().filter(|r| r.advertiser == "global").collect();
    if !global.is_empty() {
        writeln!(out).unwrap();
        let r0 = global[0];
        writeln!(
            out,
            "Overall (days {}..{}, {} events):",
            r0.period_start,
            r0.period_start + r0.period_days - 1,
            r0.n_events
        )
        .unwrap();
        writeln!(out, "  {:<16} {:>12} {:>12}", "model", "llhn", "uplift").unwrap();
        for r in &global {
            writeln!(
                out,
                "  {:<16} {:>12} {:>12}",
                r.model,
                r.llhn.percent(false),
                r.uplift.percent(true)
            )
            .unwrap();
        }
    }

    // condition-study style rows carry a variation level
    let leveled: Vec<&Row> = rows
        .iter()
        .filter(|r| r.advertiser != "global" && r.level.is_some())
        .collect();
    if !leveled.is_empty() {
        // mean uplift per (level, model) over advertisers with defined cells
        let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &leveled {
            if let Cell::Value(u) = r.uplift {
                cells
                    .entry((r.level.clone().unwrap(), r.model.clone()))
                    .or_default()
                    .push(u);
            }
        }
        if !cells.is_empty() {
            writeln!(out).unwrap();
            writeln!(out, "Mean uplift by variation level:").unwrap();
            writeln!(
                out,
                "  {:<14} {:<16} {:>12} {:>6}",
                "level", "model", "mean uplift", "cells"
            )
            .unwrap();
            for ((level, model), values) in &cells {
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                writeln!(
                    out,
                    "  {:<14} {:<16} {:>11.2}% {:>6}",
                    level,
                    model,
                    mean * 100.0,
                    values.len()
                )
                .unwrap();
            }
        }

        writeln!(out).unwrap();
        writeln!(out, "Per-advertiser cells:").unwrap();
        let mut current = String::new();
        for r in &leveled {
            let key = format!(
                "{} / {} (days {}..{})",
                r.advertiser,
                r.level.as_deref().unwrap_or("-"),
                r.period_start,
                r.period_start + r.period_days - 1
            );
            if key != current {
                writeln!(out, "  {key}").unwrap();
                current = key;
            }
            writeln!(
                out,
                "    {:<16} llhn {:>12}  uplift {:>12}",
                r.model,
                r.llhn.percent(false),
                r.uplift.percent(true)
            )
            .unwrap();
        }
    }
    Ok(out)
}
