//! Trade-off tables aggregated from summary CSVs.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub param: String,
    pub leak_auc: Option<f64>,
    pub test_auc: f64,
    pub test_loss: f64,
    pub ace: f64,
}

pub const REPORT_HEADER: [&str; 5] = ["param", "leak_auc", "test_auc", "test_loss", "ace"];

fn median(mut v: Vec<f64>) -> Option<f64> {
    v.retain(|x| !x.is_nan());
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[derive(Default)]
struct Acc {
    leak: Vec<f64>,
    test_auc: Vec<f64>,
    test_loss: Vec<f64>,
    ace: Vec<f64>,
}

/// Median over seeds per parameter value, sorted by parameter (numerically
/// when every value parses as a number). `attack` picks the leak column;
/// by default the first `leak_auc_*` column is used.
pub fn aggregate<R: Read>(inputs: Vec<R>, attack: Option<&str>) -> Result<Vec<ReportRow>> {
    let mut groups: BTreeMap<String, Acc> = BTreeMap::new();
    for input in inputs {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("summary CSV lacks column `{name}`")))
        };
        let (pc, ac, lc, ec) = (col("param")?, col("test_auc")?, col("test_loss")?, col("ace")?);
        let leak_col = match attack {
            Some(a) => Some(col(&format!("leak_auc_{a}"))?),
            None => header.iter().position(|h| h.starts_with("leak_auc_")),
        };
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> f64 { rec[i].trim().parse().unwrap_or(f64::NAN) };
            let acc = groups.entry(rec[pc].to_string()).or_default();
            if let Some(c) = leak_col {
                acc.leak.push(num(c));
            }
            acc.test_auc.push(num(ac));
            acc.test_loss.push(num(lc));
            acc.ace.push(num(ec));
        }
    }
    let mut rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|(param, a)| ReportRow {
            param,
            leak_auc: median(a.leak),
            test_auc: median(a.test_auc).unwrap_or(f64::NAN),
            test_loss: median(a.test_loss).unwrap_or(f64::NAN),
            ace: median(a.ace).unwrap_or(f64::NAN),
        })
        .collect();
    let numeric: Option<Vec<f64>> = rows.iter().map(|r| r.param.parse::<f64>().ok()).collect();
    if let Some(keys) = numeric {
        let mut keyed: Vec<(f64, ReportRow)> = keys.into_iter().zip(rows).collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        rows = keyed.into_iter().map(|(_, r)| r).collect();
    }
    Ok(rows)
}

pub fn write_report<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record([
            r.param.clone(),
            r.leak_auc.map(|x| x.to_string()).unwrap_or_default(),
            r.test_auc.to_string(),
            r.test_loss.to_string(),
            r.ace.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
