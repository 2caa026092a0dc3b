//! estimates.csv parsing and replicate summaries. The summary is a pure
//! function of the estimates file plus the true parameter, so it can always
//! be regenerated from the emitted artifacts alone.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use ips_core::contrast::{Method, ObservationMode};
use ips_core::{Error, Result};

/// One successful estimation run, as stored in estimates.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRecord {
    pub replicate: usize,
    pub method: Method,
    pub mode: ObservationMode,
    pub theta_hat: Vec<f64>,
    pub final_contrast: f64,
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn method_str(m: Method) -> &'static str {
    match m {
        Method::Lg => "lg",
        Method::Em => "em",
    }
}

fn mode_str(m: ObservationMode) -> &'static str {
    match m {
        ObservationMode::Complete => "complete",
        ObservationMode::Partial => "partial",
    }
}

pub fn render_estimates_csv(names: &[String], records: &[EstimateRecord]) -> String {
    let mut buf = String::from("replicate,method,mode");
    for n in names {
        write!(buf, ",{n}").unwrap();
    }
    buf.push_str(",contrast\n");
    for r in records {
        write!(
            buf,
            "{},{},{}",
            r.replicate,
            method_str(r.method),
            mode_str(r.mode)
        )
        .unwrap();
        for v in &r.theta_hat {
            write!(buf, ",{}", fmt17(*v)).unwrap();
        }
        writeln!(buf, ",{}", fmt17(r.final_contrast)).unwrap();
    }
    buf
}

pub fn parse_estimates_csv(text: &str) -> Result<(Vec<String>, Vec<EstimateRecord>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("estimates file is empty".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..3] != ["replicate", "method", "mode"] || *cols.last().unwrap() != "contrast"
    {
        return Err(Error::Data(format!("unexpected estimates header {header:?}")));
    }
    let names: Vec<String> = cols[3..cols.len() - 1].iter().map(|s| s.to_string()).collect();
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Data(format!(
                "estimates line {}: expected {} fields, got {}",
                lineno + 2,
                cols.len(),
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Data(format!("estimates line {}: bad {what}", lineno + 2));
        let method = match fields[1] {
            "lg" => Method::Lg,
            "em" => Method::Em,
            _ => return Err(bad("method")),
        };
        let mode = match fields[2] {
            "complete" => ObservationMode::Complete,
            "partial" => ObservationMode::Partial,
            _ => return Err(bad("mode")),
        };
        records.push(EstimateRecord {
            replicate: fields[0].parse().map_err(|_| bad("replicate"))?,
            method,
            mode,
            theta_hat: fields[3..fields.len() - 1]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| bad("estimate value")))
                .collect::<Result<_>>()?,
            final_contrast: fields[fields.len() - 1].parse().map_err(|_| bad("contrast"))?,
        });
    }
    Ok((names, records))
}

pub fn read_estimates(path: &Path) -> Result<(Vec<String>, Vec<EstimateRecord>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_estimates_csv(&text)
}

/// Per (component, method, mode) replicate statistics of the relative
/// discrepancies (theta_hat_k - theta_true_k) / theta_true_k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub component: String,
    pub method: Method,
    pub mode: ObservationMode,
    pub n_replicates: usize,
    pub mean_rel: f64,
    pub std_rel: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub n_records: usize,
    pub rows: Vec<SummaryRow>,
}

/// Linear-interpolation quantile on a sorted slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn summarize(
    names: &[String],
    records: &[EstimateRecord],
    theta_true: &[f64],
) -> Result<SummaryTable> {
    if names.len() != theta_true.len() {
        return Err(Error::Shape(format!(
            "{} component names for a parameter of dimension {}",
            names.len(),
            theta_true.len()
        )));
    }
    let mut rows = Vec::new();
    let mut groups: Vec<(Method, ObservationMode)> = Vec::new();
    for r in records {
        if !groups.contains(&(r.method, r.mode)) {
            groups.push((r.method, r.mode));
        }
    }
    for (method, mode) in groups {
        for (k, name) in names.iter().enumerate() {
            let mut rel: Vec<f64> = records
                .iter()
                .filter(|r| (r.method, r.mode) == (method, mode))
                .map(|r| (r.theta_hat[k] - theta_true[k]) / theta_true[k])
                .collect();
            rel.sort_by(|a, b| a.total_cmp(b));
            let n = rel.len();
            let mean = rel.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (rel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            rows.push(SummaryRow {
                component: name.clone(),
                method,
                mode,
                n_replicates: n,
                mean_rel: mean,
                std_rel: std,
                min: rel[0],
                q1: quantile(&rel, 0.25),
                median: quantile(&rel, 0.5),
                q3: quantile(&rel, 0.75),
                max: rel[n - 1],
            });
        }
    }
    Ok(SummaryTable {
        n_records: records.len(),
        rows,
    })
}

pub fn render_boxplot_csv(table: &SummaryTable) -> String {
    let mut buf = String::from("component,method,mode,min,q1,median,q3,max\n");
    for r in &table.rows {
        writeln!(
            buf,
            "{},{},{},{},{},{},{},{}",
            r.component,
            method_str(r.method),
            mode_str(r.mode),
            fmt17(r.min),
            fmt17(r.q1),
            fmt17(r.median),
            fmt17(r.q3),
            fmt17(r.max)
        )
        .unwrap();
    }
    buf
}
