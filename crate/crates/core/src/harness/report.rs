//! Report rows, their fixed CSV layout, and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_HEADER: &str =
    "experiment,seed,l,frac,train_err,test_err,kl,uc_bound,pb_bound,uc_vacuous,pb_vacuous,wall_time_ms";

/// One experiment cell. `frac` holds the swept parameter (data fraction,
/// flip probability, beta, k or sigma, depending on the experiment).
/// Missing values print as empty fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub seed: u64,
    pub l: usize,
    pub frac: f64,
    pub train_err: f64,
    pub test_err: Option<f64>,
    pub kl: f64,
    pub uc_bound: Option<f64>,
    pub pb_bound: f64,
    pub uc_vacuous: bool,
    pub pb_vacuous: bool,
    pub wall_time_ms: u64,
}

/// `%.6g`: six significant digits, trailing zeros trimmed.
pub fn format_g6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(format_g6).unwrap_or_default()
}

impl ReportRow {
    pub fn to_csv_line(&self) -> String {
        [
            crate::search::csv_field(&self.experiment),
            self.seed.to_string(),
            self.l.to_string(),
            format_g6(self.frac),
            format_g6(self.train_err),
            opt(self.test_err),
            format_g6(self.kl),
            opt(self.uc_bound),
            format_g6(self.pb_bound),
            self.uc_vacuous.to_string(),
            self.pb_vacuous.to_string(),
            self.wall_time_ms.to_string(),
        ]
        .join(",")
    }
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

fn field<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("line {line}: bad {name} value {s:?}")))
}

fn opt_field(s: &str, name: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        field(s, name, line).map(Some)
    }
}

/// Parses a report written by [`report_csv`]. Experiment ids containing
/// commas are not supported.
pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Format("report header mismatch".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let n = i + 2;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 12 {
                return Err(Error::Format(format!(
                    "line {n}: expected 12 fields, found {}",
                    f.len()
                )));
            }
            Ok(ReportRow {
                experiment: f[0].to_string(),
                seed: field(f[1], "seed", n)?,
                l: field(f[2], "l", n)?,
                frac: field(f[3], "frac", n)?,
                train_err: field(f[4], "train_err", n)?,
                test_err: opt_field(f[5], "test_err", n)?,
                kl: field(f[6], "kl", n)?,
                uc_bound: opt_field(f[7], "uc_bound", n)?,
                pb_bound: field(f[8], "pb_bound", n)?,
                uc_vacuous: field(f[9], "uc_vacuous", n)?,
                pb_vacuous: field(f[10], "pb_vacuous", n)?,
                wall_time_ms: field(f[11], "wall_time_ms", n)?,
            })
        })
        .collect()
}

/// What produced a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub experiment: String,
    pub master_seed: u64,
    pub rows: usize,
    pub config: serde_json::Value,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl RunManifest {
    pub fn new(experiment: &str, master_seed: u64, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            experiment: experiment.into(),
            master_seed,
            rows: 0,
            config,
            notes: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }
}

/// Manifest path that accompanies a CSV report.
pub fn manifest_path(csv: &Path) -> PathBuf {
    csv.with_extension("manifest.json")
}

/// Writes the CSV and, next to it, the manifest.
pub fn emit_report(
    rows: &[ReportRow],
    path: impl AsRef<Path>,
    manifest: &RunManifest,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, report_csv(rows))?;
    let mut m = manifest.clone();
    m.rows = rows.len();
    fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(&m)? + "\n",
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g6_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.1, "0.1"),
            (0.2018317, "0.201832"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (0.0000123456789, "1.23457e-05"),
            (0.000123456789, "0.000123457"),
            (-2.5, "-2.5"),
            (999999.5, "1e+06"),
            (f64::INFINITY, "inf"),
        ];
        for (x, want) in cases {
            assert_eq!(format_g6(x), want, "{x}");
        }
    }

    #[test]
    fn header_is_fixed() {
        assert_eq!(report_csv(&[]), format!("{REPORT_HEADER}\n"));
    }

    #[test]
    fn rows_parse_back() {
        let row = ReportRow {
            experiment: "grid".into(),
            seed: 3,
            l: 2,
            frac: 0.3,
            train_err: 0.0125,
            test_err: None,
            kl: 10.1234567,
            uc_bound: Some(0.5),
            pb_bound: 1.25,
            uc_vacuous: false,
            pb_vacuous: true,
            wall_time_ms: 0,
        };
        let back = parse_report(&report_csv(std::slice::from_ref(&row))).unwrap();
        assert_eq!(back[0].kl, 10.1235);
        assert_eq!(back[0].test_err, None);
        assert_eq!(report_csv(&back), report_csv(&[row]));
    }
}
