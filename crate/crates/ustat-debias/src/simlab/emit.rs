//! Report emission: CSV (RFC-4180 style, '.' decimal separator, six
//! significant digits for ratios), a markdown table with one row per
//! `(gamma, d)` setting, and a faithful JSON dump that round-trips.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::simlab::normality::{KSReport, Standardization};
use crate::simlab::ratio::RatioTable;

/// Output format of the CLI and the emitters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EmitFormat {
    Csv,
    Md,
    Json,
}

impl std::str::FromStr for EmitFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(EmitFormat::Csv),
            "md" => Ok(EmitFormat::Md),
            "json" => Ok(EmitFormat::Json),
            other => Err(format!("unknown format '{other}' (expected csv, md, or json)")),
        }
    }
}

/// Fixed-notation formatting with `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn opt_sig(x: Option<f64>, digits: usize) -> String {
    x.map(|v| format_sig(v, digits)).unwrap_or_default()
}

/// Write a ratio table as CSV: one line per `(gamma, d, estimator)`.
pub fn ratio_table_csv(table: &RatioTable, out: &mut impl Write) -> Result<()> {
    writeln!(out, "gamma,d,estimator,order,median_ratio,mean_ratio,failures,reps,seed")?;
    for row in &table.rows {
        for cell in &row.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                row.gamma,
                row.d,
                cell.estimator,
                cell.order,
                opt_sig(cell.median_ratio, 6),
                opt_sig(cell.mean_ratio, 6),
                cell.failures,
                cell.reps,
                table.seed(),
            )?;
        }
    }
    Ok(())
}

/// Write a ratio table as a markdown table of median ratios, one row per
/// `(gamma, d)` and one column per estimator.
pub fn ratio_table_md(table: &RatioTable, out: &mut impl Write) -> Result<()> {
    let labels: Vec<&str> = match table.rows.first() {
        Some(row) => row.cells.iter().map(|c| c.estimator.as_str()).collect(),
        None => Vec::new(),
    };
    write!(out, "| gamma | d |")?;
    for l in &labels {
        write!(out, " {l} |")?;
    }
    writeln!(out)?;
    write!(out, "|---|---|")?;
    for _ in &labels {
        write!(out, "---|")?;
    }
    writeln!(out)?;
    for row in &table.rows {
        write!(out, "| {} | {} |", row.gamma, row.d)?;
        for cell in &row.cells {
            let text = match cell.median_ratio {
                Some(v) => format_sig(v, 6),
                None => format!("fail({})", cell.failures),
            };
            write!(out, " {text} |")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn emit_json<T: Serialize>(value: &T, out: &mut impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Emit a ratio table in the requested format.
pub fn emit_ratio_table(table: &RatioTable, format: EmitFormat, out: &mut impl Write) -> Result<()> {
    match format {
        EmitFormat::Csv => ratio_table_csv(table, out),
        EmitFormat::Md => ratio_table_md(table, out),
        EmitFormat::Json => emit_json(table, out),
    }
}

/// Emit a normality report in the requested format.
pub fn emit_ks_report(report: &KSReport, format: EmitFormat, out: &mut impl Write) -> Result<()> {
    match format {
        EmitFormat::Csv => {
            writeln!(
                out,
                "estimator,d,n_per_split,s,replications,ks_statistic,standardization,sigma,seed"
            )?;
            let (kind, sigma) = match report.standardization {
                Standardization::OracleSigma { value } => ("oracle", format_sig(value, 6)),
                Standardization::PluginSigma => ("plugin", String::new()),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                report.estimator,
                report.d,
                report.n_per_split,
                report.s,
                report.replications,
                format_sig(report.ks_statistic, 6),
                kind,
                sigma,
                report.seed,
            )?;
            Ok(())
        }
        EmitFormat::Md => {
            writeln!(out, "| estimator | d | n/split | s | reps | KS |")?;
            writeln!(out, "|---|---|---|---|---|---|")?;
            writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                report.estimator,
                report.d,
                report.n_per_split,
                report.s,
                report.replications,
                format_sig(report.ks_statistic, 6),
            )?;
            Ok(())
        }
        EmitFormat::Json => emit_json(report, out),
    }
}

/// Render to a string; the CLI and the determinism checks compare these
/// byte for byte.
pub fn ratio_table_to_string(table: &RatioTable, format: EmitFormat) -> Result<String> {
    let mut buf = Vec::new();
    emit_ratio_table(table, format, &mut buf)?;
    Ok(String::from_utf8(buf).expect("emitters write utf-8"))
}

pub fn ks_report_to_string(report: &KSReport, format: EmitFormat) -> Result<String> {
    let mut buf = Vec::new();
    emit_ks_report(report, format, &mut buf)?;
    Ok(String::from_utf8(buf).expect("emitters write utf-8"))
}

/// Write rendered output to a file path, or to stdout when no path given.
pub fn write_output(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlab::config::{EstimatorKind, EstimatorSpec, RegressionModelConfig};
    use crate::simlab::ratio::{RatioCell, RatioRow};

    fn sample_table() -> RatioTable {
        RatioTable {
            config: RegressionModelConfig {
                gamma_grid: vec![0.3],
                replications: 4,
                roster: vec![
                    EstimatorSpec::new(EstimatorKind::Plugin, 0),
                    EstimatorSpec::new(EstimatorKind::CkPre, 2),
                ],
                ..RegressionModelConfig::default()
            },
            rows: vec![RatioRow {
                gamma: 0.3,
                d: 7,
                cells: vec![
                    RatioCell {
                        estimator: "plugin".into(),
                        order: 0,
                        median_ratio: Some(1.0),
                        mean_ratio: Some(1.0),
                        failures: 0,
                        reps: 4,
                    },
                    RatioCell {
                        estimator: "ck_pre(o2)".into(),
                        order: 2,
                        median_ratio: Some(0.9523809),
                        mean_ratio: None,
                        failures: 1,
                        reps: 4,
                    },
                ],
            }],
        }
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_sig(4807.0424, 6), "4807.04");
        assert_eq!(format_sig(0.952381, 6), "0.952381");
        assert_eq!(format_sig(1.0, 6), "1.00000");
        assert_eq!(format_sig(-0.00012345678, 6), "-0.000123457");
        assert_eq!(format_sig(0.0, 6), "0");
    }

    #[test]
    fn csv_layout_and_missing_cells() {
        let text = ratio_table_to_string(&sample_table(), EmitFormat::Csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "gamma,d,estimator,order,median_ratio,mean_ratio,failures,reps,seed"
        );
        assert_eq!(lines.next().unwrap(), "0.3,7,plugin,0,1.00000,1.00000,0,4,42");
        assert_eq!(lines.next().unwrap(), "0.3,7,ck_pre(o2),2,0.952381,,1,4,42");
    }

    #[test]
    fn empty_table_is_header_only() {
        let table = RatioTable {
            config: RegressionModelConfig::default(),
            rows: Vec::new(),
        };
        let text = ratio_table_to_string(&table, EmitFormat::Csv).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn md_has_one_row_per_setting() {
        let text = ratio_table_to_string(&sample_table(), EmitFormat::Md).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 3); // header, separator, one data row
        assert!(rows[0].contains("plugin"));
        assert!(rows[2].starts_with("| 0.3 | 7 |"));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let table = sample_table();
        let text = ratio_table_to_string(&table, EmitFormat::Json).unwrap();
        let back: RatioTable = serde_json::from_str(&text).unwrap();
        assert_eq!(table, back);
    }
}
