//! Table formatting and report writers.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use crate::stats::{stars, two_sided_p};
use crate::Result;

/// How numbers in effect tables are rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NumberStyle {
    /// One decimal, as for months.
    #[default]
    Fixed,
    /// One decimal unless the magnitude is below 0.05, in which case one
    /// significant digit is shown (`0.01`).
    Adaptive,
}

pub fn format_number(x: f64, style: NumberStyle) -> String {
    if !x.is_finite() {
        return "-".to_string();
    }
    match style {
        NumberStyle::Fixed => fixed(x, 1),
        NumberStyle::Adaptive => {
            let a = x.abs();
            if a == 0.0 || a >= 0.05 {
                fixed(x, 1)
            } else {
                // exponent after rounding to one significant digit
                let exp: i32 = format!("{a:.0e}").split('e').nth(1).and_then(|e| e.parse().ok()).unwrap_or(-2);
                let decimals = (-exp).max(1) as usize;
                fixed(x, decimals)
            }
        }
    }
}

fn fixed(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$}");
    // avoid "-0.0"
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

/// `point (se) stars`, stars from a two-sided normal test of `point = 0`.
pub fn format_estimate(point: f64, se: f64, style: NumberStyle) -> String {
    let p = if se > 0.0 { two_sided_p(point / se) } else { f64::NAN };
    let s = stars(p);
    let body = format!("{} ({})", format_number(point, style), format_number(se, style));
    if s.is_empty() {
        body
    } else {
        format!("{body} {s}")
    }
}

/// Shares rendered as space-separated percentages with one decimal.
pub fn format_shares(shares: &[f64]) -> String {
    shares
        .iter()
        .map(|s| fixed(s * 100.0, 1))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header.iter().map(|h| h.as_ref()))?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}
