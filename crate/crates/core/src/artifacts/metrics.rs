use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::train::EpochMetrics;

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc,seconds";

/// `%g`-style formatting with `digits` significant digits.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn metrics_row(m: &EpochMetrics) -> String {
    let f = |v: f64| format_sig(v, 6);
    format!(
        "{},{},{},{},{},{},{}",
        m.epoch,
        f(m.lr),
        f(m.train_loss),
        f(m.train_acc),
        f(m.val_loss),
        f(m.val_acc),
        f(m.wall_seconds)
    )
}

/// Start a fresh metrics file holding only the header.
pub fn create_metrics(path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "{METRICS_HEADER}")?;
    Ok(())
}

/// Append one row, writing the header first if the file is new or empty.
pub fn append_metrics(path: &Path, row: &EpochMetrics) -> Result<()> {
    let needs_header = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if needs_header {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    writeln!(f, "{}", metrics_row(row))?;
    Ok(())
}
