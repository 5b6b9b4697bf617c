//! Reading and writing two-column `t,value` CSV series.
//!
//! The format is deliberately small: UTF-8, `.` decimal separator, one
//! `t,value` row per observation. Lines starting with `#` are comments and an
//! optional `t,value` header row is skipped. Values are written with Rust's
//! shortest round-trip float formatting, so a written file re-reads exactly.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

#[derive(Debug)]
pub enum SeriesCsvError {
    Io(io::Error),
    BadRow { line: usize, message: String },
    Empty,
}

impl fmt::Display for SeriesCsvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeriesCsvError::Io(err) => write!(f, "{}", err),
            SeriesCsvError::BadRow { line, message } => write!(f, "line {}: {}", line, message),
            SeriesCsvError::Empty => write!(f, "no data rows"),
        }
    }
}

impl std::error::Error for SeriesCsvError {}

impl From<io::Error> for SeriesCsvError {
    fn from(err: io::Error) -> Self {
        SeriesCsvError::Io(err)
    }
}

pub fn parse_series(text: &str) -> Result<Vec<(f64, f64)>, SeriesCsvError> {
    let mut points = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.eq_ignore_ascii_case("t,value") {
            continue;
        }
        let (t_str, v_str) = line.split_once(',').ok_or_else(|| SeriesCsvError::BadRow {
            line: idx + 1,
            message: "expected two comma-separated columns".to_string(),
        })?;
        let parse = |s: &str, what: &str| -> Result<f64, SeriesCsvError> {
            let value: f64 = s.trim().parse().map_err(|_| SeriesCsvError::BadRow {
                line: idx + 1,
                message: format!("cannot parse {} '{}'", what, s.trim()),
            })?;
            if !value.is_finite() {
                return Err(SeriesCsvError::BadRow {
                    line: idx + 1,
                    message: format!("{} '{}' is not finite", what, s.trim()),
                });
            }
            Ok(value)
        };
        points.push((parse(t_str, "time")?, parse(v_str, "value")?));
    }
    if points.is_empty() {
        return Err(SeriesCsvError::Empty);
    }
    Ok(points)
}

pub fn read_series(path: &Path) -> Result<Vec<(f64, f64)>, SeriesCsvError> {
    parse_series(&fs::read_to_string(path)?)
}

/// Renders a series to CSV text. `comments` become `# `-prefixed lines above
/// the header.
pub fn render_series(points: &[(f64, f64)], comments: &[&str]) -> String {
    let mut out = String::new();
    for comment in comments {
        out.push_str("# ");
        out.push_str(comment);
        out.push('\n');
    }
    out.push_str("t,value\n");
    for (t, v) in points {
        out.push_str(&format!("{},{}\n", t, v));
    }
    out
}

pub fn write_series(
    path: &Path,
    points: &[(f64, f64)],
    comments: &[&str],
) -> Result<(), SeriesCsvError> {
    fs::write(path, render_series(points, comments))?;
    Ok(())
}
