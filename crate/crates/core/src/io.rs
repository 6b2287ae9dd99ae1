//! Fixed-precision number formatting shared by all CSV/JSON writers.
//!
//! Floats are written with 17 significant digits so that outputs round-trip
//! and identical runs produce byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// `v` in scientific notation with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Joins already-formatted fields into a CSV line terminated by `\n`.
pub fn csv_line<I, S>(fields: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out = String::new();
    for (k, f) in fields.into_iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        out.push_str(f.as_ref());
    }
    out.push('\n');
    out
}

/// Header line `# <tool>-<schema> key=value ...`.
pub fn header(schema: &str, attrs: &[(&str, String)]) -> String {
    let mut h = format!("# {schema}");
    for (k, v) in attrs {
        let _ = write!(h, " {k}={v}");
    }
    h.push('\n');
    h
}

/// Writes `text`, creating parent directories as needed.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}
