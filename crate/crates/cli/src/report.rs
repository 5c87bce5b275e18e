//! Deterministic output files: CSV tables and a JSON report.
//!
//! Every file is written atomically (temp file + rename) and must be
//! byte-identical across reruns with the same config. The one exception is
//! `timing.csv`, which is the designated home for wall-clock measurements;
//! nothing else may contain a time reading.

use std::fs;
use std::path::Path;

use citrus_core::Result;
use serde_json::Value;

/// Shortest round-trip decimal form; infinities spelled `inf` / `-inf`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v}")
    }
}

/// JSON value for a float; non-finite values become strings because JSON
/// numbers cannot carry them.
pub fn json_num(v: f64) -> Value {
    if v.is_finite() {
        Value::from(v)
    } else {
        Value::from(fmt_f64(v))
    }
}

/// A CSV file accumulated row by row.
pub struct Csv {
    lines: Vec<String>,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv { lines: vec![header.join(",")], columns: header.len() }
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.columns, "row width must match the header");
        self.lines.push(fields.join(","));
    }

    pub fn to_string(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        write_atomic(&dir.join(name), self.to_string().as_bytes())
    }
}

/// Write via a temp file in the same directory so a crash cannot leave a
/// half-written output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Assemble and write `report.json`: the resolved config echo, per-command
/// result fields, and the list of failed assertions (empty when all hold).
pub fn write_report(
    dir: &Path,
    command: &str,
    cfg: &crate::config::Config,
    results: Value,
    failures: &[String],
) -> Result<()> {
    let mut root = serde_json::Map::new();
    root.insert("command".into(), Value::from(command));
    let mut echo = serde_json::Map::new();
    for (k, v) in cfg.echo() {
        echo.insert(k.to_string(), Value::from(v));
    }
    root.insert("config".into(), Value::Object(echo));
    root.insert("results".into(), results);
    root.insert(
        "failures".into(),
        Value::from(failures.iter().map(|s| Value::from(s.as_str())).collect::<Vec<_>>()),
    );
    let mut text = serde_json::to_string_pretty(&Value::Object(root))
        .expect("report serialization cannot fail");
    text.push('\n');
    write_atomic(&dir.join("report.json"), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_render_shortest_and_round_trip() {
        assert_eq!(fmt_f64(0.1), "0.1");
        assert_eq!(fmt_f64(-3.0), "-3");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(f64::NEG_INFINITY), "-inf");
        let v = 1.0 / 3.0;
        assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn json_num_keeps_finite_values_numeric() {
        assert_eq!(json_num(2.5), Value::from(2.5));
        assert_eq!(json_num(f64::INFINITY), Value::from("inf"));
    }

    #[test]
    fn csv_assembles_header_and_rows() {
        let mut c = Csv::new(&["a", "b"]);
        c.row(&["1".into(), "2".into()]);
        assert_eq!(c.to_string(), "a,b\n1,2\n");
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert!(!p.with_extension("csv.tmp").exists());
    }
}
