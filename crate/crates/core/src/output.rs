//! Result files: CSV tables with a provenance comment header, and JSON
//! records shaped `{config, master_seed, result}`. Numbers are written with
//! 12 significant digits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// Round to 12 significant digits.
pub fn round12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().expect("formatted float parses")
}

/// Shortest text that reads back as [`round12`] of `x`.
pub fn fmt12(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{}", round12(x))
    }
}

/// Apply [`round12`] to every number in a JSON tree. Non-finite values are
/// not representable in JSON and were already turned into `null` by serde.
pub fn round_json(v: &mut Value) {
    match v {
        Value::Number(n) => {
            if let (Some(f), false) = (n.as_f64(), n.is_i64() || n.is_u64()) {
                if let Some(r) = serde_json::Number::from_f64(round12(f)) {
                    *n = r;
                }
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_json),
        Value::Object(o) => o.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Reproducibility context embedded in every output file.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub config: Value,
    pub master_seed: u64,
}

impl Provenance {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let resolved = cfg.resolved()?;
        Ok(Self {
            config: serde_json::to_value(&resolved).expect("config serializes"),
            master_seed: cfg.master_seed,
        })
    }

    /// Context without a configuration file (pure model evaluations).
    pub fn standalone(note: &str) -> Self {
        Self {
            config: Value::String(note.into()),
            master_seed: 0,
        }
    }
}

pub fn to_json_record<T: Serialize>(prov: &Provenance, result: &T) -> String {
    let mut v = serde_json::json!({
        "config": prov.config,
        "master_seed": prov.master_seed,
        "result": result,
    });
    round_json(&mut v);
    serde_json::to_string_pretty(&v).expect("record serializes")
}

pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, result: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(to_json_record(prov, result).as_bytes())?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// A table of numeric or text cells.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_numbers(&mut self, row: &[f64]) {
        self.rows.push(row.iter().map(|&x| fmt12(x)).collect());
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    /// Render with `#` comment lines carrying the seed and resolved config.
    pub fn write_to<W: Write>(&self, mut w: W, prov: &Provenance) -> Result<()> {
        writeln!(w, "# master_seed: {}", prov.master_seed)?;
        writeln!(w, "# config: {}", serde_json::to_string(&prov.config).expect("config serializes"))?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(&self.columns)?;
        for r in &self.rows {
            if r.len() != self.columns.len() {
                return Err(Error::Data(format!(
                    "row has {} cells, table has {} columns",
                    r.len(),
                    self.columns.len()
                )));
            }
            csv.write_record(r)?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn write(&self, path: &Path, prov: &Provenance) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        self.write_to(f, prov)
    }

    pub fn to_string(&self, prov: &Provenance) -> Result<String> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, prov)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }

    /// Read a table written by [`Table::write`], skipping comment lines.
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let columns = rdr.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(String::from).collect());
        }
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Data(format!("missing column `{name}`")))
    }

    /// Numeric cells of one column; failed rows (non-numeric text) are `None`.
    pub fn numbers(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let i = self.column(name)?;
        Ok(self.rows.iter().map(|r| r[i].trim().parse::<f64>().ok()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(fmt12(0.1 + 0.2), "0.3");
        assert_eq!(fmt12(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt12(123_456_789.123_456_79), "123456789.123");
        assert_eq!(fmt12(2.5e-8), "0.000000025");
        assert_eq!(fmt12(f64::NAN), "nan");
        assert_eq!(round12(0.0), 0.0);
    }

    #[test]
    fn json_records_embed_provenance() {
        let prov = Provenance::new(&ExperimentConfig::with_seed(11)).unwrap();
        let s = to_json_record(&prov, &serde_json::json!({"x": 1.0 / 3.0, "n": 5}));
        let v: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["master_seed"], 11);
        assert_eq!(v["config"]["master_seed"], 11);
        assert_eq!(v["result"]["x"].as_f64().unwrap(), 0.333333333333);
        assert_eq!(v["result"]["n"], 5);
    }

    #[test]
    fn csv_round_trip_skips_comments() {
        let prov = Provenance::new(&ExperimentConfig::with_seed(2)).unwrap();
        let mut t = Table::new(&["a", "b"]);
        t.push_numbers(&[1.0, 2.5]);
        t.push(vec!["3".into(), "failed".into()]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        t.write(&p, &prov).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# master_seed: 2\n# config: {"));
        let back = Table::read(&p).unwrap();
        assert_eq!(back.columns, vec!["a", "b"]);
        assert_eq!(back.numbers("b").unwrap(), vec![Some(2.5), None]);
        let mut bad = Table::new(&["a"]);
        bad.push(vec![]);
        assert!(bad.write(&p, &prov).is_err());
    }
}
