//! Report assembly. A run builds every output in memory and writes the
//! bundle only after the computation has succeeded.

use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// `(config hash, seed, module version)` stamped on every row.
#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self { config_hash, seed, version: VERSION.to_string() }
    }
}

/// A CSV table whose rows are prefixed with the provenance columns.
#[derive(Clone, Debug)]
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self, prov: &Provenance) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["config_hash".to_string(), "seed".into(), "version".into()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![prov.config_hash.clone(), prov.seed.to_string(), prov.version.clone()];
            rec.extend(row.iter().cloned());
            w.write_record(&rec).expect("in-memory write");
        }
        w.into_inner().expect("in-memory write")
    }

    /// Fixed-width text rendering for the terminal.
    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| self.rows.iter().map(|r| r[c].len()).chain([self.columns[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            cells.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
        };
        let mut out = line(&self.columns);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Adds the provenance fields to a JSON object.
pub fn stamp<T: Serialize>(prov: &Provenance, record: &T) -> Value {
    let mut obj = Map::new();
    obj.insert("config_hash".into(), Value::String(prov.config_hash.clone()));
    obj.insert("seed".into(), Value::from(prov.seed));
    obj.insert("version".into(), Value::String(prov.version.clone()));
    match serde_json::to_value(record).expect("record serialises") {
        Value::Object(m) => obj.extend(m),
        other => {
            obj.insert("value".into(), other);
        }
    }
    Value::Object(obj)
}

/// Files of one run plus the overall acceptance verdict.
#[derive(Debug, Default)]
pub struct Bundle {
    pub files: Vec<(String, Vec<u8>)>,
    pub pass: bool,
    pub summary: String,
}

impl Bundle {
    pub fn new() -> Self {
        Self { files: Vec::new(), pass: true, summary: String::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn add_json(&mut self, name: &str, value: &Value) {
        let mut bytes = serde_json::to_vec_pretty(value).expect("json serialises");
        bytes.push(b'\n');
        self.add(name, bytes);
    }

    pub fn add_table(&mut self, name: &str, table: &Table, prov: &Provenance) {
        self.add(name, table.to_csv(prov));
    }

    /// Writes every file through a temporary name and a rename.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            let tmp = dir.join(format!(".{name}.tmp"));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, dir.join(name))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_carry_provenance() {
        let prov = Provenance::new("abc".into(), 7);
        let mut t = Table::new(&["x"]);
        t.push(vec!["1.5".into()]);
        let csv = String::from_utf8(t.to_csv(&prov)).unwrap();
        assert_eq!(csv, format!("config_hash,seed,version,x\nabc,7,{VERSION},1.5\n"));
        let v = stamp(&prov, &serde_json::json!({"a": 1}));
        assert_eq!(v["seed"], 7);
        assert_eq!(v["a"], 1);
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1e-300, -3.0, f64::MAX] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }
}
