//! Machine-readable reports: CSV with `#` provenance lines, or versioned JSON.
//!
//! Floats are written in Rust's shortest round-trip form, so identical values
//! give identical bytes.

use serde_json::{json, Map, Value};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Bool(bool),
    Empty,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => v.to_string(),
            Cell::Bool(v) => v.to_string(),
            Cell::Empty => String::new(),
            Cell::Text(s) => {
                if s.contains([',', '"', '\n']) {
                    format!("\"{}\"", s.replace('"', "\"\""))
                } else {
                    s.clone()
                }
            }
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(v) => json!(v),
            Cell::Float(v) => json!(v),
            Cell::Text(s) => json!(s),
            Cell::Bool(v) => json!(v),
            Cell::Empty => Value::Null,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub command: String,
    provenance: Vec<(String, Value)>,
    parameters: Vec<(String, Value)>,
    summary: Vec<(String, Value)>,
    columns: Vec<String>,
    rows: Vec<Vec<Cell>>,
    pub certified: bool,
    pub divergent: bool,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            provenance: Vec::new(),
            parameters: Vec::new(),
            summary: Vec::new(),
            columns: Vec::new(),
            rows: Vec::new(),
            certified: true,
            divergent: false,
        }
    }

    pub fn provenance(&mut self, key: &str, v: impl Into<Value>) {
        self.provenance.push((key.to_string(), v.into()));
    }

    pub fn param(&mut self, key: &str, v: impl Into<Value>) {
        self.parameters.push((key.to_string(), v.into()));
    }

    pub fn summary(&mut self, key: &str, v: impl Into<Value>) {
        self.summary.push((key.to_string(), v.into()));
    }

    pub fn summary_value(&self, key: &str) -> Option<&Value> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn columns(&mut self, cols: &[&str]) {
        self.columns = cols.iter().map(|c| c.to_string()).collect();
    }

    pub fn row(&mut self, cells: Vec<Cell>) {
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push(cells);
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn column_names(&self) -> &[String] {
        &self.columns
    }

    fn pairs(items: &[(String, Value)]) -> String {
        items.iter().map(|(k, v)| format!("{k}={}", flat(v))).collect::<Vec<_>>().join(" ")
    }

    pub fn to_csv(&self, timestamp: Option<u64>) -> String {
        let mut out = format!("# hyplab {}\n", self.command);
        if let Some(ts) = timestamp {
            out.push_str(&format!("# generated_unix={ts}\n"));
        }
        out.push_str(&format!("# provenance {}\n", Self::pairs(&self.provenance)));
        out.push_str(&format!("# parameters {}\n", Self::pairs(&self.parameters)));
        out.push_str(&format!("# summary {}\n", Self::pairs(&self.summary)));
        out.push_str(&format!("# certified={} divergent={}\n", self.certified, self.divergent));
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.iter().map(Cell::csv).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self, timestamp: Option<u64>) -> String {
        let obj = |items: &[(String, Value)]| Value::Object(items.iter().cloned().collect::<Map<_, _>>());
        let mut root = Map::new();
        root.insert("schema_version".into(), json!(SCHEMA_VERSION));
        root.insert("command".into(), json!(self.command));
        if let Some(ts) = timestamp {
            root.insert("generated_unix".into(), json!(ts));
        }
        root.insert("provenance".into(), obj(&self.provenance));
        root.insert("parameters".into(), obj(&self.parameters));
        root.insert("certified".into(), json!(self.certified));
        root.insert("divergent".into(), json!(self.divergent));
        root.insert("summary".into(), obj(&self.summary));
        root.insert("columns".into(), json!(self.columns));
        root.insert(
            "rows".into(),
            Value::Array(self.rows.iter().map(|r| Value::Array(r.iter().map(Cell::json).collect())).collect()),
        );
        let mut s = serde_json::to_string_pretty(&Value::Object(root)).expect("plain values serialize");
        s.push('\n');
        s
    }
}

fn flat(v: &Value) -> String {
    match v {
        Value::String(s) => s.replace(' ', "_"),
        other => other.to_string(),
    }
}
