//! Named-column tables rendered as aligned text, CSV or JSON.

use serde_json::{json, Map, Value};
use sidp_core::report::FORMAT_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone, Default)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Value>>,
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format_float(f),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

fn format_float(f: f64) -> String {
    if f == 0.0 || (1e-3..1e7).contains(&f.abs()) {
        let s = format!("{f:.6}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{f:.6e}")
    }
}

impl Table {
    pub fn new(columns: Vec<&'static str>) -> Self {
        Table {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match header");
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> anyhow::Result<String> {
        match format {
            Format::Csv => self.csv(),
            Format::Json => Ok(self.json()),
            Format::Table => Ok(self.text()),
        }
    }

    /// CSV with a leading `format_version` column so every row is
    /// self-describing.
    fn csv(&self) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["format_version"];
        header.extend(self.columns.iter().copied());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![FORMAT_VERSION.to_string()];
            rec.extend(r.iter().map(cell));
            w.write_record(&rec)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    fn json(&self) -> String {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let m: Map<String, Value> = self
                    .columns
                    .iter()
                    .zip(r)
                    .map(|(c, v)| (c.to_string(), v.clone()))
                    .collect();
                Value::Object(m)
            })
            .collect();
        let doc = json!({
            "format_version": FORMAT_VERSION,
            "columns": self.columns,
            "rows": rows,
        });
        let mut s = serde_json::to_string_pretty(&doc).expect("table serializes");
        s.push('\n');
        s
    }

    fn text(&self) -> String {
        let cells: Vec<Vec<String>> = self.rows.iter().map(|r| r.iter().map(cell).collect()).collect();
        let mut width: Vec<usize> = self.columns.iter().map(|c| c.len()).collect();
        for r in &cells {
            for (i, c) in r.iter().enumerate() {
                width[i] = width[i].max(c.len());
            }
        }
        let line = |items: Vec<&str>| -> String {
            let parts: Vec<String> = items
                .iter()
                .enumerate()
                .map(|(i, s)| format!("{:<w$}", s, w = width[i]))
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = format!("# format_version {FORMAT_VERSION}\n");
        out += &line(self.columns.clone());
        for r in &cells {
            out += &line(r.iter().map(String::as_str).collect());
        }
        out
    }
}
