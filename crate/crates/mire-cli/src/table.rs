//! Tabular artifact writer. Floats go through Display, which prints the
//! shortest round-trip decimal, so identical runs serialize byte-identically.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::spec::Format;

pub struct Table {
    name: &'static str,
    columns: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &'static str, columns: &[&'static str]) -> Self {
        Table {
            name,
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width in {}", self.name);
        self.rows.push(row);
    }

    pub fn write(&self, dir: &Path, format: Format) -> Result<PathBuf> {
        let (ext, body) = match format {
            Format::Csv => ("csv", self.to_csv()),
            Format::Json => ("json", self.to_json()?),
        };
        let path = dir.join(format!("{}.{ext}", self.name));
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    fn to_json(&self) -> Result<String> {
        let objs: Vec<serde_json::Map<String, serde_json::Value>> = self
            .rows
            .iter()
            .map(|row| {
                self.columns
                    .iter()
                    .zip(row)
                    .map(|(c, v)| ((*c).to_string(), serde_json::Value::String(v.clone())))
                    .collect()
            })
            .collect();
        let mut body = serde_json::to_string_pretty(&objs).context("encoding table")?;
        body.push('\n');
        Ok(body)
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_json<S: serde::Serialize>(dir: &Path, name: &str, value: &S) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut body = serde_json::to_string_pretty(value).context("encoding json artifact")?;
    body.push('\n');
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
