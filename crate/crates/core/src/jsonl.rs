//! Line-oriented JSON reading with line-numbered errors, and JSONL writing.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// One parsed JSON object together with its 1-based line number.
#[derive(Debug, Clone)]
pub struct Record {
    line: usize,
    fields: Map<String, Value>,
}

impl Record {
    pub fn line(&self) -> usize {
        self.line
    }

    pub fn has(&self, key: &str) -> bool {
        self.fields.contains_key(key)
    }

    fn get(&self, key: &str) -> Result<&Value> {
        self.fields
            .get(key)
            .ok_or_else(|| Error::parse(self.line, format!("missing {key}")))
    }

    pub fn string(&self, key: &str) -> Result<String> {
        match self.get(key)? {
            Value::String(s) => Ok(s.clone()),
            _ => Err(Error::parse(self.line, format!("{key} must be a string"))),
        }
    }

    pub fn optional_string(&self, key: &str) -> Result<Option<String>> {
        match self.fields.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(Error::parse(self.line, format!("{key} must be a string"))),
        }
    }

    pub fn string_list(&self, key: &str) -> Result<Vec<String>> {
        let err = || Error::parse(self.line, format!("{key} must be an array of strings"));
        match self.get(key)? {
            Value::Array(items) => items
                .iter()
                .map(|v| v.as_str().map(str::to_string).ok_or_else(err))
                .collect(),
            _ => Err(err()),
        }
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::parse(self.line, message)
    }
}

/// Parses every non-blank line as a JSON object.
pub fn parse_records(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(raw) {
            Ok(Value::Object(fields)) => out.push(Record { line, fields }),
            Ok(_) => return Err(Error::parse(line, "expected a JSON object")),
            Err(e) => return Err(Error::parse(line, format!("invalid JSON: {e}"))),
        }
    }
    Ok(out)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text)
}

pub fn to_jsonl_string<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: impl IntoIterator<Item = T>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
