//! Plain `key = value` configuration text.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Settings that can be assigned by key and printed back canonically.
pub trait KeyValue {
    /// Assigns one key; unknown keys are a contract error.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Every key with its current value, in a fixed order.
    fn entries(&self) -> Vec<(String, String)>;

    fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, key, value) in parse_lines(text)? {
            self.set(&key, &value).map_err(|e| match e {
                Error::Contract(m) => Error::Contract(format!("line {line}: {m}")),
                other => other,
            })?;
        }
        Ok(())
    }

    /// `key=value` override as given on a command line.
    fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::contract(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// `(line number, key, value)` for every non-blank, non-comment line.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::contract(format!("line {}: expected key = value, found {line:?}", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::contract(format!("invalid value {value:?} for {key}")))
}

pub fn unknown_key(key: &str) -> Error {
    Error::contract(format!("unknown config key {key:?}"))
}
