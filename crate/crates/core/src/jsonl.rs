//! Line-delimited JSON for the persisted intermediate artifacts (pools,
//! exemplar sets, traces).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Parses one value per non-blank line. Errors carry the 1-based line.
pub fn parse<T: DeserializeOwned>(input: &str) -> Result<Vec<T>> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(i + 1, e.to_string())))
        .collect()
}

pub fn render<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("value serializes"));
        out.push('\n');
    }
    out
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

pub fn write<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    std::fs::write(path, render(items)).map_err(|e| Error::io(path, e))
}
