use std::path::Path;

use serde_json::Value;

use super::InstructionPair;
use crate::error::{Error, Result};

/// Reads `{"instruction", "output", "input"?}` objects, one per line.
///
/// A non-empty `input` is appended to the instruction after a newline. Blank
/// lines are skipped. Every malformed line is reported, with 1-based line
/// numbers, in a single ingestion error.
pub fn load_jsonl(path: &Path) -> Result<Vec<InstructionPair>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut pairs = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok(p) => pairs.push(p),
            Err(msg) => problems.push((i + 1, msg)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            problems,
        });
    }
    if pairs.is_empty() {
        log::warn!("{} contains no instruction pairs", path.display());
    }
    Ok(pairs)
}

fn parse_line(line: &str) -> std::result::Result<InstructionPair, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("expected a JSON object")?;
    let field = |name: &str| -> std::result::Result<Option<&str>, String> {
        match obj.get(name) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(format!("field {name:?} must be a string")),
        }
    };
    let instruction = field("instruction")?.ok_or("missing \"instruction\"")?;
    let output = field("output")?.ok_or("missing \"output\"")?;
    let mut request = instruction.to_string();
    if let Some(input) = field("input")?.filter(|s| !s.is_empty()) {
        request.push('\n');
        request.push_str(input);
    }
    if request.is_empty() || output.is_empty() {
        return Err("instruction and output must be non-empty".into());
    }
    Ok(InstructionPair::new(request, output))
}
