use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Example, Label};
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    text: String,
    #[serde(default)]
    label: Option<String>,
    domain: String,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    text: &'a str,
    label: Option<Label>,
    domain: &'a str,
}

/// Parses JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_jsonl(input: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Jsonl {
            line: line_no,
            message: e.to_string(),
        })?;
        let label = raw
            .label
            .map(|s| s.parse::<Label>())
            .transpose()
            .map_err(|message| Error::Jsonl {
                line: line_no,
                message,
            })?;
        out.push(Example {
            text: raw.text,
            label,
            domain: raw.domain,
        });
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn to_jsonl(examples: &[Example]) -> String {
    let mut out = String::new();
    for e in examples {
        let rec = OutRecord {
            text: &e.text,
            label: e.label,
            domain: &e.domain,
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(examples)).map_err(|e| Error::io(path, e))
}
