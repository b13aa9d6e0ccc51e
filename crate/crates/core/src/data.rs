//! Dataset records and JSON-lines helpers.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One answer-passage pair. `answer_start` is a char offset into the
/// passage, or negative when unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub passage: String,
    pub answer: String,
    #[serde(default = "unknown_offset")]
    pub answer_start: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

fn unknown_offset() -> i64 {
    -1
}

impl DatasetRecord {
    pub fn answer_offset(&self) -> Option<usize> {
        usize::try_from(self.answer_start).ok()
    }

    /// Checks that the passage really holds the answer at `answer_start`.
    pub fn validate(&self) -> Result<()> {
        if self.answer.is_empty() {
            return Err(Error::Config(format!("record {}: empty answer", self.id)));
        }
        if let Some(start) = self.answer_offset() {
            let found: String = self
                .passage
                .chars()
                .skip(start)
                .take(self.answer.chars().count())
                .collect();
            if found != self.answer {
                return Err(Error::Config(format!(
                    "record {}: passage[{start}..] is {found:?}, not the answer {:?}",
                    self.id, self.answer
                )));
            }
        }
        Ok(())
    }
}

/// Reads one JSON value per non-blank line; errors carry the line number.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_defaults_and_validation() {
        let r: DatasetRecord =
            serde_json::from_str(r#"{"id":"a","passage":"Héllo world","answer":"world","answer_start":6}"#)
                .unwrap();
        assert_eq!(r.question, None);
        assert!(r.validate().is_ok());
        let r: DatasetRecord =
            serde_json::from_str(r#"{"id":"a","passage":"Hello world","answer":"world"}"#).unwrap();
        assert_eq!(r.answer_offset(), None);
        let bad = DatasetRecord { answer_start: 0, ..r };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn jsonl_reports_line() {
        let text = "{\"id\":\"a\",\"passage\":\"p\",\"answer\":\"p\"}\n\n{oops}\n";
        match read_jsonl::<DatasetRecord, _>(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
