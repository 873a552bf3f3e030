//! JSONL record schemas shared by the pipelines.
//!
//! Field names are part of the external contract:
//!
//! * annotation pool: `{image, width, height, category, source, items: [{bbox, text}]}`
//! * predictions: `{query_id, raw_output}`
//! * instances: `{image, width, height, bbox, text, source, mask_rle?, priors?}`
//! * engine outputs: `{image, width, height, items: [{bbox, text}]}`
//!
//! Unknown fields on instance records are carried through untouched.

use std::io::BufRead;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::geometry::{Box, GeometryError, ImageSize};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Field {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: read failed: {source}")]
    Io {
        line: usize,
        #[source]
        source: std::io::Error,
    },
}

/// A `(box, transcript)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextItem {
    pub bbox: Box,
    pub text: String,
}

impl TextItem {
    pub fn new(bbox: Box, text: impl Into<String>) -> Self {
        TextItem {
            bbox,
            text: text.into(),
        }
    }
}

/// Item as it appears on disk; boxes are validated by the consumer so that a
/// degenerate annotation can be dropped with a warning instead of failing the
/// whole file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawItem {
    pub bbox: [f64; 4],
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub category: String,
    #[serde(default)]
    pub source: String,
    pub items: Vec<RawItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    pub raw_output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineRecord {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub items: Vec<RawItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub bbox: Box,
    pub text: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<Vec<TextItem>>,
    /// Raw OCR output aligned with this instance (scene-text sources).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_priors: Option<Vec<TextItem>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl InstanceRecord {
    pub fn image_size(&self) -> Result<ImageSize, GeometryError> {
        ImageSize::new(self.width, self.height)
    }
}

/// Parses one JSONL line.
pub fn parse_line<T: DeserializeOwned>(line: &str, line_no: usize) -> Result<T, RecordError> {
    serde_json::from_str(line).map_err(|source| RecordError::Json { line: line_no, source })
}

/// Serializes a record as one JSONL line including the trailing newline.
pub fn to_line<T: Serialize>(record: &T) -> String {
    let mut s = serde_json::to_string(record).expect("records serialize");
    s.push('\n');
    s
}

/// Reads up to `max` non-blank lines, returning `(line_number, text)` pairs.
/// Line numbers are 1-based. An empty result means end of input.
pub fn read_chunk<R: BufRead>(
    reader: &mut R,
    next_line_no: &mut usize,
    max: usize,
) -> Result<Vec<(usize, String)>, RecordError> {
    let mut out = Vec::with_capacity(max.min(4096));
    while out.len() < max {
        let mut buf = String::new();
        *next_line_no += 1;
        let n = reader.read_line(&mut buf).map_err(|source| RecordError::Io {
            line: *next_line_no,
            source,
        })?;
        if n == 0 {
            break;
        }
        if buf.trim().is_empty() {
            continue;
        }
        out.push((*next_line_no, buf));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_record_keeps_unknown_fields() {
        let line =
            r#"{"image":"a.jpg","width":10,"height":10,"bbox":[1,1,5,5],"text":"x","source":"synthetic","lang":"en"}"#;
        let rec: InstanceRecord = parse_line(line, 1).unwrap();
        assert_eq!(rec.extra.get("lang"), Some(&Value::from("en")));
        let out = to_line(&rec);
        assert!(out.contains("\"lang\":\"en\""));
        assert!(!out.contains("mask_rle"));
    }

    #[test]
    fn degenerate_instance_box_is_a_schema_error() {
        let line = r#"{"image":"a","width":10,"height":10,"bbox":[5,1,5,5],"text":"x","source":"s"}"#;
        let err = parse_line::<InstanceRecord>(line, 7).unwrap_err();
        assert!(err.to_string().starts_with("line 7"));
    }

    #[test]
    fn chunks_skip_blank_lines() {
        let data = "a\n\n  \nb\nc\n";
        let mut r = std::io::Cursor::new(data);
        let mut ln = 0;
        let c1 = read_chunk(&mut r, &mut ln, 2).unwrap();
        assert_eq!(c1.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 4]);
        let c2 = read_chunk(&mut r, &mut ln, 2).unwrap();
        assert_eq!(c2.len(), 1);
        assert_eq!(c2[0].0, 5);
        assert!(read_chunk(&mut r, &mut ln, 2).unwrap().is_empty());
    }
}
