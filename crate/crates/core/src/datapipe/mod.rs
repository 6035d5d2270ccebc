//! From satellite-image metadata to conversational training records.
//!
//! The stages are: [`ingest_metadata`], [`filter_size`], [`make_pairs`],
//! [`filter_review`], [`build_splits`], [`build_annotation_requests`] and,
//! once an external annotator has answered, [`ingest_annotation_responses`]
//! and [`emit_annotations`].

mod annotate;
mod pairing;
mod splits;

use std::collections::HashSet;
use std::path::Path;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use annotate::{
    build_annotation_requests, default_templates, emit_annotations, frame_manifest, ingest_annotation_responses,
    parse_annotations, serialize_annotations, AnnotationRecord, AnnotationRequest, AnnotationResponse, EmitOutput,
    FrameManifestEntry, JoinReport, RequestFile, ResponseFile, Speaker, Turn, ANNOTATION_PROMPT, VIDEO_TOKEN,
};
pub use pairing::{make_pairs, month_gap, ImagePair, MIN_GAP_MONTHS};
pub use splits::{
    build_splits, filter_review, filter_size, read_review_scores, MissingScore, ReviewOutcome, ReviewScore,
    SplitManifest, Splits, DEFAULT_MAX_BYTES, DEFAULT_REVIEW_THRESHOLD,
};

/// One image of the source catalogue.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub image_id: String,
    pub location_id: String,
    pub timestamp: NaiveDate,
    pub byte_size: u64,
    pub category: String,
    pub width: u32,
    pub height: u32,
}

/// A row that failed validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub image_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Ingested {
    pub records: Vec<MetadataRecord>,
    pub rejects: Vec<Reject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetadataFormat {
    /// Comma-separated with a header naming the columns.
    Csv,
    /// One JSON object per line.
    JsonLines,
}

impl MetadataFormat {
    /// `.jsonl`/`.ndjson`/`.json` select JSON lines; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "ndjson" | "json") => MetadataFormat::JsonLines,
            _ => MetadataFormat::Csv,
        }
    }
}

pub const METADATA_FIELDS: [&str; 7] = [
    "image_id",
    "location_id",
    "timestamp",
    "byte_size",
    "category",
    "width",
    "height",
];

/// Accepts `YYYY-MM-DD` or an RFC 3339 timestamp, which is converted to its
/// UTC calendar date.
pub fn parse_date(text: &str) -> Option<NaiveDate> {
    let text = text.trim();
    NaiveDate::parse_from_str(text, "%Y-%m-%d").ok().or_else(|| {
        DateTime::parse_from_rfc3339(text)
            .ok()
            .map(|t| t.with_timezone(&Utc).date_naive())
    })
}

fn validate_row(fields: &[Option<String>; 7]) -> std::result::Result<MetadataRecord, String> {
    let get = |i: usize| -> std::result::Result<&str, String> {
        fields[i]
            .as_deref()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| format!("missing {}", METADATA_FIELDS[i]))
    };
    let positive = |i: usize| -> std::result::Result<u64, String> {
        let raw = get(i)?;
        match raw.parse::<u64>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(format!(
                "{} must be a positive integer, got {raw:?}",
                METADATA_FIELDS[i]
            )),
        }
    };
    let dim = |i: usize| -> std::result::Result<u32, String> {
        u32::try_from(positive(i)?).map_err(|_| format!("{} out of range", METADATA_FIELDS[i]))
    };
    let ts = get(2)?;
    Ok(MetadataRecord {
        image_id: get(0)?.to_string(),
        location_id: get(1)?.to_string(),
        timestamp: parse_date(ts).ok_or_else(|| format!("invalid timestamp {ts:?}"))?,
        byte_size: positive(3)?,
        category: get(4)?.to_string(),
        width: dim(5)?,
        height: dim(6)?,
    })
}

fn collect(rows: Vec<(usize, [Option<String>; 7])>) -> Ingested {
    let mut out = Ingested::default();
    let mut seen = HashSet::new();
    for (line, fields) in rows {
        let id = fields[0]
            .as_deref()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        match validate_row(&fields) {
            Ok(rec) if !seen.insert(rec.image_id.clone()) => out.rejects.push(Reject {
                line,
                image_id: id,
                reason: format!("duplicate image_id {:?}", rec.image_id),
            }),
            Ok(rec) => out.records.push(rec),
            Err(reason) => out.rejects.push(Reject {
                line,
                image_id: id,
                reason,
            }),
        }
    }
    out
}

/// Parses metadata text. Rows that parse structurally but violate a record
/// invariant (non-positive size, bad date, repeated id, ...) go to
/// `rejects`; structural failures abort with a format error carrying the
/// line number.
pub fn ingest_metadata(text: &str, format: MetadataFormat) -> Result<Ingested> {
    let rows = match format {
        MetadataFormat::Csv => csv_rows(text)?,
        MetadataFormat::JsonLines => json_rows(text)?,
    };
    Ok(collect(rows))
}

pub fn ingest_metadata_file(path: impl AsRef<Path>) -> Result<Ingested> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ingest_metadata(&text, MetadataFormat::from_path(path)).map_err(|e| {
        if let Error::Format(m) = e {
            Error::format(format!("{}: {m}", path.display()))
        } else {
            e
        }
    })
}

fn csv_rows(text: &str) -> Result<Vec<(usize, [Option<String>; 7])>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::format(format!("line 1: {e}")))?
        .clone();
    let mut idx = [0usize; 7];
    for (slot, name) in idx.iter_mut().zip(METADATA_FIELDS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(format!("line 1: header lacks column {name:?}")))?;
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::format(format!("line {line}: {e}"))
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        rows.push((line, idx.map(|i| rec.get(i).map(str::to_string))));
    }
    Ok(rows)
}

fn json_rows(text: &str) -> Result<Vec<(usize, [Option<String>; 7])>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::format(format!("line {lineno}: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::format(format!("line {lineno}: expected a JSON object")))?;
        let fields = METADATA_FIELDS.map(|name| match obj.get(name) {
            Some(serde_json::Value::String(s)) => Some(s.clone()),
            Some(serde_json::Value::Number(n)) => Some(n.to_string()),
            _ => None,
        });
        rows.push((lineno, fields));
    }
    Ok(rows)
}

/// Writes records as CSV with the canonical header.
pub fn write_metadata_csv(records: &[MetadataRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METADATA_FIELDS).expect("in-memory write");
    for r in records {
        w.write_record([
            r.image_id.clone(),
            r.location_id.clone(),
            r.timestamp.to_string(),
            r.byte_size.to_string(),
            r.category.clone(),
            r.width.to_string(),
            r.height.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}
