//! JSONL ingestion, atomic writes and streaming dataset validation.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcqbuild::{BinaryProbe, MCQItem};
use crate::overlay::BoxTrack;
use crate::ranker::SegmentEvidence;
use crate::scaling::RunPoint;
use crate::segmenter::{FeatureSeries, SegmentProposal, ShotBoundaryList};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgqaRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_ref: Option<String>,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RcapRecord {
    pub id: String,
    pub video_ref: String,
    pub start_frame: u32,
    pub end_frame: u32,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RtlocRecord {
    pub id: String,
    pub video_ref: String,
    pub event: String,
    pub start_frame: u32,
    pub end_frame: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdcapEvent {
    pub start: f64,
    pub end: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdcapRecord {
    pub id: String,
    pub video_ref: String,
    pub events: Vec<RdcapEvent>,
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub raw_text: String,
}

fn check_frames(start: u32, end: u32) -> Result<()> {
    if start > end {
        return Err(Error::invalid(format!("start_frame {start} > end_frame {end}")));
    }
    Ok(())
}

impl RcapRecord {
    pub fn validate(&self) -> Result<()> {
        check_frames(self.start_frame, self.end_frame)
    }
}

impl RtlocRecord {
    pub fn validate(&self) -> Result<()> {
        check_frames(self.start_frame, self.end_frame)
    }
}

impl RdcapRecord {
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            if !(e.start.is_finite() && e.end.is_finite() && 0.0 <= e.start && e.start <= e.end) {
                return Err(Error::invalid(format!(
                    "event {i}: needs 0 <= start <= end, got ({}, {})",
                    e.start, e.end
                )));
            }
        }
        Ok(())
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::json("serialize record", e))?);
        s.push('\n');
    }
    Ok(s)
}

/// Writes through a temp file in the target directory, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.flush().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(records)?.as_bytes())
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json("serialize", e))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    Features,
    Shots,
    Segments,
    Evidence,
    Fgqa,
    Probes,
    Sgqa,
    Rcap,
    Rtloc,
    Rdcap,
    Tracks,
    Runpoints,
}

impl Schema {
    pub const ALL: [Schema; 12] = [
        Schema::Features,
        Schema::Shots,
        Schema::Segments,
        Schema::Evidence,
        Schema::Fgqa,
        Schema::Probes,
        Schema::Sgqa,
        Schema::Rcap,
        Schema::Rtloc,
        Schema::Rdcap,
        Schema::Tracks,
        Schema::Runpoints,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Schema::Features => "features",
            Schema::Shots => "shots",
            Schema::Segments => "segments",
            Schema::Evidence => "evidence",
            Schema::Fgqa => "fgqa",
            Schema::Probes => "probes",
            Schema::Sgqa => "sgqa",
            Schema::Rcap => "rcap",
            Schema::Rtloc => "rtloc",
            Schema::Rdcap => "rdcap",
            Schema::Tracks => "tracks",
            Schema::Runpoints => "runpoints",
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Schema::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown schema {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

fn check_as<T, F>(line: &str, check: F) -> std::result::Result<(), String>
where
    T: DeserializeOwned,
    F: FnOnce(T) -> Result<()>,
{
    let rec: T = serde_json::from_str(line).map_err(|e| e.to_string())?;
    check(rec).map_err(|e| e.to_string())
}

fn check_line(schema: Schema, line: &str) -> std::result::Result<(), String> {
    match schema {
        Schema::Features => check_as::<FeatureSeries, _>(line, |f| f.normalized().map(drop)),
        Schema::Shots => check_as::<ShotBoundaryList, _>(line, |s| s.validate(None)),
        Schema::Segments => check_as::<SegmentProposal, _>(line, |s| s.validate()),
        Schema::Evidence => check_as::<SegmentEvidence, _>(line, |e| {
            if !(e.start_s.is_finite() && e.end_s.is_finite() && e.start_s >= 0.0 && e.start_s < e.end_s) {
                return Err(Error::invalid(format!(
                    "needs 0 <= start_s < end_s, got ({}, {})",
                    e.start_s, e.end_s
                )));
            }
            e.validate()
        }),
        Schema::Fgqa => check_as::<MCQItem, _>(line, |m| m.validate()),
        Schema::Probes => check_as::<BinaryProbe, _>(line, |p| p.validate()),
        Schema::Sgqa => check_as::<SgqaRecord, _>(line, |_| Ok(())),
        Schema::Rcap => check_as::<RcapRecord, _>(line, |r| r.validate()),
        Schema::Rtloc => check_as::<RtlocRecord, _>(line, |r| r.validate()),
        Schema::Rdcap => check_as::<RdcapRecord, _>(line, |r| r.validate()),
        Schema::Tracks => check_as::<BoxTrack, _>(line, |t| t.validate()),
        Schema::Runpoints => unreachable!("runpoints are CSV"),
    }
}

fn validate_runpoints(path: &Path) -> Result<Vec<Violation>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?
        .clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                out.push(Violation {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let checked = rec
            .deserialize::<RunPoint>(Some(&headers))
            .map_err(|e| e.to_string())
            .and_then(|p| p.validate().map_err(|e| e.to_string()));
        if let Err(message) = checked {
            out.push(Violation { line, message });
        }
    }
    Ok(out)
}

/// Checks every record of a JSONL (or, for run points, CSV) file. Returns all
/// violations with 1-based line numbers; an empty list means the file is
/// valid. Blank lines are ignored.
pub fn validate_dataset(path: &Path, schema: Schema) -> Result<Vec<Violation>> {
    if schema == Schema::Runpoints {
        return validate_runpoints(path);
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Err(message) = check_line(schema, &line) {
            out.push(Violation { line: i + 1, message });
        }
    }
    Ok(out)
}
