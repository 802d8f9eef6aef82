//! Line-oriented file formats: sequence datasets and detection files.
//!
//! Both formats hold one JSON object per line. A dataset line is
//! `{"id", "T", "F", "features": [[f64; F]; T], "events": [{"s", "e", "c"}]}`
//! with integer event boundaries; a detection line is
//! `{"id", "events": [{"s", "e", "c", "score"}]}` with real boundaries.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::DetectionRecord;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::types::{EventSpan, SequenceSample};

#[derive(Serialize, Deserialize)]
struct EventRecord {
    s: i64,
    e: i64,
    c: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    id: String,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "F")]
    f: usize,
    features: Vec<Vec<f64>>,
    events: Vec<EventRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DetectionEntry {
    s: f64,
    e: f64,
    c: usize,
    score: f64,
}

/// Detections of one sequence, as stored in a detection file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceDetections {
    pub id: String,
    #[serde(with = "detections_serde")]
    pub events: Vec<DetectionRecord>,
}

mod detections_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[DetectionRecord], s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<_> = v
            .iter()
            .map(|d| DetectionEntry {
                s: d.start,
                e: d.end,
                c: d.class_id,
                score: d.score,
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DetectionRecord>, D::Error> {
        let entries = Vec::<DetectionEntry>::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| DetectionRecord {
                start: e.s,
                end: e.e,
                class_id: e.c,
                score: e.score,
            })
            .collect())
    }
}

fn integral(v: f64, what: &str) -> Result<i64> {
    if v.fract() != 0.0 || !v.is_finite() {
        return Err(Error::InvalidEvent(format!("{what} boundary {v} is not a whole frame")));
    }
    Ok(v as i64)
}

pub fn sequence_to_line(sample: &SequenceSample) -> Result<String> {
    let f = sample.feature_dim();
    let record = SequenceRecord {
        id: sample.id.clone(),
        t: sample.length,
        f,
        features: (0..sample.length).map(|r| sample.features.row(r).to_vec()).collect(),
        events: sample
            .events
            .iter()
            .map(|e| {
                Ok(EventRecord {
                    s: integral(e.start, "start")?,
                    e: integral(e.end, "end")?,
                    c: e.class_id,
                })
            })
            .collect::<Result<_>>()?,
    };
    serde_json::to_string(&record).map_err(|e| Error::InvalidEvent(e.to_string()))
}

pub fn sequence_from_line(line: &str) -> std::result::Result<SequenceSample, String> {
    let r: SequenceRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if r.features.len() != r.t || r.features.iter().any(|row| row.len() != r.f) {
        return Err(format!("{}: features are not {}x{}", r.id, r.t, r.f));
    }
    let features = Tensor::matrix(r.t, r.f, r.features.into_iter().flatten().collect())
        .map_err(|e| e.to_string())?;
    Ok(SequenceSample {
        id: r.id,
        length: r.t,
        features,
        events: r
            .events
            .into_iter()
            .map(|e| EventSpan::new(e.s as f64, e.e as f64, e.c))
            .collect(),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = Result<String>>) -> Result<()> {
    let mut w = create(path)?;
    for line in lines {
        let line = line?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines<T>(path: &Path, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}

pub fn write_sequences(path: &Path, samples: &[SequenceSample]) -> Result<()> {
    write_lines(path, samples.iter().map(sequence_to_line))
}

/// Reads a dataset file, validating every sequence against `num_classes`.
pub fn read_sequences(path: &Path, num_classes: usize) -> Result<Vec<SequenceSample>> {
    read_lines(path, |line| {
        let s = sequence_from_line(line)?;
        s.validate(num_classes).map_err(|e| e.to_string())?;
        Ok(s)
    })
}

pub fn write_detections(path: &Path, detections: &[SequenceDetections]) -> Result<()> {
    write_lines(
        path,
        detections
            .iter()
            .map(|d| serde_json::to_string(d).map_err(|e| Error::InvalidEvent(e.to_string()))),
    )
}

pub fn read_detections(path: &Path) -> Result<Vec<SequenceDetections>> {
    read_lines(path, |line| serde_json::from_str(line).map_err(|e| e.to_string()))
}

/// Writes a value as pretty-printed JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    write_lines(path, [Ok(text)])
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}
