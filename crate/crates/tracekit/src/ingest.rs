//! Localized-Narratives-style record parsing and word/phrase-aligned trace
//! segmentation.
//!
//! Input is UTF-8 JSON lines, one narrative per line, in the public LN layout:
//! `image_id`, `caption`, `timed_caption` (list of
//! `{utterance, start_time, end_time}`), `traces` (list of stroke lists of
//! `{x, y, t}`), plus image dimensions. Files ending in `.gz` are
//! transparently decompressed.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::trace::{
    validate_trace, AlignedSegment, PhraseSpan, TimedTrace, TimedWord, TraceError, TracePoint,
};
use crate::weights::{tolerance_of, weight_of};

#[derive(Debug, Clone, PartialEq)]
pub struct NarrativeRecord {
    pub image_id: String,
    pub caption: String,
    pub timed_words: Vec<TimedWord>,
    pub trace: TimedTrace,
    pub warnings: Vec<String>,
}

/// A trace slice bound to one word, before any weight is assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct WordSegment {
    pub points: Vec<TracePoint>,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("phrase spans overlap or leave gaps at word index {0}")]
    SpanCoverage(usize),
    #[error("importance score out of range: {0}")]
    BadImportance(u8),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Deserialize)]
struct RawPoint {
    x: f64,
    y: f64,
    t: f64,
}

#[derive(Deserialize)]
struct RawTimedWord {
    utterance: String,
    start_time: f64,
    end_time: f64,
}

#[derive(Deserialize)]
struct RawRecord {
    image_id: String,
    #[serde(default)]
    image_width: Option<f64>,
    #[serde(default)]
    image_height: Option<f64>,
    caption: String,
    timed_caption: Vec<RawTimedWord>,
    traces: Vec<Vec<RawPoint>>,
}

/// Parse one JSON line into a validated [`NarrativeRecord`].
///
/// Strokes are flattened and, if their time ranges interleave, merged and
/// re-sorted by timestamp with a warning. Coordinates that all lie below 1.5
/// are treated as normalized and rescaled by the image dimensions.
pub fn parse_record(line: &str) -> Result<NarrativeRecord, IngestError> {
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| IngestError::MalformedRecord(e.to_string()))?;
    let mut warnings = Vec::new();

    let width = raw.image_width.unwrap_or(1.0);
    let height = raw.image_height.unwrap_or(1.0);
    if width <= 0.0 || height <= 0.0 {
        return Err(IngestError::MalformedRecord(
            "non-positive image dimensions".into(),
        ));
    }

    let mut points: Vec<TracePoint> = Vec::new();
    let mut sorted_within = true;
    for stroke in &raw.traces {
        for p in stroke {
            points.push(TracePoint::new(p.x, p.y, p.t));
        }
    }
    if points.is_empty() {
        return Err(IngestError::Trace(TraceError::EmptyTrace));
    }
    for i in 1..points.len() {
        if points[i].t < points[i - 1].t {
            sorted_within = false;
            break;
        }
    }
    if !sorted_within {
        points.sort_by(|a, b| a.t.total_cmp(&b.t));
        warnings.push("stroke time ranges interleave; points re-sorted by t".into());
    }

    // LN files exist with both absolute-pixel and [0,1]-normalized coordinates.
    let normalized = points
        .iter()
        .all(|p| p.x.abs() <= 1.5 && p.y.abs() <= 1.5)
        && (width > 1.5 || height > 1.5);
    if normalized {
        for p in &mut points {
            p.x *= width;
            p.y *= height;
        }
    }

    let timed_words: Vec<TimedWord> = raw
        .timed_caption
        .iter()
        .map(|w| TimedWord::new(w.utterance.clone(), w.start_time, w.end_time))
        .collect();
    if timed_words.is_empty() {
        return Err(IngestError::MalformedRecord("empty timed_caption".into()));
    }
    for w in &timed_words {
        if w.t_end < w.t_start {
            return Err(IngestError::MalformedRecord(format!(
                "word '{}' has t_end < t_start",
                w.text
            )));
        }
    }

    let joined = timed_words
        .iter()
        .map(|w| w.text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    if joined != raw.caption {
        warnings.push("caption does not equal joined timed words".into());
    }

    let validated = validate_trace(TimedTrace::new(points, width, height))?;
    if validated.clamped > 0 {
        warnings.push(format!("{} points clamped to image bounds", validated.clamped));
    }

    Ok(NarrativeRecord {
        image_id: raw.image_id,
        caption: raw.caption,
        timed_words,
        trace: validated.trace,
        warnings,
    })
}

/// Open a JSONL file (gzip-decompressed when the path ends in `.gz`) as a
/// buffered line reader.
pub fn open_jsonl(path: &Path) -> Result<Box<dyn BufRead>, IngestError> {
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok(Box::new(BufReader::new(reader)))
}

/// Partition a trace into per-word segments by word time intervals.
///
/// A point inside word i's `[t_start, t_end]` belongs to word i; a point on a
/// shared boundary goes to the earlier word. Points outside every interval
/// (annotators pause) attach to the interval with the smallest time gap, ties
/// toward the earlier word, so the segments always partition the trace.
pub fn segment_by_words(trace: &TimedTrace, words: &[TimedWord]) -> Vec<WordSegment> {
    assert!(!words.is_empty(), "word list must be non-empty");
    let mut segments: Vec<WordSegment> = words
        .iter()
        .map(|w| WordSegment {
            points: Vec::new(),
            t_start: w.t_start,
            t_end: w.t_end,
        })
        .collect();

    for p in &trace.points {
        let mut owner: Option<usize> = None;
        for (i, w) in words.iter().enumerate() {
            if p.t >= w.t_start && p.t <= w.t_end {
                owner = Some(i);
                break;
            }
        }
        let idx = owner.unwrap_or_else(|| {
            // nearest interval by time gap, earlier word wins ties
            let mut best = 0usize;
            let mut best_gap = f64::INFINITY;
            for (i, w) in words.iter().enumerate() {
                let gap = if p.t < w.t_start {
                    w.t_start - p.t
                } else {
                    p.t - w.t_end
                };
                if gap < best_gap {
                    best_gap = gap;
                    best = i;
                }
            }
            best
        });
        segments[idx].points.push(*p);
    }
    segments
}

/// Merge per-word segments into phrase segments carrying weight and tolerance.
///
/// Spans must tile the word list in order with no gaps or overlaps.
pub fn merge_to_phrases(
    segments: &[WordSegment],
    spans: &[PhraseSpan],
    eps_base: f64,
) -> Result<Vec<AlignedSegment>, IngestError> {
    let mut cursor = 0usize;
    let mut out = Vec::with_capacity(spans.len());
    for span in spans {
        if span.start != cursor || span.end <= span.start || span.end > segments.len() {
            return Err(IngestError::SpanCoverage(span.start));
        }
        cursor = span.end;
        let weight = weight_of(span.importance)
            .map_err(|_| IngestError::BadImportance(span.importance))?;
        let tolerance = tolerance_of(weight, eps_base);
        let words = &segments[span.start..span.end];
        let points: Vec<TracePoint> = words.iter().flat_map(|s| s.points.iter().copied()).collect();
        out.push(AlignedSegment {
            points,
            t_start: words.first().map(|s| s.t_start).unwrap_or(0.0),
            t_end: words.last().map(|s| s.t_end).unwrap_or(0.0),
            weight,
            tolerance,
        });
    }
    if cursor != segments.len() {
        return Err(IngestError::SpanCoverage(cursor));
    }
    Ok(out)
}
