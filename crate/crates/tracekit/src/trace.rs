//! Core domain types: timed attention traces, word timings, phrase spans,
//! and word-aligned trace segments.
//!
//! All types here are immutable after construction and safe to share across
//! threads. Coordinates are stored as `f64` even though most sources record
//! integer pixels: simplification distances and normalization are fractional.

use thiserror::Error;

/// A single trace sample: pixel coordinates plus a timestamp in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl TracePoint {
    pub fn new(x: f64, y: f64, t: f64) -> Self {
        Self { x, y, t }
    }

    pub fn distance_to(&self, other: &TracePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A time-ordered attention trajectory over one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedTrace {
    pub points: Vec<TracePoint>,
    pub image_width: f64,
    pub image_height: f64,
}

/// One spoken word with its temporal extent.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedWord {
    pub text: String,
    pub t_start: f64,
    pub t_end: f64,
}

impl TimedWord {
    pub fn new(text: impl Into<String>, t_start: f64, t_end: f64) -> Self {
        Self {
            text: text.into(),
            t_start,
            t_end,
        }
    }
}

/// A contiguous run of word indices forming one semantic phrase, with an
/// importance score in 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhraseSpan {
    /// First word index covered by the phrase (inclusive).
    pub start: usize,
    /// One past the last word index (exclusive).
    pub end: usize,
    pub importance: u8,
}

impl PhraseSpan {
    pub fn new(start: usize, end: usize, importance: u8) -> Self {
        Self {
            start,
            end,
            importance,
        }
    }
}

/// A slice of a trace bound to one word or phrase, carrying the phrase weight
/// and the local simplification tolerance derived from it.
///
/// Invariant: `tolerance * weight == eps_base` up to floating rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSegment {
    pub points: Vec<TracePoint>,
    pub t_start: f64,
    pub t_end: f64,
    /// Normalized semantic weight in {0.2, 0.4, 0.6, 0.8, 1.0}.
    pub weight: f64,
    /// Local simplification tolerance in pixels, `eps_base / weight`.
    pub tolerance: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("trace contains no points")]
    EmptyTrace,
    #[error("timestamps decrease at index {index}: {prev} -> {next}")]
    NonMonotoneTime { index: usize, prev: f64, next: f64 },
    #[error("non-finite value in trace at index {index}")]
    NonFiniteValue { index: usize },
}

/// Outcome of [`validate_trace`]: the (possibly clamped) trace plus how many
/// points were pulled back inside the image bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedTrace {
    pub trace: TimedTrace,
    pub clamped: usize,
}

impl TimedTrace {
    pub fn new(points: Vec<TracePoint>, image_width: f64, image_height: f64) -> Self {
        Self {
            points,
            image_width,
            image_height,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Validate a trace: non-empty, finite, non-decreasing timestamps.
/// Out-of-bounds coordinates are clamped to the image rectangle rather than
/// rejected; annotation devices overshoot slightly in public datasets.
pub fn validate_trace(trace: TimedTrace) -> Result<ValidatedTrace, TraceError> {
    if trace.points.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    for (i, p) in trace.points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite() && p.t.is_finite()) || p.t < 0.0 {
            return Err(TraceError::NonFiniteValue { index: i });
        }
    }
    for i in 1..trace.points.len() {
        let (prev, next) = (trace.points[i - 1].t, trace.points[i].t);
        if next < prev {
            return Err(TraceError::NonMonotoneTime {
                index: i,
                prev,
                next,
            });
        }
    }
    let (w, h) = (trace.image_width, trace.image_height);
    let mut clamped = 0;
    let points = trace
        .points
        .into_iter()
        .map(|p| {
            let x = p.x.clamp(0.0, w);
            let y = p.y.clamp(0.0, h);
            if x != p.x || y != p.y {
                clamped += 1;
            }
            TracePoint { x, y, t: p.t }
        })
        .collect();
    Ok(ValidatedTrace {
        trace: TimedTrace::new(points, w, h),
        clamped,
    })
}
