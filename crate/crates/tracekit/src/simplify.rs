//! Geometric trace simplification: perpendicular distance, Douglas-Peucker,
//! the semantic-guided per-segment union, and the two comparison baselines
//! (uniform sampling, fixed-tolerance DP is just [`douglas_peucker`]).

use thiserror::Error;

use crate::trace::{AlignedSegment, TimedTrace, TracePoint};

/// Per-run simplification accounting.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimplifyReport {
    pub input_points: usize,
    pub output_points: usize,
    /// `1 - output/input`.
    pub compression: f64,
    /// `(tolerance, in_count, out_count)` per non-empty segment.
    pub per_segment: Vec<(f64, usize, usize)>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("target count {target} out of range for {len} points")]
    TargetOutOfRange { target: usize, len: usize },
}

/// Perpendicular distance from `p` to the infinite line through `a` and `b`.
/// A degenerate chord (`a == b`) falls back to the point-to-point distance;
/// stationary gaze segments make this case common.
pub fn perpendicular_distance(p: TracePoint, a: TracePoint, b: TracePoint) -> f64 {
    let dy = b.y - a.y;
    let dx = b.x - a.x;
    let denom = (dy * dy + dx * dx).sqrt();
    if denom == 0.0 {
        return p.distance_to(&a);
    }
    (dy * p.x - dx * p.y + b.x * a.y - b.y * a.x).abs() / denom
}

fn dp_recurse(points: &[TracePoint], eps: f64, offset: usize, keep: &mut Vec<usize>) {
    if points.len() <= 2 {
        return;
    }
    let a = points[0];
    let b = points[points.len() - 1];
    // argmax of perpendicular distance; ties break to the lowest index
    let mut max_d = f64::NEG_INFINITY;
    let mut max_i = 0usize;
    for (i, p) in points.iter().enumerate().take(points.len() - 1).skip(1) {
        let d = perpendicular_distance(*p, a, b);
        if d > max_d {
            max_d = d;
            max_i = i;
        }
    }
    if max_d > eps {
        dp_recurse(&points[..=max_i], eps, offset, keep);
        keep.push(offset + max_i);
        dp_recurse(&points[max_i..], eps, offset + max_i, keep);
    }
}

/// Ramer-Douglas-Peucker simplification. The output is a subsequence of the
/// input that always contains both endpoints; lists of at most two points are
/// returned unchanged.
pub fn douglas_peucker(points: &[TracePoint], eps: f64) -> Vec<TracePoint> {
    assert!(eps > 0.0, "eps must be positive");
    if points.len() <= 2 {
        return points.to_vec();
    }
    let mut keep = vec![0usize];
    dp_recurse(points, eps, 0, &mut keep);
    keep.push(points.len() - 1);
    keep.into_iter().map(|i| points[i]).collect()
}

/// Indices retained by [`douglas_peucker`]; used by nested-set checks.
pub fn douglas_peucker_indices(points: &[TracePoint], eps: f64) -> Vec<usize> {
    if points.len() <= 2 {
        return (0..points.len()).collect();
    }
    let mut keep = vec![0usize];
    dp_recurse(points, eps, 0, &mut keep);
    keep.push(points.len() - 1);
    keep
}

/// Simplify each phrase-aligned segment with its own tolerance and
/// concatenate the results in order. When a segment's last retained point
/// coincides exactly with the next segment's first, the duplicate is dropped.
/// Empty segments are skipped.
pub fn simplify_semantic(
    segments: &[AlignedSegment],
    image_width: f64,
    image_height: f64,
) -> (TimedTrace, SimplifyReport) {
    let mut out: Vec<TracePoint> = Vec::new();
    let mut per_segment = Vec::new();
    let mut input_points = 0usize;

    for seg in segments {
        input_points += seg.points.len();
        if seg.points.is_empty() {
            continue;
        }
        let kept = douglas_peucker(&seg.points, seg.tolerance);
        per_segment.push((seg.tolerance, seg.points.len(), kept.len()));
        let mut iter = kept.into_iter();
        if let Some(first) = iter.next() {
            let dup = out
                .last()
                .is_some_and(|last| last.x == first.x && last.y == first.y);
            if !dup {
                out.push(first);
            }
            out.extend(iter);
        }
    }

    let output_points = out.len();
    let compression = if input_points == 0 {
        0.0
    } else {
        1.0 - output_points as f64 / input_points as f64
    };
    (
        TimedTrace::new(out, image_width, image_height),
        SimplifyReport {
            input_points,
            output_points,
            compression,
            per_segment,
        },
    )
}

/// Uniform-sampling baseline: keep indices `round(j*(n-1)/(m-1))`.
pub fn uniform_sample(points: &[TracePoint], target: usize) -> Result<Vec<TracePoint>, SampleError> {
    let n = points.len();
    if target < 2 || target > n {
        return Err(SampleError::TargetOutOfRange { target, len: n });
    }
    Ok((0..target)
        .map(|j| {
            let idx = (j as f64 * (n - 1) as f64 / (target - 1) as f64).round() as usize;
            points[idx]
        })
        .collect())
}
