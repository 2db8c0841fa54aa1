//! Simplify a noisy synthetic trace three ways — importance-weighted
//! per-segment tolerances, a single fixed tolerance, and uniform sampling —
//! and compare the point budgets.

use tracekit::simplify::{douglas_peucker, simplify_semantic, uniform_sample};
use tracekit::trace::{AlignedSegment, TracePoint};
use tracekit::weights::{tolerance_of, weight_of, DEFAULT_EPS_BASE};

/// Circular scan with 2px jitter, like a 60 Hz mouse trace.
fn noisy_trace(n: usize) -> Vec<TracePoint> {
    let mut state = 0x1234_5678_9ABC_DEF0u64;
    let mut noise = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 4.0
    };
    (0..n)
        .map(|i| {
            let t = i as f64 / 60.0;
            TracePoint::new(
                320.0 + 200.0 * (t * 1.5).cos() + noise(),
                240.0 + 150.0 * (t * 1.5).sin() + noise(),
                t,
            )
        })
        .collect()
}

fn main() {
    let points = noisy_trace(300);
    let n = points.len();

    // three phrases of increasing importance over equal thirds of the trace
    let segments: Vec<AlignedSegment> = [1u8, 3, 5]
        .iter()
        .enumerate()
        .map(|(i, &importance)| {
            let chunk = &points[i * n / 3..(i + 1) * n / 3];
            let weight = weight_of(importance).unwrap();
            AlignedSegment {
                points: chunk.to_vec(),
                t_start: chunk.first().unwrap().t,
                t_end: chunk.last().unwrap().t,
                weight,
                tolerance: tolerance_of(weight, DEFAULT_EPS_BASE),
            }
        })
        .collect();

    let (semantic, report) = simplify_semantic(&segments, 640.0, 480.0);
    println!(
        "semantic:  {} -> {} points ({:.1}% compression)",
        report.input_points,
        report.output_points,
        100.0 * report.compression
    );
    for (tol, inc, outc) in &report.per_segment {
        println!("  tolerance {tol:>5.2}px: {inc} -> {outc} points");
    }

    let fixed = douglas_peucker(&points, DEFAULT_EPS_BASE);
    println!("fixed eps: {} -> {} points", n, fixed.len());

    let uniform = uniform_sample(&points, semantic.points.len()).unwrap();
    println!("uniform:   {} -> {} points (same budget)", n, uniform.len());
}
