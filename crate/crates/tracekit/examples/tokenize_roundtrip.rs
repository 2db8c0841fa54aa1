//! Quantize a trace to 1000 bins, print both token grammars, parse them
//! back, and measure the reconstruction error of bin-center dequantization.

use tracekit::tokenize::{dequantize, parse, quantize, serialize};
use tracekit::trace::{TimedTrace, TracePoint};

fn main() {
    let points = vec![
        TracePoint::new(32.0, 470.0, 0.0),
        TracePoint::new(320.0, 240.0, 0.5),
        TracePoint::new(51.2, 96.0, 1.0),
        TracePoint::new(639.9, 479.9, 1.5),
    ];
    let trace = TimedTrace::new(points.clone(), 640.0, 480.0);

    let qt = quantize(&trace).expect("nonzero dimensions");
    let canonical = serialize(&qt).unwrap();
    println!("canonical: {canonical}");

    let per_point: String = qt
        .coords
        .iter()
        .map(|(x, y)| format!("<Traj>[{x},{y}]</Traj>"))
        .collect::<Vec<_>>()
        .join(" ");
    println!("per-point: {per_point}");

    assert_eq!(parse(&canonical).unwrap(), qt);
    assert_eq!(parse(&per_point).unwrap(), qt);

    let back = dequantize(&qt, 640.0, 480.0);
    for (orig, (x, y)) in points.iter().zip(&back) {
        let err = ((orig.x - x).powi(2) + (orig.y - y).powi(2)).sqrt();
        println!(
            "({:6.1}, {:6.1}) -> ({:7.2}, {:7.2})  error {:.3}px",
            orig.x, orig.y, x, y, err
        );
        // half a bin per axis at most
        assert!((orig.x - x).abs() <= 640.0 / 2000.0 + 1e-9);
        assert!((orig.y - y).abs() <= 480.0 / 2000.0 + 1e-9);
    }
}
