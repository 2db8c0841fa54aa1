//! Score predicted traces against ground truth with the windowed bipartite
//! trace metric: identity, pure translation, and noisy predictions.

use tracekit::metrics::{lbm, LbmConfig};
use tracekit::trace::{TimedTrace, TracePoint};

fn spiral(n: usize, dx: f64, dy: f64) -> TimedTrace {
    let points = (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            TracePoint::new(
                320.0 + 150.0 * t * (8.0 * t).cos() + dx,
                240.0 + 120.0 * t * (8.0 * t).sin() + dy,
                t,
            )
        })
        .collect();
    TimedTrace::new(points, 640.0, 480.0)
}

fn main() {
    let gt = spiral(40, 0.0, 0.0);
    let diag = (640.0f64.powi(2) + 480.0f64.powi(2)).sqrt();

    for k in [0usize, 1] {
        let config = LbmConfig::fixed(k, 5);
        println!("{}", config.fingerprint());

        let identity = lbm(&gt, &gt, &config).unwrap();
        println!("  identity:    {:.6}", identity.score);

        let shifted = spiral(40, 30.0, 40.0); // displacement 50px
        let translation = lbm(&shifted, &gt, &config).unwrap();
        println!(
            "  translation: {:.6} (expected {:.6})",
            translation.score,
            50.0 / diag
        );

        let noisy = {
            let mut t = gt.clone();
            for (i, p) in t.points.iter_mut().enumerate() {
                p.x += ((i * 7) % 13) as f64 - 6.0;
                p.y += ((i * 5) % 11) as f64 - 5.0;
            }
            t
        };
        let score = lbm(&noisy, &gt, &config).unwrap();
        println!(
            "  noisy:       {:.6} ({} pairs, {} penalized)",
            score.score, score.n_pairs, score.n_penalized
        );
    }
}
