//! Run the bidirectional cross-attention block forward and backward, verify
//! the gradients against finite differences, and round-trip the parameters
//! through the binary snapshot format.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracekit::tvp::{grad_check, tvp_forward, TvpConfig, TvpParams};

fn main() {
    let config = TvpConfig::new(16, 4, 2, 0);
    let params = TvpParams::random(config);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f_img = Array2::from_shape_fn((9, 16), |_| rng.gen::<f64>() - 0.5);
    let f_traj = Array2::from_shape_fn((5, 16), |_| rng.gen::<f64>() - 0.5);

    let (out_img, out_traj, _) = tvp_forward(&f_img, &f_traj, &params).unwrap();
    // the visual gate starts at zero, so visual features pass through unchanged
    assert_eq!(out_img, f_img);
    let traj_delta = (&out_traj - &f_traj).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    println!("visual features: identity at init (gate = 0)");
    println!("trajectory features: max |delta| = {traj_delta:.4}");

    for (d, h, b) in [(8usize, 1usize, 1usize), (64, 4, 2)] {
        let cfg = TvpConfig::new(d, h, b, 0);
        let samples = if d > 8 { Some(12) } else { None };
        let report = grad_check(cfg, 0, samples).unwrap();
        println!(
            "grad check d={d} h={h} blocks={b}: {} coords, max rel err {:.3e}",
            report.checked_coords, report.max_rel_err
        );
        let worst = report
            .per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        println!("  worst class: {} ({:.3e})", worst.0, worst.1);
        assert!(report.max_rel_err < 1e-4);
    }

    let mut buf = Vec::new();
    params.save(&mut buf).unwrap();
    let loaded = TvpParams::load(buf.as_slice()).unwrap();
    assert_eq!(params, loaded);
    println!("snapshot round-trip: {} bytes, parameters identical", buf.len());
}
