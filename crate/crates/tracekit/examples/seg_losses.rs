//! Compute every piece of the segmentation objective on toy masks, decode
//! masks with the two-layer gated decoder, and verify its gradients.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracekit::seg::{
    decoder_grad_check, dice_loss, refinement_loss, text_ce_loss, total_loss, toy_mask_decoder,
    weight_map, Codebook, DecoderParams, MaskBatch, DEFAULT_ALPHA, DEFAULT_LAMBDA_DICE,
    DEFAULT_LAMBDA_REF,
};

fn main() {
    // two 8x8 targets with a 2x2 overlap
    let mut gt = Array3::zeros((2, 8, 8));
    for i in 1..5 {
        for j in 1..5 {
            gt[[0, i, j]] = 1.0;
        }
    }
    for i in 3..7 {
        for j in 3..7 {
            gt[[1, i, j]] = 1.0;
        }
    }
    let pred = gt.mapv(|g| if g == 1.0 { 0.9 } else { 0.05 });

    let wm = weight_map(&pred, DEFAULT_ALPHA).unwrap();
    let boosted = wm.iter().filter(|&&w| w == DEFAULT_ALPHA).count();
    println!("weight map: {boosted} overlap pixels at alpha = {DEFAULT_ALPHA}");

    let l_dice = (0..2)
        .map(|k| {
            dice_loss(
                &pred.index_axis(ndarray::Axis(0), k).to_owned(),
                &gt.index_axis(ndarray::Axis(0), k).to_owned(),
            )
            .unwrap()
        })
        .sum::<f64>()
        / 2.0;
    let batch = MaskBatch::new(pred, gt, DEFAULT_ALPHA).unwrap();
    let l_ref = refinement_loss(&batch).unwrap();

    let logits = Array2::zeros((6, 32)); // uniform over a 32-token vocabulary
    let l_txt = text_ce_loss(&logits, &[3, 9, 12, 0, 31, 7], -100).unwrap();
    assert!((l_txt - 32.0f64.ln()).abs() < 1e-12);

    let total = total_loss(l_txt, l_ref, l_dice, DEFAULT_LAMBDA_REF, DEFAULT_LAMBDA_DICE).unwrap();
    println!("l_txt = {l_txt:.4}  l_ref = {l_ref:.4}  l_dice = {l_dice:.4}");
    println!("total = l_txt + {DEFAULT_LAMBDA_REF}*l_ref + {DEFAULT_LAMBDA_DICE}*l_dice = {total:.4}");

    // decoder: zero codebook decodes to exactly 0.5 everywhere
    let d = 16;
    let params = DecoderParams::random(d, 2, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f_visual = Array2::from_shape_fn((16, d), |_| rng.gen::<f64>() - 0.5);
    let masks = toy_mask_decoder(&f_visual, &[Codebook::zeros(d).tokens], &params, (4, 4)).unwrap();
    assert!(masks.iter().all(|&p| p == 0.5));
    println!("zero codebook -> all mask probabilities exactly 0.5");

    let report = decoder_grad_check(8, 2, (4, 4), 0).unwrap();
    println!(
        "decoder grad check: {} coords, max rel err {:.3e}",
        report.checked_coords, report.max_rel_err
    );
    assert!(report.max_rel_err < 1e-4);
}
