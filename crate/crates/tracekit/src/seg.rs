//! Segmentation objective and toy decoder: the 2x3 learned codebook, dice
//! loss, the overlap weight map, the weighted refinement loss, text
//! cross-entropy, the combined objective, and a two-layer gated
//! cross-attention mask decoder with checked gradients.
//!
//! Losses run at 16x16 in desk tests and 256x256 at production scale through
//! the same code paths.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tvp::{cross_attention, cross_attention_backward, rel_err, AttentionWeights, GradCheckReport};

pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_LAMBDA_REF: f64 = 1.0;
pub const DEFAULT_LAMBDA_DICE: f64 = 2.0;
/// Dice smoothing term.
const EPS_SMOOTH: f64 = 1e-6;
/// Probability clamp applied before logarithms.
const EPS_PROB: f64 = 1e-7;

pub const CODEBOOK_SCALES: usize = 2;
pub const CODEBOOK_TOKENS_PER_SCALE: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum SegError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask invalid: {0}")]
    BadMask(String),
    #[error("target id {id} at position {position} outside vocabulary of {vocab}")]
    TargetOutOfRange {
        position: usize,
        id: i64,
        vocab: usize,
    },
    #[error("loss component is not finite")]
    NonFiniteComponent,
    #[error("io: {0}")]
    Io(String),
}

/// Six learned segmentation embeddings in a 2-scales x 3-tokens layout.
/// Row-major: rows `0..3` are scale 1, rows `3..6` are scale 2.
/// Desk default width is 64; production width (4096) uses the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub tokens: Array2<f64>,
}

impl Codebook {
    pub fn zeros(width: usize) -> Self {
        Self {
            tokens: Array2::zeros((CODEBOOK_SCALES * CODEBOOK_TOKENS_PER_SCALE, width)),
        }
    }

    pub fn random(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            tokens: Array2::from_shape_fn(
                (CODEBOOK_SCALES * CODEBOOK_TOKENS_PER_SCALE, width),
                |_| (rng.gen::<f64>() - 0.5) / (width as f64).sqrt(),
            ),
        }
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }

    /// The three tokens of one scale (0-based).
    pub fn scale(&self, s: usize) -> Array2<f64> {
        assert!(s < CODEBOOK_SCALES);
        self.tokens
            .slice(ndarray::s![
                s * CODEBOOK_TOKENS_PER_SCALE..(s + 1) * CODEBOOK_TOKENS_PER_SCALE,
                ..
            ])
            .to_owned()
    }
}

/// K predicted probability masks with matching binary ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch {
    pub pred: Array3<f64>,
    pub gt: Array3<f64>,
    pub alpha: f64,
}

impl MaskBatch {
    pub fn new(pred: Array3<f64>, gt: Array3<f64>, alpha: f64) -> Result<Self, SegError> {
        if pred.dim() != gt.dim() {
            return Err(SegError::ShapeMismatch(format!(
                "pred {:?} vs gt {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        if pred.iter().any(|&p| !p.is_finite() || !(0.0..=1.0).contains(&p)) {
            return Err(SegError::BadMask("pred outside [0,1]".into()));
        }
        if gt.iter().any(|&g| g != 0.0 && g != 1.0) {
            return Err(SegError::BadMask("gt not binary".into()));
        }
        Ok(Self { pred, gt, alpha })
    }
}

/// Soft dice over probabilities: `1 - 2*sum(p*g) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64, SegError> {
    if pred.dim() != gt.dim() {
        return Err(SegError::ShapeMismatch(format!(
            "pred {:?} vs gt {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let inter = (pred * gt).sum();
    Ok(1.0 - 2.0 * inter / (pred.sum() + gt.sum() + EPS_SMOOTH))
}

/// Per-pixel loss weights: binarize each prediction at 0.5, then `alpha`
/// wherever at least two masks claim the pixel, otherwise 1.
pub fn weight_map(preds: &Array3<f64>, alpha: f64) -> Result<Array2<f64>, SegError> {
    let (k, h, w) = preds.dim();
    if k == 0 {
        return Err(SegError::ShapeMismatch("no masks".into()));
    }
    assert!(alpha >= 1.0, "alpha must be >= 1");
    let mut map = Array2::from_elem((h, w), 1.0);
    for i in 0..h {
        for j in 0..w {
            let claims = (0..k).filter(|&m| preds[[m, i, j]] >= 0.5).count();
            if claims >= 2 {
                map[[i, j]] = alpha;
            }
        }
    }
    Ok(map)
}

fn bce(p: f64, g: f64) -> f64 {
    let p = p.clamp(EPS_PROB, 1.0 - EPS_PROB);
    -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
}

/// Weighted refinement loss: mean over K*H*W of `A_i * BCE(pred, gt)` with
/// the weight map derived from the batch's own predictions.
pub fn refinement_loss(batch: &MaskBatch) -> Result<f64, SegError> {
    let (k, h, w) = batch.pred.dim();
    let weights = weight_map(&batch.pred, batch.alpha)?;
    let mut total = 0.0;
    for m in 0..k {
        for i in 0..h {
            for j in 0..w {
                total += weights[[i, j]] * bce(batch.pred[[m, i, j]], batch.gt[[m, i, j]]);
            }
        }
    }
    Ok(total / (k * h * w) as f64)
}

/// Mean autoregressive cross-entropy over non-ignored positions. With every
/// position ignored the loss is defined as 0 and a warning is printed.
pub fn text_ce_loss(logits: &Array2<f64>, targets: &[i64], ignore_id: i64) -> Result<f64, SegError> {
    let (t, v) = logits.dim();
    if targets.len() != t {
        return Err(SegError::ShapeMismatch(format!(
            "{} targets for {t} logit rows",
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (position, (&id, row)) in targets.iter().zip(logits.rows()).enumerate() {
        if id == ignore_id {
            continue;
        }
        if !(0..v as i64).contains(&id) {
            return Err(SegError::TargetOutOfRange {
                position,
                id,
                vocab: v,
            });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        total += log_z - row[id as usize];
        count += 1;
    }
    if count == 0 {
        eprintln!("warning: text_ce_loss: all positions ignored, loss defined as 0");
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

/// Combined objective `l_txt + lambda_ref*l_ref + lambda_dice*l_dice`.
pub fn total_loss(
    l_txt: f64,
    l_ref: f64,
    l_dice: f64,
    lambda_ref: f64,
    lambda_dice: f64,
) -> Result<f64, SegError> {
    if ![l_txt, l_ref, l_dice, lambda_ref, lambda_dice]
        .iter()
        .all(|x| x.is_finite())
    {
        return Err(SegError::NonFiniteComponent);
    }
    Ok(l_txt + lambda_ref * l_ref + lambda_dice * l_dice)
}

/// One decoder layer: seg tokens cross-attend to the visual tokens through a
/// zero-initialized per-channel gate, mirroring the visual-enhancement gate.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub attn: AttentionWeights,
    pub gamma: Array1<f64>,
}

/// Two-layer toy decoder. Layer 1 consumes the scale-1 codebook tokens;
/// layer 2 adds the scale-2 tokens to layer 1's output.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub layers: Vec<DecoderLayer>,
}

impl DecoderParams {
    pub fn random(d_model: usize, n_heads: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..2)
            .map(|_| DecoderLayer {
                attn: AttentionWeights::random(d_model, &mut rng),
                gamma: Array1::zeros(d_model),
            })
            .collect();
        Self {
            d_model,
            n_heads,
            layers,
        }
    }

    fn param_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.w_q"), l.attn.w_q.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.w_k"), l.attn.w_k.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.w_v"), l.attn.w_v.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.w_o"), l.attn.w_o.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.b_o"), l.attn.b_o.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.gamma"), l.gamma.as_slice_mut().unwrap()));
        }
        out
    }

    fn param_slices(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.w_q"), l.attn.w_q.as_slice().unwrap()));
            out.push((format!("layer{i}.w_k"), l.attn.w_k.as_slice().unwrap()));
            out.push((format!("layer{i}.w_v"), l.attn.w_v.as_slice().unwrap()));
            out.push((format!("layer{i}.w_o"), l.attn.w_o.as_slice().unwrap()));
            out.push((format!("layer{i}.b_o"), l.attn.b_o.as_slice().unwrap()));
            out.push((format!("layer{i}.gamma"), l.gamma.as_slice().unwrap()));
        }
        out
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct DecoderCache {
    a1: Array2<f64>,
    cache1: crate::tvp::AttnCache,
    a2: Array2<f64>,
    cache2: crate::tvp::AttnCache,
    pooled: Array1<f64>,
    probs: Array2<f64>,
}

fn decoder_forward(
    f_visual: &Array2<f64>,
    e_seg: &Array2<f64>,
    params: &DecoderParams,
    grid: (usize, usize),
) -> Result<DecoderCache, SegError> {
    let (h, w) = grid;
    let d = params.d_model;
    if f_visual.dim() != (h * w, d) {
        return Err(SegError::ShapeMismatch(format!(
            "visual tokens {:?}, expected ({}, {d})",
            f_visual.dim(),
            h * w
        )));
    }
    if e_seg.dim() != (CODEBOOK_SCALES * CODEBOOK_TOKENS_PER_SCALE, d) {
        return Err(SegError::ShapeMismatch(format!(
            "seg tokens {:?}, expected (6, {d})",
            e_seg.dim()
        )));
    }
    let shape = |e: crate::tvp::TvpError| SegError::ShapeMismatch(e.to_string());
    let n = CODEBOOK_TOKENS_PER_SCALE;
    let s1 = e_seg.slice(ndarray::s![0..n, ..]).to_owned();
    let c2 = e_seg.slice(ndarray::s![n..2 * n, ..]).to_owned();

    let (a1, cache1) =
        cross_attention(&s1, f_visual, &params.layers[0].attn, params.n_heads).map_err(shape)?;
    let t1 = &s1 + &(&a1 * &params.layers[0].gamma);

    let u2 = &t1 + &c2;
    let (a2, cache2) =
        cross_attention(&u2, f_visual, &params.layers[1].attn, params.n_heads).map_err(shape)?;
    let t2 = &u2 + &(&a2 * &params.layers[1].gamma);

    let pooled = t2.mean_axis(Axis(0)).unwrap();
    let logits = f_visual.dot(&pooled);
    let probs = Array2::from_shape_fn((h, w), |(i, j)| logistic(logits[i * w + j]));
    Ok(DecoderCache {
        a1,
        cache1,
        a2,
        cache2,
        pooled,
        probs,
    })
}

/// Predict one probability mask per target. Each target's `e_seg` is a 6 x d
/// copy of the codebook layout; visual tokens live on an `h x w` grid
/// (desk default 16x16). Per-pixel logit is the dot product of the target's
/// pooled seg embedding with that pixel's visual feature, through a logistic.
pub fn toy_mask_decoder(
    f_visual: &Array2<f64>,
    targets: &[Array2<f64>],
    params: &DecoderParams,
    grid: (usize, usize),
) -> Result<Array3<f64>, SegError> {
    let (h, w) = grid;
    let mut out = Array3::zeros((targets.len(), h, w));
    for (k, e_seg) in targets.iter().enumerate() {
        let cache = decoder_forward(f_visual, e_seg, params, grid)?;
        out.index_axis_mut(Axis(0), k).assign(&cache.probs);
    }
    Ok(out)
}

/// Analytic parameter gradients of `sum(probs * upstream)` for one target.
fn decoder_backward(
    f_visual: &Array2<f64>,
    cache: &DecoderCache,
    params: &DecoderParams,
    upstream: &Array2<f64>,
) -> DecoderParams {
    let (h, w) = upstream.dim();
    let s = CODEBOOK_TOKENS_PER_SCALE as f64;

    // logistic + pooled dot product
    let mut d_pooled = Array1::zeros(cache.pooled.len());
    for i in 0..h {
        for j in 0..w {
            let p = cache.probs[[i, j]];
            let d_logit = upstream[[i, j]] * p * (1.0 - p);
            d_pooled.scaled_add(d_logit, &f_visual.row(i * w + j));
        }
    }
    // mean over the three tokens
    let d_t2 = Array2::from_shape_fn((CODEBOOK_TOKENS_PER_SCALE, d_pooled.len()), |(_, c)| {
        d_pooled[c] / s
    });

    let d_gamma2 = (&d_t2 * &cache.a2).sum_axis(Axis(0));
    let d_a2 = &d_t2 * &params.layers[1].gamma;
    let (d_u2_attn, _, g_attn2) = cross_attention_backward(&d_a2, &cache.cache2, &params.layers[1].attn);
    let d_u2 = &d_t2 + &d_u2_attn;

    let d_t1 = d_u2; // residual through u2 = t1 + c2
    let d_gamma1 = (&d_t1 * &cache.a1).sum_axis(Axis(0));
    let d_a1 = &d_t1 * &params.layers[0].gamma;
    let (_, _, g_attn1) = cross_attention_backward(&d_a1, &cache.cache1, &params.layers[0].attn);

    DecoderParams {
        d_model: params.d_model,
        n_heads: params.n_heads,
        layers: vec![
            DecoderLayer {
                attn: g_attn1,
                gamma: d_gamma1,
            },
            DecoderLayer {
                attn: g_attn2,
                gamma: d_gamma2,
            },
        ],
    }
}

/// Finite-difference check of the decoder's parameter gradients, sharing the
/// harness conventions of the cross-attention checker: seeded random inputs,
/// gates perturbed off zero, central differences with `h = 1e-5`.
pub fn decoder_grad_check(
    d_model: usize,
    n_heads: usize,
    grid: (usize, usize),
    seed: u64,
) -> Result<GradCheckReport, SegError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E6D_EC0D);
    let mut params = DecoderParams::random(d_model, n_heads, seed);
    for l in &mut params.layers {
        l.gamma.mapv_inplace(|_| (rng.gen::<f64>() - 0.5) * 0.4);
        l.attn.b_o.mapv_inplace(|_| (rng.gen::<f64>() - 0.5) * 0.1);
    }
    let (h, w) = grid;
    let f_visual = Array2::from_shape_fn((h * w, d_model), |_| rng.gen::<f64>() - 0.5);
    let e_seg = Array2::from_shape_fn(
        (CODEBOOK_SCALES * CODEBOOK_TOKENS_PER_SCALE, d_model),
        |_| rng.gen::<f64>() - 0.5,
    );
    let upstream = Array2::from_shape_fn((h, w), |_| rng.gen::<f64>() - 0.5);

    let cache = decoder_forward(&f_visual, &e_seg, &params, grid)?;
    let grads = decoder_backward(&f_visual, &cache, &params, &upstream);
    let analytic: Vec<(String, Vec<f64>)> = grads
        .param_slices()
        .into_iter()
        .map(|(n, s)| (n, s.to_vec()))
        .collect();

    let loss = |p: &DecoderParams| -> Result<f64, SegError> {
        let c = decoder_forward(&f_visual, &e_seg, p, grid)?;
        Ok((&c.probs * &upstream).sum())
    };

    let step = 1e-5;
    let mut per_param = Vec::new();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for class_idx in 0..analytic.len() {
        let (name, class_grads) = &analytic[class_idx];
        let mut worst = 0.0f64;
        for ci in 0..class_grads.len() {
            let orig = {
                let mut slices = params.param_slices_mut();
                let orig = slices[class_idx].1[ci];
                slices[class_idx].1[ci] = orig + step;
                orig
            };
            let plus = loss(&params)?;
            {
                let mut slices = params.param_slices_mut();
                slices[class_idx].1[ci] = orig - step;
            }
            let minus = loss(&params)?;
            {
                let mut slices = params.param_slices_mut();
                slices[class_idx].1[ci] = orig;
            }
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(class_grads[ci], numeric));
            checked += 1;
        }
        max_rel = max_rel.max(worst);
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        per_param,
        checked_coords: checked,
    })
}

/// Write predicted masks: `K, H, W` as little-endian u32, then row-major
/// little-endian f32 values.
pub fn write_pred_masks<W: Write>(mut w: W, pred: &Array3<f64>) -> Result<(), SegError> {
    let io = |e: std::io::Error| SegError::Io(e.to_string());
    let (k, h, wd) = pred.dim();
    for v in [k as u32, h as u32, wd as u32] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for &p in pred.iter() {
        w.write_all(&(p as f32).to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

/// Write ground-truth masks: the same header, then one byte (0/1) per cell.
pub fn write_gt_masks<W: Write>(mut w: W, gt: &Array3<f64>) -> Result<(), SegError> {
    let io = |e: std::io::Error| SegError::Io(e.to_string());
    let (k, h, wd) = gt.dim();
    for v in [k as u32, h as u32, wd as u32] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for &g in gt.iter() {
        if g != 0.0 && g != 1.0 {
            return Err(SegError::BadMask("gt not binary".into()));
        }
        w.write_all(&[g as u8]).map_err(io)?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<(usize, usize, usize), SegError> {
    let io = |e: std::io::Error| SegError::Io(e.to_string());
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    Ok((dims[0], dims[1], dims[2]))
}

pub fn read_pred_masks<R: Read>(mut r: R) -> Result<Array3<f64>, SegError> {
    let io = |e: std::io::Error| SegError::Io(e.to_string());
    let (k, h, w) = read_header(&mut r)?;
    let mut out = Array3::zeros((k, h, w));
    for p in out.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io)?;
        *p = f32::from_le_bytes(b) as f64;
    }
    Ok(out)
}

pub fn read_gt_masks<R: Read>(mut r: R) -> Result<Array3<f64>, SegError> {
    let io = |e: std::io::Error| SegError::Io(e.to_string());
    let (k, h, w) = read_header(&mut r)?;
    let mut out = Array3::zeros((k, h, w));
    for g in out.iter_mut() {
        let mut b = [0u8; 1];
        r.read_exact(&mut b).map_err(io)?;
        if b[0] > 1 {
            return Err(SegError::BadMask("gt byte not 0/1".into()));
        }
        *g = b[0] as f64;
    }
    Ok(out)
}
