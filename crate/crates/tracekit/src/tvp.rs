//! Desk-scale numerical reference of the trajectory-aware visual perception
//! block: bidirectional multi-head cross-attention with a zero-initialized
//! per-channel residual gate on the visual path, a GELU feed-forward on the
//! trajectory path, exact reverse-mode gradients, and a finite-difference
//! gradient checker.
//!
//! Everything is `f64` and single-threaded per problem so runs are bitwise
//! reproducible under a fixed seed.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tokenize::{QuantizedTrace, BINS};

const SNAPSHOT_MAGIC: &[u8; 4] = b"TVPK";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TvpConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_hidden: usize,
    pub seed: u64,
}

impl TvpConfig {
    pub fn new(d_model: usize, n_heads: usize, n_blocks: usize, seed: u64) -> Self {
        Self {
            d_model,
            n_heads,
            n_blocks,
            ffn_hidden: 4 * d_model,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TvpError> {
        if self.d_model == 0
            || self.n_heads == 0
            || self.n_blocks == 0
            || self.ffn_hidden == 0
            || self.d_model % self.n_heads != 0
        {
            return Err(TvpError::BadConfig);
        }
        Ok(())
    }
}

impl Default for TvpConfig {
    fn default() -> Self {
        Self::new(64, 4, 2, 0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TvpError {
    #[error("invalid config: d_model must be positive and divisible by n_heads")]
    BadConfig,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("forward activations missing for backward pass")]
    MissingActivations,
    #[error("snapshot is not a TVP parameter container")]
    BadSnapshot,
    #[error("io: {0}")]
    Io(String),
}

/// Projection weights of one multi-head cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
}

impl AttentionWeights {
    pub(crate) fn zeros(d: usize) -> Self {
        Self {
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
        }
    }

    pub(crate) fn random(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        let mut mat = || Array2::from_shape_fn((d, d), |_| (rng.gen::<f64>() - 0.5) * 2.0 * scale);
        let w_q = mat();
        let w_k = mat();
        let w_v = mat();
        let w_o = mat();
        Self {
            w_q,
            w_k,
            w_v,
            w_o,
            b_o: Array1::zeros(d),
        }
    }
}

/// Parameters of one block: visual-enhancement attention with its gate
/// vector, trajectory-refinement attention, and the FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn_visual: AttentionWeights,
    /// Per-channel residual gate on the visual path; zero at initialization
    /// so the block starts as the identity on visual features.
    pub gamma: Array1<f64>,
    pub attn_traj: AttentionWeights,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvpParams {
    pub config: TvpConfig,
    pub blocks: Vec<BlockParams>,
}

impl TvpParams {
    pub fn zeros(config: TvpConfig) -> Self {
        let (d, f) = (config.d_model, config.ffn_hidden);
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams {
                attn_visual: AttentionWeights::zeros(d),
                gamma: Array1::zeros(d),
                attn_traj: AttentionWeights::zeros(d),
                w1: Array2::zeros((d, f)),
                b1: Array1::zeros(f),
                w2: Array2::zeros((f, d)),
                b2: Array1::zeros(d),
            })
            .collect();
        Self { config, blocks }
    }

    /// Seeded random initialization; gamma stays zero.
    pub fn random(config: TvpConfig) -> Self {
        let (d, f) = (config.d_model, config.ffn_hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let blocks = (0..config.n_blocks)
            .map(|_| {
                let attn_visual = AttentionWeights::random(d, &mut rng);
                let attn_traj = AttentionWeights::random(d, &mut rng);
                let scale_in = 1.0 / (d as f64).sqrt();
                let scale_out = 1.0 / (f as f64).sqrt();
                BlockParams {
                    attn_visual,
                    gamma: Array1::zeros(d),
                    attn_traj,
                    w1: Array2::from_shape_fn((d, f), |_| (rng.gen::<f64>() - 0.5) * 2.0 * scale_in),
                    b1: Array1::zeros(f),
                    w2: Array2::from_shape_fn((f, d), |_| {
                        (rng.gen::<f64>() - 0.5) * 2.0 * scale_out
                    }),
                    b2: Array1::zeros(d),
                }
            })
            .collect();
        Self { config, blocks }
    }

    /// Named views of every parameter tensor, in serialization order.
    /// Names identify the parameter class (block index + role).
    pub fn param_slices(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.attn_visual.w_q"), b.attn_visual.w_q.as_slice().unwrap()));
            out.push((format!("block{i}.attn_visual.w_k"), b.attn_visual.w_k.as_slice().unwrap()));
            out.push((format!("block{i}.attn_visual.w_v"), b.attn_visual.w_v.as_slice().unwrap()));
            out.push((format!("block{i}.attn_visual.w_o"), b.attn_visual.w_o.as_slice().unwrap()));
            out.push((format!("block{i}.attn_visual.b_o"), b.attn_visual.b_o.as_slice().unwrap()));
            out.push((format!("block{i}.gamma"), b.gamma.as_slice().unwrap()));
            out.push((format!("block{i}.attn_traj.w_q"), b.attn_traj.w_q.as_slice().unwrap()));
            out.push((format!("block{i}.attn_traj.w_k"), b.attn_traj.w_k.as_slice().unwrap()));
            out.push((format!("block{i}.attn_traj.w_v"), b.attn_traj.w_v.as_slice().unwrap()));
            out.push((format!("block{i}.attn_traj.w_o"), b.attn_traj.w_o.as_slice().unwrap()));
            out.push((format!("block{i}.attn_traj.b_o"), b.attn_traj.b_o.as_slice().unwrap()));
            out.push((format!("block{i}.ffn.w1"), b.w1.as_slice().unwrap()));
            out.push((format!("block{i}.ffn.b1"), b.b1.as_slice().unwrap()));
            out.push((format!("block{i}.ffn.w2"), b.w2.as_slice().unwrap()));
            out.push((format!("block{i}.ffn.b2"), b.b2.as_slice().unwrap()));
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.attn_visual.w_q"), b.attn_visual.w_q.as_slice_mut().unwrap()));
            out.push((format!("block{i}.attn_visual.w_k"), b.attn_visual.w_k.as_slice_mut().unwrap()));
            out.push((format!("block{i}.attn_visual.w_v"), b.attn_visual.w_v.as_slice_mut().unwrap()));
            out.push((format!("block{i}.attn_visual.w_o"), b.attn_visual.w_o.as_slice_mut().unwrap()));
            out.push((format!("block{i}.attn_visual.b_o"), b.attn_visual.b_o.as_slice_mut().unwrap()));
            out.push((format!("block{i}.gamma"), b.gamma.as_slice_mut().unwrap()));
            out.push((format!("block{i}.attn_traj.w_q"), b.attn_traj.w_q.as_slice_mut().unwrap()));
            out.push((format!("block{i}.attn_traj.w_k"), b.attn_traj.w_k.as_slice_mut().unwrap()));
            out.push((format!("block{i}.attn_traj.w_v"), b.attn_traj.w_v.as_slice_mut().unwrap()));
            out.push((format!("block{i}.attn_traj.w_o"), b.attn_traj.w_o.as_slice_mut().unwrap()));
            out.push((format!("block{i}.attn_traj.b_o"), b.attn_traj.b_o.as_slice_mut().unwrap()));
            out.push((format!("block{i}.ffn.w1"), b.w1.as_slice_mut().unwrap()));
            out.push((format!("block{i}.ffn.b1"), b.b1.as_slice_mut().unwrap()));
            out.push((format!("block{i}.ffn.w2"), b.w2.as_slice_mut().unwrap()));
            out.push((format!("block{i}.ffn.b2"), b.b2.as_slice_mut().unwrap()));
        }
        out
    }

    /// Flat binary snapshot: magic, version, config, then parameters in
    /// declaration order as little-endian f64.
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), TvpError> {
        let io = |e: std::io::Error| TvpError::Io(e.to_string());
        w.write_all(SNAPSHOT_MAGIC).map_err(io)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes()).map_err(io)?;
        for v in [
            self.config.d_model as u32,
            self.config.n_heads as u32,
            self.config.n_blocks as u32,
            self.config.ffn_hidden as u32,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&self.config.seed.to_le_bytes()).map_err(io)?;
        for (_, slice) in self.param_slices() {
            for x in slice {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, TvpError> {
        let io = |e: std::io::Error| TvpError::Io(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(TvpError::BadSnapshot);
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io)?;
        if u32::from_le_bytes(u32buf) != SNAPSHOT_VERSION {
            return Err(TvpError::BadSnapshot);
        }
        let next_u32 = |r: &mut R| -> Result<usize, TvpError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(io)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let d_model = next_u32(&mut r)?;
        let n_heads = next_u32(&mut r)?;
        let n_blocks = next_u32(&mut r)?;
        let ffn_hidden = next_u32(&mut r)?;
        let mut seedbuf = [0u8; 8];
        r.read_exact(&mut seedbuf).map_err(io)?;
        let config = TvpConfig {
            d_model,
            n_heads,
            n_blocks,
            ffn_hidden,
            seed: u64::from_le_bytes(seedbuf),
        };
        config.validate()?;
        let mut params = TvpParams::zeros(config);
        for (_, slice) in params.param_slices_mut() {
            for x in slice.iter_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(io)?;
                *x = f64::from_le_bytes(b);
            }
        }
        Ok(params)
    }
}

fn check_finite(m: &Array2<f64>) -> Result<(), TvpError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TvpError::NonFiniteInput)
    }
}

/// Cached intermediates of one attention application.
#[derive(Debug, Clone)]
pub struct AttnCache {
    x_q: Array2<f64>,
    x_kv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Row-stochastic attention matrix per head, M x N each.
    pub probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

/// Multi-head scaled dot-product cross-attention with output projection.
pub fn cross_attention(
    x_q: &Array2<f64>,
    x_kv: &Array2<f64>,
    w: &AttentionWeights,
    n_heads: usize,
) -> Result<(Array2<f64>, AttnCache), TvpError> {
    let d = w.w_q.nrows();
    if x_q.ncols() != d || x_kv.ncols() != d {
        return Err(TvpError::ShapeMismatch(format!(
            "inputs have {} / {} columns, weights expect {d}",
            x_q.ncols(),
            x_kv.ncols()
        )));
    }
    if d % n_heads != 0 {
        return Err(TvpError::BadConfig);
    }
    check_finite(x_q)?;
    check_finite(x_kv)?;

    let d_head = d / n_heads;
    let q = x_q.dot(&w.w_q);
    let k = x_kv.dot(&w.w_k);
    let v = x_kv.dot(&w.w_v);
    let scale = 1.0 / (d_head as f64).sqrt();

    let mut concat = Array2::zeros((x_q.nrows(), d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * d_head..(h + 1) * d_head];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|x| x * scale);
        softmax_rows(&mut scores);
        let head_out = scores.dot(&vh);
        concat.slice_mut(cols).assign(&head_out);
        probs.push(scores);
    }
    let out = concat.dot(&w.w_o) + &w.b_o;
    Ok((
        out,
        AttnCache {
            x_q: x_q.clone(),
            x_kv: x_kv.clone(),
            q,
            k,
            v,
            probs,
            concat,
        },
    ))
}

/// Reverse-mode gradients of one attention application. Returns gradients
/// for the query-side input, the key/value-side input, and the weights.
pub(crate) fn cross_attention_backward(
    d_out: &Array2<f64>,
    cache: &AttnCache,
    w: &AttentionWeights,
) -> (Array2<f64>, Array2<f64>, AttentionWeights) {
    let d = w.w_q.nrows();
    let n_heads = cache.probs.len();
    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let d_concat = d_out.dot(&w.w_o.t());
    let d_w_o = cache.concat.t().dot(d_out);
    let d_b_o = d_out.sum_axis(Axis(0));

    let mut d_q = Array2::zeros(cache.q.raw_dim());
    let mut d_k = Array2::zeros(cache.k.raw_dim());
    let mut d_v = Array2::zeros(cache.v.raw_dim());
    for h in 0..n_heads {
        let cols = s![.., h * d_head..(h + 1) * d_head];
        let p = &cache.probs[h];
        let d_head_out = d_concat.slice(cols);
        let vh = cache.v.slice(cols);
        let d_p = d_head_out.dot(&vh.t());
        d_v.slice_mut(cols).assign(&p.t().dot(&d_head_out));
        // softmax jacobian per row
        let row_dot = (&d_p * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_scores = p * &(&d_p - &row_dot);
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        d_q.slice_mut(cols).assign(&(d_scores.dot(&kh) * scale));
        d_k.slice_mut(cols).assign(&(d_scores.t().dot(&qh) * scale));
    }

    let d_x_q = d_q.dot(&w.w_q.t());
    let d_w_q = cache.x_q.t().dot(&d_q);
    let d_w_k = cache.x_kv.t().dot(&d_k);
    let d_w_v = cache.x_kv.t().dot(&d_v);
    let d_x_kv = d_k.dot(&w.w_k.t()) + d_v.dot(&w.w_v.t());

    (
        d_x_q,
        d_x_kv,
        AttentionWeights {
            w_q: d_w_q,
            w_k: d_w_k,
            w_v: d_w_v,
            w_o: d_w_o,
            b_o: d_b_o,
        },
    )
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_prime(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Forward activations of one block, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    f_traj: Array2<f64>,
    attn_vis: AttnCache,
    attn_vis_out: Array2<f64>,
    attn_traj: AttnCache,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
}

impl BlockCache {
    /// Row-stochastic attention matrices of the visual-enhancement and
    /// trajectory-refinement attentions.
    pub fn attention_probs(&self) -> (&[Array2<f64>], &[Array2<f64>]) {
        (&self.attn_vis.probs, &self.attn_traj.probs)
    }
}

/// One block: visual enhancement `f_img + gamma .* Attn(Q=f_img, KV=f_traj)`
/// followed by trajectory refinement
/// `f_traj + Attn(Q=f_traj, KV=f_img_out) + FFN(f_traj)`, where the second
/// attention consumes the enhanced visual features and the FFN applies to the
/// block's trajectory input.
pub fn tvp_block_forward(
    f_img: &Array2<f64>,
    f_traj: &Array2<f64>,
    params: &BlockParams,
    n_heads: usize,
) -> Result<(Array2<f64>, Array2<f64>, BlockCache), TvpError> {
    let (attn_vis_out, attn_vis) = cross_attention(f_img, f_traj, &params.attn_visual, n_heads)?;
    let f_img_out = f_img + &(&attn_vis_out * &params.gamma);

    let (attn_traj_out, attn_traj) = cross_attention(f_traj, &f_img_out, &params.attn_traj, n_heads)?;
    let ffn_pre = f_traj.dot(&params.w1) + &params.b1;
    let ffn_act = ffn_pre.mapv(gelu);
    let ffn_out = ffn_act.dot(&params.w2) + &params.b2;
    let f_traj_out = f_traj + &attn_traj_out + &ffn_out;

    let cache = BlockCache {
        f_traj: f_traj.clone(),
        attn_vis,
        attn_vis_out,
        attn_traj,
        ffn_pre,
        ffn_act,
    };
    Ok((f_img_out, f_traj_out, cache))
}

fn tvp_block_backward(
    d_img_out: &Array2<f64>,
    d_traj_out: &Array2<f64>,
    cache: &BlockCache,
    params: &BlockParams,
) -> (Array2<f64>, Array2<f64>, BlockParams) {
    // trajectory refinement: residual + attention + FFN
    let mut d_traj_in = d_traj_out.clone();

    let d_w2 = cache.ffn_act.t().dot(d_traj_out);
    let d_b2 = d_traj_out.sum_axis(Axis(0));
    let d_act = d_traj_out.dot(&params.w2.t());
    let d_pre = &d_act * &cache.ffn_pre.mapv(gelu_prime);
    let d_w1 = cache.f_traj.t().dot(&d_pre);
    let d_b1 = d_pre.sum_axis(Axis(0));
    d_traj_in += &d_pre.dot(&params.w1.t());

    let (d_q_traj, d_kv_traj, d_attn_traj) =
        cross_attention_backward(d_traj_out, &cache.attn_traj, &params.attn_traj);
    d_traj_in += &d_q_traj;
    let d_img_out_total = d_img_out + &d_kv_traj;

    // visual enhancement: residual + gated attention
    let d_gamma = (&d_img_out_total * &cache.attn_vis_out).sum_axis(Axis(0));
    let d_attn_vis_out = &d_img_out_total * &params.gamma;
    let mut d_img_in = d_img_out_total.clone();
    let (d_q_vis, d_kv_vis, d_attn_visual) =
        cross_attention_backward(&d_attn_vis_out, &cache.attn_vis, &params.attn_visual);
    d_img_in += &d_q_vis;
    d_traj_in += &d_kv_vis;

    (
        d_img_in,
        d_traj_in,
        BlockParams {
            attn_visual: d_attn_visual,
            gamma: d_gamma,
            attn_traj: d_attn_traj,
            w1: d_w1,
            b1: d_b1,
            w2: d_w2,
            b2: d_b2,
        },
    )
}

/// Run all blocks in sequence.
pub fn tvp_forward(
    f_img: &Array2<f64>,
    f_traj: &Array2<f64>,
    params: &TvpParams,
) -> Result<(Array2<f64>, Array2<f64>, Vec<BlockCache>), TvpError> {
    params.config.validate()?;
    let mut img = f_img.clone();
    let mut traj = f_traj.clone();
    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (next_img, next_traj, cache) =
            tvp_block_forward(&img, &traj, block, params.config.n_heads)?;
        img = next_img;
        traj = next_traj;
        caches.push(cache);
    }
    Ok((img, traj, caches))
}

/// Gradients of the full stack. `blocks` mirrors [`TvpParams::blocks`].
#[derive(Debug, Clone)]
pub struct TvpGrads {
    pub params: TvpParams,
    pub d_f_img: Array2<f64>,
    pub d_f_traj: Array2<f64>,
}

/// Exact reverse-mode gradients given cached forward activations and the
/// upstream gradients of both outputs.
pub fn tvp_backward(
    caches: &[BlockCache],
    d_img_out: &Array2<f64>,
    d_traj_out: &Array2<f64>,
    params: &TvpParams,
) -> Result<TvpGrads, TvpError> {
    if caches.len() != params.blocks.len() {
        return Err(TvpError::MissingActivations);
    }
    let mut d_img = d_img_out.clone();
    let mut d_traj = d_traj_out.clone();
    let mut block_grads = vec![None; params.blocks.len()];
    for i in (0..params.blocks.len()).rev() {
        let (prev_img, prev_traj, grads) =
            tvp_block_backward(&d_img, &d_traj, &caches[i], &params.blocks[i]);
        d_img = prev_img;
        d_traj = prev_traj;
        block_grads[i] = Some(grads);
    }
    Ok(TvpGrads {
        params: TvpParams {
            config: params.config,
            blocks: block_grads.into_iter().map(Option::unwrap).collect(),
        },
        d_f_img: d_img,
        d_f_traj: d_traj,
    })
}

/// Linear lift of quantized bin centers into the model width: each point's
/// `(u, v)` unit coordinates map through a learned 2 x d matrix plus bias.
#[derive(Debug, Clone)]
pub struct TrajectoryEmbedding {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl TrajectoryEmbedding {
    pub fn random(d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w: Array2::from_shape_fn((2, d_model), |_| rng.gen::<f64>() - 0.5),
            b: Array1::zeros(d_model),
        }
    }

    pub fn embed(&self, qt: &QuantizedTrace) -> Array2<f64> {
        let unit = Array2::from_shape_fn((qt.coords.len(), 2), |(i, j)| {
            let (bx, by) = qt.coords[i];
            let bin = if j == 0 { bx } else { by };
            (bin as f64 + 0.5) / BINS as f64
        });
        unit.dot(&self.w) + &self.b
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Worst relative error per parameter class.
    pub per_param: Vec<(String, f64)>,
    pub checked_coords: usize,
}

// Floor of 1e-6 on the denominator: central differences at h = 1e-5 carry
// ~1e-11 of roundoff noise, so gradients below ~1e-6 cannot be resolved
// relatively and would report spurious mismatches.
pub(crate) fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compare analytic gradients against central finite differences.
///
/// Builds seeded random parameters (gamma perturbed off zero so its gradient
/// path is exercised), random inputs, and a random upstream gradient; the
/// scalar loss is the upstream-weighted sum of both outputs. For every
/// parameter class up to `samples_per_class` coordinates are probed (all of
/// them when `None`), with `h = 1e-5`.
pub fn grad_check(
    config: TvpConfig,
    seed: u64,
    samples_per_class: Option<usize>,
) -> Result<GradCheckReport, TvpError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD5A7_1E57);
    let mut params = TvpParams::random(TvpConfig { seed, ..config });
    for block in &mut params.blocks {
        block.gamma.mapv_inplace(|_| (rng.gen::<f64>() - 0.5) * 0.2);
        block.b1.mapv_inplace(|_| (rng.gen::<f64>() - 0.5) * 0.1);
        block.b2.mapv_inplace(|_| (rng.gen::<f64>() - 0.5) * 0.1);
        block.attn_visual.b_o.mapv_inplace(|_| (rng.gen::<f64>() - 0.5) * 0.1);
        block.attn_traj.b_o.mapv_inplace(|_| (rng.gen::<f64>() - 0.5) * 0.1);
    }

    let n_v = 5;
    let n_t = 3;
    let d = config.d_model;
    let f_img = Array2::from_shape_fn((n_v, d), |_| rng.gen::<f64>() - 0.5);
    let f_traj = Array2::from_shape_fn((n_t, d), |_| rng.gen::<f64>() - 0.5);
    let g_img = Array2::from_shape_fn((n_v, d), |_| rng.gen::<f64>() - 0.5);
    let g_traj = Array2::from_shape_fn((n_t, d), |_| rng.gen::<f64>() - 0.5);

    let loss = |p: &TvpParams| -> Result<f64, TvpError> {
        let (out_img, out_traj, _) = tvp_forward(&f_img, &f_traj, p)?;
        Ok((&out_img * &g_img).sum() + (&out_traj * &g_traj).sum())
    };

    let (_, _, caches) = tvp_forward(&f_img, &f_traj, &params)?;
    let grads = tvp_backward(&caches, &g_img, &g_traj, &params)?;

    let analytic: Vec<(String, Vec<f64>)> = grads
        .params
        .param_slices()
        .into_iter()
        .map(|(name, s)| (name, s.to_vec()))
        .collect();

    let h = 1e-5;
    let mut per_param = Vec::new();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let n_classes = analytic.len();
    for class_idx in 0..n_classes {
        let (name, class_grads) = &analytic[class_idx];
        let len = class_grads.len();
        let coords: Vec<usize> = match samples_per_class {
            Some(m) if m < len => {
                // deterministic stratified sample across the tensor
                (0..m).map(|j| j * len / m).collect()
            }
            _ => (0..len).collect(),
        };
        let mut worst = 0.0f64;
        for &ci in &coords {
            let orig = {
                let mut slices = params.param_slices_mut();
                let slice = &mut slices[class_idx].1;
                let orig = slice[ci];
                slice[ci] = orig + h;
                orig
            };
            let plus = loss(&params)?;
            {
                let mut slices = params.param_slices_mut();
                slices[class_idx].1[ci] = orig - h;
            }
            let minus = loss(&params)?;
            {
                let mut slices = params.param_slices_mut();
                slices[class_idx].1[ci] = orig;
            }
            let numeric = (plus - minus) / (2.0 * h);
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

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> TvpConfig {
        TvpConfig::new(8, 2, 1, 0)
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen::<f64>() - 0.5)
    }

    #[test]
    fn singleton_key_gets_weight_one() {
        let config = small_config();
        let params = TvpParams::random(config);
        let w = &params.blocks[0].attn_visual;
        let x_q = rand_mat(3, 8, 1);
        let x_kv = rand_mat(1, 8, 2);
        let (_, cache) = cross_attention(&x_q, &x_kv, w, config.n_heads).unwrap();
        for p in &cache.probs {
            for &x in p.iter() {
                assert!((x - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_kv_gives_zero_output() {
        let config = small_config();
        let params = TvpParams::random(config);
        let w = &params.blocks[0].attn_visual;
        assert!(w.b_o.iter().all(|&b| b == 0.0));
        let x_q = rand_mat(3, 8, 1);
        let x_kv = Array2::zeros((4, 8));
        let (out, _) = cross_attention(&x_q, &x_kv, w, config.n_heads).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_matches_dense_loop_oracle() {
        // straight-line non-vectorized recomputation
        let config = TvpConfig::new(8, 2, 1, 3);
        let params = TvpParams::random(config);
        let w = &params.blocks[0].attn_visual;
        let x_q = rand_mat(3, 8, 10);
        let x_kv = rand_mat(5, 8, 11);
        let (out, _) = cross_attention(&x_q, &x_kv, w, 2).unwrap();

        let d = 8;
        let d_head = d / 2;
        let matmul = |a: &Array2<f64>, b: &Array2<f64>| -> Vec<Vec<f64>> {
            let mut out = vec![vec![0.0; b.ncols()]; a.nrows()];
            for i in 0..a.nrows() {
                for j in 0..b.ncols() {
                    for k in 0..a.ncols() {
                        out[i][j] += a[[i, k]] * b[[k, j]];
                    }
                }
            }
            out
        };
        let q = matmul(&x_q, &w.w_q);
        let k = matmul(&x_kv, &w.w_k);
        let v = matmul(&x_kv, &w.w_v);
        let mut concat = vec![vec![0.0; d]; 3];
        for h in 0..2 {
            for i in 0..3 {
                let mut scores = vec![0.0; 5];
                for n in 0..5 {
                    for c in 0..d_head {
                        scores[n] += q[i][h * d_head + c] * k[n][h * d_head + c];
                    }
                    scores[n] /= (d_head as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for c in 0..d_head {
                    let mut acc = 0.0;
                    for n in 0..5 {
                        acc += exps[n] / sum * v[n][h * d_head + c];
                    }
                    concat[i][h * d_head + c] = acc;
                }
            }
        }
        for i in 0..3 {
            for j in 0..d {
                let mut expect = w.b_o[j];
                for c in 0..d {
                    expect += concat[i][c] * w.w_o[[c, j]];
                }
                let got = out[[i, j]];
                let rel = (got - expect).abs() / expect.abs().max(1e-12);
                assert!(rel < 1e-10, "({i},{j}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn gamma_zero_is_bitwise_identity_on_visual() {
        let config = TvpConfig::new(16, 4, 2, 7);
        let params = TvpParams::random(config); // gamma stays zero at init
        let f_img = rand_mat(6, 16, 20);
        let f_traj = rand_mat(4, 16, 21);
        let (out_img, _, _) = tvp_forward(&f_img, &f_traj, &params).unwrap();
        assert_eq!(out_img, f_img);
    }

    #[test]
    fn zero_value_and_ffn_paths_leave_trajectory_unchanged() {
        let config = small_config();
        let mut params = TvpParams::random(config);
        for b in &mut params.blocks {
            b.attn_traj.w_v.fill(0.0);
            b.attn_traj.w_o.fill(0.0);
            b.attn_traj.b_o.fill(0.0);
            b.w1.fill(0.0);
            b.w2.fill(0.0);
            b.b1.fill(0.0);
            b.b2.fill(0.0);
        }
        let f_img = rand_mat(3, 8, 1);
        let f_traj = rand_mat(4, 8, 2);
        let (_, out_traj, _) = tvp_forward(&f_img, &f_traj, &params).unwrap();
        assert_eq!(out_traj, f_traj);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let config = TvpConfig::new(16, 4, 2, 9);
        let mut params = TvpParams::random(config);
        for b in &mut params.blocks {
            b.gamma.fill(0.3);
        }
        let f_img = rand_mat(5, 16, 30);
        let f_traj = rand_mat(7, 16, 31);
        let (_, _, caches) = tvp_forward(&f_img, &f_traj, &params).unwrap();
        for cache in &caches {
            let (vis, traj) = cache.attention_probs();
            for p in vis.iter().chain(traj.iter()) {
                for row in p.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn permutation_of_trajectory_rows_leaves_visual_output_unchanged() {
        let config = TvpConfig::new(8, 2, 1, 5);
        let mut params = TvpParams::random(config);
        params.blocks[0].gamma.fill(0.5);
        let f_img = rand_mat(4, 8, 40);
        let f_traj = rand_mat(5, 8, 41);
        let permuted = {
            let order = [3usize, 0, 4, 1, 2];
            let mut m = Array2::zeros(f_traj.raw_dim());
            for (dst, &src) in order.iter().enumerate() {
                m.row_mut(dst).assign(&f_traj.row(src));
            }
            m
        };
        let (out_a, _, _) = tvp_forward(&f_img, &f_traj, &params).unwrap();
        let (out_b, _, _) = tvp_forward(&f_img, &permuted, &params).unwrap();
        let max_diff = (&out_a - &out_b)
            .iter()
            .fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let config = TvpConfig::new(16, 4, 2, 11);
        let f_img = rand_mat(4, 16, 50);
        let f_traj = rand_mat(3, 16, 51);
        let run = || {
            let params = TvpParams::random(config);
            let (a, b, _) = tvp_forward(&f_img, &f_traj, &params).unwrap();
            (a, b)
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn zero_upstream_gives_zero_gamma_gradient() {
        let config = small_config();
        let params = TvpParams::random(config);
        let f_img = rand_mat(3, 8, 60);
        let f_traj = rand_mat(2, 8, 61);
        let (_, _, caches) = tvp_forward(&f_img, &f_traj, &params).unwrap();
        let zeros_img = Array2::zeros((3, 8));
        let zeros_traj = Array2::zeros((2, 8));
        let grads = tvp_backward(&caches, &zeros_img, &zeros_traj, &params).unwrap();
        assert!(grads.params.blocks[0].gamma.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gamma_gradient_nonzero_even_at_zero_gamma() {
        // d/dgamma of gamma .* A is A, generically nonzero
        let config = small_config();
        let params = TvpParams::random(config);
        let f_img = rand_mat(3, 8, 62);
        let f_traj = rand_mat(2, 8, 63);
        let (_, _, caches) = tvp_forward(&f_img, &f_traj, &params).unwrap();
        let g_img = Array2::ones((3, 8));
        let g_traj = Array2::zeros((2, 8));
        let grads = tvp_backward(&caches, &g_img, &g_traj, &params).unwrap();
        assert!(grads.params.blocks[0].gamma.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn mismatched_cache_count_is_missing_activations() {
        let config = small_config();
        let params = TvpParams::random(config);
        let g = Array2::zeros((1, 8));
        assert!(matches!(
            tvp_backward(&[], &g, &g, &params),
            Err(TvpError::MissingActivations)
        ));
    }

    #[test]
    fn small_grad_check_passes() {
        let report = grad_check(TvpConfig::new(8, 1, 1, 0), 0, None).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max_rel_err = {}",
            report.max_rel_err
        );
    }

    #[test]
    fn snapshot_roundtrip() {
        let params = TvpParams::random(TvpConfig::new(8, 2, 2, 42));
        let mut buf = Vec::new();
        params.save(&mut buf).unwrap();
        let loaded = TvpParams::load(buf.as_slice()).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            TvpParams::load(&b"NOPE"[..]),
            Err(TvpError::BadSnapshot) | Err(TvpError::Io(_))
        ));
    }

    #[test]
    fn shape_mismatch_reported() {
        let config = small_config();
        let params = TvpParams::random(config);
        let bad = rand_mat(3, 7, 1);
        let good = rand_mat(2, 8, 2);
        assert!(matches!(
            cross_attention(&bad, &good, &params.blocks[0].attn_visual, 2),
            Err(TvpError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn trajectory_embedding_shape() {
        let emb = TrajectoryEmbedding::random(8, 0);
        let qt = QuantizedTrace {
            coords: vec![(0, 0), (500, 250), (999, 999)],
        };
        let out = emb.embed(&qt);
        assert_eq!(out.dim(), (3, 8));
    }
}
