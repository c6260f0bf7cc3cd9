//! The denoiser network: a patch-token transformer that predicts the noise
//! added to a video.
//!
//! Per block pair: spatial cross-attention (each frame's patch tokens attend
//! to that frame's caption key/value bank; this is where time-aligned
//! conditioning differs from caption repetition), then temporal
//! self-attention (each spatial position attends across all frames, the
//! visual-consistency channel that deliberately crosses segment boundaries),
//! then a feed-forward layer. A sinusoidal timestep embedding passed through
//! a 2-layer MLP is added to every patch token. The output head is zero
//! initialized so the initial noise prediction is exactly zero.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TalcError};
use crate::rng::Rng;
use crate::tensor::{NoGradGuard, Tensor};
use crate::textenc::FrameConditioning;
use crate::video::VideoTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Maximum frames supported (sizes the temporal positional table).
    pub max_frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Model width d; also the conditioning width.
    pub model_dim: usize,
    pub heads: usize,
    /// Number of (cross-attention, temporal-attention, feed-forward) block
    /// pairs.
    pub blocks: usize,
    /// Side length of the square spatial patches tokens are cut into.
    pub patch: usize,
    /// Fixed caption length s the text encoder pads/truncates to.
    pub text_tokens: usize,
    /// Learned temporal positional embeddings (disable for the frame
    /// permutation equivariance check).
    pub temporal_pos_enabled: bool,
    /// Temporal attention blocks (disable to ablate cross-frame mixing).
    pub temporal_enabled: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            max_frames: 64,
            channels: 3,
            height: 16,
            width: 16,
            model_dim: 32,
            heads: 4,
            blocks: 2,
            // Keep patch values (C*p*p) below model_dim: the patch projection
            // must not be a lossy bottleneck for noise prediction.
            patch: 2,
            text_tokens: 16,
            temporal_pos_enabled: true,
            temporal_enabled: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(TalcError::Config(format!(
                "height/width {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.model_dim % self.heads != 0 {
            return Err(TalcError::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.max_frames == 0 || self.blocks == 0 || self.text_tokens == 0 {
            return Err(TalcError::Config(
                "max_frames, blocks and text_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spatial positions (patch tokens) per frame.
    pub fn positions(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Values per patch token.
    pub fn patch_values(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub cross_norm_g: Tensor,
    pub cross_norm_b: Tensor,
    pub cross: AttnParams,
    pub temp_norm_g: Tensor,
    pub temp_norm_b: Tensor,
    pub temporal: AttnParams,
    pub ffn_norm_g: Tensor,
    pub ffn_norm_b: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

/// All learnable tensors of the denoiser (text-encoder tables included; at
/// this scale the caption embeddings are trained with the rest of the model).
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub text_token_table: Tensor,
    pub text_pos_table: Tensor,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub time_w1: Tensor,
    pub time_b1: Tensor,
    pub time_w2: Tensor,
    pub time_b2: Tensor,
    pub temporal_pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub out_norm_g: Tensor,
    pub out_norm_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

fn randn_param(shape: Vec<usize>, scale: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = rng.fill_normal(n).into_iter().map(|v| v * scale).collect();
    Tensor::param(shape, data).unwrap()
}

fn zeros_param(shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![0.0; n]).unwrap()
}

fn ones_param(shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![1.0; n]).unwrap()
}

fn init_attn(dim: usize, scale: f64, rng: &mut Rng) -> AttnParams {
    AttnParams {
        wq: randn_param(vec![dim, dim], scale, rng),
        bq: zeros_param(vec![dim]),
        wk: randn_param(vec![dim, dim], scale, rng),
        bk: zeros_param(vec![dim]),
        wv: randn_param(vec![dim, dim], scale, rng),
        bv: zeros_param(vec![dim]),
        wo: randn_param(vec![dim, dim], scale, rng),
        bo: zeros_param(vec![dim]),
    }
}

impl DenoiserParams {
    /// Initialize parameters. With `zero_head` the output projection starts
    /// at zero so the initial prediction is exactly zero (loss starts at the
    /// variance of the injected noise).
    pub fn init(config: &DenoiserConfig, vocab_size: usize, rng: &mut Rng, zero_head: bool) -> Self {
        let d = config.model_dim;
        let scale = 0.08;
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                cross_norm_g: ones_param(vec![d]),
                cross_norm_b: zeros_param(vec![d]),
                cross: init_attn(d, scale, rng),
                temp_norm_g: ones_param(vec![d]),
                temp_norm_b: zeros_param(vec![d]),
                temporal: init_attn(d, scale, rng),
                ffn_norm_g: ones_param(vec![d]),
                ffn_norm_b: zeros_param(vec![d]),
                ffn_w1: randn_param(vec![d, 4 * d], scale, rng),
                ffn_b1: zeros_param(vec![4 * d]),
                ffn_w2: randn_param(vec![4 * d, d], scale, rng),
                ffn_b2: zeros_param(vec![d]),
            })
            .collect();
        let out_w = if zero_head {
            zeros_param(vec![d, config.patch_values()])
        } else {
            randn_param(vec![d, config.patch_values()], scale, rng)
        };
        DenoiserParams {
            text_token_table: randn_param(vec![vocab_size, d], 0.1, rng),
            text_pos_table: randn_param(vec![config.text_tokens, d], 0.1, rng),
            patch_w: randn_param(vec![config.patch_values(), d], scale, rng),
            patch_b: zeros_param(vec![d]),
            time_w1: randn_param(vec![d, d], scale, rng),
            time_b1: zeros_param(vec![d]),
            time_w2: randn_param(vec![d, d], scale, rng),
            time_b2: zeros_param(vec![d]),
            temporal_pos: randn_param(vec![config.max_frames, d], 0.05, rng),
            blocks,
            out_norm_g: ones_param(vec![d]),
            out_norm_b: zeros_param(vec![d]),
            out_w,
            out_b: zeros_param(vec![config.patch_values()]),
        }
    }

    /// Visit every parameter with a stable name (checkpoint and optimizer
    /// order).
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("text.token_table", &self.text_token_table);
        f("text.pos_table", &self.text_pos_table);
        f("patch.w", &self.patch_w);
        f("patch.b", &self.patch_b);
        f("time.w1", &self.time_w1);
        f("time.b1", &self.time_b1);
        f("time.w2", &self.time_w2);
        f("time.b2", &self.time_b2);
        f("temporal_pos", &self.temporal_pos);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |name: &str| format!("block{i}.{name}");
            f(&p("cross_norm.g"), &b.cross_norm_g);
            f(&p("cross_norm.b"), &b.cross_norm_b);
            for (n, t) in attn_fields(&b.cross) {
                f(&p(&format!("cross.{n}")), t);
            }
            f(&p("temp_norm.g"), &b.temp_norm_g);
            f(&p("temp_norm.b"), &b.temp_norm_b);
            for (n, t) in attn_fields(&b.temporal) {
                f(&p(&format!("temporal.{n}")), t);
            }
            f(&p("ffn_norm.g"), &b.ffn_norm_g);
            f(&p("ffn_norm.b"), &b.ffn_norm_b);
            f(&p("ffn.w1"), &b.ffn_w1);
            f(&p("ffn.b1"), &b.ffn_b1);
            f(&p("ffn.w2"), &b.ffn_w2);
            f(&p("ffn.b2"), &b.ffn_b2);
        }
        f("out_norm.g", &self.out_norm_g);
        f("out_norm.b", &self.out_norm_b);
        f("out.w", &self.out_w);
        f("out.b", &self.out_b);
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_param(&mut |_, t| {
            if t.data().iter().any(|v| !v.is_finite()) {
                ok = false;
            }
        });
        ok
    }

    pub fn num_values(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.numel());
        n
    }
}

fn attn_fields(a: &AttnParams) -> [(&'static str, &Tensor); 8] {
    [
        ("wq", &a.wq),
        ("bq", &a.bq),
        ("wk", &a.wk),
        ("bk", &a.bk),
        ("wv", &a.wv),
        ("bv", &a.bv),
        ("wo", &a.wo),
        ("bo", &a.bo),
    ]
}

// ── patch layout ────────────────────────────────────────────────────────

/// Cut a video into patch tokens: row `l*P + pr*(W/p) + pc` holds patch
/// (pr, pc) of frame l, channel-major within the patch.
pub fn patchify(video: &VideoTensor, config: &DenoiserConfig) -> Result<Vec<f64>> {
    if video.channels != config.channels
        || video.height != config.height
        || video.width != config.width
    {
        return Err(TalcError::Shape(format!(
            "video {}x{}x{} does not match config {}x{}x{}",
            video.channels,
            video.height,
            video.width,
            config.channels,
            config.height,
            config.width
        )));
    }
    let p = config.patch;
    let wp = config.width / p;
    let hp = config.height / p;
    let mut out = Vec::with_capacity(video.frames * config.positions() * config.patch_values());
    for l in 0..video.frames {
        for pr in 0..hp {
            for pc in 0..wp {
                for c in 0..config.channels {
                    for py in 0..p {
                        for px in 0..p {
                            out.push(video.get(l, c, pr * p + py, pc * p + px));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &[f64], frames: usize, config: &DenoiserConfig) -> Result<VideoTensor> {
    let expected = frames * config.positions() * config.patch_values();
    if tokens.len() != expected {
        return Err(TalcError::Shape(format!(
            "unpatchify: {} values, expected {}",
            tokens.len(),
            expected
        )));
    }
    let p = config.patch;
    let wp = config.width / p;
    let hp = config.height / p;
    let mut video = VideoTensor::zeros(frames, config.channels, config.height, config.width);
    let mut i = 0;
    for l in 0..frames {
        for pr in 0..hp {
            for pc in 0..wp {
                for c in 0..config.channels {
                    for py in 0..p {
                        for px in 0..p {
                            video.set(l, c, pr * p + py, pc * p + px, tokens[i]);
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(video)
}

// ── attention ───────────────────────────────────────────────────────────

const NORM_EPS: f64 = 1e-5;

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add_row(b)
}

/// Multi-head attention. Queries come from `q_in`, keys/values from `kv_in`;
/// `mask` marks attendable key positions. Returns the output projection
/// (no residual) and, if `probe` is set, the per-head attention matrices.
fn multihead_attention(
    q_in: &Tensor,
    kv_in: &Tensor,
    mask: Option<&[bool]>,
    params: &AttnParams,
    heads: usize,
    probe: Option<&mut Vec<Vec<f64>>>,
) -> Result<Tensor> {
    let d = q_in.shape()[1];
    let dh = d / heads;
    let q = linear(q_in, &params.wq, &params.bq)?;
    let k = linear(kv_in, &params.wk, &params.bk)?;
    let v = linear(kv_in, &params.wv, &params.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    let mut probes = Vec::new();
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, (h + 1) * dh)?;
        let kh = k.slice_cols(h * dh, (h + 1) * dh)?;
        let vh = v.slice_cols(h * dh, (h + 1) * dh)?;
        let scores = qh.matmul(&kh.transpose2d()?)?.scale(scale);
        let probs = scores.softmax_masked(mask)?;
        if probe.is_some() {
            probes.push(probs.to_vec());
        }
        head_outs.push(probs.matmul(&vh)?);
    }
    if let Some(out) = probe {
        *out = probes;
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    let merged = Tensor::concat_cols(&refs)?;
    linear(&merged, &params.wo, &params.bo)
}

/// Spatial cross-attention over caption tokens, applied independently per
/// frame: queries are the frame's patch tokens, keys/values the caption
/// embedding that frame references. Pre-norm, residual added.
pub fn cross_attention_block(
    z: &Tensor,
    cond: &FrameConditioning,
    block: &BlockParams,
    heads: usize,
    frames: usize,
    positions: usize,
) -> Result<Tensor> {
    if cond.frames() != frames {
        return Err(TalcError::Shape(format!(
            "conditioning has {} frames, video has {frames}",
            cond.frames()
        )));
    }
    if z.shape()[0] != frames * positions {
        return Err(TalcError::Shape(format!(
            "cross attention: {} rows != {frames} x {positions}",
            z.shape()[0]
        )));
    }
    let x = z.layer_norm(&block.cross_norm_g, &block.cross_norm_b, NORM_EPS)?;
    let mut outs = Vec::with_capacity(frames);
    for i in 0..frames {
        let xi = x.slice_rows(i * positions, (i + 1) * positions)?;
        let emb = &cond.per_frame[i];
        let att = multihead_attention(&xi, &emb.tokens, Some(&emb.mask), &block.cross, heads, None)?;
        outs.push(att);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    z.add(&Tensor::concat_rows(&refs)?)
}

/// Temporal self-attention: for each spatial position independently, the L
/// frames attend to each other over the full span (crossing time-aligned
/// segment boundaries by design). Pre-norm, residual added.
pub fn temporal_attention_block(
    z: &Tensor,
    block: &BlockParams,
    temporal_pos: Option<&Tensor>,
    heads: usize,
    frames: usize,
    positions: usize,
) -> Result<Tensor> {
    if z.shape()[0] != frames * positions {
        return Err(TalcError::Shape(format!(
            "temporal attention: {} rows != {frames} x {positions}",
            z.shape()[0]
        )));
    }
    let x = z.layer_norm(&block.temp_norm_g, &block.temp_norm_b, NORM_EPS)?;
    let mut outs = Vec::with_capacity(positions);
    for p in 0..positions {
        let idx: Vec<usize> = (0..frames).map(|i| i * positions + p).collect();
        let mut rows = x.gather_rows(&idx)?;
        if let Some(pos) = temporal_pos {
            rows = rows.add(&pos.slice_rows(0, frames)?)?;
        }
        let att = multihead_attention(&rows, &rows, None, &block.temporal, heads, None)?;
        outs.push(att);
    }
    // outs is position-major; reorder back to frame-major rows.
    let refs: Vec<&Tensor> = outs.iter().collect();
    let stacked = Tensor::concat_rows(&refs)?;
    let mut perm = Vec::with_capacity(frames * positions);
    for i in 0..frames {
        for p in 0..positions {
            perm.push(p * frames + i);
        }
    }
    z.add(&stacked.gather_rows(&perm)?)
}

fn ffn_block(z: &Tensor, block: &BlockParams) -> Result<Tensor> {
    let x = z.layer_norm(&block.ffn_norm_g, &block.ffn_norm_b, NORM_EPS)?;
    let h = linear(&x, &block.ffn_w1, &block.ffn_b1)?.gelu();
    z.add(&linear(&h, &block.ffn_w2, &block.ffn_b2)?)
}

/// Sinusoidal embedding of the (1-based) timestep.
fn timestep_sinusoid(tau: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
        let angle = tau as f64 * freq;
        data[i] = angle.sin();
        data[half + i] = angle.cos();
    }
    if dim % 2 == 1 {
        data[dim - 1] = (tau as f64 * PI / 10_000.0).sin();
    }
    Tensor::from_vec(vec![1, dim], data).unwrap()
}

/// Full forward pass in patch-token space; returns the `[L*P x Cpp]` noise
/// prediction with the computation graph attached (training path).
pub fn forward_graph(
    tau: usize,
    z_tau: &VideoTensor,
    cond: &FrameConditioning,
    params: &DenoiserParams,
    config: &DenoiserConfig,
) -> Result<Tensor> {
    config.validate()?;
    let frames = z_tau.frames;
    if frames == 0 || frames > config.max_frames {
        return Err(TalcError::Shape(format!(
            "video has {frames} frames; config supports 1..={}",
            config.max_frames
        )));
    }
    if cond.frames() != frames {
        return Err(TalcError::Shape(format!(
            "conditioning has {} frames, video has {frames}",
            cond.frames()
        )));
    }
    let positions = config.positions();
    let tokens = Tensor::from_vec(
        vec![frames * positions, config.patch_values()],
        patchify(z_tau, config)?,
    )?;
    let mut h = linear(&tokens, &params.patch_w, &params.patch_b)?;

    let ts = timestep_sinusoid(tau, config.model_dim);
    let t1 = linear(&ts, &params.time_w1, &params.time_b1)?.gelu();
    let temb = linear(&t1, &params.time_w2, &params.time_b2)?;
    h = h.add_row(&temb)?;

    for block in &params.blocks {
        h = cross_attention_block(&h, cond, block, config.heads, frames, positions)?;
        if config.temporal_enabled {
            let pos = config.temporal_pos_enabled.then_some(&params.temporal_pos);
            h = temporal_attention_block(&h, block, pos, config.heads, frames, positions)?;
        }
        h = ffn_block(&h, block)?;
    }

    let out = h.layer_norm(&params.out_norm_g, &params.out_norm_b, NORM_EPS)?;
    linear(&out, &params.out_w, &params.out_b)
}

/// Inference forward pass: same computation as [`forward_graph`] without
/// building the gradient graph, unpatchified back to a video-shaped noise
/// prediction.
pub fn forward(
    tau: usize,
    z_tau: &VideoTensor,
    cond: &FrameConditioning,
    params: &DenoiserParams,
    config: &DenoiserConfig,
) -> Result<VideoTensor> {
    let _guard = NoGradGuard::new();
    let out = forward_graph(tau, z_tau, cond, params, config)?;
    let result = unpatchify(&out.data(), z_tau.frames, config);
    result
}

/// Attention probabilities of the first cross-attention block for frame `i`
/// (inspection hook: one `[P x s]` row-stochastic matrix per head).
pub fn cross_attention_probe(
    tau: usize,
    z_tau: &VideoTensor,
    cond: &FrameConditioning,
    params: &DenoiserParams,
    config: &DenoiserConfig,
    frame: usize,
) -> Result<Vec<Vec<f64>>> {
    let _guard = NoGradGuard::new();
    let positions = config.positions();
    let tokens = Tensor::from_vec(
        vec![z_tau.frames * positions, config.patch_values()],
        patchify(z_tau, config)?,
    )?;
    let mut h = linear(&tokens, &params.patch_w, &params.patch_b)?;
    let ts = timestep_sinusoid(tau, config.model_dim);
    let t1 = linear(&ts, &params.time_w1, &params.time_b1)?.gelu();
    let temb = linear(&t1, &params.time_w2, &params.time_b2)?;
    h = h.add_row(&temb)?;
    let block = &params.blocks[0];
    let x = h.layer_norm(&block.cross_norm_g, &block.cross_norm_b, NORM_EPS)?;
    let xi = x.slice_rows(frame * positions, (frame + 1) * positions)?;
    let emb = &cond.per_frame[frame];
    let mut probes = Vec::new();
    multihead_attention(
        &xi,
        &emb.tokens,
        Some(&emb.mask),
        &block.cross,
        config.heads,
        Some(&mut probes),
    )?;
    Ok(probes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{build_plan, ConditioningMode, MultiSceneScript, Scenario};
    use crate::rng::Rng;
    use crate::textenc::{encode_caption, repeat_conditioning, TextEncParams, Vocabulary};
    use std::rc::Rc;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            max_frames: 16,
            channels: 3,
            height: 8,
            width: 8,
            model_dim: 16,
            heads: 2,
            blocks: 2,
            patch: 4,
            text_tokens: 8,
            temporal_pos_enabled: true,
            temporal_enabled: true,
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build([
            "a red square moves right",
            "a blue circle moves up",
            "a green triangle moves down",
            "a yellow square stays still",
        ])
    }

    fn textenc_params(config: &DenoiserConfig, params: &DenoiserParams) -> TextEncParams {
        TextEncParams {
            token_table: params.text_token_table.clone(),
            pos_table: params.text_pos_table.clone(),
            max_tokens: config.text_tokens,
            dim: config.model_dim,
        }
    }

    fn randn_video(frames: usize, config: &DenoiserConfig, rng: &mut Rng) -> VideoTensor {
        let mut v = VideoTensor::zeros(frames, config.channels, config.height, config.width);
        v.data = rng.fill_normal(v.numel());
        v
    }

    #[test]
    fn patchify_round_trips() {
        let config = tiny_config();
        let mut rng = Rng::new(1);
        let v = randn_video(3, &config, &mut rng);
        let tokens = patchify(&v, &config).unwrap();
        let back = unpatchify(&tokens, 3, &config).unwrap();
        assert_eq!(v.data, back.data);
    }

    #[test]
    fn forward_output_shape_matches_input() {
        let config = tiny_config();
        let mut rng = Rng::new(2);
        let params = DenoiserParams::init(&config, vocab().size(), &mut rng, false);
        let te = textenc_params(&config, &params);
        let v = randn_video(4, &config, &mut rng);
        let emb = Rc::new(encode_caption("a red square moves right", false, &vocab(), &te).unwrap());
        let cond = repeat_conditioning(emb, 4).unwrap();
        let out = forward(17, &v, &cond, &params, &config).unwrap();
        assert_eq!(
            (out.frames, out.channels, out.height, out.width),
            (4, 3, 8, 8)
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let config = tiny_config();
        let mut rng = Rng::new(3);
        let params = DenoiserParams::init(&config, vocab().size(), &mut rng, false);
        let te = textenc_params(&config, &params);
        let v = randn_video(2, &config, &mut rng);
        let emb = Rc::new(encode_caption("a blue circle moves up", false, &vocab(), &te).unwrap());
        let cond = repeat_conditioning(emb, 2).unwrap();
        let a = forward(5, &v, &cond, &params, &config).unwrap();
        let b = forward(5, &v, &cond, &params, &config).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn zero_head_predicts_exactly_zero() {
        let config = tiny_config();
        let mut rng = Rng::new(4);
        let params = DenoiserParams::init(&config, vocab().size(), &mut rng, true);
        let te = textenc_params(&config, &params);
        let v = randn_video(2, &config, &mut rng);
        let emb = Rc::new(encode_caption("a red square moves right", false, &vocab(), &te).unwrap());
        let cond = repeat_conditioning(emb, 2).unwrap();
        let out = forward(5, &v, &cond, &params, &config).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    /// Brute-force multi-head attention oracle: explicit loops, explicit
    /// softmax, computed straight from the parameter values.
    fn attention_oracle(
        q_in: &[f64],
        kv_in: &[f64],
        nq: usize,
        nk: usize,
        d: usize,
        heads: usize,
        mask: &[bool],
        p: &AttnParams,
    ) -> Vec<f64> {
        let proj = |x: &[f64], n: usize, w: &Tensor, b: &Tensor| -> Vec<f64> {
            let wv = w.to_vec();
            let bv = b.to_vec();
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    let mut s = bv[j];
                    for k in 0..d {
                        s += x[i * d + k] * wv[k * d + j];
                    }
                    out[i * d + j] = s;
                }
            }
            out
        };
        let q = proj(q_in, nq, &p.wq, &p.bq);
        let k = proj(kv_in, nk, &p.wk, &p.bk);
        let v = proj(kv_in, nk, &p.wv, &p.bv);
        let dh = d / heads;
        let mut merged = vec![0.0; nq * d];
        for h in 0..heads {
            for i in 0..nq {
                let mut scores = vec![f64::NEG_INFINITY; nk];
                for j in 0..nk {
                    if mask[j] {
                        let mut s = 0.0;
                        for x in 0..dh {
                            s += q[i * d + h * dh + x] * k[j * d + h * dh + x];
                        }
                        scores[j] = s / (dh as f64).sqrt();
                    }
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores
                    .iter()
                    .map(|&s| if s.is_finite() { (s - mx).exp() } else { 0.0 })
                    .collect();
                let sum: f64 = exps.iter().sum();
                for x in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..nk {
                        acc += exps[j] / sum * v[j * d + h * dh + x];
                    }
                    merged[i * d + h * dh + x] = acc;
                }
            }
        }
        proj(&merged, nq, &p.wo, &p.bo)
    }

    #[test]
    fn cross_attention_matches_brute_force_oracle() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let d = 2 * rng.uniform_usize(2, 4);
            let heads = 2;
            let frames = rng.uniform_usize(1, 3);
            let positions = rng.uniform_usize(1, 4);
            let s = rng.uniform_usize(1, 4);
            let p = init_attn(d, 0.3, &mut rng);
            let block = BlockParams {
                cross_norm_g: ones_param(vec![d]),
                cross_norm_b: zeros_param(vec![d]),
                cross: p.clone(),
                temp_norm_g: ones_param(vec![d]),
                temp_norm_b: zeros_param(vec![d]),
                temporal: init_attn(d, 0.3, &mut rng),
                ffn_norm_g: ones_param(vec![d]),
                ffn_norm_b: zeros_param(vec![d]),
                ffn_w1: randn_param(vec![d, 2 * d], 0.3, &mut rng),
                ffn_b1: zeros_param(vec![2 * d]),
                ffn_w2: randn_param(vec![2 * d, d], 0.3, &mut rng),
                ffn_b2: zeros_param(vec![d]),
            };
            let z = Tensor::from_vec(
                vec![frames * positions, d],
                rng.fill_normal(frames * positions * d),
            )
            .unwrap();
            let mut mask = vec![true; s];
            if s > 1 {
                mask[s - 1] = rng.next_f64() < 0.5;
            }
            let emb = Rc::new(crate::textenc::CaptionEmbedding {
                tokens: Tensor::from_vec(vec![s, d], rng.fill_normal(s * d)).unwrap(),
                mask: mask.clone(),
                is_null: false,
            });
            let cond = repeat_conditioning(emb.clone(), frames).unwrap();
            let out = cross_attention_block(&z, &cond, &block, heads, frames, positions).unwrap();
            // Oracle: layer norm (gamma=1, beta=0) then attention per frame plus residual.
            let zv = z.to_vec();
            let mut normed = vec![0.0; zv.len()];
            for r in 0..frames * positions {
                let row = &zv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                for j in 0..d {
                    normed[r * d + j] = (row[j] - mean) / (var + NORM_EPS).sqrt();
                }
            }
            let kv = emb.tokens.to_vec();
            for i in 0..frames {
                let att = attention_oracle(
                    &normed[i * positions * d..(i + 1) * positions * d],
                    &kv,
                    positions,
                    s,
                    d,
                    heads,
                    &mask,
                    &p,
                );
                for r in 0..positions {
                    for j in 0..d {
                        let got = out.to_vec()[(i * positions + r) * d + j];
                        let want = zv[(i * positions + r) * d + j] + att[r * d + j];
                        assert!(
                            (got - want).abs() < 1e-10,
                            "frame {i} row {r} col {j}: {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn temporal_attention_matches_brute_force_oracle() {
        let mut rng = Rng::new(6);
        for _ in 0..20 {
            let d = 2 * rng.uniform_usize(2, 4);
            let heads = 2;
            let frames = rng.uniform_usize(1, 5);
            let positions = rng.uniform_usize(1, 4);
            let block = BlockParams {
                cross_norm_g: ones_param(vec![d]),
                cross_norm_b: zeros_param(vec![d]),
                cross: init_attn(d, 0.3, &mut rng),
                temp_norm_g: ones_param(vec![d]),
                temp_norm_b: zeros_param(vec![d]),
                temporal: init_attn(d, 0.3, &mut rng),
                ffn_norm_g: ones_param(vec![d]),
                ffn_norm_b: zeros_param(vec![d]),
                ffn_w1: randn_param(vec![d, 2 * d], 0.3, &mut rng),
                ffn_b1: zeros_param(vec![2 * d]),
                ffn_w2: randn_param(vec![2 * d, d], 0.3, &mut rng),
                ffn_b2: zeros_param(vec![d]),
            };
            let z = Tensor::from_vec(
                vec![frames * positions, d],
                rng.fill_normal(frames * positions * d),
            )
            .unwrap();
            let out =
                temporal_attention_block(&z, &block, None, heads, frames, positions).unwrap();
            let zv = z.to_vec();
            let mut normed = vec![0.0; zv.len()];
            for r in 0..frames * positions {
                let row = &zv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                for j in 0..d {
                    normed[r * d + j] = (row[j] - mean) / (var + NORM_EPS).sqrt();
                }
            }
            let mask = vec![true; frames];
            for pos in 0..positions {
                let rows: Vec<f64> = (0..frames)
                    .flat_map(|i| normed[(i * positions + pos) * d..(i * positions + pos + 1) * d].to_vec())
                    .collect();
                let att = attention_oracle(
                    &rows,
                    &rows,
                    frames,
                    frames,
                    d,
                    heads,
                    &mask,
                    &block.temporal,
                );
                for i in 0..frames {
                    for j in 0..d {
                        let got = out.to_vec()[(i * positions + pos) * d + j];
                        let want = zv[(i * positions + pos) * d + j] + att[i * d + j];
                        assert!((got - want).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        // With one attendable key the softmax weight is exactly 1, so the
        // pre-residual output of every position is the projected value row.
        let mut rng = Rng::new(7);
        let d = 4;
        let p = init_attn(d, 0.5, &mut rng);
        let q_in = Tensor::from_vec(vec![3, d], rng.fill_normal(3 * d)).unwrap();
        let kv = Tensor::from_vec(vec![1, d], rng.fill_normal(d)).unwrap();
        let out = multihead_attention(&q_in, &kv, Some(&[true]), &p, 1, None).unwrap();
        // v-projection of the single key, through the output projection.
        let vrow = linear(&kv, &p.wv, &p.bv).unwrap();
        let expect = linear(&vrow, &p.wo, &p.bo).unwrap().to_vec();
        let got = out.to_vec();
        for r in 0..3 {
            for j in 0..d {
                assert!((got[r * d + j] - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporal_single_frame_weights_sum_to_self() {
        let config = DenoiserConfig {
            temporal_pos_enabled: false,
            ..tiny_config()
        };
        let mut rng = Rng::new(8);
        let d = config.model_dim;
        let params = DenoiserParams::init(&config, vocab().size(), &mut rng, false);
        let z = Tensor::from_vec(vec![config.positions(), d], rng.fill_normal(config.positions() * d))
            .unwrap();
        let out = temporal_attention_block(&z, &params.blocks[0], None, config.heads, 1, config.positions())
            .unwrap();
        // L=1: attention over a single frame attends only to itself; the
        // result is input + projected value of the normed input.
        let x = z
            .layer_norm(&params.blocks[0].temp_norm_g, &params.blocks[0].temp_norm_b, NORM_EPS)
            .unwrap();
        let v = linear(&x, &params.blocks[0].temporal.wv, &params.blocks[0].temporal.bv).unwrap();
        let o = linear(&v, &params.blocks[0].temporal.wo, &params.blocks[0].temporal.bo).unwrap();
        let expect = z.add(&o).unwrap().to_vec();
        for (a, b) in out.to_vec().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_permutation_equivariance_without_positions() {
        let config = DenoiserConfig {
            temporal_pos_enabled: false,
            ..tiny_config()
        };
        let mut rng = Rng::new(9);
        let params = DenoiserParams::init(&config, vocab().size(), &mut rng, false);
        let te = textenc_params(&config, &params);
        let v = vocab();
        let frames = 4;
        let vid = randn_video(frames, &config, &mut rng);
        let script = MultiSceneScript::new(
            "p",
            Scenario::Synthetic,
            vec![
                "a red square moves right".into(),
                "a blue circle moves up".into(),
                "a green triangle moves down".into(),
                "a yellow square stays still".into(),
            ],
        )
        .unwrap();
        let plan = build_plan(&script, frames, ConditioningMode::Talc, &v, &te).unwrap();
        let out = forward(9, &vid, &plan.frame_conditioning, &params, &config).unwrap();

        let perm = [2usize, 0, 3, 1];
        let mut pv = VideoTensor::zeros(frames, config.channels, config.height, config.width);
        let fs = vid.frame_stride();
        for (dst, &src) in perm.iter().enumerate() {
            pv.data[dst * fs..(dst + 1) * fs].copy_from_slice(&vid.data[src * fs..(src + 1) * fs]);
        }
        let pcond = crate::textenc::FrameConditioning {
            per_frame: perm
                .iter()
                .map(|&src| plan.frame_conditioning.per_frame[src].clone())
                .collect(),
        };
        let pout = forward(9, &pv, &pcond, &params, &config).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            let a = &pout.data[dst * fs..(dst + 1) * fs];
            let b = &out.data[src * fs..(src + 1) * fs];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn talc_equals_repeat_when_captions_identical() {
        let config = tiny_config();
        let v = vocab();
        let mut rng = Rng::new(10);
        for n in 2..=4usize {
            let params = DenoiserParams::init(&config, v.size(), &mut rng, false);
            let te = textenc_params(&config, &params);
            let caption = "a red square moves right";
            let script = MultiSceneScript::new(
                "same",
                Scenario::Synthetic,
                vec![caption.to_string(); n],
            )
            .unwrap();
            let frames = 2 * n;
            let vid = randn_video(frames, &config, &mut rng);
            let talc = build_plan(&script, frames, ConditioningMode::Talc, &v, &te).unwrap();
            let emb = Rc::new(encode_caption(caption, false, &v, &te).unwrap());
            let repeat = repeat_conditioning(emb, frames).unwrap();
            let tau = rng.uniform_usize(1, 100);
            let a = forward(tau, &vid, &talc.frame_conditioning, &params, &config).unwrap();
            let b = forward(tau, &vid, &repeat, &params, &config).unwrap();
            assert_eq!(a.data, b.data, "n={n}: TALC and repeat plans diverge");
        }
    }

    #[test]
    fn caption_influence_is_segment_local_without_temporal_blocks() {
        let config = DenoiserConfig {
            temporal_enabled: false,
            ..tiny_config()
        };
        let v = vocab();
        let mut rng = Rng::new(11);
        let params = DenoiserParams::init(&config, v.size(), &mut rng, false);
        let te = textenc_params(&config, &params);
        let frames = 8;
        let vid = randn_video(frames, &config, &mut rng);
        let base = MultiSceneScript::new(
            "b",
            Scenario::Synthetic,
            vec!["a red square moves right".into(), "a blue circle moves up".into()],
        )
        .unwrap();
        let altered = MultiSceneScript::new(
            "a",
            Scenario::Synthetic,
            vec!["a red square moves right".into(), "a green triangle moves down".into()],
        )
        .unwrap();
        let p1 = build_plan(&base, frames, ConditioningMode::Talc, &v, &te).unwrap();
        let p2 = build_plan(&altered, frames, ConditioningMode::Talc, &v, &te).unwrap();
        let o1 = forward(3, &vid, &p1.frame_conditioning, &params, &config).unwrap();
        let o2 = forward(3, &vid, &p2.frame_conditioning, &params, &config).unwrap();
        let fs = o1.frame_stride();
        for f in 0..4 {
            let a = &o1.data[f * fs..(f + 1) * fs];
            let b = &o2.data[f * fs..(f + 1) * fs];
            let max = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(max < 1e-12, "frame {f} changed by {max}");
        }
        let changed: f64 = (4..8)
            .map(|f| {
                o1.data[f * fs..(f + 1) * fs]
                    .iter()
                    .zip(&o2.data[f * fs..(f + 1) * fs])
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0, f64::max);
        assert!(changed > 0.0, "segment 2 should respond to its caption");
    }

    #[test]
    fn caption_influence_spreads_with_temporal_blocks() {
        let config = tiny_config();
        let v = vocab();
        let mut rng = Rng::new(12);
        let params = DenoiserParams::init(&config, v.size(), &mut rng, false);
        let te = textenc_params(&config, &params);
        let frames = 8;
        let vid = randn_video(frames, &config, &mut rng);
        let base = MultiSceneScript::new(
            "b",
            Scenario::Synthetic,
            vec!["a red square moves right".into(), "a blue circle moves up".into()],
        )
        .unwrap();
        let altered = MultiSceneScript::new(
            "a",
            Scenario::Synthetic,
            vec!["a red square moves right".into(), "a green triangle moves down".into()],
        )
        .unwrap();
        let p1 = build_plan(&base, frames, ConditioningMode::Talc, &v, &te).unwrap();
        let p2 = build_plan(&altered, frames, ConditioningMode::Talc, &v, &te).unwrap();
        let o1 = forward(3, &vid, &p1.frame_conditioning, &params, &config).unwrap();
        let o2 = forward(3, &vid, &p2.frame_conditioning, &params, &config).unwrap();
        let fs = o1.frame_stride();
        let outside: f64 = (0..4)
            .map(|f| {
                o1.data[f * fs..(f + 1) * fs]
                    .iter()
                    .zip(&o2.data[f * fs..(f + 1) * fs])
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0, f64::max);
        assert!(outside > 0.0, "temporal attention should spread the change");
    }

    #[test]
    fn attention_probe_is_row_stochastic_and_respects_mask() {
        let config = tiny_config();
        let v = vocab();
        let mut rng = Rng::new(13);
        let params = DenoiserParams::init(&config, v.size(), &mut rng, false);
        let te = textenc_params(&config, &params);
        let vid = randn_video(2, &config, &mut rng);
        let emb = Rc::new(encode_caption("a red square", false, &v, &te).unwrap());
        let cond = repeat_conditioning(emb.clone(), 2).unwrap();
        let probes = cross_attention_probe(4, &vid, &cond, &params, &config, 0).unwrap();
        assert_eq!(probes.len(), config.heads);
        let s = config.text_tokens;
        for head in &probes {
            for row in head.chunks(s) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-10);
                for (j, &w) in row.iter().enumerate() {
                    assert!((0.0..=1.0).contains(&w));
                    if !emb.mask[j] {
                        assert_eq!(w, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn gradcheck_sampled_parameters_of_full_loss() {
        let config = DenoiserConfig {
            max_frames: 4,
            height: 8,
            width: 8,
            model_dim: 8,
            heads: 2,
            blocks: 2,
            text_tokens: 6,
            ..tiny_config()
        };
        let v = vocab();
        let mut rng = Rng::new(14);
        let params = DenoiserParams::init(&config, v.size(), &mut rng, false);
        let te = textenc_params(&config, &params);
        let frames = 4;
        let vid = randn_video(frames, &config, &mut rng);
        let script = MultiSceneScript::new(
            "g",
            Scenario::Synthetic,
            vec!["a red square moves right".into(), "a blue circle moves up".into()],
        )
        .unwrap();
        let target = Tensor::from_vec(
            vec![frames * config.positions(), config.patch_values()],
            rng.fill_normal(frames * config.positions() * config.patch_values()),
        )
        .unwrap();
        // The plan is rebuilt inside the closure so the loss is a true
        // function of the text-encoder tables too.
        let loss_fn = || {
            let plan = build_plan(&script, frames, ConditioningMode::Talc, &v, &te).unwrap();
            let out = forward_graph(7, &vid, &plan.frame_conditioning, &params, &config).unwrap();
            let diff = out.sub(&target).unwrap();
            diff.mul(&diff).unwrap().mean()
        };
        let loss = loss_fn();
        let named = params.named_params();
        for (_, t) in &named {
            t.zero_grad();
        }
        loss.backward().unwrap();
        // Sample roughly 1% of all parameter entries.
        let total = params.num_values();
        let sample = (total / 100).max(50);
        let mut checked = 0;
        while checked < sample {
            let (name, t) = &named[rng.uniform_usize(0, named.len() - 1)];
            let idx = rng.uniform_usize(0, t.numel() - 1);
            let an = t.grad().unwrap()[idx];
            let orig = t.to_vec();
            let h = 1e-5;
            let mut up = orig.clone();
            up[idx] += h;
            t.set_data(&up);
            let fu = loss_fn().item();
            let mut dn = orig.clone();
            dn[idx] -= h;
            t.set_data(&dn);
            let fd = loss_fn().item();
            t.set_data(&orig);
            let fdiff = (fu - fd) / (2.0 * h);
            let rel = (fdiff - an).abs() / (fdiff.abs() + an.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{idx}]: fd={fdiff} analytic={an} rel={rel}");
            checked += 1;
        }
    }
}
