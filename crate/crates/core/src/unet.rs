//! Pixel-space UNet denoiser.
//!
//! Architecture (desk scale): sinusoidal timestep embedding through a small
//! MLP; a conv stem; per-level ResBlock (+ optional attention) with stride-2
//! downsampling between levels; a middle ResBlock/attention/ResBlock stack;
//! the mirrored up path with skip concatenation and nearest-neighbor
//! upsampling; GroupNorm + zero-initialized conv head predicting eps.
//!
//! Attention blocks operate on token sequences (channels-last, row-major
//! flattening of the spatial grid) and use token-wise normalization, so a
//! key mask is exactly equivalent to physically removing the masked tokens.
//! That property is what lets the fusion mechanism (see [`crate::xfuse`])
//! reuse these blocks unchanged on concatenated streams.

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::{rng, Element, Tensor};

/// Full-scale fusion gate threshold (token count at or below which fusion
/// applies).
pub const PAPER_FUSION_TOKEN_THRESHOLD: usize = 1024;
/// Desk-scale fusion gate threshold.
pub const DESK_FUSION_TOKEN_THRESHOLD: usize = 256;

/// Which timestep the conditioned stream's ResBlocks receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondTimestepMode {
    /// Same per-sample timestep as the noised stream (default).
    SameT,
    /// Always timestep 0 (the conditioned image is clean).
    ZeroT,
}

impl CondTimestepMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "same_t" => Ok(CondTimestepMode::SameT),
            "zero_t" => Ok(CondTimestepMode::ZeroT),
            other => Err(Error::format(format!("unknown cond_timestep_mode '{other}'"))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            CondTimestepMode::SameT => "same_t",
            CondTimestepMode::ZeroT => "zero_t",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub image_channels: usize,
    /// Default sample resolution (forward accepts any compatible size).
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Levels whose blocks carry attention (0 = full resolution).
    pub attention_levels: Vec<usize>,
    pub heads: usize,
    pub text_embed_dim: usize,
    pub norm_groups: usize,
    /// Fusion applies at an attention block iff the noised stream's token
    /// count there is at or below this threshold.
    pub fusion_token_threshold: usize,
    pub cond_timestep_mode: CondTimestepMode,
    pub mid_attention: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl UNetConfig {
    /// Desk-scale default: 16x16 RGB, two levels, attention at the low level.
    pub fn desk_default() -> Self {
        UNetConfig {
            image_channels: 3,
            image_size: 16,
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![1],
            heads: 2,
            text_embed_dim: 32,
            norm_groups: 8,
            fusion_token_threshold: DESK_FUSION_TOKEN_THRESHOLD,
            cond_timestep_mode: CondTimestepMode::SameT,
            mid_attention: true,
        }
    }

    /// Smallest config exercising every code path (both levels, attention,
    /// down/up sampling, fusion); used by fast tests and gradient checks.
    pub fn tiny() -> Self {
        UNetConfig {
            image_channels: 3,
            image_size: 8,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![1],
            heads: 2,
            text_embed_dim: 8,
            norm_groups: 2,
            fusion_token_threshold: DESK_FUSION_TOKEN_THRESHOLD,
            cond_timestep_mode: CondTimestepMode::SameT,
            mid_attention: true,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Width of the sinusoidal timestep feature.
    pub fn sinusoid_dim(&self) -> usize {
        self.base_channels
    }

    /// Width of the timestep embedding after the MLP.
    pub fn temb_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.base_channels == 0 || self.image_size == 0 {
            return Err(Error::contract("unet: zero-sized dimension".to_string()));
        }
        if self.channel_multipliers.is_empty() {
            return Err(Error::contract("unet: need at least one level".to_string()));
        }
        if self.fusion_token_threshold == 0 {
            return Err(Error::contract("unet: fusion_token_threshold must be positive".to_string()));
        }
        if self.sinusoid_dim() % 2 != 0 {
            return Err(Error::contract(format!(
                "unet: base_channels {} must be even (sinusoidal embedding dim)",
                self.base_channels
            )));
        }
        let levels = self.levels();
        for &l in &self.attention_levels {
            if l >= levels {
                return Err(Error::contract(format!(
                    "unet: attention level {l} out of range (levels = {levels})"
                )));
            }
        }
        let down_factor = 1usize << (levels - 1);
        if self.image_size % down_factor != 0 {
            return Err(Error::contract(format!(
                "unet: image_size {} not divisible by {down_factor}",
                self.image_size
            )));
        }
        for level in 0..levels {
            let c = self.channels(level);
            if c % self.norm_groups != 0 {
                return Err(Error::contract(format!(
                    "unet: norm_groups {} does not divide channels {c} at level {level}",
                    self.norm_groups
                )));
            }
            let has_attn = self.attention_levels.contains(&level)
                || (self.mid_attention && level == levels - 1);
            if has_attn && c % self.heads != 0 {
                return Err(Error::contract(format!(
                    "unet: heads {} does not divide channels {c} at level {level}",
                    self.heads
                )));
            }
        }
        if self.text_embed_dim == 0 {
            return Err(Error::contract("unet: text_embed_dim must be positive".to_string()));
        }
        Ok(())
    }

    fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&level)
    }
}

/// Text conditioning tokens `[B, L, D]` with `L >= 1` and finite values.
#[derive(Debug, Clone)]
pub struct TextEmbedding<E: Element> {
    tokens: Tensor<E>,
}

impl<E: Element> TextEmbedding<E> {
    pub fn new(tokens: Tensor<E>) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::dim(format!(
                "text embedding must be [B, L>=1, D>=1], got {s:?}"
            )));
        }
        if !tokens.all_finite() {
            return Err(Error::numerical("text embedding contains non-finite values".to_string()));
        }
        Ok(TextEmbedding { tokens })
    }

    /// The "no caption" embedding: a single zero token per sample.
    pub fn null(batch: usize, dim: usize) -> Self {
        TextEmbedding {
            tokens: Tensor::zeros(&[batch, 1, dim]),
        }
    }

    pub fn tokens(&self) -> &Tensor<E> {
        &self.tokens
    }
    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }
    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }
    pub fn is_empty(&self) -> bool {
        false // L >= 1 by construction
    }
    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }
}

// ---------------------------------------------------------------------------
// Timestep embedding
// ---------------------------------------------------------------------------

/// Sinusoidal timestep features: `[sin(t f_i) .. cos(t f_i) ..]` with
/// geometric frequencies. Injective over the timestep range in use.
pub fn timestep_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::contract(format!("timestep embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

fn timestep_embed_batch<E: Element>(ts: &[usize], dim: usize) -> Result<Tensor<E>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(timestep_embed(t, dim)?.into_iter().map(E::from_f64));
    }
    Tensor::from_vec(data, &[ts.len(), dim])
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

pub(crate) struct Linear<E: Element> {
    pub(crate) weight: Tensor<E>, // [out, in]
    pub(crate) bias: Option<Tensor<E>>,
}

impl<E: Element> Linear<E> {
    fn new<R: rand::Rng>(rng: &mut R, d_in: usize, d_out: usize, bias: bool) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        let data: Vec<E> = rng::normal_vec::<f64, _>(rng, d_in * d_out)
            .into_iter()
            .map(|v| E::from_f64(v * std))
            .collect();
        Linear {
            weight: Tensor::var(data, &[d_out, d_in]).expect("linear weight"),
            bias: bias.then(|| Tensor::var(vec![E::ZERO; d_out], &[d_out]).expect("linear bias")),
        }
    }

    pub(crate) fn zeroed(d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::var(vec![E::ZERO; d_in * d_out], &[d_out, d_in]).expect("linear weight"),
            bias: bias.then(|| Tensor::var(vec![E::ZERO; d_out], &[d_out]).expect("linear bias")),
        }
    }

    /// `[R, in] -> [R, out]`.
    pub(crate) fn forward2d(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = x.matmul_t(&self.weight, true)?;
        match &self.bias {
            Some(b) => y.add_token_bias(b),
            None => Ok(y),
        }
    }

    /// `[B, N, in] -> [B, N, out]`.
    fn forward_tokens(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::dim(format!("linear on tokens expects rank 3, got {s:?}")));
        }
        let (b, n) = (s[0], s[1]);
        let d_out = self.weight.shape()[0];
        self.forward2d(&x.reshape(&[b * n, s[2]])?)?.reshape(&[b, n, d_out])
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

pub(crate) struct Conv<E: Element> {
    pub(crate) weight: Tensor<E>, // [oc, ic, k, k]
    pub(crate) bias: Tensor<E>,
    stride: usize,
    pad: usize,
}

impl<E: Element> Conv<E> {
    fn new<R: rand::Rng>(rng: &mut R, ic: usize, oc: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = ic * k * k;
        let std = (1.0 / fan_in as f64).sqrt();
        let data: Vec<E> = rng::normal_vec::<f64, _>(rng, oc * fan_in)
            .into_iter()
            .map(|v| E::from_f64(v * std))
            .collect();
        Conv {
            weight: Tensor::var(data, &[oc, ic, k, k]).expect("conv weight"),
            bias: Tensor::var(vec![E::ZERO; oc], &[oc]).expect("conv bias"),
            stride,
            pad,
        }
    }

    pub(crate) fn zeroed(ic: usize, oc: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv {
            weight: Tensor::var(vec![E::ZERO; oc * ic * k * k], &[oc, ic, k, k]).expect("conv weight"),
            bias: Tensor::var(vec![E::ZERO; oc], &[oc]).expect("conv bias"),
            stride,
            pad,
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.conv2d(&self.weight, &self.bias, self.stride, self.pad)
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

pub(crate) struct Norm<E: Element> {
    pub(crate) gamma: Tensor<E>,
    pub(crate) beta: Tensor<E>,
    groups: usize,
}

const NORM_EPS: f64 = 1e-5;

impl<E: Element> Norm<E> {
    fn new(channels: usize, groups: usize) -> Self {
        Norm {
            gamma: Tensor::var(vec![E::ONE; channels], &[channels]).expect("norm gamma"),
            beta: Tensor::var(vec![E::ZERO; channels], &[channels]).expect("norm beta"),
            groups,
        }
    }

    /// Spatial GroupNorm over `[B,C,H,W]`.
    pub(crate) fn forward_spatial(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.group_norm(&self.gamma, &self.beta, self.groups, NORM_EPS)
    }

    /// Token-wise GroupNorm over `[B,N,C]`: statistics per token per channel
    /// group, so results are independent of every other token. This is what
    /// makes key-masking exactly equivalent to token removal.
    fn forward_tokens(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::dim(format!("token norm expects rank 3, got {s:?}")));
        }
        let (b, n, c) = (s[0], s[1], s[2]);
        x.reshape(&[b * n, c, 1, 1])?
            .group_norm(&self.gamma, &self.beta, self.groups, NORM_EPS)?
            .reshape(&[b, n, c])
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

// ---------------------------------------------------------------------------
// ResBlock
// ---------------------------------------------------------------------------

pub(crate) struct ResBlock<E: Element> {
    norm1: Norm<E>,
    conv1: Conv<E>,
    temb_proj: Linear<E>,
    norm2: Norm<E>,
    conv2: Conv<E>, // zero-initialized: the block starts as identity
    skip: Option<Conv<E>>,
    c_in: usize,
}

impl<E: Element> ResBlock<E> {
    pub(crate) fn new<R: rand::Rng>(rng: &mut R, c_in: usize, c_out: usize, temb_dim: usize, groups: usize) -> Self {
        ResBlock {
            norm1: Norm::new(c_in, groups),
            conv1: Conv::new(rng, c_in, c_out, 3, 1, 1),
            temb_proj: Linear::new(rng, temb_dim, c_out, true),
            norm2: Norm::new(c_out, groups),
            conv2: Conv::zeroed(c_out, c_out, 3, 1, 1),
            skip: (c_in != c_out).then(|| Conv::new(rng, c_in, c_out, 1, 1, 0)),
            c_in,
        }
    }

    /// Residual update; `temb` is `[B, temb_dim]`, injected as a per-sample
    /// per-channel shift between the convolutions.
    pub(crate) fn forward(&self, x: &Tensor<E>, temb: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.c_in {
            return Err(Error::dim(format!(
                "resblock expects [B,{},H,W], got {s:?}",
                self.c_in
            )));
        }
        let mut h = self.norm1.forward_spatial(x)?.gelu()?;
        h = self.conv1.forward(&h)?;
        let shift = self.temb_proj.forward2d(temb)?; // [B, c_out]
        h = h.add_sample_channel(&shift)?;
        h = self.norm2.forward_spatial(&h)?.gelu()?;
        h = self.conv2.forward(&h)?;
        let base = match &self.skip {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        base.add(&h)
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.norm1.collect(&format!("{prefix}.norm1"), out);
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.temb_proj.collect(&format!("{prefix}.temb"), out);
        self.norm2.collect(&format!("{prefix}.norm2"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        if let Some(skipc) = &self.skip {
            skipc.collect(&format!("{prefix}.skip"), out);
        }
    }
}

// ---------------------------------------------------------------------------
// Attention block
// ---------------------------------------------------------------------------

pub(crate) struct AttentionBlock<E: Element> {
    norm_self: Norm<E>,
    wq: Linear<E>,
    wk: Linear<E>,
    wv: Linear<E>,
    wo: Linear<E>, // zero-initialized
    norm_cross: Norm<E>,
    cq: Linear<E>,
    ck: Linear<E>, // text dim -> channel dim
    cv: Linear<E>,
    co: Linear<E>, // zero-initialized
    heads: usize,
    channels: usize,
}

impl<E: Element> AttentionBlock<E> {
    pub(crate) fn new<R: rand::Rng>(rng: &mut R, channels: usize, text_dim: usize, heads: usize, groups: usize) -> Self {
        AttentionBlock {
            norm_self: Norm::new(channels, groups),
            wq: Linear::new(rng, channels, channels, false),
            wk: Linear::new(rng, channels, channels, false),
            wv: Linear::new(rng, channels, channels, false),
            wo: Linear::zeroed(channels, channels, true),
            norm_cross: Norm::new(channels, groups),
            cq: Linear::new(rng, channels, channels, false),
            ck: Linear::new(rng, text_dim, channels, false),
            cv: Linear::new(rng, text_dim, channels, false),
            co: Linear::zeroed(channels, channels, true),
            heads,
            channels,
        }
    }

    /// Splits `[B, N, C]` into `[B*H, N, C/H]`.
    fn split_heads(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.shape();
        let (b, n, c) = (s[0], s[1], s[2]);
        let dh = c / self.heads;
        x.reshape(&[b, n, self.heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * self.heads, n, dh])
    }

    fn merge_heads(&self, x: &Tensor<E>, batch: usize) -> Result<Tensor<E>> {
        let s = x.shape();
        let (n, dh) = (s[1], s[2]);
        x.reshape(&[batch, self.heads, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch, n, self.heads * dh])
    }

    /// Scaled dot-product attention with an optional shared key mask.
    fn attend(
        &self,
        q: &Tensor<E>, // [B, Nq, C]
        k: &Tensor<E>, // [B, Nk, C]
        v: &Tensor<E>,
        key_mask: Option<&[bool]>,
    ) -> Result<Tensor<E>> {
        let batch = q.shape()[0];
        let dh = self.channels / self.heads;
        let qh = self.split_heads(q)?;
        let kh = self.split_heads(k)?;
        let vh = self.split_heads(v)?;
        let scores = qh
            .batch_matmul_t(&kh, true)?
            .scale(E::from_f64(1.0 / (dh as f64).sqrt()))?;
        let attn = scores.softmax_last_masked(key_mask)?;
        let out = attn.batch_matmul_t(&vh, false)?;
        self.merge_heads(&out, batch)
    }

    /// Self-attention (respecting `self_mask`) then text cross-attention,
    /// each with a residual connection. Token count is preserved. Masked
    /// keys are excluded exactly, so masking a token matches removing it.
    pub(crate) fn forward_tokens(
        &self,
        tokens: &Tensor<E>, // [B, N, C]
        text: &Tensor<E>,   // [B, L, D]
        self_mask: Option<&[bool]>,
    ) -> Result<Tensor<E>> {
        let s = tokens.shape();
        if s.len() != 3 || s[2] != self.channels {
            return Err(Error::dim(format!(
                "attention expects [B,N,{}], got {s:?}",
                self.channels
            )));
        }
        if let Some(m) = self_mask {
            if m.len() != s[1] {
                return Err(Error::dim(format!(
                    "self mask length {} does not match token count {}",
                    m.len(),
                    s[1]
                )));
            }
        }
        let ts = text.shape();
        if ts.len() != 3 || ts[0] != s[0] {
            return Err(Error::dim(format!(
                "text tokens must be [B,L,D] with matching batch, got {ts:?} vs {s:?}"
            )));
        }

        // Self-attention.
        let h = self.norm_self.forward_tokens(tokens)?;
        let q = self.wq.forward_tokens(&h)?;
        let k = self.wk.forward_tokens(&h)?;
        let v = self.wv.forward_tokens(&h)?;
        let sa = self.attend(&q, &k, &v, self_mask)?;
        let x1 = tokens.add(&self.wo.forward_tokens(&sa)?)?;

        // Cross-attention into the text tokens.
        let h2 = self.norm_cross.forward_tokens(&x1)?;
        let q2 = self.cq.forward_tokens(&h2)?;
        let k2 = self.ck.forward_tokens(text)?;
        let v2 = self.cv.forward_tokens(text)?;
        let ca = self.attend(&q2, &k2, &v2, None)?;
        x1.add(&self.co.forward_tokens(&ca)?)
    }

    /// Spatial wrapper: flatten, attend, unflatten.
    fn forward_spatial(&self, x: &Tensor<E>, text: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.shape().to_vec();
        let tokens = spatial_to_tokens(x)?;
        let out = self.forward_tokens(&tokens, text, None)?;
        tokens_to_spatial(&out, s[2], s[3])
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.norm_self.collect(&format!("{prefix}.norm_self"), out);
        self.wq.collect(&format!("{prefix}.wq"), out);
        self.wk.collect(&format!("{prefix}.wk"), out);
        self.wv.collect(&format!("{prefix}.wv"), out);
        self.wo.collect(&format!("{prefix}.wo"), out);
        self.norm_cross.collect(&format!("{prefix}.norm_cross"), out);
        self.cq.collect(&format!("{prefix}.cq"), out);
        self.ck.collect(&format!("{prefix}.ck"), out);
        self.cv.collect(&format!("{prefix}.cv"), out);
        self.co.collect(&format!("{prefix}.co"), out);
    }
}

/// `[B,C,H,W] -> [B, H*W, C]`, channels last, row-major over the grid.
pub fn spatial_to_tokens<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("spatial_to_tokens expects [B,C,H,W], got {s:?}")));
    }
    x.permute(&[0, 2, 3, 1])?.reshape(&[s[0], s[2] * s[3], s[1]])
}

/// Inverse of [`spatial_to_tokens`].
pub fn tokens_to_spatial<E: Element>(t: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    let s = t.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::dim(format!(
            "tokens_to_spatial: {s:?} does not match {h}x{w}"
        )));
    }
    t.reshape(&[s[0], h, w, s[2]])?.permute(&[0, 3, 1, 2])
}

// ---------------------------------------------------------------------------
// UNet
// ---------------------------------------------------------------------------

pub(crate) struct DownLevel<E: Element> {
    pub(crate) res: ResBlock<E>,
    pub(crate) attn: Option<AttentionBlock<E>>,
    pub(crate) down: Option<Conv<E>>,
}

pub(crate) struct UpLevel<E: Element> {
    pub(crate) res: ResBlock<E>,
    pub(crate) attn: Option<AttentionBlock<E>>,
    pub(crate) up: Option<Conv<E>>,
}

pub struct UNet<E: Element> {
    pub config: UNetConfig,
    time1: Linear<E>,
    time2: Linear<E>,
    pub(crate) in_conv: Conv<E>,
    pub(crate) downs: Vec<DownLevel<E>>,
    pub(crate) mid_res1: ResBlock<E>,
    pub(crate) mid_attn: Option<AttentionBlock<E>>,
    pub(crate) mid_res2: ResBlock<E>,
    /// Indexed by level; processed from the deepest level to level 0.
    pub(crate) ups: Vec<UpLevel<E>>,
    pub(crate) out_norm: Norm<E>,
    pub(crate) out_conv: Conv<E>, // zero-initialized
}

impl<E: Element> UNet<E> {
    /// Deterministic construction from a seed.
    pub fn new(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "unet-init");
        let levels = config.levels();
        let temb = config.temb_dim();
        let g = config.norm_groups;

        let time1 = Linear::new(&mut r, config.sinusoid_dim(), temb, true);
        let time2 = Linear::new(&mut r, temb, temb, true);
        let in_conv = Conv::new(&mut r, config.image_channels, config.channels(0), 3, 1, 1);

        let mut downs = Vec::with_capacity(levels);
        for level in 0..levels {
            let c = config.channels(level);
            let attn = config
                .has_attention(level)
                .then(|| AttentionBlock::new(&mut r, c, config.text_embed_dim, config.heads, g));
            let down = (level + 1 < levels)
                .then(|| Conv::new(&mut r, c, config.channels(level + 1), 3, 2, 1));
            downs.push(DownLevel {
                res: ResBlock::new(&mut r, c, c, temb, g),
                attn,
                down,
            });
        }

        let c_mid = config.channels(levels - 1);
        let mid_res1 = ResBlock::new(&mut r, c_mid, c_mid, temb, g);
        let mid_attn = config
            .mid_attention
            .then(|| AttentionBlock::new(&mut r, c_mid, config.text_embed_dim, config.heads, g));
        let mid_res2 = ResBlock::new(&mut r, c_mid, c_mid, temb, g);

        let mut ups = Vec::with_capacity(levels);
        for level in 0..levels {
            let c = config.channels(level);
            let attn = config
                .has_attention(level)
                .then(|| AttentionBlock::new(&mut r, c, config.text_embed_dim, config.heads, g));
            let up = (level > 0).then(|| Conv::new(&mut r, c, config.channels(level - 1), 3, 1, 1));
            ups.push(UpLevel {
                res: ResBlock::new(&mut r, 2 * c, c, temb, g),
                attn,
                up,
            });
        }

        let out_norm = Norm::new(config.channels(0), g);
        let out_conv = Conv::zeroed(config.channels(0), config.image_channels, 3, 1, 1);

        Ok(UNet {
            config: config.clone(),
            time1,
            time2,
            in_conv,
            downs,
            mid_res1,
            mid_attn,
            mid_res2,
            ups,
            out_norm,
            out_conv,
        })
    }

    /// All parameters with stable hierarchical names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.time1.collect("time.lin1", &mut out);
        self.time2.collect("time.lin2", &mut out);
        self.in_conv.collect("in_conv", &mut out);
        for (i, d) in self.downs.iter().enumerate() {
            d.res.collect(&format!("down{i}.res"), &mut out);
            if let Some(a) = &d.attn {
                a.collect(&format!("down{i}.attn"), &mut out);
            }
            if let Some(c) = &d.down {
                c.collect(&format!("down{i}.downsample"), &mut out);
            }
        }
        self.mid_res1.collect("mid.res1", &mut out);
        if let Some(a) = &self.mid_attn {
            a.collect("mid.attn", &mut out);
        }
        self.mid_res2.collect("mid.res2", &mut out);
        for (i, u) in self.ups.iter().enumerate() {
            u.res.collect(&format!("up{i}.res"), &mut out);
            if let Some(a) = &u.attn {
                a.collect(&format!("up{i}.attn"), &mut out);
            }
            if let Some(c) = &u.up {
                c.collect(&format!("up{i}.upsample"), &mut out);
            }
        }
        self.out_norm.collect("out_norm", &mut out);
        self.out_conv.collect("out_conv", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Per-sample timestep embedding `[B, temb_dim]`.
    pub(crate) fn embed_timesteps(&self, ts: &[usize]) -> Result<Tensor<E>> {
        let sin = timestep_embed_batch::<E>(ts, self.config.sinusoid_dim())?;
        self.time2.forward2d(&self.time1.forward2d(&sin)?.gelu()?)
    }

    pub(crate) fn check_input(&self, x: &Tensor<E>, ts: &[usize]) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.image_channels {
            return Err(Error::dim(format!(
                "unet expects [B,{},H,W], got {s:?}",
                self.config.image_channels
            )));
        }
        if s[0] != ts.len() {
            return Err(Error::dim(format!(
                "batch {} does not match timestep count {}",
                s[0],
                ts.len()
            )));
        }
        let factor = 1usize << (self.config.levels() - 1);
        if s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(Error::dim(format!(
                "spatial dims {}x{} not divisible by {factor}",
                s[2], s[3]
            )));
        }
        Ok(())
    }

    /// Resolves optional text to its token tensor (null tokens when absent),
    /// validating the batch dimension.
    pub(crate) fn resolve_text(
        &self,
        batch: usize,
        text: Option<&TextEmbedding<E>>,
    ) -> Result<Tensor<E>> {
        match text {
            Some(t) => {
                if t.batch() != batch {
                    return Err(Error::dim(format!(
                        "text batch {} does not match image batch {batch}",
                        t.batch()
                    )));
                }
                Ok(t.tokens().clone())
            }
            None => Ok(TextEmbedding::null(batch, self.config.text_embed_dim)
                .tokens()
                .clone()),
        }
    }

    /// Vanilla single-stream forward: the backbone exactly as it behaves with
    /// no conditioned image. Self-contained — shares no control flow with the
    /// fused path, which must reproduce it bit-exactly when the conditioned
    /// image is absent.
    pub fn forward_vanilla(
        &self,
        x: &Tensor<E>,
        ts: &[usize],
        text: Option<&TextEmbedding<E>>,
    ) -> Result<Tensor<E>> {
        self.check_input(x, ts)?;
        let text_tokens = self.resolve_text(x.shape()[0], text)?;
        let temb = self.embed_timesteps(ts)?;
        let h = self.in_conv.forward(x)?;
        self.single_stream_tail(h, &temb, &text_tokens)
    }

    /// Everything after the first convolution of the single-stream pass —
    /// shared with front-end variants that feed a different first conv.
    pub(crate) fn single_stream_tail(
        &self,
        h0: Tensor<E>,
        temb: &Tensor<E>,
        text_tokens: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let mut h = h0;
        let mut skips: Vec<Tensor<E>> = Vec::with_capacity(self.config.levels());
        for level in self.downs.iter() {
            h = level.res.forward(&h, &temb)?;
            if let Some(attn) = &level.attn {
                h = attn.forward_spatial(&h, &text_tokens)?;
            }
            skips.push(h.clone());
            if let Some(down) = &level.down {
                h = down.forward(&h)?;
            }
        }

        h = self.mid_res1.forward(&h, &temb)?;
        if let Some(attn) = &self.mid_attn {
            h = attn.forward_spatial(&h, &text_tokens)?;
        }
        h = self.mid_res2.forward(&h, &temb)?;

        for level_idx in (0..self.ups.len()).rev() {
            let level = &self.ups[level_idx];
            let skip = skips.pop().expect("one skip per level");
            h = Tensor::concat(&[&h, &skip], 1)?;
            h = level.res.forward(&h, &temb)?;
            if let Some(attn) = &level.attn {
                h = attn.forward_spatial(&h, &text_tokens)?;
            }
            if let Some(up) = &level.up {
                h = up.forward(&h.upsample_nearest_2x()?)?;
            }
        }

        let out = self.out_norm.forward_spatial(&h)?.gelu()?;
        self.out_conv.forward(&out)
    }

    /// Denoiser entry point: routes to the vanilla backbone when no
    /// conditioned image is given, and to the fused dual-stream pass (see
    /// [`crate::xfuse`]) when one is.
    pub fn forward(
        &self,
        x: &Tensor<E>,
        ts: &[usize],
        text: Option<&TextEmbedding<E>>,
        conditioned: Option<&Tensor<E>>,
    ) -> Result<Tensor<E>> {
        match conditioned {
            None => self.forward_vanilla(x, ts, text),
            Some(cond) => crate::xfuse::xfuse_forward(self, x, ts, text, cond),
        }
    }
}

impl<E: Element> Denoiser<E> for UNet<E> {
    fn image_shape(&self) -> [usize; 3] {
        [
            self.config.image_channels,
            self.config.image_size,
            self.config.image_size,
        ]
    }

    fn predict_eps(
        &self,
        x_t: &Tensor<E>,
        t: usize,
        text: Option<&Tensor<E>>,
        conditioned: Option<&Tensor<E>>,
    ) -> Result<Tensor<E>> {
        let batch = x_t.shape().first().copied().unwrap_or(0);
        let ts = vec![t; batch];
        let wrapped = match text {
            Some(tokens) => Some(TextEmbedding::new(tokens.clone())?),
            None => None,
        };
        self.forward(x_t, &ts, wrapped.as_ref(), conditioned)
    }
}

/// Randomizes every parameter of a model in place (used by gradient checks:
/// zero-initialized projections would otherwise hide entire gradient paths).
pub fn randomize_params<E: Element>(model: &UNet<E>, seed: u64, std: f64) {
    let mut r = rng::stream(seed, "randomize-params");
    for (_, p) in model.named_params() {
        let data: Vec<E> = rng::normal_vec::<f64, _>(&mut r, p.numel())
            .into_iter()
            .map(|v| E::from_f64(v * std))
            .collect();
        p.set_data(data).expect("same shape");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, GradCheckConfig};

    fn rand_tensor(seed: u64, label: &str, shape: &[usize]) -> Tensor<f64> {
        let mut r = rng::stream(seed, label);
        Tensor::from_vec(rng::normal_vec(&mut r, shape.iter().product()), shape).unwrap()
    }

    fn text(seed: u64, batch: usize, l: usize, d: usize) -> TextEmbedding<f64> {
        TextEmbedding::new(rand_tensor(seed, "text", &[batch, l, d])).unwrap()
    }

    #[test]
    fn timestep_embedding_basics() {
        // t = 0: sines all zero, cosines all one.
        let e = timestep_embed(0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert!(timestep_embed(0, 7).is_err());

        // Injectivity over the toy range.
        let embs: Vec<Vec<f64>> = (0..100).map(|t| timestep_embed(t, 8).unwrap()).collect();
        for i in 0..100 {
            for j in (i + 1)..100 {
                assert_ne!(embs[i], embs[j], "t={i} and t={j} collide");
            }
        }
    }

    #[test]
    fn timestep_similarity_decays_with_distance() {
        // The embedding dot-product sums cos(delta * f_i) over frequencies:
        // it falls off monotonically for nearby offsets, and a far offset
        // always scores below the nearest one.
        let dim = 16;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut avg = Vec::new();
        for delta in [1usize, 2, 4, 8, 50] {
            let mut acc = 0.0;
            let mut n = 0;
            for t in 0..(100 - delta) {
                let a = timestep_embed(t, dim).unwrap();
                let b = timestep_embed(t + delta, dim).unwrap();
                acc += dot(&a, &b);
                n += 1;
            }
            avg.push(acc / n as f64);
        }
        assert!(
            avg[0] > avg[1] && avg[1] > avg[2] && avg[2] > avg[3],
            "similarities {avg:?}"
        );
        assert!(avg[0] > avg[4], "far offset not below near offset: {avg:?}");
    }

    #[test]
    fn resblock_is_identity_at_init_and_preserves_shape() {
        let mut r = rng::stream(5, "resblock-init");
        let block = ResBlock::<f64>::new(&mut r, 4, 4, 8, 2);
        let x = rand_tensor(5, "x", &[2, 4, 6, 6]);
        let temb = rand_tensor(5, "temb", &[2, 8]);
        let y = block.forward(&x, &temb).unwrap();
        // conv2 is zero-initialized, so the residual path contributes nothing.
        assert_eq!(y.to_vec(), x.to_vec());

        // Channel projection case: shape still preserved spatially.
        let block2 = ResBlock::<f64>::new(&mut r, 4, 6, 8, 2);
        let y2 = block2.forward(&x, &temb).unwrap();
        assert_eq!(y2.shape(), &[2, 6, 6, 6]);

        // Channel mismatch is a dimension error.
        let bad = rand_tensor(5, "bad", &[2, 3, 6, 6]);
        assert!(block.forward(&bad, &temb).is_err());
    }

    #[test]
    fn resblock_gradients_match_finite_differences() {
        let mut r = rng::stream(6, "resblock-grad");
        let block = ResBlock::<f64>::new(&mut r, 3, 3, 4, 1);
        // Randomize so zero-initialized conv2 does not hide gradient paths.
        let mut params = Vec::new();
        block.collect("res", &mut params);
        let mut rr = rng::stream(6, "resblock-randomize");
        for (_, p) in &params {
            p.set_data(rng::normal_vec(&mut rr, p.numel())).unwrap();
        }
        let x = rand_tensor(6, "x", &[2, 3, 4, 4]);
        let temb = rand_tensor(6, "temb", &[2, 4]);
        let w = rand_tensor(6, "probe", &[2, 3, 4, 4]);
        let report = finite_diff_check(
            &params,
            || block.forward(&x, &temb)?.mul(&w)?.sum_all(),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(
            report.passed(),
            "worst {} rel {:.2e}",
            report.worst_param,
            report.max_rel_err
        );
    }

    #[test]
    fn attention_block_is_identity_at_init() {
        let mut r = rng::stream(7, "attn-init");
        let block = AttentionBlock::<f64>::new(&mut r, 4, 6, 2, 2);
        // Single token, with the zero-initialized output projections.
        let tok = rand_tensor(7, "tok", &[1, 1, 4]);
        let txt = rand_tensor(7, "txt", &[1, 3, 6]);
        let y = block.forward_tokens(&tok, &txt, None).unwrap();
        assert_eq!(y.to_vec(), tok.to_vec());
        // Multi-token input likewise.
        let toks = rand_tensor(7, "toks", &[2, 5, 4]);
        let txt2 = rand_tensor(7, "txt2", &[2, 3, 6]);
        let y2 = block.forward_tokens(&toks, &txt2, None).unwrap();
        assert_eq!(y2.to_vec(), toks.to_vec());
    }

    fn randomized_attention(seed: u64, c: usize, d: usize, heads: usize, groups: usize) -> AttentionBlock<f64> {
        let mut r = rng::stream(seed, "attn-new");
        let block = AttentionBlock::<f64>::new(&mut r, c, d, heads, groups);
        let mut params = Vec::new();
        block.collect("attn", &mut params);
        let mut rr = rng::stream(seed, "attn-randomize");
        for (_, p) in &params {
            let scale = 0.5;
            let data: Vec<f64> = rng::normal_vec::<f64, _>(&mut rr, p.numel())
                .into_iter()
                .map(|v| v * scale)
                .collect();
            p.set_data(data).unwrap();
        }
        block
    }

    #[test]
    fn cross_attention_is_invariant_to_text_token_order() {
        let block = randomized_attention(8, 4, 6, 2, 2);
        let toks = rand_tensor(8, "toks", &[1, 5, 4]);
        let txt = rand_tensor(8, "txt", &[1, 4, 6]);
        let base = block.forward_tokens(&toks, &txt, None).unwrap();

        // Reverse the text tokens.
        let mut data = txt.to_vec();
        let d = 6;
        let mut permuted = vec![0.0; data.len()];
        for l in 0..4 {
            permuted[l * d..(l + 1) * d].copy_from_slice(&data[(3 - l) * d..(4 - l) * d]);
        }
        data = permuted;
        let txt_rev = Tensor::from_vec(data, &[1, 4, 6]).unwrap();
        let swapped = block.forward_tokens(&toks, &txt_rev, None).unwrap();
        for (a, b) in base.to_vec().iter().zip(swapped.to_vec()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn masking_equals_physical_removal() {
        let block = randomized_attention(9, 4, 6, 2, 2);
        let n = 5;
        let toks = rand_tensor(9, "toks", &[1, n, 4]);
        let txt = rand_tensor(9, "txt", &[1, 3, 6]);
        for removed in 0..n {
            let mask: Vec<bool> = (0..n).map(|j| j != removed).collect();
            let masked_out = block.forward_tokens(&toks, &txt, Some(&mask)).unwrap();

            // Physically drop token `removed`.
            let parts: Vec<Tensor<f64>> = (0..n)
                .filter(|&j| j != removed)
                .map(|j| toks.slice_axis(1, j, 1).unwrap())
                .collect();
            let part_refs: Vec<&Tensor<f64>> = parts.iter().collect();
            let shrunk = Tensor::concat(&part_refs, 1).unwrap();
            let removed_out = block.forward_tokens(&shrunk, &txt, None).unwrap();

            // Compare every kept token's output.
            let mv = masked_out.to_vec();
            let rv = removed_out.to_vec();
            let mut ri = 0usize;
            for j in 0..n {
                if j == removed {
                    continue;
                }
                for c in 0..4 {
                    let a = mv[j * 4 + c];
                    let b = rv[ri * 4 + c];
                    assert!(
                        (a - b).abs() <= 1e-10,
                        "token {j} channel {c}: {a} vs {b}"
                    );
                }
                ri += 1;
            }
        }
        // Mask shape mismatch is a dimension error.
        let bad_mask = vec![true; n + 1];
        assert!(block
            .forward_tokens(&toks, &txt, Some(&bad_mask))
            .is_err());
    }

    #[test]
    fn token_layout_round_trip() {
        // Channels-last, row-major: token (y, x) carries all channels of that pixel.
        let x = Tensor::from_vec(
            (0..12).map(|v| v as f64).collect(),
            &[1, 3, 2, 2], // channel c holds values 4c..4c+3
        )
        .unwrap();
        let toks = spatial_to_tokens(&x).unwrap();
        assert_eq!(toks.shape(), &[1, 4, 3]);
        // First token = pixel (0,0) = [0, 4, 8].
        assert_eq!(&toks.to_vec()[..3], &[0.0, 4.0, 8.0]);
        let back = tokens_to_spatial(&toks, 2, 2).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn unet_forward_shapes_and_determinism() {
        let cfg = UNetConfig::tiny();
        let model = UNet::<f64>::new(&cfg, 0).unwrap();
        let x = rand_tensor(10, "x", &[2, 3, 8, 8]);
        let t = text(10, 2, 3, cfg.text_embed_dim);
        let y = model.forward(&x, &[3, 7], Some(&t), None).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());

        // Same seed -> same params -> same output.
        let model2 = UNet::<f64>::new(&cfg, 0).unwrap();
        let y2 = model2.forward(&x, &[3, 7], Some(&t), None).unwrap();
        assert_eq!(y.to_vec(), y2.to_vec());

        // A different spatial size works as long as it divides cleanly.
        let x32 = rand_tensor(10, "x32", &[2, 3, 32, 32]);
        let y32 = model.forward(&x32, &[3, 7], Some(&t), None).unwrap();
        assert_eq!(y32.shape(), &[2, 3, 32, 32]);

        // Missing text falls back to the null token.
        let y_null = model.forward(&x, &[3, 7], None, None).unwrap();
        assert_eq!(y_null.shape(), x.shape());
    }

    #[test]
    fn unet_rejects_bad_inputs() {
        let cfg = UNetConfig::tiny();
        let model = UNet::<f64>::new(&cfg, 0).unwrap();
        let bad_c = rand_tensor(11, "bad", &[1, 2, 8, 8]);
        assert!(model.forward(&bad_c, &[0], None, None).is_err());
        let x = rand_tensor(11, "x", &[2, 3, 8, 8]);
        assert!(model.forward(&x, &[0], None, None).is_err()); // ts length
        let odd = rand_tensor(11, "odd", &[1, 3, 7, 7]);
        assert!(model.forward(&odd, &[0], None, None).is_err()); // not divisible
    }

    #[test]
    fn unet_zero_head_at_init() {
        // out_conv is zero-initialized: a fresh model predicts all zeros.
        let model = UNet::<f64>::new(&UNetConfig::tiny(), 0).unwrap();
        let x = rand_tensor(12, "x", &[1, 3, 8, 8]);
        let y = model.forward(&x, &[5], None, None).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unet_config_validation() {
        let mut cfg = UNetConfig::tiny();
        cfg.attention_levels = vec![5];
        assert!(cfg.validate().is_err());
        let mut cfg = UNetConfig::tiny();
        cfg.fusion_token_threshold = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = UNetConfig::tiny();
        cfg.norm_groups = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = UNetConfig::tiny();
        cfg.image_size = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unet_end_to_end_gradients_match_finite_differences() {
        let cfg = UNetConfig::tiny();
        let model = UNet::<f64>::new(&cfg, 3).unwrap();
        randomize_params(&model, 30, 0.2);
        let params = model.named_params();
        let x = rand_tensor(13, "x", &[1, 3, 8, 8]);
        let t = text(13, 1, 2, cfg.text_embed_dim);
        let target = rand_tensor(13, "target", &[1, 3, 8, 8]);
        let cfg_check = GradCheckConfig {
            max_indices_per_param: Some(4),
            ..Default::default()
        };
        let report = finite_diff_check(
            &params,
            || model.forward(&x, &[7], Some(&t), None)?.mse(&target),
            &cfg_check,
        )
        .unwrap();
        assert!(
            report.passed(),
            "worst {} idx {} rel {:.2e} ({} failures)",
            report.worst_param,
            report.worst_index,
            report.max_rel_err,
            report.failures.len()
        );
    }
}
