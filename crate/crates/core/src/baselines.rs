//! Alternative image-conditioning mechanisms, under one interface so the
//! eval harness can compare them: widened-first-conv channel stacking, a
//! projected embedding appended as an extra text token, returning the
//! conditioning image verbatim, and using it as a partially noised
//! sampling start. The main fused mechanism lives in [`crate::xfuse`];
//! running it with conditioning disabled is the unconditioned reference.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ddim_sample_from, init_image_start, Denoiser, GuidanceConfig, NoiseSchedule,
    SampleConditioning,
};
use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};
use crate::toydata::{embed_image, Image, EMBED_DIM};
use crate::unet::{Conv, Linear, TextEmbedding, UNet, UNetConfig};

/// The conditioning mechanisms the comparison table covers. The
/// unconditioned reference is `XFuse` run with conditioning disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    #[serde(rename = "xfuse")]
    XFuse,
    ChannelConcat,
    EmbedToken,
    NullCopy,
    InitImage,
}

pub const ALL_MECHANISMS: [MechanismKind; 5] = [
    MechanismKind::XFuse,
    MechanismKind::ChannelConcat,
    MechanismKind::EmbedToken,
    MechanismKind::NullCopy,
    MechanismKind::InitImage,
];

impl MechanismKind {
    pub fn name(&self) -> &'static str {
        match self {
            MechanismKind::XFuse => "xfuse",
            MechanismKind::ChannelConcat => "channel_concat",
            MechanismKind::EmbedToken => "embed_token",
            MechanismKind::NullCopy => "null_copy",
            MechanismKind::InitImage => "init_image",
        }
    }
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "xfuse" => Ok(MechanismKind::XFuse),
            "channel_concat" => Ok(MechanismKind::ChannelConcat),
            "embed_token" => Ok(MechanismKind::EmbedToken),
            "null_copy" | "null" => Ok(MechanismKind::NullCopy),
            "init_image" => Ok(MechanismKind::InitImage),
            other => Err(Error::contract(format!(
                "unknown mechanism '{other}' (expected one of xfuse, channel_concat, embed_token, null_copy, init_image)"
            ))),
        }
    }
    /// Whether this mechanism has trainable parameters of its own.
    pub fn is_trainable(&self) -> bool {
        !matches!(self, MechanismKind::NullCopy)
    }
}

/// Nearest-neighbor resize of `[B,C,h0,w0]` to `[B,C,h,w]`. Conditioning
/// images are inputs, not parameters, so this is a plain data op.
pub fn resize_nearest<E: Element>(x: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("resize expects [B,C,H,W], got {s:?}")));
    }
    let (b, c, h0, w0) = (s[0], s[1], s[2], s[3]);
    if h == 0 || w == 0 || h0 == 0 || w0 == 0 {
        return Err(Error::dim("resize with empty spatial dims".to_string()));
    }
    if (h0, w0) == (h, w) {
        return Ok(x.detach());
    }
    let src = x.to_vec();
    let mut out = vec![E::ZERO; b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let so = (bi * c + ci) * h0 * w0;
            let dn = (bi * c + ci) * h * w;
            for y in 0..h {
                let sy = y * h0 / h;
                for xx in 0..w {
                    let sx = xx * w0 / w;
                    out[dn + y * w + xx] = src[so + sy * w0 + sx];
                }
            }
        }
    }
    Tensor::from_vec(out, &[b, c, h, w])
}

// ---------------------------------------------------------------------------
// Channel concatenation
// ---------------------------------------------------------------------------

/// The backbone with its first convolution widened to take the conditioning
/// image stacked onto the noised input's channel axis. The widened input
/// columns start at zero, so a fresh wrap of a vanilla model computes exactly
/// what the vanilla model computes.
pub struct ChannelConcatModel<E: Element> {
    pub unet: UNet<E>,
    in_conv: Conv<E>,
}

fn conv_params<E: Element>(conv: &Conv<E>) -> (Tensor<E>, Tensor<E>) {
    let mut parts = Vec::new();
    conv.collect("c", &mut parts);
    let weight = parts.iter().find(|(n, _)| n == "c.weight").expect("conv weight").1.clone();
    let bias = parts.iter().find(|(n, _)| n == "c.bias").expect("conv bias").1.clone();
    (weight, bias)
}

impl<E: Element> ChannelConcatModel<E> {
    /// Wraps a backbone, widening its first conv with zero-initialized
    /// columns for the conditioning channels.
    pub fn from_vanilla(unet: UNet<E>) -> Result<Self> {
        let c_img = unet.config.image_channels;
        let c0 = unet.config.channels(0);
        let widened = Conv::zeroed(2 * c_img, c0, 3, 1, 1);
        let (old_w, old_b) = conv_params(&unet.in_conv);
        let (new_w, new_b) = conv_params(&widened);
        let old = old_w.to_vec();
        let mut data = new_w.to_vec();
        // Weight layout [C_out, C_in, k, k]: copy the original kernels into
        // the first c_img input channels; the rest stay zero.
        let k2 = 9;
        for co in 0..c0 {
            for ci in 0..c_img {
                for k in 0..k2 {
                    data[(co * 2 * c_img + ci) * k2 + k] = old[(co * c_img + ci) * k2 + k];
                }
            }
        }
        new_w.set_data(data)?;
        new_b.set_data(old_b.to_vec())?;
        Ok(ChannelConcatModel { unet, in_conv: widened })
    }

    pub fn new(config: &UNetConfig, seed: u64) -> Result<Self> {
        Self::from_vanilla(UNet::new(config, seed)?)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.unet.config
    }

    /// Stacks the conditioning image (resized to the input resolution if
    /// needed) onto the channel axis and runs the backbone. Absent
    /// conditioning stacks zeros, which the zero-initialized columns ignore.
    pub fn forward(
        &self,
        x: &Tensor<E>,
        ts: &[usize],
        text: Option<&TextEmbedding<E>>,
        conditioned: Option<&Tensor<E>>,
    ) -> Result<Tensor<E>> {
        self.unet.check_input(x, ts)?;
        let s = x.shape().to_vec();
        let cond = match conditioned {
            Some(c) => {
                let cs = c.shape();
                if cs.len() != 4 || cs[0] != s[0] || cs[1] != s[1] {
                    return Err(Error::dim(format!(
                        "conditioned image must be [B,{},h,w] matching batch {}, got {cs:?}",
                        s[1], s[0]
                    )));
                }
                resize_nearest(c, s[2], s[3])?
            }
            None => Tensor::zeros(&s),
        };
        let stacked = Tensor::concat(&[x, &cond], 1)?;
        let text_tokens = self.unet.resolve_text(s[0], text)?;
        let temb = self.unet.embed_timesteps(ts)?;
        let h = self.in_conv.forward(&stacked)?;
        self.unet.single_stream_tail(h, &temb, &text_tokens)
    }

    /// Backbone parameters with the first conv swapped for the widened one
    /// (same names, so checkpoints stay mechanically comparable).
    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let (w, b) = conv_params(&self.in_conv);
        self.unet
            .named_params()
            .into_iter()
            .map(|(name, t)| match name.as_str() {
                "in_conv.weight" => (name, w.clone()),
                "in_conv.bias" => (name, b.clone()),
                _ => (name, t),
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Embedding token
// ---------------------------------------------------------------------------

/// The backbone with the conditioning image entering as one extra text
/// token: the joint-space image embedding, linearly projected to the text
/// width and appended to the token sequence. The projection starts at zero,
/// so at initialization the appended token is a zero row and the model
/// computes exactly what the backbone computes on that extended context.
pub struct EmbedTokenModel<E: Element> {
    pub unet: UNet<E>,
    proj: Linear<E>,
}

impl<E: Element> EmbedTokenModel<E> {
    pub fn from_vanilla(unet: UNet<E>) -> Self {
        let proj = Linear::zeroed(EMBED_DIM, unet.config.text_embed_dim, true);
        EmbedTokenModel { unet, proj }
    }

    pub fn new(config: &UNetConfig, seed: u64) -> Result<Self> {
        Ok(Self::from_vanilla(UNet::new(config, seed)?))
    }

    pub fn config(&self) -> &UNetConfig {
        &self.unet.config
    }

    /// `[B, L, D]` text plus the projected image embedding as row `L`
    /// (a zero row when no conditioning is given): `[B, L+1, D]`.
    pub fn extend_text(
        &self,
        text: &Tensor<E>,
        cond_embed: Option<&Tensor<E>>,
    ) -> Result<Tensor<E>> {
        let s = text.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("text must be [B,L,D], got {s:?}")));
        }
        let row = match cond_embed {
            Some(e) => {
                let es = e.shape();
                if es.len() != 2 || es[0] != s[0] || es[1] != EMBED_DIM {
                    return Err(Error::dim(format!(
                        "conditioning embedding must be [{}, {EMBED_DIM}], got {es:?}",
                        s[0]
                    )));
                }
                self.proj.forward2d(e)?.reshape(&[s[0], 1, s[2]])?
            }
            None => Tensor::zeros(&[s[0], 1, s[2]]),
        };
        Tensor::concat(&[text, &row], 1)
    }

    pub fn forward(
        &self,
        x: &Tensor<E>,
        ts: &[usize],
        text: Option<&TextEmbedding<E>>,
        cond_embed: Option<&Tensor<E>>,
    ) -> Result<Tensor<E>> {
        let batch = x.shape().first().copied().unwrap_or(0);
        let base = self.unet.resolve_text(batch, text)?;
        let extended = TextEmbedding::new(self.extend_text(&base, cond_embed)?)?;
        self.unet.forward_vanilla(x, ts, Some(&extended))
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = self.unet.named_params();
        self.proj.collect("cond_proj", &mut out);
        out
    }
}

/// Joint-space embeddings of a batch of images, `[B, EMBED_DIM]`.
pub fn embed_images<E: Element>(images: &[&Image]) -> Result<Tensor<E>> {
    if images.is_empty() {
        return Err(Error::dim("cannot embed an empty image batch".to_string()));
    }
    let mut data = Vec::with_capacity(images.len() * EMBED_DIM);
    for img in images {
        data.extend(embed_image(img).into_iter().map(E::from_f64));
    }
    Tensor::from_vec(data, &[images.len(), EMBED_DIM])
}

// ---------------------------------------------------------------------------
// Null copy
// ---------------------------------------------------------------------------

/// "Generation" that returns the conditioning image verbatim — no model, no
/// parameters; its scores measure the retrieval system alone.
pub fn null_generate(conditioned: Option<&Image>) -> Result<Image> {
    conditioned
        .cloned()
        .ok_or_else(|| Error::contract("null mechanism needs a conditioning image".to_string()))
}

// ---------------------------------------------------------------------------
// Init image
// ---------------------------------------------------------------------------

/// Uses the conditioning image as a partially noised sampling start: noise it
/// to fraction `t0` of the schedule, then run the sampler down from there.
/// `t0 = 0` returns the image unchanged (zero sampling steps).
#[allow(clippy::too_many_arguments)]
pub fn init_generate<E: Element, D: Denoiser<E> + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    cond: &SampleConditioning<E>,
    guidance: &GuidanceConfig,
    x_ref: &Tensor<E>,
    t0: f64,
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<Tensor<E>> {
    let (x_start, start_step) = init_image_start(x_ref, t0, schedule, seed)?;
    if start_step == 0 {
        return Ok(x_start);
    }
    ddim_sample_from(model, schedule, cond, guidance, &x_start, start_step, steps, eta, seed)
}
