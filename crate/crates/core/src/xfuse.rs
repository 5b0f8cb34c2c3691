//! Image-conditioning by token fusion.
//!
//! The conditioned (clean) image runs through the *same* backbone blocks as
//! the noised image — shared weights, separate activations, separate skip
//! stacks. At each attention block whose noised-stream token count is at or
//! below a threshold, the two token sequences are concatenated, the block's
//! self- and cross-attention run once over the joint sequence, and the
//! output is split back into the two streams. No new parameters are
//! introduced anywhere; with no conditioned image the pass is bit-identical
//! to the plain backbone. The conditioned stream's final activations never
//! reach the prediction head.

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};
use crate::unet::{
    spatial_to_tokens, tokens_to_spatial, AttentionBlock, CondTimestepMode, ResBlock,
    TextEmbedding, UNet, UNetConfig, DESK_FUSION_TOKEN_THRESHOLD,
};

/// Runtime switches for the fusion mechanism, as surfaced in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct XFuseConfig {
    /// When false the conditioned image is ignored entirely (the plain
    /// text-to-image model).
    pub enabled: bool,
    /// Fusion applies at attention blocks whose noised-stream token count is
    /// at or below this value.
    pub token_threshold: usize,
    /// Timestep fed to the conditioned stream's ResBlocks.
    pub cond_timestep_mode: CondTimestepMode,
}

impl Default for XFuseConfig {
    fn default() -> Self {
        XFuseConfig {
            enabled: true,
            token_threshold: DESK_FUSION_TOKEN_THRESHOLD,
            cond_timestep_mode: CondTimestepMode::SameT,
        }
    }
}

impl XFuseConfig {
    pub fn apply_to(&self, cfg: &mut UNetConfig) {
        cfg.fusion_token_threshold = self.token_threshold;
        cfg.cond_timestep_mode = self.cond_timestep_mode;
    }
}

/// Whether fusion applies at a block with `level_token_count` noised-stream
/// tokens. Monotone: once a count fuses, every smaller count fuses too.
pub fn fusion_gate(level_token_count: usize, threshold: usize) -> bool {
    level_token_count <= threshold
}

/// Two token streams concatenated along the sequence axis, remembering where
/// the boundary sits so any same-shaped output can be split back.
#[derive(Debug, Clone)]
pub struct FusedStreams<E: Element> {
    combined: Tensor<E>, // [B, N_x + N_c, C]
    split_point: usize,  // N_x
}

/// Concatenates noised-stream and conditioned-stream tokens (both `[B,N,C]`).
/// An absent conditioned stream yields the noised tokens unchanged.
pub fn fuse_concat<E: Element>(
    noised_tokens: &Tensor<E>,
    cond_tokens: Option<&Tensor<E>>,
) -> Result<FusedStreams<E>> {
    let ns = noised_tokens.shape();
    if ns.len() != 3 {
        return Err(Error::dim(format!("fuse_concat expects [B,N,C], got {ns:?}")));
    }
    let split_point = ns[1];
    let combined = match cond_tokens {
        None => noised_tokens.clone(),
        Some(c) => {
            let cs = c.shape();
            if cs.len() != 3 || cs[0] != ns[0] || cs[2] != ns[2] {
                return Err(Error::dim(format!(
                    "fuse_concat: stream shapes {ns:?} and {cs:?} disagree on batch or channels"
                )));
            }
            Tensor::concat(&[noised_tokens, c], 1)?
        }
    };
    Ok(FusedStreams { combined, split_point })
}

impl<E: Element> FusedStreams<E> {
    pub fn combined(&self) -> &Tensor<E> {
        &self.combined
    }

    pub fn split_point(&self) -> usize {
        self.split_point
    }

    pub fn noised_len(&self) -> usize {
        self.split_point
    }

    pub fn cond_len(&self) -> usize {
        self.combined.shape()[1] - self.split_point
    }

    /// Key mask that hides the conditioned tokens from attention.
    pub fn cond_key_mask(&self) -> Vec<bool> {
        let total = self.combined.shape()[1];
        (0..total).map(|i| i < self.split_point).collect()
    }

    /// Splits a tensor with the combined sequence length back into the
    /// noised part and (if one was fused in) the conditioned part.
    pub fn split(&self, tokens: &Tensor<E>) -> Result<(Tensor<E>, Option<Tensor<E>>)> {
        let s = tokens.shape();
        let cs = self.combined.shape();
        if s.len() != 3 || s[0] != cs[0] || s[1] != cs[1] {
            return Err(Error::dim(format!(
                "split expects [B={}, N={}, C], got {s:?}",
                cs[0], cs[1]
            )));
        }
        let noised = tokens.slice_axis(1, 0, self.split_point)?;
        let cond = if self.cond_len() > 0 {
            Some(tokens.slice_axis(1, self.split_point, self.cond_len())?)
        } else {
            None
        };
        Ok((noised, cond))
    }
}

/// One fused attention step: concatenate the streams, run the block's
/// self-attention + text cross-attention once over the joint sequence with
/// shared weights, split back. `mask_cond_keys` hides the conditioned tokens
/// from every attention query — with it set, the noised-stream output must
/// match the unfused block exactly.
pub(crate) fn fused_attention_block<E: Element>(
    block: &AttentionBlock<E>,
    noised_tokens: &Tensor<E>,
    cond_tokens: &Tensor<E>,
    text: &Tensor<E>,
    mask_cond_keys: bool,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let fused = fuse_concat(noised_tokens, Some(cond_tokens))?;
    let mask_store;
    let mask = if mask_cond_keys {
        mask_store = fused.cond_key_mask();
        Some(mask_store.as_slice())
    } else {
        None
    };
    let out = block.forward_tokens(fused.combined(), text, mask)?;
    let (noised_out, cond_out) = fused.split(&out)?;
    Ok((noised_out, cond_out.expect("conditioned part was fused in")))
}

/// Diagnostic switches for [`xfuse_forward_probed`].
#[derive(Debug, Clone, Copy, Default)]
pub struct FuseProbe {
    /// Hide conditioned tokens from all attention queries (oracle mode: the
    /// noised stream must then reproduce the unconditioned pass).
    pub mask_cond_keys: bool,
    /// Record per-attention-block token outputs.
    pub record: bool,
}

impl FuseProbe {
    pub fn off() -> Self {
        FuseProbe::default()
    }
}

/// Per-attention-block trace of a forward pass (tokens are detached copies,
/// in encounter order: down path, middle, up path).
#[derive(Debug)]
pub struct ForwardRecord<E: Element> {
    pub attn_noised: Vec<Tensor<E>>,
    pub attn_cond: Vec<Option<Tensor<E>>>,
    pub fused: Vec<bool>,
}

impl<E: Element> Default for ForwardRecord<E> {
    fn default() -> Self {
        ForwardRecord {
            attn_noised: Vec::new(),
            attn_cond: Vec::new(),
            fused: Vec::new(),
        }
    }
}

impl<E: Element> ForwardRecord<E> {
    fn push(&mut self, noised: &Tensor<E>, cond: Option<&Tensor<E>>, fused: bool) {
        self.attn_noised.push(noised.detach());
        self.attn_cond.push(cond.map(Tensor::detach));
        self.fused.push(fused);
    }
}

/// Dual-stream denoiser pass with a conditioned image.
pub fn xfuse_forward<E: Element>(
    model: &UNet<E>,
    x: &Tensor<E>,
    ts: &[usize],
    text: Option<&TextEmbedding<E>>,
    conditioned: &Tensor<E>,
) -> Result<Tensor<E>> {
    dual_forward(model, x, ts, text, Some(conditioned), &FuseProbe::off()).map(|(eps, _)| eps)
}

/// Like [`xfuse_forward`] but with an optional conditioned stream and a
/// diagnostic trace. With `conditioned = None` this runs the plain backbone
/// through the same engine (useful for trace comparisons).
pub fn xfuse_forward_probed<E: Element>(
    model: &UNet<E>,
    x: &Tensor<E>,
    ts: &[usize],
    text: Option<&TextEmbedding<E>>,
    conditioned: Option<&Tensor<E>>,
    probe: &FuseProbe,
) -> Result<(Tensor<E>, ForwardRecord<E>)> {
    dual_forward(model, x, ts, text, conditioned, probe)
}

fn cond_res<E: Element>(
    res: &ResBlock<E>,
    c: Option<Tensor<E>>,
    cond_temb: Option<&Tensor<E>>,
) -> Result<Option<Tensor<E>>> {
    match c {
        Some(c) => Ok(Some(res.forward(&c, cond_temb.expect("conditioned temb"))?)),
        None => Ok(None),
    }
}

#[allow(clippy::too_many_arguments)]
fn attn_stage<E: Element>(
    attn: &AttentionBlock<E>,
    h: Tensor<E>,
    c: Option<Tensor<E>>,
    text: &Tensor<E>,
    threshold: usize,
    probe: &FuseProbe,
    rec: &mut ForwardRecord<E>,
) -> Result<(Tensor<E>, Option<Tensor<E>>)> {
    let hs = h.shape().to_vec(); // [B, C, H, W]; the cond stream always matches
    let h_tok = spatial_to_tokens(&h)?;
    match c {
        None => {
            let out = attn.forward_tokens(&h_tok, text, None)?;
            if probe.record {
                rec.push(&out, None, false);
            }
            Ok((tokens_to_spatial(&out, hs[2], hs[3])?, None))
        }
        Some(c_spatial) => {
            let c_tok = spatial_to_tokens(&c_spatial)?;
            let n_x = h_tok.shape()[1];
            if fusion_gate(n_x, threshold) {
                let (ox, oc) =
                    fused_attention_block(attn, &h_tok, &c_tok, text, probe.mask_cond_keys)?;
                if probe.record {
                    rec.push(&ox, Some(&oc), true);
                }
                Ok((
                    tokens_to_spatial(&ox, hs[2], hs[3])?,
                    Some(tokens_to_spatial(&oc, hs[2], hs[3])?),
                ))
            } else {
                // Above the gate: each stream attends on its own, weights
                // still shared.
                let ox = attn.forward_tokens(&h_tok, text, None)?;
                let oc = attn.forward_tokens(&c_tok, text, None)?;
                if probe.record {
                    rec.push(&ox, Some(&oc), false);
                }
                Ok((
                    tokens_to_spatial(&ox, hs[2], hs[3])?,
                    Some(tokens_to_spatial(&oc, hs[2], hs[3])?),
                ))
            }
        }
    }
}

fn dual_forward<E: Element>(
    model: &UNet<E>,
    x: &Tensor<E>,
    ts: &[usize],
    text: Option<&TextEmbedding<E>>,
    cond: Option<&Tensor<E>>,
    probe: &FuseProbe,
) -> Result<(Tensor<E>, ForwardRecord<E>)> {
    model.check_input(x, ts)?;
    if let Some(c) = cond {
        if c.shape() != x.shape() {
            return Err(Error::dim(format!(
                "conditioned image shape {:?} must match input shape {:?}",
                c.shape(),
                x.shape()
            )));
        }
    }
    let batch = x.shape()[0];
    let null_text;
    let text_tokens = match text {
        Some(t) => {
            if t.batch() != batch {
                return Err(Error::dim(format!(
                    "text batch {} does not match image batch {batch}",
                    t.batch()
                )));
            }
            t.tokens().clone()
        }
        None => {
            null_text = TextEmbedding::null(batch, model.config.text_embed_dim);
            null_text.tokens().clone()
        }
    };
    let temb = model.embed_timesteps(ts)?;
    let cond_temb = match cond {
        None => None,
        Some(_) => {
            let cond_ts: Vec<usize> = match model.config.cond_timestep_mode {
                CondTimestepMode::SameT => ts.to_vec(),
                CondTimestepMode::ZeroT => vec![0; batch],
            };
            Some(model.embed_timesteps(&cond_ts)?)
        }
    };
    let ct = cond_temb.as_ref();
    let threshold = model.config.fusion_token_threshold;
    let mut rec = ForwardRecord::default();

    let mut h = model.in_conv.forward(x)?;
    let mut c_state = match cond {
        Some(c) => Some(model.in_conv.forward(c)?),
        None => None,
    };

    let mut skips: Vec<Tensor<E>> = Vec::new();
    let mut skips_c: Vec<Tensor<E>> = Vec::new();
    for level in model.downs.iter() {
        h = level.res.forward(&h, &temb)?;
        c_state = cond_res(&level.res, c_state, ct)?;
        if let Some(attn) = &level.attn {
            let (nh, nc) = attn_stage(attn, h, c_state, &text_tokens, threshold, probe, &mut rec)?;
            h = nh;
            c_state = nc;
        }
        skips.push(h.clone());
        if let Some(c) = &c_state {
            skips_c.push(c.clone());
        }
        if let Some(down) = &level.down {
            h = down.forward(&h)?;
            if let Some(c) = c_state.take() {
                c_state = Some(down.forward(&c)?);
            }
        }
    }

    h = model.mid_res1.forward(&h, &temb)?;
    c_state = cond_res(&model.mid_res1, c_state, ct)?;
    if let Some(attn) = &model.mid_attn {
        let (nh, nc) = attn_stage(attn, h, c_state, &text_tokens, threshold, probe, &mut rec)?;
        h = nh;
        c_state = nc;
    }
    h = model.mid_res2.forward(&h, &temb)?;
    c_state = cond_res(&model.mid_res2, c_state, ct)?;

    for level_idx in (0..model.ups.len()).rev() {
        let level = &model.ups[level_idx];
        let skip = skips.pop().expect("one skip per level");
        h = Tensor::concat(&[&h, &skip], 1)?;
        h = level.res.forward(&h, &temb)?;
        if let Some(c) = c_state.take() {
            let skip_c = skips_c.pop().expect("one conditioned skip per level");
            let joined = Tensor::concat(&[&c, &skip_c], 1)?;
            c_state = cond_res(&level.res, Some(joined), ct)?;
        }
        if let Some(attn) = &level.attn {
            let (nh, nc) = attn_stage(attn, h, c_state, &text_tokens, threshold, probe, &mut rec)?;
            h = nh;
            c_state = nc;
        }
        if let Some(up) = &level.up {
            h = up.forward(&h.upsample_nearest_2x()?)?;
            if let Some(c) = c_state.take() {
                c_state = Some(up.forward(&c.upsample_nearest_2x()?)?);
            }
        }
    }

    // Only the noised stream reaches the head; the conditioned stream's
    // final activations are dropped.
    drop(c_state);
    let out = model.out_norm.forward_spatial(&h)?.gelu()?;
    let eps = model.out_conv.forward(&out)?;
    Ok((eps, rec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;
    use proptest::prelude::*;

    fn rand_tensor(seed: u64, label: &str, shape: &[usize]) -> Tensor<f64> {
        let mut r = rng::stream(seed, label);
        Tensor::from_vec(rng::normal_vec(&mut r, shape.iter().product()), shape).unwrap()
    }

    fn randomized_model(seed: u64) -> UNet<f64> {
        let model = UNet::<f64>::new(&UNetConfig::tiny(), seed).unwrap();
        crate::unet::randomize_params(&model, seed ^ 0x5eed, 0.2);
        model
    }

    fn text(seed: u64, batch: usize) -> TextEmbedding<f64> {
        TextEmbedding::new(rand_tensor(seed, "text", &[batch, 3, 8])).unwrap()
    }

    #[test]
    fn fuse_and_split_round_trip_bit_exactly() {
        let a = rand_tensor(1, "a", &[2, 4, 3]);
        let b = rand_tensor(1, "b", &[2, 5, 3]);
        let fused = fuse_concat(&a, Some(&b)).unwrap();
        assert_eq!(fused.combined().shape(), &[2, 9, 3]);
        assert_eq!(fused.split_point(), 4);
        assert_eq!(fused.noised_len(), 4);
        assert_eq!(fused.cond_len(), 5);
        let (ra, rb) = fused.split(fused.combined()).unwrap();
        assert_eq!(ra.to_vec(), a.to_vec());
        assert_eq!(rb.unwrap().to_vec(), b.to_vec());

        // Absent conditioned stream: combined == noised, nothing to split off.
        let solo = fuse_concat(&a, None).unwrap();
        assert_eq!(solo.combined().to_vec(), a.to_vec());
        assert_eq!(solo.split_point(), 4);
        let (ra2, rb2) = solo.split(solo.combined()).unwrap();
        assert_eq!(ra2.to_vec(), a.to_vec());
        assert!(rb2.is_none());

        // Mismatched batch or channels is a dimension error.
        let bad = rand_tensor(1, "bad", &[1, 5, 3]);
        assert!(fuse_concat(&a, Some(&bad)).is_err());
        let bad_c = rand_tensor(1, "badc", &[2, 5, 4]);
        assert!(fuse_concat(&a, Some(&bad_c)).is_err());
    }

    #[test]
    fn gate_boundary_cases() {
        assert!(fusion_gate(1024, 1024));
        assert!(!fusion_gate(4096, 1024));
        assert!(fusion_gate(1, 1024));
        assert!(fusion_gate(255, 256));
        assert!(fusion_gate(256, 256));
        assert!(!fusion_gate(257, 256));
    }

    proptest! {
        #[test]
        fn gate_is_monotone(n in 0usize..10_000, m in 0usize..10_000, thr in 1usize..5_000) {
            let (lo, hi) = if n <= m { (n, m) } else { (m, n) };
            // If the larger count fuses, the smaller must fuse too.
            if fusion_gate(hi, thr) {
                prop_assert!(fusion_gate(lo, thr));
            }
        }
    }

    fn standalone_attention(seed: u64) -> AttentionBlock<f64> {
        let mut r = rng::stream(seed, "xfuse-attn");
        let block = AttentionBlock::<f64>::new(&mut r, 4, 8, 2, 2);
        let mut params = Vec::new();
        block.collect("attn", &mut params);
        let mut rr = rng::stream(seed, "xfuse-attn-rand");
        for (_, p) in &params {
            let data: Vec<f64> = rng::normal_vec::<f64, _>(&mut rr, p.numel())
                .into_iter()
                .map(|v| v * 0.5)
                .collect();
            p.set_data(data).unwrap();
        }
        block
    }

    #[test]
    fn fused_block_preserves_lengths_and_masks_exactly() {
        let block = standalone_attention(2);
        let nx = rand_tensor(2, "nx", &[2, 4, 4]);
        let nc = rand_tensor(2, "nc", &[2, 6, 4]);
        let txt = rand_tensor(2, "txt", &[2, 3, 8]);

        let (ox, oc) = fused_attention_block(&block, &nx, &nc, &txt, false).unwrap();
        assert_eq!(ox.shape(), nx.shape());
        assert_eq!(oc.shape(), nc.shape());

        // With the conditioned keys masked, the noised output must match the
        // block run on the noised tokens alone.
        let (masked, _) = fused_attention_block(&block, &nx, &nc, &txt, true).unwrap();
        let solo = block.forward_tokens(&nx, &txt, None).unwrap();
        for (a, b) in masked.to_vec().iter().zip(solo.to_vec()) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }

        // Without the mask the conditioned tokens do influence the output.
        let dx: f64 = ox
            .to_vec()
            .iter()
            .zip(solo.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dx > 1e-8, "fusion had no effect ({dx:.3e})");
    }

    #[test]
    fn fused_block_shares_weights_across_streams() {
        let block = standalone_attention(3);
        let nx = rand_tensor(3, "nx", &[1, 4, 4]);
        let nc = rand_tensor(3, "nc", &[1, 4, 4]);
        let txt = rand_tensor(3, "txt", &[1, 2, 8]);
        let (ox0, oc0) = fused_attention_block(&block, &nx, &nc, &txt, false).unwrap();

        // Perturb one shared weight; both stream outputs must move.
        let mut params = Vec::new();
        block.collect("attn", &mut params);
        let (_, wq) = params.iter().find(|(n, _)| n.ends_with("wq.weight")).unwrap();
        wq.update_data(|d| d[0] += 0.25);
        let (ox1, oc1) = fused_attention_block(&block, &nx, &nc, &txt, false).unwrap();
        let moved = |a: &Tensor<f64>, b: &Tensor<f64>| {
            a.to_vec()
                .iter()
                .zip(b.to_vec())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        assert!(moved(&ox0, &ox1) > 1e-9, "noised stream ignored the shared weight");
        assert!(moved(&oc0, &oc1) > 1e-9, "conditioned stream ignored the shared weight");
    }

    #[test]
    fn vanilla_and_dual_engine_agree_bit_exactly_without_conditioning() {
        let model = randomized_model(4);
        let x = rand_tensor(4, "x", &[2, 3, 8, 8]);
        let t = text(4, 2);
        let vanilla = model.forward_vanilla(&x, &[3, 9], Some(&t)).unwrap();
        let (dual, rec) =
            xfuse_forward_probed(&model, &x, &[3, 9], Some(&t), None, &FuseProbe::off()).unwrap();
        assert_eq!(vanilla.to_vec(), dual.to_vec());
        assert!(rec.attn_noised.is_empty()); // no recording requested

        // The public entry point routes identically.
        let routed = model.forward(&x, &[3, 9], Some(&t), None).unwrap();
        assert_eq!(vanilla.to_vec(), routed.to_vec());
    }

    #[test]
    fn masking_conditioned_keys_reproduces_the_unconditioned_trace() {
        let model = randomized_model(5);
        let x = rand_tensor(5, "x", &[2, 3, 8, 8]);
        let cond = rand_tensor(5, "cond", &[2, 3, 8, 8]);
        let t = text(5, 2);

        let probe = FuseProbe { mask_cond_keys: false, record: true };
        let (_, rec_plain) =
            xfuse_forward_probed(&model, &x, &[7, 2], Some(&t), None, &probe).unwrap();

        let probe_masked = FuseProbe { mask_cond_keys: true, record: true };
        let (eps_masked, rec_masked) =
            xfuse_forward_probed(&model, &x, &[7, 2], Some(&t), Some(&cond), &probe_masked).unwrap();

        // tiny(): attention at level 1 (down + up) and the middle = 3 blocks.
        assert_eq!(rec_plain.attn_noised.len(), 3);
        assert_eq!(rec_masked.attn_noised.len(), 3);
        assert!(rec_masked.fused.iter().all(|&f| f), "expected fusion at every block");

        for (i, (a, b)) in rec_plain
            .attn_noised
            .iter()
            .zip(rec_masked.attn_noised.iter())
            .enumerate()
        {
            let worst = a
                .to_vec()
                .iter()
                .zip(b.to_vec())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 1e-10, "attention block {i} diverged by {worst:.3e}");
        }

        let eps_plain = model.forward_vanilla(&x, &[7, 2], Some(&t)).unwrap();
        let worst = eps_plain
            .to_vec()
            .iter()
            .zip(eps_masked.to_vec())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-10, "final prediction diverged by {worst:.3e}");

        // Unmasked fusion must genuinely differ from the unconditioned pass.
        let eps_fused = xfuse_forward(&model, &x, &[7, 2], Some(&t), &cond).unwrap();
        let effect = eps_plain
            .to_vec()
            .iter()
            .zip(eps_fused.to_vec())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(effect > 1e-8, "conditioning had no effect ({effect:.3e})");
    }

    #[test]
    fn no_new_parameters_and_unchanged_output_shape() {
        let cfg_a = UNetConfig::tiny();
        let mut cfg_b = UNetConfig::tiny();
        cfg_b.fusion_token_threshold = 1; // gate never opens
        let a = UNet::<f64>::new(&cfg_a, 0).unwrap();
        let b = UNet::<f64>::new(&cfg_b, 0).unwrap();
        let names_a: Vec<String> = a.named_params().into_iter().map(|(n, _)| n).collect();
        let names_b: Vec<String> = b.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names_a, names_b);
        assert_eq!(a.param_count(), b.param_count());

        // Output keeps the noised input's shape with or without conditioning.
        let model = randomized_model(6);
        let x = rand_tensor(6, "x", &[2, 3, 8, 8]);
        let cond = rand_tensor(6, "cond", &[2, 3, 8, 8]);
        let y = model.forward(&x, &[1, 2], None, Some(&cond)).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn gate_threshold_one_disables_fusion_in_the_full_pass() {
        let mut cfg = UNetConfig::tiny();
        cfg.fusion_token_threshold = 1;
        let model = UNet::<f64>::new(&cfg, 7).unwrap();
        crate::unet::randomize_params(&model, 70, 0.2);
        let x = rand_tensor(7, "x", &[1, 3, 8, 8]);
        let cond = rand_tensor(7, "cond", &[1, 3, 8, 8]);
        let probe = FuseProbe { mask_cond_keys: false, record: true };
        let (eps, rec) =
            xfuse_forward_probed(&model, &x, &[5], None, Some(&cond), &probe).unwrap();
        assert!(rec.fused.iter().all(|&f| !f), "token counts exceed threshold 1");
        // Streams never mix, so the prediction matches the unconditioned pass.
        let plain = model.forward_vanilla(&x, &[5], None).unwrap();
        let worst = plain
            .to_vec()
            .iter()
            .zip(eps.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-12, "streams mixed despite closed gate ({worst:.3e})");
    }

    #[test]
    fn gradient_reaches_the_conditioned_image_only_through_fusion() {
        let model = randomized_model(8);
        let x = rand_tensor(8, "x", &[1, 3, 8, 8]);
        let t = text(8, 1);
        let cond = Tensor::var(
            rng::normal_vec(&mut rng::stream(8, "cond"), 3 * 64),
            &[1, 3, 8, 8],
        )
        .unwrap();
        let target = Tensor::zeros(&[1, 3, 8, 8]);

        // Open gate: the loss gradient must flow back into the conditioned
        // image (i.e. through the conditioned stream's shared blocks).
        let eps = xfuse_forward(&model, &x, &[4], Some(&t), &cond).unwrap();
        eps.mse(&target).unwrap().backward().unwrap();
        let g = cond.grad().expect("conditioned input is a tracked leaf");
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(gmax > 1e-12, "no gradient reached the conditioned stream");

        // Masked keys: the conditioned stream cannot influence the loss, so
        // its gradient is exactly zero.
        cond.zero_grad();
        let probe = FuseProbe { mask_cond_keys: true, record: false };
        let (eps_masked, _) =
            xfuse_forward_probed(&model, &x, &[4], Some(&t), Some(&cond), &probe).unwrap();
        eps_masked.mse(&target).unwrap().backward().unwrap();
        let g2 = cond.grad().expect("still part of the graph");
        assert!(g2.iter().all(|v| *v == 0.0), "masked stream leaked gradient");
    }

    #[test]
    fn conditioned_timestep_mode_changes_only_the_conditioned_stream() {
        let mut cfg = UNetConfig::tiny();
        cfg.cond_timestep_mode = CondTimestepMode::ZeroT;
        let zero_t = UNet::<f64>::new(&cfg, 9).unwrap();
        crate::unet::randomize_params(&zero_t, 90, 0.2);
        cfg.cond_timestep_mode = CondTimestepMode::SameT;
        let same_t = UNet::<f64>::new(&cfg, 9).unwrap();
        crate::unet::randomize_params(&same_t, 90, 0.2);

        let x = rand_tensor(9, "x", &[1, 3, 8, 8]);
        let cond = rand_tensor(9, "cond", &[1, 3, 8, 8]);

        // At t = 0 the two modes coincide.
        let a0 = zero_t.forward(&x, &[0], None, Some(&cond)).unwrap();
        let b0 = same_t.forward(&x, &[0], None, Some(&cond)).unwrap();
        assert_eq!(a0.to_vec(), b0.to_vec());

        // At t > 0 the conditioned stream sees different timestep features.
        let a = zero_t.forward(&x, &[9], None, Some(&cond)).unwrap();
        let b = same_t.forward(&x, &[9], None, Some(&cond)).unwrap();
        let diff = a
            .to_vec()
            .iter()
            .zip(b.to_vec())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-9, "timestep mode had no effect");

        // Unconditioned passes are untouched by the mode.
        let ua = zero_t.forward(&x, &[9], None, None).unwrap();
        let ub = same_t.forward(&x, &[9], None, None).unwrap();
        assert_eq!(ua.to_vec(), ub.to_vec());
    }

    #[test]
    fn config_defaults_and_application() {
        let xc = XFuseConfig::default();
        assert!(xc.enabled);
        assert_eq!(xc.token_threshold, DESK_FUSION_TOKEN_THRESHOLD);
        assert_eq!(xc.cond_timestep_mode, CondTimestepMode::SameT);
        let mut ucfg = UNetConfig::tiny();
        let custom = XFuseConfig {
            enabled: true,
            token_threshold: 99,
            cond_timestep_mode: CondTimestepMode::ZeroT,
        };
        custom.apply_to(&mut ucfg);
        assert_eq!(ucfg.fusion_token_threshold, 99);
        assert_eq!(ucfg.cond_timestep_mode, CondTimestepMode::ZeroT);
    }
}
