//! Noise schedules, forward noising, guidance, and samplers.
//!
//! The denoiser is abstracted behind [`Denoiser`] so both the real UNet and
//! small analytic reference models can drive the samplers. All sampler
//! randomness goes through seeded streams; DDIM with `eta = 0` is a pure
//! function of (parameters, conditioning, initial noise, steps).


use crate::error::{Error, Result};
use crate::numerics::{rng, without_graph, Element, Tensor};

/// Beta spacing family for [`make_schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Parameter-free test schedule: `beta_t = (t + 1/2) / T`, spanning (0,1).
    Linear,
    /// Square-root-spaced betas between [`SD_BETA_START`] and [`SD_BETA_END`],
    /// the spacing family of the full-scale initialization model's scheduler.
    ScaledLinear,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "scaled-linear" | "scaled_linear" => Ok(ScheduleKind::ScaledLinear),
            other => Err(Error::format(format!("unknown schedule kind '{other}'"))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::ScaledLinear => "scaled-linear",
        }
    }
}

/// Beta endpoints for the scaled-linear family.
pub const SD_BETA_START: f64 = 0.00085;
pub const SD_BETA_END: f64 = 0.012;
/// Full-scale default step count.
pub const FULL_TIMESTEPS: usize = 1000;
/// Desk-scale default step count.
pub const TOY_TIMESTEPS: usize = 100;

/// Diffusion noise schedule: per-step variances and their cumulative signal
/// fractions.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Builds a schedule of the given family.
pub fn make_schedule(kind: ScheduleKind, timesteps: usize) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::contract("schedule needs at least one timestep".to_string()));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..timesteps)
            .map(|t| (t as f64 + 0.5) / timesteps as f64)
            .collect(),
        ScheduleKind::ScaledLinear => {
            let (s0, s1) = (SD_BETA_START.sqrt(), SD_BETA_END.sqrt());
            (0..timesteps)
                .map(|t| {
                    let frac = if timesteps == 1 {
                        0.0
                    } else {
                        t as f64 / (timesteps - 1) as f64
                    };
                    let s = s0 + (s1 - s0) * frac;
                    s * s
                })
                .collect()
        }
    };
    NoiseSchedule::from_betas(kind, betas)
}

impl NoiseSchedule {
    /// Builds from explicit betas, validating all invariants.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::contract("schedule needs at least one timestep".to_string()));
        }
        let mut alphas = Vec::with_capacity(betas.len());
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut running = 1.0f64;
        let mut prev_bar = 1.0f64 + 1e-15;
        for (t, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::contract(format!(
                    "beta[{t}] = {b} outside (0,1)"
                )));
            }
            let a = 1.0 - b;
            running *= a;
            if !(running > 0.0 && running <= 1.0 && running < prev_bar) {
                return Err(Error::numerical(format!(
                    "alpha_bar[{t}] = {running} violates strict decrease in (0,1]"
                )));
            }
            prev_bar = running;
            alphas.push(a);
            alpha_bars.push(running);
        }
        Ok(NoiseSchedule {
            kind,
            timesteps: betas.len(),
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::contract(format!("timestep {t} out of range 0..{}", self.timesteps)))
    }
}

/// `x_t = sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps` for an explicit
/// signal fraction.
pub fn add_noise_with<E: Element>(x0: &Tensor<E>, eps: &Tensor<E>, alpha_bar: f64) -> Result<Tensor<E>> {
    if x0.shape() != eps.shape() {
        return Err(Error::dim(format!(
            "add_noise: x0 {:?} and eps {:?} must match",
            x0.shape(),
            eps.shape()
        )));
    }
    let a = E::from_f64(alpha_bar.sqrt());
    let b = E::from_f64((1.0 - alpha_bar).sqrt());
    x0.scale(a)?.add(&eps.scale(b)?)
}

/// Forward noising at schedule step `t`.
pub fn add_noise<E: Element>(
    x0: &Tensor<E>,
    eps: &Tensor<E>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<E>> {
    add_noise_with(x0, eps, schedule.alpha_bar(t)?)
}

/// Classifier-free guidance combination:
/// `eps_uncond + scale * (eps_cond - eps_uncond)`.
pub fn cfg_predict<E: Element>(
    eps_cond: &Tensor<E>,
    eps_uncond: &Tensor<E>,
    scale: f64,
) -> Result<Tensor<E>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::dim(format!(
            "cfg_predict: {:?} vs {:?}",
            eps_cond.shape(),
            eps_uncond.shape()
        )));
    }
    let diff = eps_cond.sub(eps_uncond)?;
    eps_uncond.add(&diff.scale(E::from_f64(scale))?)
}

/// Guidance settings used at training (text dropout) and sampling (scale).
#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    /// Guidance scale; 1 disables the unconditional branch arithmetic.
    pub scale: f64,
    /// Probability of dropping the caption for a training example.
    pub drop_text_prob: f64,
    /// When true the unconditional branch keeps the conditioned image
    /// (scene rule); when false it drops both text and image.
    pub always_condition_image: bool,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 0.0 {
            return Err(Error::contract(format!("guidance scale {} < 0", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.drop_text_prob) {
            return Err(Error::contract(format!(
                "drop_text_prob {} outside [0,1]",
                self.drop_text_prob
            )));
        }
        Ok(())
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            scale: DEFAULT_GUIDANCE_SCALE,
            drop_text_prob: DEFAULT_TEXT_DROPOUT,
            always_condition_image: true,
        }
    }
}

/// Default guidance scale for retrieval/crop modes.
pub const DEFAULT_GUIDANCE_SCALE: f64 = 3.0;
/// Higher guidance scale used in scene mode.
pub const SCENE_GUIDANCE_SCALE: f64 = 4.0;
/// Caption dropout ratio during conditional training.
pub const DEFAULT_TEXT_DROPOUT: f64 = 0.10;
/// Default DDIM step count at full scale.
pub const FULL_SAMPLE_STEPS: usize = 250;
/// Noising fraction for the init-image baseline.
pub const INIT_IMAGE_T0: f64 = 0.05;

/// Conditioning inputs for a sampling run.
#[derive(Debug, Clone, Default)]
pub struct SampleConditioning<E: Element> {
    /// Text tokens `[B, L, D]`.
    pub text: Option<Tensor<E>>,
    /// Conditioned image `[B, C, H, W]`.
    pub image: Option<Tensor<E>>,
}

impl<E: Element> SampleConditioning<E> {
    pub fn none() -> Self {
        SampleConditioning {
            text: None,
            image: None,
        }
    }
}

/// A denoising model: predicts the noise component of `x_t`.
pub trait Denoiser<E: Element> {
    /// `[channels, height, width]` of the images the model works on.
    fn image_shape(&self) -> [usize; 3];

    /// Predicts eps for a batch `[B,C,H,W]` at timestep `t`, optionally
    /// conditioned on text tokens `[B,L,D]` and/or an image `[B,C,H,W]`.
    fn predict_eps(
        &self,
        x_t: &Tensor<E>,
        t: usize,
        text: Option<&Tensor<E>>,
        conditioned: Option<&Tensor<E>>,
    ) -> Result<Tensor<E>>;
}

/// Guided prediction: runs the conditional and (when needed) unconditional
/// branches and combines them. The unconditional branch always drops the
/// text; it keeps the conditioned image unless `always_condition_image` is
/// false.
pub fn guided_eps<E: Element, D: Denoiser<E> + ?Sized>(
    model: &D,
    x_t: &Tensor<E>,
    t: usize,
    cond: &SampleConditioning<E>,
    guidance: &GuidanceConfig,
) -> Result<Tensor<E>> {
    guidance.validate()?;
    let has_text = cond.text.is_some();
    let image = cond.image.as_ref();
    if !has_text || (guidance.scale - 1.0).abs() < 1e-12 {
        // Nothing to contrast against (or scale 1 makes the branches cancel).
        return model.predict_eps(x_t, t, cond.text.as_ref(), image);
    }
    let eps_c = model.predict_eps(x_t, t, cond.text.as_ref(), image)?;
    let uncond_image = if guidance.always_condition_image { image } else { None };
    let eps_u = model.predict_eps(x_t, t, None, uncond_image)?;
    cfg_predict(&eps_c, &eps_u, guidance.scale)
}

/// Ascending sampling timesteps for a fresh run: `i * (T / steps)`.
fn ddim_timesteps(t_total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::contract("sampler needs at least one step".to_string()));
    }
    if steps > t_total {
        return Err(Error::contract(format!(
            "sampler steps {steps} exceed schedule length {t_total}"
        )));
    }
    let ratio = t_total / steps;
    Ok((0..steps).map(|i| i * ratio).collect())
}

/// Ascending timesteps for a resumed run over `[0, hi]`, at most `n` of them.
fn resume_timesteps(hi: usize, n: usize) -> Vec<usize> {
    let n = n.clamp(1, hi + 1);
    if n == 1 {
        return vec![hi];
    }
    let mut ts: Vec<usize> = (0..n)
        .map(|i| ((i as f64) * (hi as f64) / ((n - 1) as f64)).floor() as usize)
        .collect();
    ts.dedup();
    ts
}

/// One DDIM update from timestep `t` down to signal fraction
/// `alpha_bar_prev` (1.0 on the final step). `noise` is consumed only when
/// `eta > 0`.
pub fn ddim_step<E: Element>(
    x_t: &Tensor<E>,
    eps_hat: &Tensor<E>,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
    eta: f64,
    noise: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let sqrt_ab = alpha_bar_t.sqrt();
    let sqrt_one_minus = (1.0 - alpha_bar_t).sqrt();
    // x0 estimate from the eps parameterization.
    let x0_pred = x_t
        .sub(&eps_hat.scale(E::from_f64(sqrt_one_minus))?)?
        .scale(E::from_f64(1.0 / sqrt_ab))?;

    let sigma = if eta > 0.0 && alpha_bar_prev < 1.0 {
        eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)).sqrt()
            * (1.0 - alpha_bar_t / alpha_bar_prev).sqrt()
    } else {
        0.0
    };
    let dir_coef = (1.0 - alpha_bar_prev - sigma * sigma).max(0.0).sqrt();
    let mut x_prev = x0_pred
        .scale(E::from_f64(alpha_bar_prev.sqrt()))?
        .add(&eps_hat.scale(E::from_f64(dir_coef))?)?;
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| {
            Error::contract("ddim_step with eta > 0 requires a noise tensor".to_string())
        })?;
        x_prev = x_prev.add(&z.scale(E::from_f64(sigma))?)?;
    }
    Ok(x_prev)
}

fn run_ddim<E: Element, D: Denoiser<E> + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    cond: &SampleConditioning<E>,
    guidance: &GuidanceConfig,
    mut x: Tensor<E>,
    timesteps: &[usize],
    eta: f64,
    seed: u64,
) -> Result<Tensor<E>> {
    for (i, &t) in timesteps.iter().enumerate().rev() {
        let eps_hat = guided_eps(model, &x, t, cond, guidance)?;
        let alpha_bar_prev = if i == 0 {
            1.0
        } else {
            schedule.alpha_bar(timesteps[i - 1])?
        };
        let noise = if eta > 0.0 {
            let mut r = rng::stream_keyed(seed, "ddim-step-noise", &[t as u64]);
            Some(rng::normal_tensor::<E, _>(&mut r, x.shape())?)
        } else {
            None
        };
        x = ddim_step(&x, &eps_hat, schedule.alpha_bar(t)?, alpha_bar_prev, eta, noise.as_ref())?;
        if !x.all_finite() {
            return Err(Error::numerical(format!(
                "ddim produced non-finite values at timestep {t}"
            )));
        }
    }
    Ok(x)
}

/// DDIM sampling from pure noise. Deterministic for `eta = 0`.
pub fn ddim_sample<E: Element, D: Denoiser<E> + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    cond: &SampleConditioning<E>,
    guidance: &GuidanceConfig,
    batch: usize,
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<Tensor<E>> {
    if eta < 0.0 {
        return Err(Error::contract(format!("eta {eta} must be nonnegative")));
    }
    let ts = ddim_timesteps(schedule.timesteps, steps)?;
    let [c, h, w] = model.image_shape();
    without_graph(|| {
        let mut r = rng::stream(seed, "ddim-init-noise");
        let x = rng::normal_tensor::<E, _>(&mut r, &[batch, c, h, w])?;
        run_ddim(model, schedule, cond, guidance, x, &ts, eta, seed)
    })
}

/// DDIM sampling resumed from a partially noised image at `start_step`
/// (as produced by [`init_image_start`]). Uses at most `steps` updates,
/// spaced over `[0, start_step]`.
pub fn ddim_sample_from<E: Element, D: Denoiser<E> + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    cond: &SampleConditioning<E>,
    guidance: &GuidanceConfig,
    x_start: &Tensor<E>,
    start_step: usize,
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<Tensor<E>> {
    if start_step >= schedule.timesteps {
        return Err(Error::contract(format!(
            "start_step {start_step} out of range 0..{}",
            schedule.timesteps
        )));
    }
    let scaled = (steps * (start_step + 1)).div_ceil(schedule.timesteps).max(1);
    let ts = resume_timesteps(start_step, scaled.min(steps));
    without_graph(|| run_ddim(model, schedule, cond, guidance, x_start.detach(), &ts, eta, seed))
}

/// One ancestral (DDPM) update from `t` to `t-1` given a noise draw `z`.
pub fn ddpm_step<E: Element>(
    x_t: &Tensor<E>,
    eps_hat: &Tensor<E>,
    t: usize,
    schedule: &NoiseSchedule,
    z: &Tensor<E>,
) -> Result<Tensor<E>> {
    let beta = schedule.betas[t];
    let alpha = schedule.alphas[t];
    let alpha_bar = schedule.alpha_bars[t];
    let mean = x_t
        .sub(&eps_hat.scale(E::from_f64(beta / (1.0 - alpha_bar).sqrt()))?)?
        .scale(E::from_f64(1.0 / alpha.sqrt()))?;
    let var = posterior_variance(schedule, t);
    if var > 0.0 {
        mean.add(&z.scale(E::from_f64(var.sqrt()))?)
    } else {
        Ok(mean)
    }
}

/// The ancestral sampler's per-step conditional variance
/// `beta_tilde = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t`.
pub fn posterior_variance(schedule: &NoiseSchedule, t: usize) -> f64 {
    if t == 0 {
        return 0.0;
    }
    (1.0 - schedule.alpha_bars[t - 1]) / (1.0 - schedule.alpha_bars[t]) * schedule.betas[t]
}

/// Ancestral sampling through every schedule step.
pub fn ddpm_sample<E: Element, D: Denoiser<E> + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    cond: &SampleConditioning<E>,
    guidance: &GuidanceConfig,
    batch: usize,
    seed: u64,
) -> Result<Tensor<E>> {
    let [c, h, w] = model.image_shape();
    without_graph(|| {
        let mut r = rng::stream(seed, "ddpm-init-noise");
        let mut x = rng::normal_tensor::<E, _>(&mut r, &[batch, c, h, w])?;
        for t in (0..schedule.timesteps).rev() {
            let eps_hat = guided_eps(model, &x, t, cond, guidance)?;
            let mut rz = rng::stream_keyed(seed, "ddpm-step-noise", &[t as u64]);
            let z = rng::normal_tensor::<E, _>(&mut rz, x.shape())?;
            x = ddpm_step(&x, &eps_hat, t, schedule, &z)?;
            if !x.all_finite() {
                return Err(Error::numerical(format!(
                    "ddpm produced non-finite values at timestep {t}"
                )));
            }
        }
        Ok(x)
    })
}

/// Noises a reference image to the step matching fraction `t0` of the
/// schedule (floor rounding) and returns `(x_t, start_step)` for resuming a
/// sampler. `t0 = 0` returns the reference unchanged.
pub fn init_image_start<E: Element>(
    x_ref: &Tensor<E>,
    t0: f64,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(Tensor<E>, usize)> {
    if !(0.0..=1.0).contains(&t0) {
        return Err(Error::contract(format!("t0 {t0} outside [0,1]")));
    }
    let raw = (t0 * schedule.timesteps as f64).floor() as usize;
    if raw == 0 {
        return Ok((x_ref.detach(), 0));
    }
    let start_step = raw.min(schedule.timesteps - 1);
    let mut r = rng::stream(seed, "init-image-noise");
    let eps = rng::normal_tensor::<E, _>(&mut r, x_ref.shape())?;
    let x_t = without_graph(|| add_noise(x_ref, &eps, start_step, schedule))?;
    Ok((x_t, start_step))
}
