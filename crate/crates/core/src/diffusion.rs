//! DDPM noise schedule, forward noising, the noise-prediction loss and the
//! deterministic DDIM sampler with classifier-free guidance.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::AttentionMap;
use crate::denoiser::{DenoiserNet, ForwardOptions};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, SeededRng, Tensor, Var};
use crate::vgm::VisualEmbedding;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BetaSchedule {
    Linear,
    /// Linear in `√β`, as used by latent diffusion models.
    ScaledLinear,
}

impl BetaSchedule {
    pub fn label(self) -> &'static str {
        match self {
            BetaSchedule::Linear => "linear",
            BetaSchedule::ScaledLinear => "scaled-linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(BetaSchedule::Linear),
            "scaled-linear" => Ok(BetaSchedule::ScaledLinear),
            other => Err(Error::Config(format!(
                "unknown beta schedule {other:?} (linear, scaled-linear)"
            ))),
        }
    }
}

/// Per-step tables indexed by `t ∈ [1, T]`; `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: BetaSchedule,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(BetaSchedule::Linear, 1000, 1e-4, 0.02).unwrap()
    }
}

impl NoiseSchedule {
    pub fn new(kind: BetaSchedule, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let frac = |i: usize| {
            if steps == 1 {
                0.0
            } else {
                i as f64 / (steps - 1) as f64
            }
        };
        let betas: Vec<f64> = (0..steps)
            .map(|i| match kind {
                BetaSchedule::Linear => beta_start + (beta_end - beta_start) * frac(i),
                BetaSchedule::ScaledLinear => {
                    let (a, b) = (libm::sqrt(beta_start), libm::sqrt(beta_end));
                    let s = a + (b - a) * frac(i);
                    s * s
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            kind,
            betas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> BetaSchedule {
        self.kind
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
pub fn q_sample(
    z0: &Tensor<f32>,
    t: usize,
    eps: &Tensor<f32>,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    z0.zip_map(eps, "q_sample", |x, e| (a * x as f64 + b * e as f64) as f32)
}

/// One noisy training example: the draw order is `t` then `eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Tensor<f32>,
}

impl NoiseDraw {
    pub fn sample(shape: &[usize], sched: &NoiseSchedule, rng: &mut SeededRng) -> Self {
        let t = 1 + rng.below(sched.steps());
        let eps = rng.normal_tensor(shape, 1.0);
        Self { t, eps }
    }
}

/// Mean squared error between sampled noise and the prediction made by
/// `predict(graph, z_t, t)`, returned as a graph node.
pub fn training_loss<F: Scalar>(
    g: &mut Graph<F>,
    z0: &Tensor<f32>,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
    predict: impl FnOnce(&mut Graph<F>, Var, usize) -> Result<Var>,
) -> Result<Var> {
    let draw = NoiseDraw::sample(z0.shape(), sched, rng);
    let z_t = q_sample(z0, draw.t, &draw.eps, sched)?;
    let zv = g.constant(z_t.cast());
    let pred = predict(g, zv, draw.t)?;
    let target = g.constant(draw.eps.cast());
    g.mse(pred, target)
}

/// `eps_uncond + s·(eps_cond − eps_uncond)`; `s = 1` and `s = 0` return
/// the respective branch unchanged.
pub fn cfg_combine(
    eps_cond: &Tensor<f32>,
    eps_uncond: &Tensor<f32>,
    s: f64,
) -> Result<Tensor<f32>> {
    eps_cond.expect_same_shape(eps_uncond, "cfg_combine")?;
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    eps_cond.zip_map(eps_uncond, "cfg_combine", |c, u| {
        (u as f64 + s * (c as f64 - u as f64)) as f32
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub eta: f64,
    pub guidance_scale: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Clamp the predicted clean image to `[-1, 1]` before each update.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 50,
            eta: 0.0,
            guidance_scale: 7.5,
            lambda: 0.4,
            seed: 0,
            clip_x0: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.ddim_steps == 0 || self.ddim_steps > sched.steps() {
            return Err(Error::Config(format!(
                "ddim_steps {} outside [1, {}]",
                self.ddim_steps,
                sched.steps()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::Config("guidance scale must be finite".into()));
        }
        Ok(())
    }
}

/// `t_i = ⌊i·T/S⌋` for `i = S…1`, descending and ending at `T` on top.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (1..=steps).rev().map(|i| i * total / steps).collect()
}

/// Closed-form DDIM update from `ᾱ_t` to `ᾱ_prev`. `noise` is required when `eta > 0`.
pub fn ddim_step(
    z_t: &Tensor<f32>,
    eps: &Tensor<f32>,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
    eta: f64,
    clip_x0: bool,
    noise: Option<&Tensor<f32>>,
) -> Result<Tensor<f32>> {
    z_t.expect_same_shape(eps, "ddim_step")?;
    let sigma = eta
        * libm::sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t))
        * libm::sqrt(1.0 - alpha_bar_t / alpha_bar_prev);
    if sigma > 0.0 && noise.is_none() {
        return Err(Error::Contract("stochastic DDIM step without noise".into()));
    }
    let (sa, sb) = (libm::sqrt(alpha_bar_t), libm::sqrt(1.0 - alpha_bar_t));
    let sa_prev = libm::sqrt(alpha_bar_prev);
    let dir = libm::sqrt((1.0 - alpha_bar_prev - sigma * sigma).max(0.0));
    let mut out = Vec::with_capacity(z_t.len());
    for (i, (&z, &e)) in z_t.data().iter().zip(eps.data()).enumerate() {
        let (z, mut e) = (z as f64, e as f64);
        let mut x0 = (z - sb * e) / sa;
        if clip_x0 {
            x0 = x0.clamp(-1.0, 1.0);
            e = (z - sa * x0) / sb;
        }
        let mut v = sa_prev * x0 + dir * e;
        if let Some(n) = noise.filter(|_| sigma > 0.0) {
            v += sigma * n.data()[i] as f64;
        }
        out.push(v as f32);
    }
    Tensor::new(z_t.shape(), out)
}

/// Iterates the DDIM update from seeded Gaussian noise. `eps_model(z_t, t, i)`
/// returns the (already guided) noise estimate at sampler step `i`.
pub fn ddim_sample(
    shape: &[usize],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    mut eps_model: impl FnMut(&Tensor<f32>, usize, usize) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    cfg.validate(sched)?;
    let mut rng = SeededRng::derive(cfg.seed, 0x5a3e);
    let mut z = rng.normal_tensor(shape, 1.0);
    let ts = ddim_timesteps(sched.steps(), cfg.ddim_steps);
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = eps_model(&z, t, i)?;
        let noise = (cfg.eta > 0.0).then(|| rng.normal_tensor(shape, 1.0));
        z = ddim_step(
            &z,
            &eps,
            sched.alpha_bar(t),
            sched.alpha_bar(prev),
            cfg.eta,
            cfg.clip_x0,
            noise.as_ref(),
        )?;
    }
    Ok(z)
}

/// Guided noise estimate; the unconditional branch drops text and visual together.
#[allow(clippy::too_many_arguments)]
pub fn guided_eps(
    net: &DenoiserNet,
    z_t: &Tensor<f32>,
    t: usize,
    text: &Tensor<f32>,
    visual: Option<&VisualEmbedding>,
    cfg: &SamplerConfig,
    opts: ForwardOptions,
    maps: &mut Vec<AttentionMap>,
) -> Result<Tensor<f32>> {
    let cond = net.predict_noise_with(z_t, t, Some(text), visual, opts, maps)?;
    if cfg.guidance_scale == 1.0 {
        return Ok(cond);
    }
    let uncond = net.predict_noise_with(z_t, t, None, None, opts, maps)?;
    cfg_combine(&cond, &uncond, cfg.guidance_scale)
}

/// Full text-and-identity sampling run. With `capture`, every softmax map of
/// every network call is appended to `maps`.
pub fn sample(
    net: &DenoiserNet,
    text: &Tensor<f32>,
    visual: Option<&VisualEmbedding>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    capture: bool,
    maps: &mut Vec<AttentionMap>,
) -> Result<Tensor<f32>> {
    let r = net.config().resolution;
    ddim_sample(&[3, r, r], cfg, sched, |z, t, i| {
        let opts = ForwardOptions {
            lambda: cfg.lambda,
            capture,
            step: Some(i),
        };
        guided_eps(net, z, t, text, visual, cfg, opts, maps)
    })
}
