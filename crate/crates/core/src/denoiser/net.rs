use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{
    attend, capture_map, combine_graph, init_sca_from_text, AttentionMap, AttnKind,
    CrossAttentionBlock, ProjVars,
};
use crate::diffusion::{BetaSchedule, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Scalar, SeededRng, Tensor, Var};
use crate::params::{Binder, ParamSet, TrainPolicy};
use crate::vgm::VisualEmbedding;

use super::text::ToyTextEncoder;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Square image side; the latent is the `3×R×R` image itself.
    pub resolution: usize,
    /// Channel width of the outer blocks; the inner ones use twice this.
    pub base_channels: usize,
    /// Text token width.
    pub context_dim: usize,
    pub visual_tokens: usize,
    pub visual_dim: usize,
    pub heads: usize,
    /// Width of the sinusoidal timestep features.
    pub time_dim: usize,
    /// Number of diffusion steps `T`.
    pub timesteps: usize,
    /// Noise schedule the output head is tied to.
    pub schedule: BetaSchedule,
}

impl DenoiserConfig {
    pub fn toy() -> Self {
        Self {
            resolution: 32,
            base_channels: 32,
            context_dim: 64,
            visual_tokens: 4,
            visual_dim: 64,
            heads: 1,
            time_dim: 64,
            timesteps: 1000,
            schedule: BetaSchedule::Linear,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule, self.timesteps, 1e-4, 0.02)
    }

    fn time_hidden(&self) -> usize {
        2 * self.time_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "resolution {} must be a positive multiple of 4",
                self.resolution
            )));
        }
        if self.base_channels == 0 || self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(
                "channel and time widths must be positive, time width even".into(),
            ));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        self.noise_schedule().map(|_| ())
    }
}

/// How the visual prompt enters each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisualMode {
    /// Text cross-attention only.
    Off,
    /// Style cross-attention queried by the text block's output.
    Sca,
    /// Visual attention queried by the hidden state, in parallel with text.
    Parallel,
}

impl VisualMode {
    pub fn label(self) -> &'static str {
        match self {
            VisualMode::Off => "off",
            VisualMode::Sca => "sca",
            VisualMode::Parallel => "pca",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(VisualMode::Off),
            "sca" => Ok(VisualMode::Sca),
            "pca" => Ok(VisualMode::Parallel),
            other => Err(Error::Config(format!(
                "unknown visual mode {other:?} (off, sca, pca)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub lambda: f64,
    /// Record every softmax map, tagged with this sampler step.
    pub capture: bool,
    pub step: Option<usize>,
}

impl ForwardOptions {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            capture: false,
            step: None,
        }
    }
}

/// Block name, input and output width multipliers, resolution divisor.
const BLOCKS: [(&str, usize, usize, usize); 5] = [
    ("down1", 1, 1, 1),
    ("down2", 1, 2, 2),
    ("mid", 2, 2, 4),
    ("up1", 2, 1, 2),
    ("up2", 1, 1, 1),
];

pub fn block_names() -> impl Iterator<Item = &'static str> {
    BLOCKS.iter().map(|b| b.0)
}

/// Encoder–decoder noise predictor with a text/visual attention pair per block.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    params: ParamSet,
    mode: VisualMode,
}

/// `[sin(t·f_0) … sin(t·f_{n-1}), cos(t·f_0) …]` with geometric frequencies.
pub fn timestep_features(t: usize, dim: usize) -> Tensor<f32> {
    let half = dim / 2;
    let mut out = alloc::vec![0.0f32; dim];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        let arg = t as f64 * freq;
        out[i] = libm::sin(arg) as f32;
        out[half + i] = libm::cos(arg) as f32;
    }
    Tensor::new(&[1, dim], out).unwrap()
}

fn conv_init(rng: &mut SeededRng, out: usize, inp: usize, gain: f64) -> Tensor<f32> {
    let fan_in = (inp * 9) as f64;
    rng.normal_tensor(&[out, inp, 3, 3], gain / libm::sqrt(fan_in))
}

fn linear_init(rng: &mut SeededRng, inp: usize, out: usize) -> Tensor<f32> {
    rng.normal_tensor(&[inp, out], 1.0 / libm::sqrt(inp as f64))
}

impl DenoiserNet {
    /// Seeded base network without visual blocks.
    pub fn init(seed: u64, config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(seed, 0xde05);
        let c = config.base_channels;
        let (td, th) = (config.time_dim, config.time_hidden());
        let mut p = ParamSet::new();
        p.insert("stem.w", conv_init(&mut rng, c, 3, 1.0));
        p.insert("stem.b", Tensor::zeros(&[c]));
        let r = config.resolution;
        p.insert("stem.pos", Tensor::zeros(&[c, r, r]));
        p.insert("time.w1", linear_init(&mut rng, td, th));
        p.insert("time.b1", Tensor::zeros(&[th]));
        p.insert("time.w2", linear_init(&mut rng, th, th));
        p.insert("time.b2", Tensor::zeros(&[th]));
        for (name, i, o, _) in BLOCKS {
            let (ci, co) = (i * c, o * c);
            p.insert(
                format!("{name}.conv.w"),
                conv_init(&mut rng, co, ci, libm::sqrt(2.0)),
            );
            p.insert(format!("{name}.conv.b"), Tensor::zeros(&[co]));
            p.insert(format!("{name}.res.w"), conv_init(&mut rng, co, co, 1.0));
            p.insert(format!("{name}.res.b"), Tensor::zeros(&[co]));
            p.insert(format!("{name}.temb.w"), linear_init(&mut rng, th, co));
            p.insert(format!("{name}.temb.b"), Tensor::zeros(&[co]));
            CrossAttentionBlock::random(&mut rng, co, config.context_dim, config.heads)?
                .write_params(&mut p, &format!("{name}.text"));
        }
        p.insert("out.w", conv_init(&mut rng, 3, c, 0.1));
        p.insert("out.b", Tensor::zeros(&[3]));
        Ok(Self {
            config,
            params: p,
            mode: VisualMode::Off,
        })
    }

    /// Rebuilds from stored tensors, checking that every expected name is present.
    pub fn from_params(config: DenoiserConfig, params: ParamSet, mode: VisualMode) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(0, config.clone())?;
        let mut expected = reference.params.clone();
        if mode != VisualMode::Off {
            expected = reference.attach(mode)?.params;
        }
        for (name, t) in expected.iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(shape_err(
                    "denoiser",
                    format!("{name} is {:?}, expected {:?}", got.shape(), t.shape()),
                ));
            }
        }
        let mut own = ParamSet::new();
        for (name, _) in expected.iter() {
            own.insert(name.clone(), params.require(name)?.clone());
        }
        Ok(Self {
            config,
            params: own,
            mode,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn mode(&self) -> VisualMode {
        self.mode
    }

    /// Adds a visual block next to every text block, its projections copied
    /// bitwise from that text block.
    pub fn attach(&self, mode: VisualMode) -> Result<Self> {
        if mode == VisualMode::Off {
            return Ok(self.without_visual());
        }
        let mut next = self.without_visual();
        for name in block_names() {
            let text = CrossAttentionBlock::from_params(
                &self.params,
                &format!("{name}.text"),
                self.config.heads,
            )?;
            init_sca_from_text(&text, self.config.visual_dim)?
                .0
                .write_params(&mut next.params, &format!("{name}.sca"));
        }
        next.mode = mode;
        Ok(next)
    }

    pub fn attach_sca(&self) -> Result<Self> {
        self.attach(VisualMode::Sca)
    }

    /// The same network with every visual block removed.
    pub fn without_visual(&self) -> Self {
        let mut params = self.params.clone();
        params.remove_prefix_matching(|n| n.contains(".sca."));
        Self {
            config: self.config.clone(),
            params,
            mode: VisualMode::Off,
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.timesteps {
            return Err(Error::Range(format!(
                "timestep {t} outside [1, {}]",
                self.config.timesteps
            )));
        }
        Ok(())
    }

    pub fn null_text(&self) -> Tensor<f32> {
        Tensor::zeros(&[ToyTextEncoder::MAX_LEN, self.config.context_dim])
    }

    pub fn null_visual(&self) -> VisualEmbedding {
        VisualEmbedding::null(self.config.visual_tokens, self.config.visual_dim)
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        let r = self.config.resolution;
        if shape != [3, r, r] {
            return Err(shape_err(
                "denoiser",
                format!("latent {shape:?}, network resolution is 3x{r}x{r}"),
            ));
        }
        Ok(())
    }

    /// Graph-level noise prediction. `visual = None` feeds the zero
    /// embedding when the network carries visual blocks.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_graph<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        binder: &mut Binder<'_>,
        z: Var,
        t: usize,
        text: Var,
        visual: Option<Var>,
        opts: ForwardOptions,
        maps: &mut Vec<AttentionMap>,
    ) -> Result<Var> {
        self.check_latent(g.shape(z))?;
        self.check_timestep(t)?;
        if g.shape(text).len() != 2 || g.shape(text)[1] != self.config.context_dim {
            return Err(shape_err(
                "denoiser",
                format!(
                    "text {:?}, expected [m, {}]",
                    g.shape(text),
                    self.config.context_dim
                ),
            ));
        }
        let visual = match (self.mode, visual) {
            (VisualMode::Off, _) => None,
            _ if opts.lambda == 0.0 => None,
            (_, Some(v)) => {
                let want = [self.config.visual_tokens, self.config.visual_dim];
                if g.shape(v) != want {
                    return Err(shape_err(
                        "denoiser",
                        format!("visual {:?}, expected {want:?}", g.shape(v)),
                    ));
                }
                Some(v)
            }
            (_, None) => Some(g.constant(self.null_visual().tokens().cast::<F>())),
        };

        let feats = g.constant(timestep_features(t, self.config.time_dim).cast::<F>());
        let temb = self.linear(g, binder, feats, "time.w1", "time.b1")?;
        let temb = g.silu(temb);
        let temb = self.linear(g, binder, temb, "time.w2", "time.b2")?;
        let temb = g.silu(temb);

        let mut ctx = BlockCtx {
            text,
            visual,
            temb,
            opts,
            maps,
        };
        let h = self.conv(g, binder, z, "stem")?;
        let pos = binder.get(g, "stem.pos")?;
        let h = g.add(h, pos)?;
        let d1 = self.block(g, binder, &mut ctx, h, 0)?;
        let p1 = g.avg_pool2(d1)?;
        let d2 = self.block(g, binder, &mut ctx, p1, 1)?;
        let p2 = g.avg_pool2(d2)?;
        let m = self.block(g, binder, &mut ctx, p2, 2)?;
        let u = g.upsample2(m)?;
        let u = g.add(u, d2)?;
        let u1 = self.block(g, binder, &mut ctx, u, 3)?;
        let u = g.upsample2(u1)?;
        let u = g.add(u, d1)?;
        let u2 = self.block(g, binder, &mut ctx, u, 4)?;
        let r = self.conv(g, binder, u2, "out")?;
        // Blend by the cumulative signal level a: eps = sqrt(1-a)·z + sqrt(a)·r.
        // The implied clean image sqrt(a)·z - sqrt(1-a)·r stays bounded where a
        // is tiny instead of amplifying head errors by 1/sqrt(a).
        let ab = self.config.noise_schedule()?.alpha_bar(t);
        let zs = g.scale(z, libm::sqrt(1.0 - ab));
        let rs = g.scale(r, libm::sqrt(ab));
        g.add(zs, rs)
    }

    fn linear<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        binder: &mut Binder<'_>,
        x: Var,
        w: &str,
        b: &str,
    ) -> Result<Var> {
        let wv = binder.get(g, w)?;
        let bv = binder.get(g, b)?;
        let y = g.matmul(x, wv)?;
        g.add_row_bias(y, bv)
    }

    fn conv<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        binder: &mut Binder<'_>,
        x: Var,
        prefix: &str,
    ) -> Result<Var> {
        let w = binder.get(g, &format!("{prefix}.w"))?;
        let b = binder.get(g, &format!("{prefix}.b"))?;
        let y = g.conv2d(x, w, 1)?;
        g.add_channel(y, b)
    }

    fn proj<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        binder: &mut Binder<'_>,
        prefix: &str,
    ) -> Result<ProjVars> {
        Ok(ProjVars {
            wq: binder.get(g, &format!("{prefix}.wq"))?,
            wk: binder.get(g, &format!("{prefix}.wk"))?,
            wv: binder.get(g, &format!("{prefix}.wv"))?,
        })
    }

    fn block<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        binder: &mut Binder<'_>,
        ctx: &mut BlockCtx<'_>,
        x: Var,
        index: usize,
    ) -> Result<Var> {
        let name = BLOCKS[index].0;
        let h = self.conv(g, binder, x, &format!("{name}.conv"))?;
        let tproj = self.linear(
            g,
            binder,
            ctx.temb,
            &format!("{name}.temb.w"),
            &format!("{name}.temb.b"),
        )?;
        let (ch, hh, ww) = (g.shape(h)[0], g.shape(h)[1], g.shape(h)[2]);
        let tproj = g.reshape(tproj, &[ch])?;
        let h = g.add_channel(h, tproj)?;
        let h = g.silu(h);
        let r = self.conv(g, binder, h, &format!("{name}.res"))?;
        let r = g.silu(r);
        let h = g.add(h, r)?;

        let flat = g.reshape(h, &[ch, hh * ww])?;
        let tokens = g.transpose(flat)?;
        let text_proj = self.proj(g, binder, &format!("{name}.text"))?;
        let (f_text, probs) = attend(g, tokens, ctx.text, text_proj, self.config.heads)?;
        if ctx.opts.capture {
            ctx.maps
                .push(capture_map(g, &probs, AttnKind::Text, name, ctx.opts.step));
        }
        let f = match ctx.visual {
            None => f_text,
            Some(vis) => {
                let (query, kind) = match self.mode {
                    VisualMode::Parallel => (tokens, AttnKind::Parallel),
                    _ => (f_text, AttnKind::Style),
                };
                let sca_proj = self.proj(g, binder, &format!("{name}.sca"))?;
                let (f_vis, probs) = attend(g, query, vis, sca_proj, self.config.heads)?;
                if ctx.opts.capture {
                    ctx.maps
                        .push(capture_map(g, &probs, kind, name, ctx.opts.step));
                }
                combine_graph(g, f_text, f_vis, ctx.opts.lambda)?
            }
        };
        let f = g.transpose(f)?;
        let f = g.reshape(f, &[ch, hh, ww])?;
        g.add(h, f)
    }

    /// Tensor-level noise prediction with zero embeddings for absent conditions.
    pub fn predict_noise(
        &self,
        z_t: &Tensor<f32>,
        t: usize,
        text: Option<&Tensor<f32>>,
        visual: Option<&VisualEmbedding>,
        lambda: f64,
    ) -> Result<Tensor<f32>> {
        let mut maps = Vec::new();
        self.predict_noise_with(
            z_t,
            t,
            text,
            visual,
            ForwardOptions::with_lambda(lambda),
            &mut maps,
        )
    }

    pub fn predict_noise_with(
        &self,
        z_t: &Tensor<f32>,
        t: usize,
        text: Option<&Tensor<f32>>,
        visual: Option<&VisualEmbedding>,
        opts: ForwardOptions,
        maps: &mut Vec<AttentionMap>,
    ) -> Result<Tensor<f32>> {
        self.check_latent(z_t.shape())?;
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::new(&[&self.params], TrainPolicy::Frozen);
        let z = g.constant(z_t.clone());
        let null = self.null_text();
        let tx = g.constant(text.unwrap_or(&null).clone());
        let vis = visual.map(|v| g.constant(v.tokens().clone()));
        let out = self.forward_graph(&mut g, &mut binder, z, t, tx, vis, opts, maps)?;
        Ok(g.value(out).clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.names()
    }
}

struct BlockCtx<'m> {
    text: Var,
    visual: Option<Var>,
    temb: Var,
    opts: ForwardOptions,
    maps: &'m mut Vec<AttentionMap>,
}

/// Names of every block-level visual projection, for diagnostics.
pub fn visual_param_names() -> Vec<String> {
    let mut out = Vec::new();
    for name in block_names() {
        for p in ["wq", "wk", "wv"] {
            out.push(format!("{name}.sca.{p}"));
        }
    }
    out
}
