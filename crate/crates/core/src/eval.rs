//! Proxy metrics and the ablation harness.
//!
//! Identity similarity uses a frozen random-feature conv embedder, the
//! perceptual distance a fixed linear multi-scale filter bank, and text
//! alignment a cosine between seeded projections of pooled pixels and the
//! mean text embedding.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::checkpoint::Checkpoint;
use crate::denoiser::{VisualMode, EVAL_PROMPTS, GENERIC_WORD, PSEUDO_WORD};
use crate::diffusion::{sample, SamplerConfig};
use crate::error::{shape_err, Error, Result};
use crate::numerics::kernels::{self, ConvGeom};
use crate::numerics::{SeededRng, Tensor};
use crate::trainer::{fine_tune, IdentityDataset, TrainConfig, TrainSample};
use crate::vgm::{MappingConfig, VisualEmbedding};
use crate::wplus::WPlusVector;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity of two feature vectors, in `[-1, 1]`; zero vectors score 0.
pub fn score_features(a: &[f32], b: &[f32]) -> f64 {
    let wa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let wb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    cosine(&wa, &wb)
}

fn check_pair(a: &Tensor<f32>, b: &Tensor<f32>, resolution: usize) -> Result<()> {
    for t in [a, b] {
        if t.shape() != [3, resolution, resolution] {
            return Err(shape_err(
                "metric",
                format!(
                    "image {:?}, metric expects 3x{resolution}x{resolution}",
                    t.shape()
                ),
            ));
        }
    }
    Ok(())
}

/// Frozen seeded metric backbones for one resolution and text width.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSuite {
    resolution: usize,
    id_convs: Vec<(Tensor<f64>, ConvGeom)>,
    clip_image: Tensor<f64>,
    clip_text: Tensor<f64>,
}

const ID_WIDTHS: [usize; 4] = [3, 16, 32, 64];
const CLIP_DIM: usize = 64;
const CLIP_POOL: usize = 8;

impl MetricSuite {
    pub fn new(seed: u64, resolution: usize, text_dim: usize) -> Result<Self> {
        if resolution < CLIP_POOL || !resolution.is_multiple_of(CLIP_POOL) {
            return Err(Error::Config(format!(
                "metric resolution {resolution} must be a multiple of {CLIP_POOL}"
            )));
        }
        let mut rng = SeededRng::derive(seed, 0x3e7c);
        let mut id_convs = Vec::new();
        let mut side = resolution;
        for w in ID_WIDTHS.windows(2) {
            let geom = ConvGeom {
                in_ch: w[0],
                h: side,
                w: side,
                k: 3,
                stride: 2,
            };
            let std = 1.5 / libm::sqrt((w[0] * 9) as f64);
            id_convs.push((rng.normal_tensor(&[w[1], w[0] * 9], std), geom));
            side = geom.out_h();
        }
        let pooled = 3 * CLIP_POOL * CLIP_POOL;
        let clip_image = rng.normal_tensor(&[pooled, CLIP_DIM], 1.0 / libm::sqrt(pooled as f64));
        let clip_text = rng.normal_tensor(&[text_dim, CLIP_DIM], 1.0 / libm::sqrt(text_dim as f64));
        Ok(Self {
            resolution,
            id_convs,
            clip_image,
            clip_text,
        })
    }

    /// Three stride-2 convolutions with `tanh`, flattened.
    pub fn id_features(&self, img: &Tensor<f32>) -> Vec<f64> {
        let mut x: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
        for (w, geom) in &self.id_convs {
            let out_ch = w.shape()[0];
            x = kernels::conv2d(&x, w.data(), out_ch, *geom);
            x.iter_mut().for_each(|v| *v = libm::tanh(*v));
        }
        x
    }

    pub fn id_proxy(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
        check_pair(a, b, self.resolution)?;
        Ok(cosine(&self.id_features(a), &self.id_features(b)))
    }

    pub fn lpips_proxy(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
        check_pair(a, b, self.resolution)?;
        let diff: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x as f64 - y as f64)
            .collect();
        Ok(filter_bank_energy(diff, self.resolution))
    }

    pub fn image_embedding(&self, img: &Tensor<f32>) -> Result<Vec<f64>> {
        check_pair(img, img, self.resolution)?;
        let mut x: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
        let mut side = self.resolution;
        while side > CLIP_POOL {
            x = kernels::avg_pool2(&x, 3, side, side);
            side /= 2;
        }
        Ok(project(&x, &self.clip_image))
    }

    pub fn text_embedding(&self, text: &Tensor<f32>) -> Result<Vec<f64>> {
        let (m, d) = text.dims2()?;
        if d != self.clip_text.shape()[0] || m == 0 {
            return Err(shape_err(
                "clip_t_proxy",
                format!(
                    "text {:?}, expected [m>0, {}]",
                    text.shape(),
                    self.clip_text.shape()[0]
                ),
            ));
        }
        let mut mean = alloc::vec![0.0f64; d];
        for row in text.data().chunks(d) {
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc += v as f64 / m as f64;
            }
        }
        Ok(project(&mean, &self.clip_text))
    }

    pub fn clip_t_proxy(&self, img: &Tensor<f32>, text: &Tensor<f32>) -> Result<f64> {
        Ok(cosine(
            &self.image_embedding(img)?,
            &self.text_embedding(text)?,
        ))
    }
}

fn project(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let n = w.shape()[1];
    kernels::matmul(x, w.data(), 1, x.len(), n)
}

/// Mean energy of identity, horizontal/vertical gradient and Laplacian
/// responses at three scales.
fn filter_bank_energy(mut diff: Vec<f64>, resolution: usize) -> f64 {
    const FILTERS: [[f64; 9]; 4] = [
        [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.0, 0.0],
        [0.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0],
        [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
    ];
    let mut side = resolution;
    let mut total = 0.0;
    let mut scales = 0;
    for _ in 0..3 {
        let plane = side * side;
        let mut acc = 0.0;
        for ch in 0..3 {
            let src = &diff[ch * plane..(ch + 1) * plane];
            for f in &FILTERS {
                for y in 0..side {
                    for x in 0..side {
                        let mut v = 0.0;
                        for (k, &fw) in f.iter().enumerate() {
                            if fw == 0.0 {
                                continue;
                            }
                            let (yy, xx) = (
                                y as isize + k as isize / 3 - 1,
                                x as isize + k as isize % 3 - 1,
                            );
                            if yy >= 0 && xx >= 0 && (yy as usize) < side && (xx as usize) < side {
                                v += fw * src[yy as usize * side + xx as usize];
                            }
                        }
                        acc += v * v;
                    }
                }
            }
        }
        total += acc / (3 * FILTERS.len() * plane) as f64;
        scales += 1;
        if !side.is_multiple_of(2) || side < 4 {
            break;
        }
        diff = kernels::avg_pool2(&diff, 3, side, side);
        side /= 2;
    }
    total / scales as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub id_score: f64,
    pub lpips_proxy: f64,
    pub clip_t_proxy: f64,
    pub samples: usize,
}

impl MetricReport {
    pub fn is_finite(&self) -> bool {
        self.id_score.is_finite() && self.lpips_proxy.is_finite() && self.clip_t_proxy.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Lambda,
    Steps,
    Images,
    ScaVsPca,
    Aug,
    StyleEdit,
}

impl AblationKind {
    pub const ALL: [AblationKind; 6] = [
        AblationKind::Lambda,
        AblationKind::Steps,
        AblationKind::Images,
        AblationKind::ScaVsPca,
        AblationKind::Aug,
        AblationKind::StyleEdit,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationKind::Lambda => "lambda",
            AblationKind::Steps => "steps",
            AblationKind::Images => "images",
            AblationKind::ScaVsPca => "sca-vs-pca",
            AblationKind::Aug => "aug",
            AblationKind::StyleEdit => "style-edit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|k| k.label()).collect();
                Error::Config(format!(
                    "unknown ablation kind {s:?}; valid kinds: {}",
                    valid.join(", ")
                ))
            })
    }

    pub fn default_sweep(self) -> Vec<f64> {
        match self {
            AblationKind::Lambda => (0..=10).map(|i| i as f64 / 10.0).collect(),
            AblationKind::Steps => alloc::vec![400.0, 600.0, 800.0, 1000.0],
            AblationKind::Images => alloc::vec![4.0, 6.0, 8.0, 10.0],
            _ => Vec::new(),
        }
    }
}

/// Published `(ID, LPIPS, CLIP-T)` numbers for a sweep point, where reported.
fn reference_numbers(kind: AblationKind, label: &str) -> Option<(f64, Option<f64>, f64)> {
    let r = match (kind, label) {
        (AblationKind::Steps, "400") => (0.2973, None, 0.1535),
        (AblationKind::Steps, "600") => (0.3112, None, 0.1938),
        (AblationKind::Steps, "800") => (0.3219, None, 0.1265),
        (AblationKind::Steps, "1000") => (0.3390, None, 0.1144),
        (AblationKind::Images, "4") => (0.2457, None, 0.1410),
        (AblationKind::Images, "6") => (0.3112, None, 0.1938),
        (AblationKind::Images, "8") => (0.2888, None, 0.1663),
        (AblationKind::Images, "10") => (0.2883, None, 0.1477),
        (AblationKind::ScaVsPca, "pca") => (0.2235, None, 0.1468),
        (AblationKind::ScaVsPca, "sca") => (0.3112, None, 0.1938),
        (AblationKind::Aug, "off") => (0.2744, Some(0.6412), 0.1649),
        (AblationKind::Aug, "on") => (0.3112, Some(0.5936), 0.1938),
        (AblationKind::StyleEdit, "6+1") => (0.30970, Some(0.61467), 0.18183),
        (AblationKind::StyleEdit, "6") => (0.3112, Some(0.5936), 0.1938),
        _ => return None,
    };
    Some(r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "kind,setting,id,lpips,clip_t,samples,published_id_nonreproducible,published_lpips_nonreproducible,published_clip_t_nonreproducible\n",
        );
        for row in &self.rows {
            let r = &row.report;
            let refs = reference_numbers(self.kind, &row.label);
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{},{},{},{}",
                self.kind.label(),
                row.label,
                r.id_score,
                r.lpips_proxy,
                r.clip_t_proxy,
                r.samples,
                fmt_opt(refs.map(|x| x.0)),
                fmt_opt(refs.and_then(|x| x.1)),
                fmt_opt(refs.map(|x| x.2)),
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// How many of the fixed evaluation prompts to use.
    pub prompts: usize,
    pub samples_per_prompt: usize,
    pub metric_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompts: EVAL_PROMPTS.len(),
            samples_per_prompt: 1,
            metric_seed: 0,
        }
    }
}

/// Samples one identity over the evaluation prompts and scores the batch.
pub fn evaluate(
    ck: &Checkpoint,
    identity: Option<&VisualEmbedding>,
    references: &[Tensor<f32>],
    sampler: &SamplerConfig,
    eval: &EvalConfig,
    metrics: &MetricSuite,
) -> Result<(MetricReport, Vec<Tensor<f32>>)> {
    if references.is_empty() {
        return Err(Error::Contract("evaluation needs reference images".into()));
    }
    if eval.prompts == 0 || eval.prompts > EVAL_PROMPTS.len() || eval.samples_per_prompt == 0 {
        return Err(Error::Config(format!(
            "evaluation needs 1..={} prompts and at least one sample each",
            EVAL_PROMPTS.len()
        )));
    }
    let sched = ck.noise_schedule();
    let mut images = Vec::new();
    let (mut id, mut lp, mut ct) = (0.0, 0.0, 0.0);
    let mut maps = Vec::new();
    for (p, prompt) in EVAL_PROMPTS.iter().take(eval.prompts).enumerate() {
        let text = ck.text.encode_prompt(prompt, PSEUDO_WORD);
        let caption = ck.text.encode_prompt(prompt, GENERIC_WORD);
        for s in 0..eval.samples_per_prompt {
            let cfg = SamplerConfig {
                seed: sampler
                    .seed
                    .wrapping_add((p * eval.samples_per_prompt + s) as u64),
                ..sampler.clone()
            };
            let img = sample(&ck.net, &text, identity, &cfg, &sched, false, &mut maps)?
                .map(|v| v.clamp(-1.0, 1.0));
            for r in references {
                id += metrics.id_proxy(&img, r)?;
                lp += metrics.lpips_proxy(&img, r)?;
            }
            ct += metrics.clip_t_proxy(&img, &caption)?;
            images.push(img);
        }
    }
    let n = images.len() as f64;
    let pairs = n * references.len() as f64;
    Ok((
        MetricReport {
            id_score: id / pairs,
            lpips_proxy: lp / pairs,
            clip_t_proxy: ct / n,
            samples: images.len(),
        },
        images,
    ))
}

/// Everything a sweep needs besides the swept setting.
#[derive(Clone, Debug)]
pub struct AblationSetup {
    /// Pretrained base without visual blocks.
    pub base: Checkpoint,
    pub mapping: MappingConfig,
    /// Target identity images, at least as many as the largest image sweep point.
    pub train_images: IdentityDataset,
    /// Extra image appended in the style-edit setting.
    pub style_extra: TrainSample,
    pub identity: WPlusVector,
    pub references: Vec<Tensor<f32>>,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub default_images: usize,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub table: AblationTable,
    /// Samples per row, in row order.
    pub grids: Vec<(String, Vec<Tensor<f32>>)>,
}

fn trim_label(v: f64) -> String {
    if libm::trunc(v) == v {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Trains and scores every point of a sweep. An empty `sweep` uses the
/// kind's default values.
pub fn run_ablation(
    kind: AblationKind,
    setup: &AblationSetup,
    sweep: &[f64],
) -> Result<AblationOutcome> {
    let values = if sweep.is_empty() {
        kind.default_sweep()
    } else {
        sweep.to_vec()
    };
    let metrics = MetricSuite::new(
        setup.eval.metric_seed,
        setup.base.net.config().resolution,
        setup.base.net.config().context_dim,
    )?;
    let personalize = |mode: VisualMode| {
        setup
            .base
            .personalize(mode, setup.mapping.clone(), setup.train.seed)
    };
    let default_data = setup.train_images.take(setup.default_images);
    let mut rows = Vec::new();
    let mut grids = Vec::new();
    let mut score = |label: String, ck: &Checkpoint, sampler: &SamplerConfig| -> Result<()> {
        let vis = ck.visual_prompt(&setup.identity)?;
        let (report, imgs) = evaluate(
            ck,
            Some(&vis),
            &setup.references,
            sampler,
            &setup.eval,
            &metrics,
        )?;
        grids.push((label.clone(), imgs));
        rows.push(AblationRow { label, report });
        Ok(())
    };

    match kind {
        AblationKind::Lambda => {
            let ck = fine_tune(
                &personalize(VisualMode::Sca)?,
                &default_data,
                &setup.train,
                &[],
            )?
            .checkpoint;
            for &l in &values {
                let sampler = SamplerConfig {
                    lambda: l,
                    ..setup.sampler.clone()
                };
                sampler.validate(&ck.noise_schedule())?;
                score(format!("{l:.1}"), &ck, &sampler)?;
            }
        }
        AblationKind::Steps => {
            let steps: Vec<usize> = values.iter().map(|&v| v as usize).collect();
            let max = steps.iter().copied().max().unwrap_or(0);
            let cfg = TrainConfig {
                steps: max,
                ..setup.train.clone()
            };
            let out = fine_tune(&personalize(VisualMode::Sca)?, &default_data, &cfg, &steps)?;
            for &s in &steps {
                let ck = if s == max {
                    &out.checkpoint
                } else {
                    out.snapshots
                        .iter()
                        .find(|(at, _)| *at == s)
                        .map(|(_, c)| c)
                        .ok_or_else(|| Error::Config(format!("step count {s} must be positive")))?
                };
                score(trim_label(s as f64), ck, &setup.sampler)?;
            }
        }
        AblationKind::Images => {
            for &v in &values {
                let n = v as usize;
                if n == 0 || n > setup.train_images.len() {
                    return Err(Error::Config(format!(
                        "image count {n} outside 1..={}",
                        setup.train_images.len()
                    )));
                }
                let ck = fine_tune(
                    &personalize(VisualMode::Sca)?,
                    &setup.train_images.take(n),
                    &setup.train,
                    &[],
                )?
                .checkpoint;
                score(trim_label(v), &ck, &setup.sampler)?;
            }
        }
        AblationKind::ScaVsPca => {
            for mode in [VisualMode::Sca, VisualMode::Parallel] {
                let ck =
                    fine_tune(&personalize(mode)?, &default_data, &setup.train, &[])?.checkpoint;
                score(mode.label().to_string(), &ck, &setup.sampler)?;
            }
        }
        AblationKind::Aug => {
            let off = TrainConfig {
                p_drop_text: 0.0,
                p_drop_visual: 0.0,
                wplus_noise_sigma: 0.0,
                ..setup.train.clone()
            };
            for (label, cfg) in [("off", &off), ("on", &setup.train)] {
                let ck =
                    fine_tune(&personalize(VisualMode::Sca)?, &default_data, cfg, &[])?.checkpoint;
                score(label.to_string(), &ck, &setup.sampler)?;
            }
        }
        AblationKind::StyleEdit => {
            let with_extra = default_data.clone().with_extra(setup.style_extra.clone())?;
            let plain_label = trim_label(setup.default_images as f64);
            for (label, data) in [
                (format!("{plain_label}+1"), &with_extra),
                (plain_label.clone(), &default_data),
            ] {
                let ck =
                    fine_tune(&personalize(VisualMode::Sca)?, data, &setup.train, &[])?.checkpoint;
                score(label, &ck, &setup.sampler)?;
            }
        }
    }
    Ok(AblationOutcome {
        table: AblationTable { kind, rows },
        grids,
    })
}
