//! Fine-tuning loop: prompt augmentation, the freeze policy, AdamW and
//! snapshotting. Base pretraining reuses the same loop with every
//! non-text parameter trainable.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::checkpoint::Checkpoint;
use crate::denoiser::{ForwardOptions, GENERIC_WORD, PSEUDO_WORD, TRAIN_TEMPLATES};
use crate::diffusion::training_loss;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, SeededRng, Tensor};
use crate::params::{Binder, ParamSet, TrainPolicy};
use crate::wplus::{add_noise, SyntheticIdentity, ToyEncoder, WPlusVector};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub p_drop_text: f64,
    pub p_drop_visual: f64,
    pub wplus_noise_sigma: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Weight of the visual branch while training.
    pub train_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 4,
            steps: 600,
            p_drop_text: 0.3,
            p_drop_visual: 0.5,
            wplus_noise_sigma: 0.05,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 0.0,
            train_lambda: 1.0,
        }
    }
}

impl TrainConfig {
    /// Settings for training the toy base from scratch.
    pub fn pretrain() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 0.0,
            batch_size: 4,
            steps: 3000,
            p_drop_text: 0.1,
            p_drop_visual: 1.0,
            wplus_noise_sigma: 0.0,
            grad_clip: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_drop_text", self.p_drop_text),
            ("p_drop_visual", self.p_drop_visual),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0
            && self.weight_decay >= 0.0
            && self.wplus_noise_sigma >= 0.0
            && self.grad_clip >= 0.0)
        {
            return Err(Error::Config(
                "lr, weight_decay, wplus_noise_sigma and grad_clip must be non-negative".into(),
            ));
        }
        if !((0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0)
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// One training image (`3×R×R` in `[-1, 1]`) and its W+ latent.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Tensor<f32>,
    pub wplus: WPlusVector,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct IdentityDataset {
    samples: Vec<TrainSample>,
}

impl IdentityDataset {
    pub fn new(samples: Vec<TrainSample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            for s in &samples {
                if s.image.shape() != first.image.shape() {
                    return Err(shape_err(
                        "dataset",
                        format!("image {:?} vs {:?}", s.image.shape(), first.image.shape()),
                    ));
                }
                s.wplus.expect_dims(first.wplus.rows(), first.wplus.dim())?;
            }
        }
        Ok(Self { samples })
    }

    /// Appends an extra image, e.g. a style reference.
    pub fn with_extra(mut self, extra: TrainSample) -> Result<Self> {
        self.samples.push(extra);
        Self::new(self.samples)
    }

    pub fn samples(&self) -> &[TrainSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        Self {
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }
}

/// Renders `count` views of `id`, image values mapped to `[-1, 1]`.
pub fn synthetic_samples(
    encoder: &ToyEncoder,
    id: &SyntheticIdentity,
    count: usize,
    seed: u64,
) -> Vec<TrainSample> {
    let mut rng = SeededRng::derive(seed, 0x5a4d);
    (0..count)
        .map(|_| {
            let (img, wplus) = encoder.encode(id, &mut rng);
            TrainSample {
                image: img.map(|v| 2.0 * v - 1.0),
                wplus,
            }
        })
        .collect()
}

/// A sample after prompt augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub image: Tensor<f32>,
    pub template: usize,
    /// `false` when the text prompt was dropped.
    pub text: bool,
    /// `None` when the visual prompt was dropped.
    pub wplus: Option<WPlusVector>,
}

/// Per sample, in draw order: template, text drop, visual drop, W+ noise
/// (only on surviving visual prompts).
pub fn apply_augmentation(
    batch: &[TrainSample],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<Vec<BatchItem>> {
    batch
        .iter()
        .map(|s| {
            let template = rng.below(TRAIN_TEMPLATES.len());
            let text = !rng.bernoulli(cfg.p_drop_text);
            let visual = !rng.bernoulli(cfg.p_drop_visual);
            let wplus = if visual {
                Some(add_noise(&s.wplus, cfg.wplus_noise_sigma, rng)?)
            } else {
                None
            };
            Ok(BatchItem {
                image: s.image.clone(),
                template,
                text,
                wplus,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Moment buffers, one pair per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamWState {
    pub fn new(params: &ParamSet, policy: TrainPolicy) -> Self {
        let moments = params
            .iter()
            .filter(|(n, _)| policy.is_trainable(n))
            .map(|(n, t)| {
                (
                    n.clone(),
                    (alloc::vec![0.0; t.len()], alloc::vec![0.0; t.len()]),
                )
            })
            .collect();
        Self { step: 0, moments }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }
}

/// Decoupled weight decay followed by the bias-corrected Adam update.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    for name in state.moments.keys() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing gradient for {name}")))?;
        let p = params.require(name)?;
        g.expect_same_shape(p, "adamw")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let c2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (name, (m, v)) in state.moments.iter_mut() {
        let g = &grads[name];
        let p = params.get_mut(name).expect("checked above");
        for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gv = gv as f64;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gv;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gv * gv;
            let (mh, vh) = (m[i] / c1, v[i] / c2);
            let x = *pv as f64 * decay;
            *pv = (x - cfg.lr * mh / (libm::sqrt(vh) + cfg.eps)) as f32;
        }
    }
    Ok(())
}

fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, limit: f64) {
    let norm = libm::sqrt(
        grads
            .values()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>(),
    );
    if norm > limit {
        let k = (limit / norm) as f32;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// `(step, batch loss)`, steps counted from 1.
    pub losses: Vec<(usize, f64)>,
    /// Checkpoints taken after the requested step counts.
    pub snapshots: Vec<(usize, Checkpoint)>,
}

struct Stage<'a> {
    policy: TrainPolicy,
    word: &'a str,
}

/// Trains only the visual blocks and the mapping network. The checkpoint
/// must already be personalized.
pub fn fine_tune(
    ck: &Checkpoint,
    dataset: &IdentityDataset,
    cfg: &TrainConfig,
    snapshot_at: &[usize],
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Contract(
            "fine-tuning needs at least one image".into(),
        ));
    }
    if ck.mapping.is_none() || ck.net.mode() == crate::denoiser::VisualMode::Off {
        return Err(Error::Contract(
            "fine-tuning needs a personalized checkpoint (visual blocks and mapping network)"
                .into(),
        ));
    }
    run(
        ck,
        dataset.samples(),
        cfg,
        snapshot_at,
        Stage {
            policy: TrainPolicy::FineTune,
            word: PSEUDO_WORD,
        },
    )
}

/// Trains every non-text parameter of a base checkpoint on generic captions.
pub fn pretrain_base(
    ck: &Checkpoint,
    corpus: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Contract(
            "pretraining needs a non-empty corpus".into(),
        ));
    }
    run(
        ck,
        corpus,
        cfg,
        &[],
        Stage {
            policy: TrainPolicy::All,
            word: GENERIC_WORD,
        },
    )
}

fn run(
    ck: &Checkpoint,
    data: &[TrainSample],
    cfg: &TrainConfig,
    snapshot_at: &[usize],
    stage: Stage<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sched = ck.noise_schedule();
    let mut all = ck.params();
    let mut state = AdamWState::new(&all, stage.policy);
    let opt = cfg.optimizer();
    let mut rng = SeededRng::derive(cfg.seed, 0x7a11);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();
    let null_text = ck.net.null_text();
    let mut maps = Vec::new();

    for step in 1..=cfg.steps {
        let picks: Vec<TrainSample> = (0..cfg.batch_size)
            .map(|_| data[rng.below(data.len())].clone())
            .collect();
        let items = apply_augmentation(&picks, cfg, &mut rng)?;

        let mut g = Graph::<f32>::new();
        let mut binder = Binder::new(&[&all], stage.policy);
        let mut per_item = Vec::with_capacity(items.len());
        for item in &items {
            let text = if item.text {
                ck.text.encode_text(item.template, stage.word)?
            } else {
                null_text.clone()
            };
            let tx = g.constant(text);
            let visual = match (&ck.mapping, &item.wplus) {
                (Some(m), Some(w)) => {
                    let wv = g.constant(w.values().clone());
                    Some(m.forward_graph(&mut g, &mut binder, wv)?)
                }
                _ => None,
            };
            let opts = ForwardOptions::with_lambda(cfg.train_lambda);
            per_item.push(training_loss(
                &mut g,
                &item.image,
                &sched,
                &mut rng,
                |g, z, t| {
                    ck.net
                        .forward_graph(g, &mut binder, z, t, tx, visual, opts, &mut maps)
                },
            )?);
        }
        let rows = per_item
            .iter()
            .map(|&l| g.reshape(l, &[1, 1]))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_rows(&rows)?;
        let loss = g.mean(stacked);
        g.backward(loss)?;
        losses.push((step, g.value(loss).data()[0] as f64));

        let mut grads = binder.gradients(&g);
        for name in state.names() {
            if !grads.contains_key(name) {
                grads.insert(name.into(), Tensor::zeros(all.require(name)?.shape()));
            }
        }
        if cfg.grad_clip > 0.0 {
            clip_global_norm(&mut grads, cfg.grad_clip);
        }
        adamw_step(&mut all, &grads, &mut state, &opt)?;

        if snapshot_at.contains(&step) {
            let mut snap = ck.with_params(all.clone())?;
            snap.steps = ck.steps + step;
            snapshots.push((step, snap));
        }
    }

    let mut checkpoint = ck.with_params(all)?;
    checkpoint.steps = ck.steps + cfg.steps;
    Ok(TrainOutcome {
        checkpoint,
        losses,
        snapshots,
    })
}

/// Mean of the first and last `window` losses.
pub fn loss_window_means(losses: &[(usize, f64)], window: usize) -> (f64, f64) {
    let w = window.min(losses.len()).max(1);
    let mean = |s: &[(usize, f64)]| s.iter().map(|l| l.1).sum::<f64>() / s.len().max(1) as f64;
    (
        mean(&losses[..w.min(losses.len())]),
        mean(&losses[losses.len().saturating_sub(w)..]),
    )
}
