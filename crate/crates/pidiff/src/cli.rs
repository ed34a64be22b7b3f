//! Subcommands and their handlers.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use pidiff_core::attention::AttentionMap;
use pidiff_core::checkpoint::{Checkpoint, Profile};
use pidiff_core::denoiser::{VisualMode, PSEUDO_WORD};
use pidiff_core::diffusion::{ddim_timesteps, sample, SamplerConfig};
use pidiff_core::eval::{evaluate, run_ablation, AblationKind, AblationSetup, MetricSuite};
use pidiff_core::numerics::Tensor;
use pidiff_core::trainer::{fine_tune, pretrain_base, IdentityDataset, TrainSample};
use pidiff_core::vgm::VisualEmbedding;
use pidiff_core::wplus::{mix, WPlusVector};

use crate::ckpt::{load_checkpoint, save_checkpoint};
use crate::config::{resolve_seed, RunConfig, SEED_ENV};
use crate::dataset::{load_dataset, select_identity, write_synthetic};
use crate::error::{CliError, CliResult};
use crate::io::{encode_pgm, grid, load_wplus, loss_csv, write_bytes, write_ppm};

pub const EFFECTIVE_CONFIG: &str = "config.txt";
pub const LOSS_CSV: &str = "loss.csv";

#[derive(Parser, Debug)]
#[command(
    name = "pidiff",
    version,
    about = "Identity-personalized toy diffusion: data, training, sampling and ablations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render synthetic identities with their W+ files.
    SynthData(SynthArgs),
    /// Train a base denoiser on every image of a dataset.
    Pretrain(TrainArgs),
    /// Personalize a base checkpoint on one identity.
    Train(TrainArgs),
    /// Sample one image.
    Sample(SampleArgs),
    /// Score an identity over the evaluation prompts.
    Eval(EvalArgs),
    /// Run one ablation sweep.
    Ablate(AblateArgs),
    /// Export attention maps of a sampling run as PGM files.
    AttnMaps(AttnArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed; falls back to the config file, then PIDIFF_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 27)]
    pub identities: usize,
    #[arg(long = "images-per-id", default_value_t = 10)]
    pub images_per_id: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "toy")]
    pub profile: String,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint to start from (train only).
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Identity folder to train on when the dataset holds several.
    #[arg(long)]
    pub identity: Option<String>,
    /// Visual block structure added to a base checkpoint: sca or pca.
    #[arg(long)]
    pub structure: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct PromptArgs {
    /// Index into the training templates.
    #[arg(long = "prompt-template", default_value_t = 0)]
    pub template: usize,
    /// Free-form prompt; overrides --prompt-template.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long = "identity-wplus")]
    pub identity_wplus: Option<PathBuf>,
    /// Second W+ file whose rows after the boundary replace the identity's.
    #[arg(long)]
    pub mix: Option<PathBuf>,
    #[arg(long, default_value_t = 9)]
    pub boundary: usize,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long = "ddim-steps")]
    pub ddim_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset whose identity folder supplies the reference images.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub identity: Option<String>,
    /// W+ of the identity; defaults to the folder's first W+ file.
    #[arg(long = "identity-wplus")]
    pub identity_wplus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub kind: String,
    /// Base checkpoint without visual blocks.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub identity: Option<String>,
    /// Identity lending the extra image of the style-edit setting.
    #[arg(long = "style-identity")]
    pub style_identity: Option<String>,
    /// Comma-separated sweep values; defaults to the kind's grid.
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AttnArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// Comma-separated sampling step indices; defaults to first, middle and last.
    #[arg(long)]
    pub at: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::AttnMaps(a) => attn_maps(a),
    }
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

/// Defaults, then the config file, then the seed chain.
fn load_config(common: &Common, defaults: RunConfig) -> CliResult<RunConfig> {
    let (mut cfg, seen) = match &common.config {
        Some(p) => RunConfig::load(p, defaults)?,
        None => (defaults, BTreeSet::new()),
    };
    let from_file = seen.contains("seed").then_some(cfg.seed);
    let seed = resolve_seed(common.seed, from_file, env_seed().as_deref())?;
    cfg.set_seed(seed);
    Ok(cfg)
}

fn required(v: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    v.clone().ok_or_else(|| {
        CliError::Usage(format!(
            "--{what} is required (flag or `{what}=` config key)"
        ))
    })
}

fn finish_training(
    out: &Path,
    ck: &Checkpoint,
    losses: &[(usize, f64)],
    cfg: &RunConfig,
) -> CliResult<()> {
    save_checkpoint(out, ck)?;
    write_bytes(&out.join(LOSS_CSV), loss_csv(losses).as_bytes())?;
    write_bytes(&out.join(EFFECTIVE_CONFIG), cfg.to_text().as_bytes())?;
    println!("wrote {} ({} steps)", out.display(), ck.steps);
    Ok(())
}

fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) -> CliResult<()> {
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if a.dataset.is_some() {
        cfg.dataset = a.dataset.clone();
    }
    if a.base.is_some() {
        cfg.base = a.base.clone();
    }
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    if a.identity.is_some() {
        cfg.identity = a.identity.clone();
    }
    if let Some(s) = &a.structure {
        cfg.structure = VisualMode::parse(s)?;
    }
    cfg.validate()
}

fn synth_data(a: SynthArgs) -> CliResult<()> {
    let seed = resolve_seed(a.seed, None, env_seed().as_deref())?;
    let profile = Profile::by_name(&a.profile)?;
    write_synthetic(&a.out, a.identities, a.images_per_id, seed, &profile)?;
    println!(
        "wrote {} identities x {} images to {}",
        a.identities,
        a.images_per_id,
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common, RunConfig::pretrain())?;
    apply_train_flags(&mut cfg, &a)?;
    let (dataset, out) = (
        required(&cfg.dataset, "dataset")?,
        required(&cfg.out, "out")?,
    );
    let profile = cfg.profile()?;
    let corpus: Vec<TrainSample> = load_dataset(&dataset, &profile)?
        .into_iter()
        .flat_map(|f| f.samples)
        .collect();
    let mut net = profile.denoiser();
    net.schedule = cfg.schedule;
    let base = Checkpoint::base(&profile, net, cfg.seed)?;
    let (ck, losses) = if cfg.train.steps == 0 {
        (base, Vec::new())
    } else {
        let o = pretrain_base(&base, &corpus, &cfg.train)?;
        (o.checkpoint, o.losses)
    };
    finish_training(&out, &ck, &losses, &cfg)
}

fn checkpoint_profile(ck: &Checkpoint) -> CliResult<Profile> {
    let mut p = Profile::by_name(&ck.profile)?;
    p.base_channels = ck.net.config().base_channels;
    Ok(p)
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common, RunConfig::fine_tune())?;
    apply_train_flags(&mut cfg, &a)?;
    let (dataset, base, out) = (
        required(&cfg.dataset, "dataset")?,
        required(&cfg.base, "base")?,
        required(&cfg.out, "out")?,
    );
    let mut ck = load_checkpoint(&base)?;
    let profile = checkpoint_profile(&ck)?;
    if ck.mapping.is_none() {
        ck = ck.personalize(cfg.structure, profile.mapping(), cfg.seed)?;
    }
    let folders = load_dataset(&dataset, &profile)?;
    let folder = select_identity(&folders, cfg.identity.as_deref())?;
    let data = IdentityDataset::new(folder.samples.clone())?;
    let (ck, losses) = if cfg.train.steps == 0 {
        (ck, Vec::new())
    } else {
        let o = fine_tune(&ck, &data, &cfg.train, &[])?;
        (o.checkpoint, o.losses)
    };
    finish_training(&out, &ck, &losses, &cfg)
}

/// Text condition and optional visual prompt for sample and attn-maps.
fn condition(ck: &Checkpoint, p: &PromptArgs) -> CliResult<(Tensor<f32>, Option<VisualEmbedding>)> {
    let text = match &p.prompt {
        Some(s) => ck.text.encode_prompt(s, PSEUDO_WORD),
        None => ck.text.encode_text(p.template, PSEUDO_WORD)?,
    };
    let profile = checkpoint_profile(ck)?;
    let w: Option<WPlusVector> = match (&p.identity_wplus, &p.mix) {
        (None, Some(_)) => return Err(CliError::Usage("--mix needs --identity-wplus".into())),
        (None, None) => None,
        (Some(a), None) => Some(load_wplus(a, &profile)?),
        (Some(a), Some(b)) => Some(mix(
            &load_wplus(a, &profile)?,
            &load_wplus(b, &profile)?,
            p.boundary,
        )?),
    };
    let visual = w.map(|w| ck.visual_prompt(&w)).transpose()?;
    Ok((text, visual))
}

fn sampler_config(cfg: &RunConfig, p: &PromptArgs) -> SamplerConfig {
    let mut s = cfg.sampler.clone();
    if let Some(l) = p.lambda {
        s.lambda = l;
    }
    if let Some(g) = p.guidance {
        s.guidance_scale = g;
    }
    if let Some(n) = p.ddim_steps {
        s.ddim_steps = n;
    }
    s
}

fn sample_cmd(a: SampleArgs) -> CliResult<()> {
    let cfg = load_config(&a.common, RunConfig::fine_tune())?;
    let ck = load_checkpoint(&a.ckpt)?;
    let (text, visual) = condition(&ck, &a.prompt)?;
    let sc = sampler_config(&cfg, &a.prompt);
    let mut maps = Vec::new();
    let img = sample(
        &ck.net,
        &text,
        visual.as_ref(),
        &sc,
        &ck.noise_schedule(),
        false,
        &mut maps,
    )?;
    write_ppm(&a.out, &img)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn metrics_for(ck: &Checkpoint, cfg: &RunConfig) -> CliResult<MetricSuite> {
    let c = ck.net.config();
    Ok(MetricSuite::new(
        cfg.eval.metric_seed,
        c.resolution,
        c.context_dim,
    )?)
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let cfg = load_config(&a.common, RunConfig::fine_tune())?;
    let ck = load_checkpoint(&a.ckpt)?;
    let profile = checkpoint_profile(&ck)?;
    let folders = load_dataset(&a.dataset, &profile)?;
    let folder = select_identity(&folders, a.identity.as_deref().or(cfg.identity.as_deref()))?;
    let w = match &a.identity_wplus {
        Some(p) => load_wplus(p, &profile)?,
        None => folder.samples[0].wplus.clone(),
    };
    let visual = ck.visual_prompt(&w)?;
    let (report, images) = evaluate(
        &ck,
        Some(&visual),
        &folder.images(),
        &cfg.sampler,
        &cfg.eval,
        &metrics_for(&ck, &cfg)?,
    )?;
    let csv = format!(
        "id,lpips,clip_t,samples\n{},{},{},{}\n",
        report.id_score, report.lpips_proxy, report.clip_t_proxy, report.samples
    );
    write_bytes(&a.out.join("metrics.csv"), csv.as_bytes())?;
    write_ppm(&a.out.join("samples.ppm"), &grid(&images, 6)?)?;
    println!(
        "id {:.4} lpips {:.4} clip_t {:.4} over {} samples",
        report.id_score, report.lpips_proxy, report.clip_t_proxy, report.samples
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{what}: cannot parse {v:?}")))
        })
        .collect()
}

/// Image count reserved for training before the rest become references.
const ABLATION_TRAIN_POOL: usize = 10;

fn ablate(a: AblateArgs) -> CliResult<()> {
    let kind = AblationKind::parse(&a.kind)?;
    let cfg = load_config(&a.common, RunConfig::fine_tune())?;
    cfg.validate()?;
    let base = load_checkpoint(&a.base)?;
    if base.mapping.is_some() {
        return Err(CliError::Usage(format!(
            "{} is already personalized; ablations start from a base checkpoint",
            a.base.display()
        )));
    }
    let profile = checkpoint_profile(&base)?;
    let folders = load_dataset(&a.dataset, &profile)?;
    let target = select_identity(&folders, a.identity.as_deref().or(cfg.identity.as_deref()))?;
    let sweep: Vec<f64> = match &a.sweep {
        Some(s) => parse_list(s, "--sweep")?,
        None => Vec::new(),
    };
    let pool = target.samples.len().min(ABLATION_TRAIN_POOL);
    let needed = match kind {
        AblationKind::Images => {
            let values = if sweep.is_empty() {
                kind.default_sweep()
            } else {
                sweep.clone()
            };
            values.iter().fold(0.0f64, |m, &v| m.max(v)) as usize
        }
        _ => 6,
    };
    if needed > pool {
        return Err(CliError::Dataset(format!(
            "identity {} has {} images, the sweep needs {needed}",
            target.name,
            target.samples.len()
        )));
    }
    let references: Vec<Tensor<f32>> = if target.samples.len() > pool {
        target.samples[pool..]
            .iter()
            .map(|s| s.image.clone())
            .collect()
    } else {
        target.images()
    };
    let style = match a.style_identity.as_deref() {
        Some(name) => select_identity(&folders, Some(name))?,
        None => folders
            .iter()
            .find(|f| f.name != target.name)
            .unwrap_or(target),
    };
    let setup = AblationSetup {
        base,
        mapping: profile.mapping(),
        train_images: IdentityDataset::new(target.samples[..pool].to_vec())?,
        style_extra: style.samples[0].clone(),
        identity: target.samples[0].wplus.clone(),
        references,
        train: cfg.train.clone(),
        sampler: cfg.sampler.clone(),
        eval: cfg.eval.clone(),
        default_images: 6,
    };
    let outcome = run_ablation(kind, &setup, &sweep)?;
    let csv_path = a.out.join(format!("{}.csv", kind.label()));
    write_bytes(&csv_path, outcome.table.to_csv().as_bytes())?;
    for (label, images) in &outcome.grids {
        write_ppm(
            &a.out.join(format!("{}_{label}.ppm", kind.label())),
            &grid(images, 6)?,
        )?;
    }
    write_bytes(&a.out.join(EFFECTIVE_CONFIG), cfg.to_text().as_bytes())?;
    println!(
        "wrote {} ({} rows)",
        csv_path.display(),
        outcome.table.rows.len()
    );
    Ok(())
}

/// The first map of each `(step, block, kind)`: the conditional branch, which
/// guidance evaluates before the unconditional one.
pub fn conditional_maps(maps: &[AttentionMap], steps: &[usize]) -> Vec<AttentionMap> {
    let mut seen = BTreeSet::new();
    maps.iter()
        .filter(|m| m.step.is_some_and(|s| steps.contains(&s)))
        .filter(|m| seen.insert((m.step, m.block.clone(), m.kind)))
        .cloned()
        .collect()
}

fn attn_maps(a: AttnArgs) -> CliResult<()> {
    let cfg = load_config(&a.common, RunConfig::fine_tune())?;
    let ck = load_checkpoint(&a.ckpt)?;
    if ck.net.mode() == VisualMode::Off {
        return Err(CliError::Usage(format!(
            "{} has no visual blocks; attn-maps needs a personalized checkpoint",
            a.ckpt.display()
        )));
    }
    let (text, visual) = condition(&ck, &a.prompt)?;
    let sc = sampler_config(&cfg, &a.prompt);
    let sched = ck.noise_schedule();
    let total = ddim_timesteps(sched.steps(), sc.ddim_steps).len();
    let steps: Vec<usize> = match &a.at {
        Some(s) => parse_list(s, "--at")?,
        None => {
            let mut v = vec![0, total / 2, total.saturating_sub(1)];
            v.dedup();
            v
        }
    };
    if let Some(bad) = steps.iter().find(|&&s| s >= total) {
        return Err(CliError::Usage(format!("--at {bad} outside 0..{total}")));
    }
    let mut maps = Vec::new();
    sample(
        &ck.net,
        &text,
        visual.as_ref(),
        &sc,
        &sched,
        true,
        &mut maps,
    )?;
    let picked = conditional_maps(&maps, &steps);
    for m in &picked {
        let name = format!(
            "step{:03}_{}_{}.pgm",
            m.step.unwrap_or(0),
            m.block,
            m.kind.label()
        );
        write_bytes(&a.out.join(name), &encode_pgm(m))?;
    }
    println!("wrote {} maps to {}", picked.len(), a.out.display());
    Ok(())
}
