//! Line-oriented `key=value` run configuration with `#` comments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pidiff_core::checkpoint::Profile;
use pidiff_core::denoiser::VisualMode;
use pidiff_core::diffusion::{BetaSchedule, SamplerConfig};
use pidiff_core::eval::EvalConfig;
use pidiff_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};
use crate::io::read_bytes;

pub const SEED_ENV: &str = "PIDIFF_SEED";

/// Every setting a command can take from a config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: String,
    pub base_channels: usize,
    pub structure: VisualMode,
    pub schedule: BetaSchedule,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub dataset: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub identity: Option<String>,
}

pub const KEYS: &[&str] = &[
    "seed",
    "profile",
    "base_channels",
    "structure",
    "schedule",
    "lr",
    "weight_decay",
    "batch_size",
    "steps",
    "p_drop_text",
    "p_drop_visual",
    "wplus_noise_sigma",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "grad_clip",
    "train_lambda",
    "ddim_steps",
    "eta",
    "guidance_scale",
    "lambda",
    "clip_x0",
    "eval_prompts",
    "samples_per_prompt",
    "metric_seed",
    "dataset",
    "base",
    "out",
    "identity",
];

impl RunConfig {
    fn with_train(train: TrainConfig) -> Self {
        let profile = Profile::toy();
        Self {
            seed: 0,
            base_channels: profile.base_channels,
            profile: profile.name,
            structure: VisualMode::Sca,
            schedule: BetaSchedule::Linear,
            train,
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            dataset: None,
            base: None,
            out: None,
            identity: None,
        }
    }

    /// Defaults for personalization fine-tuning.
    pub fn fine_tune() -> Self {
        Self::with_train(TrainConfig::default())
    }

    /// Defaults for base-model pretraining.
    pub fn pretrain() -> Self {
        Self::with_train(TrainConfig::pretrain())
    }

    /// The profile with `base_channels` applied.
    pub fn profile(&self) -> CliResult<Profile> {
        let mut p = Profile::by_name(&self.profile)?;
        p.base_channels = self.base_channels;
        Ok(p)
    }

    /// Copies the global seed into the training and sampling sections.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.sampler.seed = seed;
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let t = &self.train;
        let s = &self.sampler;
        Some(match key {
            "seed" => self.seed.to_string(),
            "profile" => self.profile.clone(),
            "base_channels" => self.base_channels.to_string(),
            "structure" => self.structure.label().to_string(),
            "schedule" => self.schedule.label().to_string(),
            "lr" => t.lr.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "steps" => t.steps.to_string(),
            "p_drop_text" => t.p_drop_text.to_string(),
            "p_drop_visual" => t.p_drop_visual.to_string(),
            "wplus_noise_sigma" => t.wplus_noise_sigma.to_string(),
            "adam_beta1" => t.beta1.to_string(),
            "adam_beta2" => t.beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "grad_clip" => t.grad_clip.to_string(),
            "train_lambda" => t.train_lambda.to_string(),
            "ddim_steps" => s.ddim_steps.to_string(),
            "eta" => s.eta.to_string(),
            "guidance_scale" => s.guidance_scale.to_string(),
            "lambda" => s.lambda.to_string(),
            "clip_x0" => s.clip_x0.to_string(),
            "eval_prompts" => self.eval.prompts.to_string(),
            "samples_per_prompt" => self.eval.samples_per_prompt.to_string(),
            "metric_seed" => self.eval.metric_seed.to_string(),
            "dataset" => path(&self.dataset),
            "base" => path(&self.base),
            "out" => path(&self.out),
            "identity" => self.identity.clone().unwrap_or_default(),
            _ => return None,
        })
    }

    /// Sets one key from its textual value. The error string names the problem
    /// without location; callers add the file and line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        let t = &mut self.train;
        let s = &mut self.sampler;
        match key {
            "seed" => self.set_seed(num(key, value)?),
            "profile" => {
                Profile::by_name(value).map_err(|e| e.to_string())?;
                self.profile = value.to_string();
            }
            "base_channels" => self.base_channels = num(key, value)?,
            "structure" => self.structure = VisualMode::parse(value).map_err(|e| e.to_string())?,
            "schedule" => self.schedule = BetaSchedule::parse(value).map_err(|e| e.to_string())?,
            "lr" => t.lr = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "steps" => t.steps = num(key, value)?,
            "p_drop_text" => t.p_drop_text = num(key, value)?,
            "p_drop_visual" => t.p_drop_visual = num(key, value)?,
            "wplus_noise_sigma" => t.wplus_noise_sigma = num(key, value)?,
            "adam_beta1" => t.beta1 = num(key, value)?,
            "adam_beta2" => t.beta2 = num(key, value)?,
            "adam_eps" => t.adam_eps = num(key, value)?,
            "grad_clip" => t.grad_clip = num(key, value)?,
            "train_lambda" => t.train_lambda = num(key, value)?,
            "ddim_steps" => s.ddim_steps = num(key, value)?,
            "eta" => s.eta = num(key, value)?,
            "guidance_scale" => s.guidance_scale = num(key, value)?,
            "lambda" => s.lambda = num(key, value)?,
            "clip_x0" => s.clip_x0 = num(key, value)?,
            "eval_prompts" => self.eval.prompts = num(key, value)?,
            "samples_per_prompt" => self.eval.samples_per_prompt = num(key, value)?,
            "metric_seed" => self.eval.metric_seed = num(key, value)?,
            "dataset" => self.dataset = path(value),
            "base" => self.base = path(value),
            "out" => self.out = path(value),
            "identity" => self.identity = (!value.is_empty()).then(|| value.to_string()),
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Applies `text` on top of `self`. Returns the keys the text set.
    pub fn apply(&mut self, text: &str, origin: &str) -> CliResult<BTreeSet<String>> {
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| CliError::ConfigLine {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key {k:?}")));
            }
            self.set(k, v).map_err(err)?;
        }
        Ok(seen)
    }

    /// Reads a config file over `defaults`. Returns the keys the file set.
    pub fn load(path: &Path, defaults: Self) -> CliResult<(Self, BTreeSet<String>)> {
        let text = String::from_utf8(read_bytes(path)?).map_err(|_| CliError::ConfigLine {
            path: path.display().to_string(),
            line: 0,
            msg: "file is not UTF-8".into(),
        })?;
        let mut cfg = defaults;
        let seen = cfg.apply(&text, &path.display().to_string())?;
        Ok((cfg, seen))
    }

    /// Every key, one per line, in a form `load` reads back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for k in KEYS {
            writeln!(s, "{k}={}", self.get(k).expect("listed key")).unwrap();
        }
        s
    }

    pub fn validate(&self) -> CliResult<()> {
        self.profile()?.denoiser().validate()?;
        self.train.validate()?;
        if self.base_channels == 0 {
            return Err(pidiff_core::Error::Config("base_channels must be positive".into()).into());
        }
        Ok(())
    }
}

/// Seed precedence: flag, then config file, then `PIDIFF_SEED`, then 0.
pub fn resolve_seed(
    flag: Option<u64>,
    from_file: Option<u64>,
    env: Option<&str>,
) -> CliResult<u64> {
    if let Some(s) = flag.or(from_file) {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        None => Ok(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        for cfg in [RunConfig::fine_tune(), RunConfig::pretrain()] {
            let mut back = RunConfig::fine_tune();
            back.apply(&cfg.to_text(), "mem").unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn fine_tune_defaults() {
        let c = RunConfig::fine_tune();
        assert_eq!(
            (
                c.train.lr,
                c.train.weight_decay,
                c.train.batch_size,
                c.train.steps
            ),
            (1e-4, 0.01, 4, 600)
        );
        assert_eq!(c.sampler.lambda, 0.4);
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut c = RunConfig::fine_tune();
        let seen = c
            .apply("# header\n\nlr = 0.5   # inline\nseed=7\n", "mem")
            .unwrap();
        assert_eq!(c.train.lr, 0.5);
        assert_eq!((c.seed, c.train.seed, c.sampler.seed), (7, 7, 7));
        assert!(seen.contains("seed"));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let mut c = RunConfig::fine_tune();
        let e = c.apply("lr=1\nbogus=2\n", "run.cfg").unwrap_err();
        assert_eq!(e.to_string(), "run.cfg:2: unknown key \"bogus\"");
        let e = c.apply("\n\nsteps=ten\n", "run.cfg").unwrap_err();
        assert!(e.to_string().starts_with("run.cfg:3: steps"));
        let e = c.apply("lr\n", "run.cfg").unwrap_err();
        assert!(e.to_string().starts_with("run.cfg:1: expected key=value"));
        let e = c.apply("lr=1\nlr=2\n", "run.cfg").unwrap_err();
        assert!(e.to_string().contains("duplicate"));
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some(2), Some("3")).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some(2), Some("3")).unwrap(), 2);
        assert_eq!(resolve_seed(None, None, Some("3")).unwrap(), 3);
        assert_eq!(resolve_seed(None, None, None).unwrap(), 0);
        assert!(resolve_seed(None, None, Some("x")).is_err());
    }
}
