//! Model bundle: denoiser, optional mapping network, text table and the
//! plain key/value manifest describing them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::denoiser::{DenoiserConfig, DenoiserNet, ToyTextEncoder, VisualMode};
use crate::diffusion::{BetaSchedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::vgm::{MappingConfig, MappingNetwork, VisualEmbedding};
use crate::wplus::{SliceSpec, WPlusVector};

pub const TEXT_TABLE: &str = "text.embedding";

/// Dimension profile.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub name: String,
    pub rows: usize,
    pub latent_dim: usize,
    pub token_dim: usize,
    pub base_channels: usize,
    pub resolution: usize,
}

impl Profile {
    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            rows: 18,
            latent_dim: 32,
            token_dim: 64,
            base_channels: 32,
            resolution: 32,
        }
    }

    pub fn paper() -> Self {
        Self {
            name: "paper".into(),
            rows: 18,
            latent_dim: 512,
            token_dim: 768,
            base_channels: 32,
            resolution: 32,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (toy, paper)"
            ))),
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            resolution: self.resolution,
            base_channels: self.base_channels,
            context_dim: self.token_dim,
            visual_tokens: SliceSpec::default().groups(),
            visual_dim: self.token_dim,
            heads: 1,
            time_dim: 64,
            timesteps: 1000,
            schedule: BetaSchedule::Linear,
        }
    }

    pub fn mapping(&self) -> MappingConfig {
        MappingConfig {
            slices: SliceSpec::default(),
            latent_dim: self.latent_dim,
            token_dim: self.token_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub profile: String,
    pub net: DenoiserNet,
    pub mapping: Option<MappingNetwork>,
    pub text: ToyTextEncoder,
    pub seed: u64,
    /// Optimizer steps applied since the last initialisation.
    pub steps: usize,
}

impl Checkpoint {
    /// Freshly initialised base model (no visual blocks, no mapping network).
    pub fn base(profile: &Profile, net: DenoiserConfig, seed: u64) -> Result<Self> {
        let text = ToyTextEncoder::new(seed, net.context_dim);
        Ok(Self {
            profile: profile.name.clone(),
            net: DenoiserNet::init(seed, net)?,
            mapping: None,
            text,
            seed,
            steps: 0,
        })
    }

    /// Adds visual blocks copied from the text blocks and a seeded mapping network.
    pub fn personalize(&self, mode: VisualMode, mapping: MappingConfig, seed: u64) -> Result<Self> {
        if mode == VisualMode::Off {
            return Err(Error::Config(
                "personalization needs the sca or pca structure".into(),
            ));
        }
        if mapping.token_dim != self.net.config().visual_dim {
            return Err(Error::Config(format!(
                "mapping token width {} differs from the network's visual width {}",
                mapping.token_dim,
                self.net.config().visual_dim
            )));
        }
        Ok(Self {
            net: self.net.attach(mode)?,
            mapping: Some(MappingNetwork::init(seed, mapping)),
            steps: 0,
            ..self.clone()
        })
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        self.net
            .config()
            .noise_schedule()
            .expect("validated network config")
    }

    /// Every named tensor: network, mapping network and text table.
    pub fn params(&self) -> ParamSet {
        let mut all = self.net.params().clone();
        if let Some(m) = &self.mapping {
            all.extend(m.params());
        }
        all.insert(TEXT_TABLE, self.text.table().clone());
        all
    }

    /// Replaces every tensor by the one of the same name in `all`.
    pub fn with_params(&self, all: ParamSet) -> Result<Self> {
        let net =
            DenoiserNet::from_params(self.net.config().clone(), all.clone(), self.net.mode())?;
        let mapping = match &self.mapping {
            Some(m) => Some(MappingNetwork::from_params(m.config().clone(), &all)?),
            None => None,
        };
        let text = ToyTextEncoder::with_table(all.require(TEXT_TABLE)?.clone())?;
        Ok(Self {
            net,
            mapping,
            text,
            ..self.clone()
        })
    }

    /// Maps a W+ latent to visual tokens after checking it against the mapping network.
    pub fn visual_prompt(&self, w: &WPlusVector) -> Result<VisualEmbedding> {
        let m = self
            .mapping
            .as_ref()
            .ok_or_else(|| Error::Contract("checkpoint has no mapping network".into()))?;
        let cfg = m.config();
        w.expect_dims(cfg.slices.total_rows(), cfg.latent_dim)?;
        m.forward(w)
    }

    pub fn manifest(&self) -> Vec<(String, String)> {
        let c = self.net.config();
        let mut out: Vec<(String, String)> = [
            ("format", "pidiff-checkpoint-1".to_string()),
            ("profile", self.profile.clone()),
            ("resolution", c.resolution.to_string()),
            ("base_channels", c.base_channels.to_string()),
            ("context_dim", c.context_dim.to_string()),
            ("visual_tokens", c.visual_tokens.to_string()),
            ("visual_dim", c.visual_dim.to_string()),
            ("heads", c.heads.to_string()),
            ("time_dim", c.time_dim.to_string()),
            ("timesteps", c.timesteps.to_string()),
            ("schedule", c.schedule.label().to_string()),
            ("structure", self.net.mode().label().to_string()),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        if let Some(m) = &self.mapping {
            let mc = m.config();
            let groups: Vec<String> = mc
                .slices
                .group_sizes()
                .iter()
                .map(|g| g.to_string())
                .collect();
            out.push(("wplus_rows".into(), mc.slices.total_rows().to_string()));
            out.push(("wplus_dim".into(), mc.latent_dim.to_string()));
            out.push(("slice_groups".into(), groups.join(",")));
        }
        out
    }

    pub fn from_parts(manifest: &BTreeMap<String, String>, all: ParamSet) -> Result<Self> {
        let get = |k: &str| {
            manifest
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("manifest is missing {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("manifest {k} is not a count")))
        };
        let config = DenoiserConfig {
            resolution: num("resolution")?,
            base_channels: num("base_channels")?,
            context_dim: num("context_dim")?,
            visual_tokens: num("visual_tokens")?,
            visual_dim: num("visual_dim")?,
            heads: num("heads")?,
            time_dim: num("time_dim")?,
            timesteps: num("timesteps")?,
            schedule: BetaSchedule::parse(get("schedule")?)?,
        };
        let mode = VisualMode::parse(get("structure")?)?;
        let mapping = if manifest.contains_key("wplus_dim") {
            let groups = get("slice_groups")?
                .split(',')
                .map(|g| g.trim().parse::<usize>())
                .collect::<core::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format("manifest slice_groups is malformed".into()))?;
            let cfg = MappingConfig {
                slices: SliceSpec::new(groups)?,
                latent_dim: num("wplus_dim")?,
                token_dim: config.visual_dim,
            };
            if cfg.slices.total_rows() != num("wplus_rows")? {
                return Err(Error::Format(
                    "manifest wplus_rows disagrees with slice_groups".into(),
                ));
            }
            Some(MappingNetwork::from_params(cfg, &all)?)
        } else {
            None
        };
        let seed = get("seed")?
            .parse()
            .map_err(|_| Error::Format("manifest seed is not an integer".into()))?;
        Ok(Self {
            profile: get("profile")?.to_string(),
            net: DenoiserNet::from_params(config, all.clone(), mode)?,
            mapping,
            text: ToyTextEncoder::with_table(all.require(TEXT_TABLE)?.clone())?,
            seed,
            steps: num("steps")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Profile, DenoiserConfig) {
        let p = Profile {
            name: "toy".into(),
            rows: 18,
            latent_dim: 4,
            token_dim: 8,
            base_channels: 4,
            resolution: 8,
        };
        let d = p.denoiser();
        (p, d)
    }

    #[test]
    fn manifest_round_trip() {
        let (p, d) = small();
        let base = Checkpoint::base(&p, d, 3).unwrap();
        let pers = base.personalize(VisualMode::Sca, p.mapping(), 4).unwrap();
        for ck in [base, pers] {
            let m: BTreeMap<String, String> = ck.manifest().into_iter().collect();
            assert_eq!(Checkpoint::from_parts(&m, ck.params()).unwrap(), ck);
        }
    }

    #[test]
    fn params_round_trip_and_missing_tensor() {
        let (p, d) = small();
        let ck = Checkpoint::base(&p, d, 3)
            .unwrap()
            .personalize(VisualMode::Parallel, p.mapping(), 1)
            .unwrap();
        assert_eq!(ck.with_params(ck.params()).unwrap(), ck);
        let mut broken = ck.params();
        broken.remove_prefix_matching(|n| n.starts_with("vgm.layer2"));
        assert!(ck.with_params(broken).is_err());
    }

    #[test]
    fn visual_prompt_checks_dims() {
        let (p, d) = small();
        let ck = Checkpoint::base(&p, d, 3).unwrap();
        assert!(ck.visual_prompt(&WPlusVector::zeros(18, 4)).is_err());
        let ck = ck.personalize(VisualMode::Sca, p.mapping(), 1).unwrap();
        assert!(ck.visual_prompt(&WPlusVector::zeros(18, 4)).is_ok());
        assert!(ck.visual_prompt(&WPlusVector::zeros(18, 5)).is_err());
        assert!(ck.personalize(VisualMode::Off, p.mapping(), 1).is_err());
    }

    #[test]
    fn profiles() {
        assert_eq!(Profile::by_name("paper").unwrap().token_dim, 768);
        assert_eq!(Profile::by_name("toy").unwrap().latent_dim, 32);
        assert!(Profile::by_name("huge").is_err());
    }
}
