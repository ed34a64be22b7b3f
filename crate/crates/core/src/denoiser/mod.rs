//! Toy noise predictor and the toy text encoder feeding it.
//!
//! The latent is the image itself (no autoencoder). Absent conditions are
//! encoded as zero embeddings of the right shape.

mod net;
mod text;

pub use net::{
    block_names, timestep_features, visual_param_names, DenoiserConfig, DenoiserNet,
    ForwardOptions, VisualMode,
};
pub use text::{ToyTextEncoder, EVAL_PROMPTS, GENERIC_WORD, PSEUDO_WORD, TRAIN_TEMPLATES};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, Graph, SeededRng, Tensor};
    use crate::params::{Binder, TrainPolicy};
    use crate::vgm::{MappingConfig, MappingNetwork, VisualEmbedding};
    use crate::wplus::SliceSpec;
    use alloc::collections::BTreeSet;
    use alloc::format;
    use alloc::string::String;
    use alloc::vec::Vec;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            resolution: 8,
            base_channels: 4,
            context_dim: 6,
            visual_tokens: 4,
            visual_dim: 6,
            heads: 1,
            time_dim: 8,
            timesteps: 1000,
            schedule: crate::diffusion::BetaSchedule::Linear,
        }
    }

    fn inputs(cfg: &DenoiserConfig, seed: u64) -> (Tensor<f32>, Tensor<f32>, VisualEmbedding) {
        let mut rng = SeededRng::new(seed);
        let r = cfg.resolution;
        let z = rng.normal_tensor(&[3, r, r], 1.0);
        let text = rng.normal_tensor(&[5, cfg.context_dim], 1.0);
        let vis =
            VisualEmbedding::new(rng.normal_tensor(&[cfg.visual_tokens, cfg.visual_dim], 1.0))
                .unwrap();
        (z, text, vis)
    }

    #[test]
    fn output_shape_matches_input() {
        for cfg in [tiny(), DenoiserConfig::toy()] {
            let net = DenoiserNet::init(1, cfg.clone())
                .unwrap()
                .attach_sca()
                .unwrap();
            let (z, text, vis) = inputs(&cfg, 2);
            let out = net
                .predict_noise(&z, 500, Some(&text), Some(&vis), 0.4)
                .unwrap();
            assert_eq!(out.shape(), z.shape());
            assert!(out.is_finite());
        }
    }

    #[test]
    fn zero_lambda_matches_text_only_network() {
        let cfg = DenoiserConfig::toy();
        let mut net = DenoiserNet::init(3, cfg.clone())
            .unwrap()
            .attach_sca()
            .unwrap();
        // Move the visual projections away from their copies so the branch matters.
        let mut rng = SeededRng::new(9);
        for name in visual_param_names() {
            let t = net.params_mut().get_mut(&name).unwrap();
            for v in t.data_mut() {
                *v += 0.1 * rng.normal() as f32;
            }
        }
        let (z, text, vis) = inputs(&cfg, 4);
        let plain = net.without_visual();
        let a = net
            .predict_noise(&z, 10, Some(&text), Some(&vis), 0.0)
            .unwrap();
        let b = plain.predict_noise(&z, 10, Some(&text), None, 0.0).unwrap();
        assert!(a.bit_eq(&b));
        let c = net
            .predict_noise(&z, 10, Some(&text), Some(&vis), 0.4)
            .unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn unconditional_output_is_finite() {
        let cfg = DenoiserConfig::toy();
        let net = DenoiserNet::init(5, cfg.clone())
            .unwrap()
            .attach_sca()
            .unwrap();
        let (z, _, _) = inputs(&cfg, 6);
        for t in [1, 500, 1000] {
            assert!(net
                .predict_noise(&z, t, None, None, 1.0)
                .unwrap()
                .is_finite());
        }
    }

    #[test]
    fn parameter_count_is_desk_scale() {
        let net = DenoiserNet::init(1, DenoiserConfig::toy())
            .unwrap()
            .attach_sca()
            .unwrap();
        assert!(
            net.parameter_count() < 2_000_000,
            "{}",
            net.parameter_count()
        );
    }

    #[test]
    fn visual_blocks_start_as_text_copies() {
        let base = DenoiserNet::init(7, tiny()).unwrap();
        assert_eq!(base.mode(), VisualMode::Off);
        let net = base.attach_sca().unwrap();
        for block in block_names() {
            for p in ["wq", "wk", "wv"] {
                let text = net.params().get(&format!("{block}.text.{p}")).unwrap();
                let sca = net.params().get(&format!("{block}.sca.{p}")).unwrap();
                assert!(text.bit_eq(sca));
            }
        }
        assert_eq!(net.without_visual(), base);
    }

    #[test]
    fn mismatched_widths_refuse_to_attach() {
        let mut cfg = tiny();
        cfg.visual_dim = 5;
        assert!(DenoiserNet::init(1, cfg).unwrap().attach_sca().is_err());
    }

    #[test]
    fn rejects_bad_timestep_and_resolution() {
        let cfg = tiny();
        let net = DenoiserNet::init(1, cfg.clone()).unwrap();
        let (z, text, _) = inputs(&cfg, 1);
        assert!(net.predict_noise(&z, 0, Some(&text), None, 0.0).is_err());
        assert!(net.predict_noise(&z, 1001, Some(&text), None, 0.0).is_err());
        let big = Tensor::zeros(&[3, 16, 16]);
        assert!(net.predict_noise(&big, 5, Some(&text), None, 0.0).is_err());
    }

    #[test]
    fn timestep_features_endpoints() {
        let f = timestep_features(0, 8);
        assert_eq!(f.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let f = timestep_features(3, 8);
        assert!((f.data()[0] - libm::sinf(3.0)).abs() < 1e-6);
    }

    #[test]
    fn trainable_set_is_visual_blocks_and_mapping() {
        let cfg = tiny();
        let net = DenoiserNet::init(2, cfg.clone())
            .unwrap()
            .attach_sca()
            .unwrap();
        let mapping = MappingNetwork::init(
            3,
            MappingConfig {
                slices: SliceSpec::default(),
                latent_dim: 4,
                token_dim: cfg.visual_dim,
            },
        );
        let text = ToyTextEncoder::new(4, cfg.context_dim);
        let mut frozen_text = crate::params::ParamSet::new();
        frozen_text.insert("text.embedding", text.table().clone());

        let mut g = Graph::<f32>::new();
        let mut binder = Binder::new(
            &[net.params(), mapping.params(), &frozen_text],
            TrainPolicy::FineTune,
        );
        let w = g.constant(SeededRng::new(5).normal_tensor(&[18, 4], 1.0));
        let tokens = mapping.forward_graph(&mut g, &mut binder, w).unwrap();
        let table = binder.get(&mut g, "text.embedding").unwrap();
        let tx = g.slice_rows(table, 0, 4).unwrap();
        let z = g.constant(SeededRng::new(6).normal_tensor(&[3, 8, 8], 1.0));
        let mut maps = Vec::new();
        let out = net
            .forward_graph(
                &mut g,
                &mut binder,
                z,
                7,
                tx,
                Some(tokens),
                ForwardOptions::with_lambda(1.0),
                &mut maps,
            )
            .unwrap();
        let loss = g.mean(out);
        g.backward(loss).unwrap();

        let got: BTreeSet<String> = binder.gradients(&g).into_keys().collect();
        let mut want = BTreeSet::new();
        for block in ["down1", "down2", "mid", "up1", "up2"] {
            for p in ["wq", "wk", "wv"] {
                want.insert(format!("{block}.sca.{p}"));
            }
        }
        for layer in 0..4 {
            for p in ["w1", "b1", "w2", "b2"] {
                want.insert(format!("vgm.layer{layer}.{p}"));
            }
        }
        assert_eq!(got, want);
        let bound: BTreeSet<&str> = binder.bound().map(|(k, _)| k.as_str()).collect();
        assert!(bound.contains("text.embedding") && bound.contains("down1.text.wq"));
    }

    #[test]
    fn visual_value_gradient_matches_finite_differences() {
        let cfg = tiny();
        let mut net = DenoiserNet::init(11, cfg.clone())
            .unwrap()
            .attach_sca()
            .unwrap();
        let mut rng = SeededRng::new(12);
        for name in visual_param_names() {
            let t = net.params_mut().get_mut(&name).unwrap();
            for v in t.data_mut() {
                *v += 0.3 * rng.normal() as f32;
            }
        }
        let (z, text, vis) = inputs(&cfg, 13);
        let target = SeededRng::new(14).normal_tensor::<f64>(&[3, 8, 8], 1.0);
        let wv = net.params().get("mid.sca.wv").unwrap().cast::<f64>();
        let err = finite_diff_check(
            |g, p| {
                let mut binder = Binder::new(&[net.params()], TrainPolicy::Frozen);
                binder.substitute("mid.sca.wv", p);
                let zv = g.constant(z.cast());
                let tv = g.constant(text.cast());
                let vv = g.constant(vis.tokens().cast());
                let mut maps = Vec::new();
                let out = net.forward_graph(
                    g,
                    &mut binder,
                    zv,
                    321,
                    tv,
                    Some(vv),
                    ForwardOptions::with_lambda(1.0),
                    &mut maps,
                )?;
                let tg = g.constant(target.clone());
                g.mse(out, tg)
            },
            &wv,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn captured_maps_are_row_stochastic() {
        let cfg = tiny();
        for mode in [VisualMode::Sca, VisualMode::Parallel] {
            let net = DenoiserNet::init(1, cfg.clone())
                .unwrap()
                .attach(mode)
                .unwrap();
            let (z, text, vis) = inputs(&cfg, 3);
            let mut maps = Vec::new();
            let opts = ForwardOptions {
                lambda: 0.4,
                capture: true,
                step: Some(2),
            };
            net.predict_noise_with(&z, 99, Some(&text), Some(&vis), opts, &mut maps)
                .unwrap();
            assert_eq!(maps.len(), 10);
            for m in &maps {
                assert!(m.max_row_deviation() <= 1e-6);
                assert_eq!(m.step, Some(2));
            }
        }
    }

    #[test]
    fn stored_parameters_round_trip() {
        let net = DenoiserNet::init(1, tiny()).unwrap().attach_sca().unwrap();
        let back = DenoiserNet::from_params(tiny(), net.params().clone(), VisualMode::Sca).unwrap();
        assert_eq!(back, net);
        let mut broken = net.params().clone();
        broken.remove_prefix_matching(|n| n == "mid.sca.wk");
        assert!(DenoiserNet::from_params(tiny(), broken, VisualMode::Sca).is_err());
    }
}
