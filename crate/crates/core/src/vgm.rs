//! Visual guidance mapping network: W+ slices to visual tokens.
//!
//! Layer `t` sees only the rows of slice group `t` and emits token `t`:
//! `token_t = W2ᵀ·silu(W1ᵀ·flatten(rows_t) + b1) + b2`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::numerics::{Graph, Scalar, SeededRng, Tensor, Var};
use crate::params::{Binder, ParamSet, TrainPolicy};
use crate::wplus::{SliceSpec, WPlusVector};

#[derive(Clone, Debug, PartialEq)]
pub struct MappingConfig {
    pub slices: SliceSpec,
    /// W+ row width `D`.
    pub latent_dim: usize,
    /// Token width `C`.
    pub token_dim: usize,
}

/// Output of the mapping network, `T×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbedding {
    tokens: Tensor<f32>,
}

impl VisualEmbedding {
    pub fn new(tokens: Tensor<f32>) -> Result<Self> {
        tokens.dims2()?;
        Ok(Self { tokens })
    }

    /// The null visual prompt: all zeros.
    pub fn null(tokens: usize, dim: usize) -> Self {
        Self {
            tokens: Tensor::zeros(&[tokens, dim]),
        }
    }

    pub fn tokens(&self) -> &Tensor<f32> {
        &self.tokens
    }

    pub fn token(&self, t: usize) -> &[f32] {
        let c = self.tokens.shape()[1];
        &self.tokens.data()[t * c..(t + 1) * c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappingNetwork {
    config: MappingConfig,
    params: ParamSet,
}

pub fn param_name(layer: usize, field: &str) -> alloc::string::String {
    format!("vgm.layer{layer}.{field}")
}

impl MappingNetwork {
    /// Weights `~ N(0, 1/fan_in)`, biases zero.
    pub fn init(seed: u64, config: MappingConfig) -> Self {
        let mut rng = SeededRng::derive(seed, 0x76_67_6d);
        let mut params = ParamSet::new();
        let c = config.token_dim;
        for (t, &rows) in config.slices.group_sizes().iter().enumerate() {
            let fan_in = rows * config.latent_dim;
            params.insert(
                param_name(t, "w1"),
                rng.normal_tensor(&[fan_in, c], 1.0 / libm::sqrt(fan_in as f64)),
            );
            params.insert(param_name(t, "b1"), Tensor::zeros(&[c]));
            params.insert(
                param_name(t, "w2"),
                rng.normal_tensor(&[c, c], 1.0 / libm::sqrt(c as f64)),
            );
            params.insert(param_name(t, "b2"), Tensor::zeros(&[c]));
        }
        Self { config, params }
    }

    /// Rebuilds from stored parameters, checking every expected tensor.
    pub fn from_params(config: MappingConfig, all: &ParamSet) -> Result<Self> {
        let params = all.with_prefix("vgm.");
        let c = config.token_dim;
        for (t, &rows) in config.slices.group_sizes().iter().enumerate() {
            let expect = [
                ("w1", alloc::vec![rows * config.latent_dim, c]),
                ("b1", alloc::vec![c]),
                ("w2", alloc::vec![c, c]),
                ("b2", alloc::vec![c]),
            ];
            for (field, shape) in expect {
                let name = param_name(t, field);
                let got = params.require(&name)?;
                if got.shape() != shape.as_slice() {
                    return Err(shape_err(
                        "vgm",
                        format!("{name} is {:?}, expected {:?}", got.shape(), shape),
                    ));
                }
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MappingConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn tokens(&self) -> usize {
        self.config.slices.groups()
    }

    /// Graph-level forward; `w` must be an `L×D` node.
    pub fn forward_graph<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        binder: &mut Binder<'_>,
        w: Var,
    ) -> Result<Var> {
        let expected = [self.config.slices.total_rows(), self.config.latent_dim];
        if g.shape(w) != expected {
            return Err(shape_err(
                "vgm",
                format!("W+ {:?}, network expects {:?}", g.shape(w), expected),
            ));
        }
        let mut tokens = Vec::with_capacity(self.tokens());
        for (t, range) in self.config.slices.ranges().into_iter().enumerate() {
            let rows = g.slice_rows(w, range.start, range.end)?;
            let flat = g.reshape(rows, &[1, range.len() * self.config.latent_dim])?;
            let w1 = binder.get(g, &param_name(t, "w1"))?;
            let b1 = binder.get(g, &param_name(t, "b1"))?;
            let w2 = binder.get(g, &param_name(t, "w2"))?;
            let b2 = binder.get(g, &param_name(t, "b2"))?;
            let h = g.matmul(flat, w1)?;
            let h = g.add_row_bias(h, b1)?;
            let h = g.silu(h);
            let h = g.matmul(h, w2)?;
            tokens.push(g.add_row_bias(h, b2)?);
        }
        g.concat_rows(&tokens)
    }

    pub fn forward(&self, w: &WPlusVector) -> Result<VisualEmbedding> {
        let mut g = Graph::<f32>::new();
        let params = &self.params;
        let mut binder = Binder::new(&[params], TrainPolicy::Frozen);
        let wv = g.constant(w.values().clone());
        let out = self.forward_graph(&mut g, &mut binder, wv)?;
        VisualEmbedding::new(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use crate::wplus::mix;
    use proptest::prelude::*;

    fn toy() -> MappingConfig {
        MappingConfig {
            slices: SliceSpec::default(),
            latent_dim: 8,
            token_dim: 6,
        }
    }

    fn random_w(seed: u64) -> WPlusVector {
        WPlusVector::new(SeededRng::new(seed).normal_tensor(&[18, 8], 1.0)).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_tokens() {
        let mut net = MappingNetwork::init(1, toy());
        let names: Vec<_> = net
            .params()
            .names()
            .map(Into::into)
            .collect::<Vec<alloc::string::String>>();
        for n in names {
            net.params_mut().get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let e = net.forward(&random_w(2)).unwrap();
        assert_eq!(e.tokens().shape(), &[4, 6]);
        assert!(e.tokens().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perturbing_first_slice_moves_only_first_token() {
        let net = MappingNetwork::init(1, toy());
        let w = random_w(3);
        let mut bumped = w.values().clone();
        for v in &mut bumped.data_mut()[..5 * 8] {
            *v += 0.5;
        }
        let a = net.forward(&w).unwrap();
        let b = net.forward(&WPlusVector::new(bumped).unwrap()).unwrap();
        assert_ne!(a.token(0), b.token(0));
        for t in 1..4 {
            assert_eq!(a.token(t), b.token(t));
        }
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(
            MappingNetwork::init(4, toy()),
            MappingNetwork::init(4, toy())
        );
        assert_ne!(
            MappingNetwork::init(4, toy()),
            MappingNetwork::init(5, toy())
        );
    }

    #[test]
    fn output_scale_is_sane_on_unit_normal_input() {
        let cfg = MappingConfig {
            slices: SliceSpec::default(),
            latent_dim: 32,
            token_dim: 64,
        };
        let net = MappingNetwork::init(7, cfg);
        let mut vals = Vec::new();
        for s in 0..50 {
            let w =
                WPlusVector::new(SeededRng::new(100 + s).normal_tensor(&[18, 32], 1.0)).unwrap();
            vals.extend_from_slice(net.forward(&w).unwrap().tokens().data());
        }
        let n = vals.len() as f64;
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.1..=10.0).contains(&std), "std {std}");
    }

    #[test]
    fn rejects_wrong_shape() {
        let net = MappingNetwork::init(1, toy());
        let w = WPlusVector::zeros(18, 9);
        assert!(net.forward(&w).is_err());
    }

    #[test]
    fn cross_slice_gradients_vanish() {
        let net = MappingNetwork::init(2, toy());
        let w = random_w(5).values().cast::<f64>();
        for token in 0..4 {
            let mut g = Graph::<f64>::new();
            let mut binder = Binder::new(&[net.params()], TrainPolicy::Frozen);
            let wv = g.param(w.clone());
            let out = net.forward_graph(&mut g, &mut binder, wv).unwrap();
            let row = g.slice_rows(out, token, token + 1).unwrap();
            let s = g.sum(row);
            g.backward(s).unwrap();
            let grad = g.grad(wv).unwrap();
            for (t, range) in SliceSpec::default().ranges().into_iter().enumerate() {
                let block = &grad.data()[range.start * 8..range.end * 8];
                if t == token {
                    assert!(block.iter().any(|&v| v != 0.0));
                } else {
                    assert!(block.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        let net = MappingNetwork::init(3, toy());
        let w = random_w(6).values().cast::<f64>();
        let err = finite_diff_check(
            |g, p| {
                let mut binder = Binder::new(&[net.params()], TrainPolicy::Frozen);
                let out = net.forward_graph(g, &mut binder, p)?;
                let sq = g.mul(out, out)?;
                Ok(g.sum(sq))
            },
            &w,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn mixing_at_group_boundary_commutes_per_token(seed in any::<u64>()) {
            let net = MappingNetwork::init(11, toy());
            let (a, b) = (random_w(seed), random_w(seed.wrapping_add(1)));
            let m = net.forward(&mix(&a, &b, 9).unwrap()).unwrap();
            let fa = net.forward(&a).unwrap();
            let fb = net.forward(&b).unwrap();
            for t in 0..2 {
                prop_assert_eq!(m.token(t), fa.token(t));
            }
            for t in 2..4 {
                prop_assert_eq!(m.token(t), fb.token(t));
            }
        }
    }
}
