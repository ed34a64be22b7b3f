//! Text cross-attention, style cross-attention (SCA) and the parallel variant.
//!
//! Both blocks compute `softmax(Q·Kᵀ/√d)·V`. Text attention takes its query
//! from the hidden state and keys/values from text tokens. SCA takes its
//! query from the text block's output and keys/values from the visual
//! tokens. The parallel variant (PCA) queries from the hidden state instead.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Scalar, SeededRng, Tensor, Var};
use crate::params::ParamSet;
use crate::vgm::VisualEmbedding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AttnKind {
    Text,
    Style,
    Parallel,
}

impl AttnKind {
    pub fn label(self) -> &'static str {
        match self {
            AttnKind::Text => "text",
            AttnKind::Style => "sca",
            AttnKind::Parallel => "pca",
        }
    }
}

/// Softmax weights of one block, `queries × keys`, averaged over heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub kind: AttnKind,
    pub block: String,
    pub step: Option<usize>,
    pub weights: Tensor<f32>,
}

impl AttentionMap {
    /// Largest `|Σ_row − 1|`.
    pub fn max_row_deviation(&self) -> f64 {
        let keys = self.weights.shape()[1];
        self.weights
            .data()
            .chunks(keys)
            .map(|r| libm::fabs(r.iter().map(|&v| v as f64).sum::<f64>() - 1.0))
            .fold(0.0, f64::max)
    }
}

/// Projection nodes of one attention block on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ProjVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Graph-level attention. `query_src: [n×hs]`, `context: [m×c]`,
/// `wq: [hs×hs]`, `wk, wv: [c×hs]`. Returns the `[n×hs]` output and the
/// per-head softmax nodes.
pub fn attend<F: Scalar>(
    g: &mut Graph<F>,
    query_src: Var,
    context: Var,
    proj: ProjVars,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let hs = g.shape(proj.wq)[1];
    if heads == 0 || !hs.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{heads} heads do not divide width {hs}"
        )));
    }
    let q = g.matmul(query_src, proj.wq)?;
    let k = g.matmul(context, proj.wk)?;
    let v = g.matmul(context, proj.wv)?;
    if heads == 1 {
        let (out, probs) = head(g, q, k, v, hs)?;
        return Ok((out, alloc::vec![probs]));
    }
    let d = hs / heads;
    let (qt, kt, vt) = (g.transpose(q)?, g.transpose(k)?, g.transpose(v)?);
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_rows(qt, h * d, (h + 1) * d)?;
        let kh = g.slice_rows(kt, h * d, (h + 1) * d)?;
        let vh = g.slice_rows(vt, h * d, (h + 1) * d)?;
        let (qh, kh, vh) = (g.transpose(qh)?, g.transpose(kh)?, g.transpose(vh)?);
        let (o, p) = head(g, qh, kh, vh, d)?;
        outs.push(g.transpose(o)?);
        probs.push(p);
    }
    let stacked = g.concat_rows(&outs)?;
    Ok((g.transpose(stacked)?, probs))
}

fn head<F: Scalar>(g: &mut Graph<F>, q: Var, k: Var, v: Var, d: usize) -> Result<(Var, Var)> {
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(d as f64));
    let probs = g.softmax_rows(scores)?;
    Ok((g.matmul(probs, v)?, probs))
}

/// `f_text + λ·f_sca`. At `λ = 0` the text output is returned untouched.
pub fn combine_graph<F: Scalar>(
    g: &mut Graph<F>,
    f_text: Var,
    f_sca: Var,
    lambda: f64,
) -> Result<Var> {
    if g.shape(f_text) != g.shape(f_sca) {
        return Err(shape_err(
            "combine",
            format!("{:?} vs {:?}", g.shape(f_text), g.shape(f_sca)),
        ));
    }
    if lambda == 0.0 {
        return Ok(f_text);
    }
    let scaled = g.scale(f_sca, lambda);
    g.add(f_text, scaled)
}

/// Builds the map tensor from per-head softmax nodes.
pub fn capture_map<F: Scalar>(
    g: &Graph<F>,
    probs: &[Var],
    kind: AttnKind,
    block: &str,
    step: Option<usize>,
) -> AttentionMap {
    let mut weights = g.value(probs[0]).cast::<f32>();
    if probs.len() > 1 {
        let inv = 1.0 / probs.len() as f64;
        let mut acc: Vec<f64> = alloc::vec![0.0; weights.len()];
        for &p in probs {
            for (a, v) in acc.iter_mut().zip(g.value(p).data()) {
                *a += v.wide();
            }
        }
        for (w, a) in weights.data_mut().iter_mut().zip(&acc) {
            *w = (a * inv) as f32;
        }
    }
    AttentionMap {
        kind,
        block: block.into(),
        step,
        weights,
    }
}

/// Projection trio `W_q [hs×hs]`, `W_k [cd×hs]`, `W_v [cd×hs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionBlock {
    pub wq: Tensor<f32>,
    pub wk: Tensor<f32>,
    pub wv: Tensor<f32>,
    pub heads: usize,
}

/// Style cross-attention: same layout, context width equal to the visual token width.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaBlock(pub CrossAttentionBlock);

impl CrossAttentionBlock {
    pub fn new(wq: Tensor<f32>, wk: Tensor<f32>, wv: Tensor<f32>, heads: usize) -> Result<Self> {
        let (h1, h2) = wq.dims2()?;
        let (ck, hk) = wk.dims2()?;
        let (cv, hv) = wv.dims2()?;
        if h1 != h2 || hk != h1 || hv != h1 || ck != cv {
            return Err(shape_err(
                "attention",
                format!(
                    "wq {:?}, wk {:?}, wv {:?}",
                    wq.shape(),
                    wk.shape(),
                    wv.shape()
                ),
            ));
        }
        if heads == 0 || h1 % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide width {h1}"
            )));
        }
        Ok(Self { wq, wk, wv, heads })
    }

    pub fn random(
        rng: &mut SeededRng,
        hidden: usize,
        context: usize,
        heads: usize,
    ) -> Result<Self> {
        let sq = 1.0 / libm::sqrt(hidden as f64);
        let sc = 1.0 / libm::sqrt(context as f64);
        Self::new(
            rng.normal_tensor(&[hidden, hidden], sq),
            rng.normal_tensor(&[context, hidden], sc),
            rng.normal_tensor(&[context, hidden], sc),
            heads,
        )
    }

    pub fn hidden(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn context(&self) -> usize {
        self.wk.shape()[0]
    }

    pub fn from_params(set: &ParamSet, prefix: &str, heads: usize) -> Result<Self> {
        Self::new(
            set.require(&format!("{prefix}.wq"))?.clone(),
            set.require(&format!("{prefix}.wk"))?.clone(),
            set.require(&format!("{prefix}.wv"))?.clone(),
            heads,
        )
    }

    pub fn write_params(&self, set: &mut ParamSet, prefix: &str) {
        set.insert(format!("{prefix}.wq"), self.wq.clone());
        set.insert(format!("{prefix}.wk"), self.wk.clone());
        set.insert(format!("{prefix}.wv"), self.wv.clone());
    }

    fn run(
        &self,
        query_src: &Tensor<f32>,
        context: &Tensor<f32>,
        kind: AttnKind,
    ) -> Result<(Tensor<f32>, AttentionMap)> {
        let (_, qw) = query_src.dims2()?;
        let (_, cw) = context.dims2()?;
        if qw != self.hidden() || cw != self.context() {
            return Err(shape_err(
                "attention",
                format!(
                    "query width {qw}, context width {cw}; block expects {} and {}",
                    self.hidden(),
                    self.context()
                ),
            ));
        }
        let mut g = Graph::<f32>::new();
        let q = g.constant(query_src.clone());
        let c = g.constant(context.clone());
        let proj = ProjVars {
            wq: g.constant(self.wq.clone()),
            wk: g.constant(self.wk.clone()),
            wv: g.constant(self.wv.clone()),
        };
        let (out, probs) = attend(&mut g, q, c, proj, self.heads)?;
        let map = capture_map(&g, &probs, kind, kind.label(), None);
        Ok((g.value(out).clone(), map))
    }
}

/// Text cross-attention over `f_z [n×hs]` and text tokens `tau [m×cd]`.
pub fn text_cross_attention(
    block: &CrossAttentionBlock,
    f_z: &Tensor<f32>,
    tau: &Tensor<f32>,
) -> Result<(Tensor<f32>, AttentionMap)> {
    block.run(f_z, tau, AttnKind::Text)
}

/// SCA with the query taken from the text block's output.
pub fn sca(
    block: &ScaBlock,
    f_text_out: &Tensor<f32>,
    visual: &VisualEmbedding,
) -> Result<(Tensor<f32>, AttentionMap)> {
    block.0.run(f_text_out, visual.tokens(), AttnKind::Style)
}

/// Parallel variant: the visual block's query comes from the hidden state.
pub fn pca(
    block: &ScaBlock,
    f_z: &Tensor<f32>,
    visual: &VisualEmbedding,
) -> Result<(Tensor<f32>, AttentionMap)> {
    block.0.run(f_z, visual.tokens(), AttnKind::Parallel)
}

pub fn combine(f_text: &Tensor<f32>, f_sca: &Tensor<f32>, lambda: f64) -> Result<Tensor<f32>> {
    f_text.expect_same_shape(f_sca, "combine")?;
    if lambda == 0.0 {
        return Ok(f_text.clone());
    }
    let l = lambda as f32;
    f_text.zip_map(f_sca, "combine", |a, b| a + l * b)
}

/// Copies the text projections into a new SCA block.
pub fn init_sca_from_text(text: &CrossAttentionBlock, visual_dim: usize) -> Result<ScaBlock> {
    if text.context() != visual_dim {
        return Err(Error::Config(format!(
            "text context width {} differs from visual token width {visual_dim}; \
             configure equal widths (no re-projection path)",
            text.context()
        )));
    }
    Ok(ScaBlock(text.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    fn rand(seed: u64, shape: &[usize]) -> Tensor<f32> {
        SeededRng::new(seed).normal_tensor(shape, 1.0)
    }

    fn eye(n: usize) -> Tensor<f32> {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Explicit-loop attention, independent of the tape.
    fn oracle(q_src: &Tensor<f32>, ctx: &Tensor<f32>, b: &CrossAttentionBlock) -> Vec<Vec<f64>> {
        let mm = |a: &Tensor<f32>, w: &Tensor<f32>| -> Vec<Vec<f64>> {
            let (n, k) = a.dims2().unwrap();
            let (_, m) = w.dims2().unwrap();
            (0..n)
                .map(|i| {
                    (0..m)
                        .map(|j| {
                            (0..k)
                                .map(|p| a.at2(i, p) as f64 * w.at2(p, j) as f64)
                                .sum()
                        })
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (mm(q_src, &b.wq), mm(ctx, &b.wk), mm(ctx, &b.wv));
        let d = b.hidden() as f64;
        q.iter()
            .map(|qi| {
                let s: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..b.hidden())
                    .map(|c| e.iter().zip(&v).map(|(w, vj)| w / z * vj[c]).sum())
                    .collect()
            })
            .collect()
    }

    fn assert_close(t: &Tensor<f32>, want: &[Vec<f64>], tol: f64) {
        let cols = t.shape()[1];
        for (i, row) in want.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                let got = t.data()[i * cols + j] as f64;
                assert!((got - w).abs() <= tol, "({i},{j}): {got} vs {w}");
            }
        }
    }

    #[test]
    fn single_context_token_broadcasts_value() {
        let b = CrossAttentionBlock::random(&mut SeededRng::new(1), 4, 3, 1).unwrap();
        let tau = rand(2, &[1, 3]);
        let (out, map) = text_cross_attention(&b, &rand(3, &[5, 4]), &tau).unwrap();
        let v: Vec<f64> = (0..4)
            .map(|c| {
                (0..3)
                    .map(|p| tau.at2(0, p) as f64 * b.wv.at2(p, c) as f64)
                    .sum()
            })
            .collect();
        for i in 0..5 {
            for (c, want) in v.iter().enumerate() {
                assert!((out.at2(i, c) as f64 - want).abs() < 1e-6);
            }
        }
        assert!(map.weights.data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn one_hot_contexts_match_loop_oracle() {
        let b = CrossAttentionBlock::new(eye(2), eye(2), eye(2), 1).unwrap();
        let f_z = Tensor::from_rows(&[&[0.3, -1.2], &[2.0, 0.5]]).unwrap();
        let tau = eye(2);
        let (out, map) = text_cross_attention(&b, &f_z, &tau).unwrap();
        assert_close(&out, &oracle(&f_z, &tau, &b), 1e-6);
        assert!(map.max_row_deviation() <= 1e-6);
    }

    #[test]
    fn sca_examples() {
        let text = CrossAttentionBlock::random(&mut SeededRng::new(4), 6, 5, 1).unwrap();
        let block = init_sca_from_text(&text, 5).unwrap();

        let one = VisualEmbedding::new(rand(5, &[1, 5])).unwrap();
        let (out, _) = sca(&block, &rand(6, &[3, 6]), &one).unwrap();
        for i in 1..3 {
            for c in 0..6 {
                assert_eq!(out.at2(i, c), out.at2(0, c));
            }
        }

        let mut zero_v = block.clone();
        zero_v.0.wv.data_mut().fill(0.0);
        let vis = VisualEmbedding::new(rand(7, &[4, 5])).unwrap();
        let (out, _) = sca(&zero_v, &rand(8, &[3, 6]), &vis).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let q = rand(9, &[2, 6]);
        let (out, map) = sca(&block, &q, &vis).unwrap();
        assert_close(&out, &oracle(&q, vis.tokens(), &block.0), 1e-5);
        assert_eq!(map.weights.shape(), &[2, 4]);
        assert!(map.max_row_deviation() <= 1e-6);
    }

    #[test]
    fn combine_examples() {
        let (a, b) = (rand(1, &[3, 4]), rand(2, &[3, 4]));
        assert!(combine(&a, &b, 0.0).unwrap().bit_eq(&a));
        let sum = a.zip_map(&b, "t", |x, y| x + y).unwrap();
        assert!(combine(&a, &b, 1.0).unwrap().bit_eq(&sum));
        let mid = combine(&a, &b, 0.4).unwrap();
        let one = combine(&a, &b, 1.0).unwrap();
        let zero = combine(&a, &b, 0.0).unwrap();
        for i in 0..mid.len() {
            let lin = 0.4 * one.data()[i] as f64 + 0.6 * zero.data()[i] as f64;
            assert!((mid.data()[i] as f64 - lin).abs() < 1e-5);
        }
        assert!(combine(&a, &rand(3, &[4, 3]), 0.5).is_err());
    }

    #[test]
    fn pca_uses_hidden_state_query() {
        let text = CrossAttentionBlock::random(&mut SeededRng::new(10), 6, 5, 1).unwrap();
        let block = init_sca_from_text(&text, 5).unwrap();
        let vis = VisualEmbedding::new(rand(11, &[4, 5])).unwrap();
        let f_z = rand(12, &[3, 6]);
        let (a, _) = pca(&block, &f_z, &vis).unwrap();
        let (b, _) = sca(&block, &f_z, &vis).unwrap();
        assert!(a.bit_eq(&b));

        let (f_text, _) = text_cross_attention(&text, &f_z, &rand(13, &[3, 5])).unwrap();
        let (s, _) = sca(&block, &f_text, &vis).unwrap();
        let (p, map) = pca(&block, &f_z, &vis).unwrap();
        assert!(s.max_abs_diff(&p) > 1e-6);
        assert!(map.max_row_deviation() <= 1e-6);
    }

    #[test]
    fn sca_init_copies_and_detaches() {
        let text = CrossAttentionBlock::random(&mut SeededRng::new(14), 4, 3, 1).unwrap();
        let mut block = init_sca_from_text(&text, 3).unwrap();
        assert!(block.0.wq.bit_eq(&text.wq));
        let before = text.clone();
        block.0.wq.data_mut()[0] += 1.0;
        assert!(text.wq.bit_eq(&before.wq));
        assert!(matches!(
            init_sca_from_text(&text, 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let b = CrossAttentionBlock::random(&mut SeededRng::new(1), 4, 3, 1).unwrap();
        assert!(text_cross_attention(&b, &rand(1, &[2, 5]), &rand(2, &[2, 3])).is_err());
        assert!(text_cross_attention(&b, &rand(1, &[2, 4]), &rand(2, &[2, 4])).is_err());
    }

    #[test]
    fn multi_head_maps_stay_stochastic() {
        let b = CrossAttentionBlock::random(&mut SeededRng::new(15), 8, 5, 2).unwrap();
        let (out, map) = text_cross_attention(&b, &rand(16, &[7, 8]), &rand(17, &[3, 5])).unwrap();
        assert_eq!(out.shape(), &[7, 8]);
        assert!(map.max_row_deviation() <= 1e-6);
    }

    #[test]
    fn argmax_ignores_logit_shift() {
        let mut g = Graph::<f32>::new();
        let logits = rand(18, &[4, 6]);
        let shifted = logits.map(|v| v + 3.5);
        let a = g.constant(logits);
        let b = g.constant(shifted);
        let pa = g.softmax_rows(a).unwrap();
        let pb = g.softmax_rows(b).unwrap();
        let argmax = |t: &Tensor<f32>| -> Vec<usize> {
            t.data()
                .chunks(6)
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                        .unwrap()
                        .0
                })
                .collect()
        };
        assert_eq!(argmax(g.value(pa)), argmax(g.value(pb)));
    }

    #[test]
    fn text_sca_combine_chain_gradient() {
        let mut rng = SeededRng::new(19);
        let text = CrossAttentionBlock::random(&mut rng, 6, 5, 1).unwrap();
        let mut style = init_sca_from_text(&text, 5).unwrap();
        style.0.wq.data_mut().iter_mut().for_each(|v| *v *= 0.7);
        let f_z = rng.normal_tensor::<f64>(&[4, 6], 1.0);
        let tau = rng.normal_tensor::<f64>(&[3, 5], 1.0);
        let vis = rng.normal_tensor::<f64>(&[4, 5], 1.0);
        let target = rng.normal_tensor::<f64>(&[4, 6], 1.0);

        let run = |g: &mut Graph<f64>, f: Var, wv_sca: Option<Var>| -> Result<Var> {
            let c = g.constant(tau.clone());
            let p = ProjVars {
                wq: g.constant(text.wq.cast()),
                wk: g.constant(text.wk.cast()),
                wv: g.constant(text.wv.cast()),
            };
            let (ft, _) = attend(g, f, c, p, 1)?;
            let v = g.constant(vis.clone());
            let ps = ProjVars {
                wq: g.constant(style.0.wq.cast()),
                wk: g.constant(style.0.wk.cast()),
                wv: match wv_sca {
                    Some(w) => w,
                    None => g.constant(style.0.wv.cast()),
                },
            };
            let (fs, _) = attend(g, ft, v, ps, 1)?;
            let out = combine_graph(g, ft, fs, 0.4)?;
            let t = g.constant(target.clone());
            g.mse(out, t)
        };
        let err = finite_diff_check(|g, p| run(g, p, None), &f_z, 1e-3).unwrap();
        assert!(err <= 1e-3, "query path {err}");
        let err = finite_diff_check(
            |g, p| {
                let f = g.constant(f_z.clone());
                run(g, f, Some(p))
            },
            &style.0.wv.cast(),
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "W'_v {err}");
    }
}
