use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `p` with central differences.
///
/// `f` receives a graph and the leaf for `p` and returns the scalar loss.
/// The check runs in `f64`. Returns
/// `max |analytic − cd| / (|analytic| + |cd| + 1e-8)` over all entries.
pub fn finite_diff_check<G>(mut f: G, p: &Tensor<f64>, eps: f64) -> Result<f64>
where
    G: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Range(alloc::format!(
            "eps must be positive, got {eps}"
        )));
    }
    let mut g = Graph::new();
    let leaf = g.param(p.clone());
    let loss = f(&mut g, leaf)?;
    g.backward(loss)?;
    let analytic = g
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(p.shape()));

    let mut eval = |q: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.param(q);
        let loss = f(&mut g, leaf)?;
        Ok(g.value(loss).data()[0])
    };

    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let mut plus = p.clone();
        plus.data_mut()[i] += eps;
        let mut minus = p.clone();
        minus.data_mut()[i] -= eps;
        let cd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i].wide();
        let err = libm::fabs(a - cd) / (libm::fabs(a) + libm::fabs(cd) + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
