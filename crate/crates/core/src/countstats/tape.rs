//! The same moment computations recorded on a [`Graph`] so losses can be
//! differentiated back into the network.

use super::{VarianceNormalization, VAR_FLOOR};
use crate::diff::{Graph, Tensor, Var};
use crate::error::{LsrError, Result};

/// Per-block `(mu, var)` vectors of shape `(N,)` for one class of a
/// `(N, L, H, W)` probability tensor.
pub fn block_moments(
    g: &mut Graph,
    probs: Var,
    class: usize,
    norm: VarianceNormalization,
) -> Result<(Var, Var)> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 4 || class >= shape[1] {
        return Err(LsrError::ShapeMismatch {
            op: "block_moments",
            lhs: shape,
            rhs: vec![class],
        });
    }
    let pixels = shape[2] * shape[3];
    if pixels == 0 {
        return Err(LsrError::Empty("block_moments"));
    }
    let plane = g.narrow(probs, 1, class, 1)?;
    let total = g.sum_from(plane, 1)?;
    let mus = g.affine(total, 1.0 / pixels as f64, 0.0)?;
    let complement = g.affine(plane, -1.0, 1.0)?;
    let bern = g.mul(plane, complement)?;
    let bern_sum = g.sum_from(bern, 1)?;
    let vars = g.affine(bern_sum, 1.0 / norm.divisor(pixels), 0.0)?;
    Ok((mus, vars))
}

/// Scalar `(mu, popvar)` of a `(N,)` vector of block means.
pub fn inter_moments(g: &mut Graph, mus: Var) -> Result<(Var, Var)> {
    let n = g.shape(mus).to_vec();
    let mu = g.mean(mus)?;
    let spread = g.broadcast_to(mu, &n)?;
    let dev = g.sub(mus, spread)?;
    let sq = g.square(dev)?;
    let var = g.mean(sq)?;
    Ok((mu, var))
}

/// Scalar `(mu, mean(vars) + popvar(mus))`.
pub fn total_moments(g: &mut Graph, mus: Var, vars: Var) -> Result<(Var, Var)> {
    let (mu, inter) = inter_moments(g, mus)?;
    let mean_var = g.mean(vars)?;
    let var = g.add(mean_var, inter)?;
    Ok((mu, var))
}

/// Element-wise matching loss; `eta` and `rho` give one target per element of
/// `mu` (which must share its shape with `var`).
pub fn match_loss(g: &mut Graph, mu: Var, var: Var, eta: &[f64], rho: &[f64]) -> Result<Var> {
    let shape = g.shape(mu).to_vec();
    let eta = g.constant(Tensor::new(shape.clone(), eta.to_vec())?)?;
    let rho2 = g.constant(Tensor::new(shape, rho.iter().map(|r| r * r).collect())?)?;
    let diff = g.sub(eta, mu)?;
    let diff2 = g.square(diff)?;
    let num = g.mul(var, diff2)?;
    let floored = g.affine(var, 1.0, VAR_FLOOR)?;
    let den = g.add(rho2, floored)?;
    let den2 = g.square(den)?;
    let ratio = g.div(num, den2)?;
    let first = g.affine(ratio, 0.5, 0.0)?;
    let scaled = g.affine(floored, 2.0 * std::f64::consts::PI, 0.0)?;
    let log = g.log(scaled)?;
    let second = g.affine(log, 0.5, 0.0)?;
    g.add(first, second)
}
