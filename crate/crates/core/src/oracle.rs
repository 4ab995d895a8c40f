//! Brute-force reference for the DP backward pass. Plain scalar loops over
//! the raw data; nothing here calls the tensor kernels or the memory model.

use crate::dpcore::{finalize_gradient, DPConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Result<(usize, usize, usize, usize)> {
    match (x.shape(), dy.shape()) {
        (&[b, t, p], &[b2, t2, d]) if b == b2 && t == t2 => Ok((b, t, p, d)),
        _ => Err(Error::Shape { lhs: x.shape().to_vec(), rhs: dy.shape().to_vec() }),
    }
}

/// `G_b[d][p] = Σ_t dY[b][t][d]·X[b][t][p]` for every sample.
pub fn per_sample_grads_naive<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
    let (nb, nt, np, nd) = dims(x, dy)?;
    let xs = x.data();
    let ys = dy.data();
    let mut out = Vec::with_capacity(nb);
    for b in 0..nb {
        let mut g = vec![S::zero(); nd * np];
        for d in 0..nd {
            for p in 0..np {
                let mut acc = S::zero();
                for t in 0..nt {
                    acc += ys[(b * nt + t) * nd + d] * xs[(b * nt + t) * np + p];
                }
                g[d * np + p] = acc;
            }
        }
        out.push(Tensor::new(vec![nd, np], g)?);
    }
    Ok(out)
}

/// Squared L2 norm of every per-sample gradient.
pub fn per_sample_norms_sq_naive<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Result<Vec<S>> {
    Ok(per_sample_grads_naive(x, dy)?
        .iter()
        .map(|g| {
            let mut acc = S::zero();
            for &v in g.data() {
                acc += v * v;
            }
            acc
        })
        .collect())
}

/// Per-sample gradients, each scaled by `min(1, C/‖g‖)`, summed over the
/// batch, then finalized with the keyed noise.
pub fn dp_backward_reference<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>, cfg: &DPConfig) -> Result<Tensor<S>> {
    cfg.validate()?;
    let grads = per_sample_grads_naive(x, dy)?;
    let norms = per_sample_norms_sq_naive(x, dy)?;
    let (_, _, np, nd) = dims(x, dy)?;
    let c = S::from_f64_lossy(cfg.clip_c);
    let mut sum = vec![S::zero(); nd * np];
    for (g, &n2) in grads.iter().zip(&norms) {
        let scale = if n2 == S::zero() { S::one() } else { S::one().min(c / n2.sqrt()) };
        for (s, &v) in sum.iter_mut().zip(g.data()) {
            *s += v * scale;
        }
    }
    finalize_gradient(&Tensor::new(vec![nd, np], sum)?, grads.len(), cfg)
}

/// Unclipped, noiseless `Σ_b Σ_t dY[b][t]ᵀ X[b][t]`.
pub fn nondp_reference<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, _, np, nd) = dims(x, dy)?;
    let mut sum = vec![S::zero(); nd * np];
    for g in per_sample_grads_naive(x, dy)? {
        for (s, &v) in sum.iter_mut().zip(g.data()) {
            *s += v;
        }
    }
    Tensor::new(vec![nd, np], sum)
}
