//! Dense linear algebra, seeded randomness, Adam, and the finite-difference
//! gradient oracle used to validate every analytic gradient in the crate.

mod adam;
mod matrix;
mod rng;

pub use adam::{AdamConfig, AdamState};
pub use matrix::{axpy, dot, matmul, mean_of, norm, scaled, squared_distance, sub, Matrix};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Numerically stable softmax (max subtraction).
pub fn softmax_row(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log(sum(exp(x)))` with max subtraction. Returns `-inf` for empty input.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine with a zero-norm vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine similarity together with its gradient with respect to `u`.
pub fn cosine_grad_u(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>)> {
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine with a zero-norm vector".into()));
    }
    let c = dot(u, v) / (nu * nv);
    let grad = u
        .iter()
        .zip(v)
        .map(|(ui, vi)| vi / (nu * nv) - c * ui / (nu * nu))
        .collect();
    Ok((c, grad))
}

/// Unit-normalize `z`; fails on a zero vector.
pub fn normalize(z: &[f64]) -> Result<Vec<f64>> {
    let n = norm(z);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate("normalizing a zero-norm vector".into()));
    }
    Ok(z.iter().map(|x| x / n).collect())
}

/// Pull a gradient on `g = z / |z|` back to `z`.
pub fn normalize_backward(g: &[f64], z_norm: f64, dg: &[f64]) -> Vec<f64> {
    let proj = dot(g, dg);
    g.iter().zip(dg).map(|(gi, dgi)| (dgi - gi * proj) / z_norm).collect()
}

pub const FD_STEP: f64 = 1e-5;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective while probing coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error used by the gradient checks: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
