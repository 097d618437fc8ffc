//! Mutual-information objective between the classifier branch and the LM
//! head, estimated with InfoNCE under a bilinear critic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, log_sum_exp, softmax_row, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiLossConfig {
    pub tau: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for MiLossConfig {
    fn default() -> Self {
        MiLossConfig { tau: 1.0, weight: 1.0 }
    }
}

impl MiLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("MI temperature must be positive, got {}", self.tau)));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::config(format!("MI weight must be nonnegative, got {}", self.weight)));
        }
        Ok(())
    }
}

/// Value and gradients with respect to both feature batches and the critic.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub value: f64,
    pub d_gphi: Matrix,
    pub d_glm: Matrix,
    pub d_w: Matrix,
}

impl InfoNceOutput {
    fn negated(mut self) -> Self {
        self.value = -self.value;
        self.d_gphi.scale(-1.0);
        self.d_glm.scale(-1.0);
        self.d_w.scale(-1.0);
        self
    }
}

/// `(1/B) sum_i log[h(i,i) / sum_j h(i,j)]` with
/// `h(i,j) = exp(gphi_i^T W glm_j / tau)`. Always `<= 0`.
pub fn info_nce(gphi: &Matrix, glm: &Matrix, w: &Matrix, tau: f64) -> Result<InfoNceOutput> {
    let b = gphi.rows();
    if b == 0 {
        return Err(Error::shape("InfoNCE needs a nonempty batch"));
    }
    if glm.rows() != b {
        return Err(Error::shape(format!("batch sizes differ: {} vs {}", b, glm.rows())));
    }
    if w.shape() != (gphi.cols(), glm.cols()) {
        return Err(Error::shape(format!(
            "critic is {:?}, expected {:?}",
            w.shape(),
            (gphi.cols(), glm.cols())
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::config("InfoNCE temperature must be positive"));
    }
    // a_i = W^T g_i, c_j = W l_j, s_ij = a_i . l_j / tau
    let a: Vec<Vec<f64>> = (0..b).map(|i| w.matvec_t(gphi.row(i))).collect();
    let c: Vec<Vec<f64>> = (0..b).map(|j| w.matvec(glm.row(j))).collect();
    let mut value = 0.0;
    let mut coef = Matrix::zeros(b, b);
    for i in 0..b {
        let scores: Vec<f64> = (0..b).map(|j| dot(&a[i], glm.row(j)) / tau).collect();
        value += scores[i] - log_sum_exp(&scores);
        let p = softmax_row(&scores)?;
        for j in 0..b {
            let delta = if i == j { 1.0 } else { 0.0 };
            coef[(i, j)] = (delta - p[j]) / b as f64;
        }
    }
    value /= b as f64;

    let mut d_gphi = Matrix::zeros(b, gphi.cols());
    let mut d_glm = Matrix::zeros(b, glm.cols());
    let mut d_w = Matrix::zeros(w.rows(), w.cols());
    for i in 0..b {
        let mut weighted_l = vec![0.0; glm.cols()];
        for j in 0..b {
            let gij = coef[(i, j)] / tau;
            if gij == 0.0 {
                continue;
            }
            axpy(d_gphi.row_mut(i), gij, &c[j]);
            axpy(d_glm.row_mut(j), gij, &a[i]);
            axpy(&mut weighted_l, gij, glm.row(j));
        }
        d_w.add_outer(1.0, gphi.row(i), &weighted_l);
    }
    Ok(InfoNceOutput { value, d_gphi, d_glm, d_w })
}

/// `L_MI = -InfoNCE` of one mini-batch; nonnegative.
pub fn mi_loss(gphi: &Matrix, glm: &Matrix, w: &Matrix, cfg: &MiLossConfig) -> Result<InfoNceOutput> {
    cfg.validate()?;
    Ok(info_nce(gphi, glm, w, cfg.tau)?.negated())
}

/// Anything that can be summed as a gradient set.
pub trait GradSet: Clone {
    fn add_scaled(&mut self, alpha: f64, other: &Self) -> Result<()>;
}

impl GradSet for Vec<f64> {
    fn add_scaled(&mut self, alpha: f64, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape("gradient vectors differ in length"));
        }
        axpy(self, alpha, other);
        Ok(())
    }
}

impl GradSet for Matrix {
    fn add_scaled(&mut self, alpha: f64, other: &Self) -> Result<()> {
        Matrix::add_scaled(self, alpha, other)
    }
}

impl GradSet for crate::model::EncoderParams {
    fn add_scaled(&mut self, alpha: f64, other: &Self) -> Result<()> {
        crate::model::EncoderParams::add_scaled(self, alpha, other)
    }
}

/// A scalar objective together with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored<G> {
    pub value: f64,
    pub grads: G,
}

/// `L = L_0 + lambda * L_MI`. With `lambda == 0` the base objective is
/// returned untouched.
pub fn combine<G: GradSet>(l0: Scored<G>, lmi: Option<&Scored<G>>, lambda: f64) -> Result<Scored<G>> {
    match lmi {
        Some(mi) if lambda != 0.0 => {
            let mut out = l0;
            out.value += lambda * mi.value;
            out.grads.add_scaled(lambda, &mi.grads)?;
            Ok(out)
        }
        _ => Ok(l0),
    }
}
