//! Objectives of the three baseline families: prototype losses (ConPL),
//! linear classification and distillation (SCKD), and the margin-based
//! contrastive loss (CPL).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, cosine, cosine_grad_u, dot, log_sum_exp, norm, softmax_row, sub, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConplConfig {
    /// Similar-prototype screening threshold.
    pub alpha: f64,
    pub w_ce: f64,
    pub w_cc: f64,
    pub w_fc: f64,
    pub w_dc: f64,
}

impl Default for ConplConfig {
    fn default() -> Self {
        ConplConfig { alpha: 0.2, w_ce: 1.0, w_cc: 1.0, w_fc: 1.0, w_dc: 1.0 }
    }
}

impl ConplConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::config("ConPL alpha must be nonnegative"));
        }
        if [self.w_ce, self.w_cc, self.w_fc, self.w_dc].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("ConPL loss weights must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CplConfig {
    /// Margin factor `m` in (0, 1).
    pub margin: f64,
    /// Normalization constant `k` > 0.
    pub k: f64,
    pub tau: f64,
}

impl Default for CplConfig {
    fn default() -> Self {
        CplConfig { margin: 0.25, k: 0.1, tau: 0.1 }
    }
}

impl CplConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(Error::config(format!("MCL margin {} outside (0, 1)", self.margin)));
        }
        if !(self.k > 0.0) || !(self.tau > 0.0) {
            return Err(Error::config("MCL k and temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SckdConfig {
    pub w_fd: f64,
    pub w_pd: f64,
    /// Entity-similarity threshold for swap augmentation, in (-1, 1].
    pub tau_sim: f64,
    #[serde(default = "default_pd_temperature")]
    pub pd_temperature: f64,
}

fn default_pd_temperature() -> f64 {
    2.0
}

impl Default for SckdConfig {
    fn default() -> Self {
        SckdConfig { w_fd: 1.0, w_pd: 1.0, tau_sim: 0.9, pd_temperature: 2.0 }
    }
}

impl SckdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_fd >= 0.0 && self.w_pd >= 0.0) {
            return Err(Error::config("SCKD loss weights must be nonnegative"));
        }
        if !(self.tau_sim > -1.0 && self.tau_sim <= 1.0) {
            return Err(Error::config(format!("tau_sim {} outside (-1, 1]", self.tau_sim)));
        }
        if !(self.pd_temperature > 0.0) {
            return Err(Error::config("distillation temperature must be positive"));
        }
        Ok(())
    }
}

/// Scalar loss with its gradient with respect to one vector input.
#[derive(Debug, Clone, PartialEq)]
pub struct VecLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Scalar loss with gradients for each item of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

/// `-log softmax(scores)[label]` and its gradient on `scores`.
pub fn softmax_xent(scores: &[f64], label: usize) -> Result<VecLoss> {
    if label >= scores.len() {
        return Err(Error::Index(format!("label {label} outside {} classes", scores.len())));
    }
    let value = log_sum_exp(scores) - scores[label];
    let mut grad = softmax_row(scores)?;
    grad[label] -= 1.0;
    Ok(VecLoss { value, grad })
}

fn check_protos(protos: &[Vec<f64>], dim: usize) -> Result<()> {
    for (i, p) in protos.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::shape(format!("prototype {i} has dim {}, feature has {dim}", p.len())));
        }
        if norm(p) == 0.0 {
            return Err(Error::Degenerate(format!("prototype {i} has zero norm")));
        }
    }
    Ok(())
}

/// Cross-entropy over the cosine-similarity softmax restricted to `subset`
/// (indices into `protos`), with the true class at `subset[label_pos]`.
fn ce_over(f: &[f64], protos: &[Vec<f64>], subset: &[usize], label_pos: usize) -> Result<VecLoss> {
    let mut sims = Vec::with_capacity(subset.len());
    let mut sim_grads = Vec::with_capacity(subset.len());
    for &s in subset {
        let (c, g) = cosine_grad_u(f, &protos[s])?;
        sims.push(c);
        sim_grads.push(g);
    }
    let xent = softmax_xent(&sims, label_pos)?;
    let mut grad = vec![0.0; f.len()];
    for (w, g) in xent.grad.iter().zip(&sim_grads) {
        axpy(&mut grad, *w, g);
    }
    Ok(VecLoss { value: xent.value, grad })
}

/// Distance-softmax cross-entropy against prototypes (cosine similarity).
pub fn ce_proto(f: &[f64], protos: &[Vec<f64>], label: usize) -> Result<VecLoss> {
    if label >= protos.len() {
        return Err(Error::Index(format!("label {label} outside {} prototypes", protos.len())));
    }
    check_protos(protos, f.len())?;
    let all: Vec<usize> = (0..protos.len()).collect();
    ce_over(f, protos, &all, label)
}

/// `sum_i |f_i - p_i|` (Euclidean). Subgradient 0 where `f_i == p_i`.
pub fn loss_cc(features: &[Vec<f64>], protos: &[Vec<f64>]) -> Result<BatchLoss> {
    if features.len() != protos.len() {
        return Err(Error::shape(format!(
            "{} features against {} prototypes",
            features.len(),
            protos.len()
        )));
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(features.len());
    for (f, p) in features.iter().zip(protos) {
        if f.len() != p.len() {
            return Err(Error::shape("feature and prototype dimensions differ"));
        }
        let d = sub(f, p);
        let n = norm(&d);
        value += n;
        grads.push(if n > 0.0 { d.iter().map(|x| x / n).collect() } else { vec![0.0; f.len()] });
    }
    Ok(BatchLoss { value, grads })
}

/// Ordered set `[label, hardest negative, every negative within alpha]`.
pub fn similar_prototypes(f: &[f64], protos: &[Vec<f64>], label: usize, alpha: f64) -> Result<Vec<usize>> {
    if label >= protos.len() {
        return Err(Error::Index(format!("label {label} outside {} prototypes", protos.len())));
    }
    if protos.len() < 2 {
        return Ok(vec![label]);
    }
    let sims = protos.iter().map(|p| cosine(f, p)).collect::<Result<Vec<_>>>()?;
    let mut best: Option<usize> = None;
    for s in 0..protos.len() {
        if s != label && best.is_none_or(|b| sims[s] > sims[b]) {
            best = Some(s);
        }
    }
    let mut out = vec![label];
    out.extend(best);
    for s in 0..protos.len() {
        if s != label && sims[label] - sims[s] < alpha && !out.contains(&s) {
            out.push(s);
        }
    }
    Ok(out)
}

/// `-log p_s(r|x)` with the softmax restricted to `set`, whose first entry
/// is the label. Used directly when the screening set must stay fixed.
pub fn loss_fc_with_set(f: &[f64], protos: &[Vec<f64>], set: &[usize]) -> Result<VecLoss> {
    if set.is_empty() || set.iter().any(|&s| s >= protos.len()) {
        return Err(Error::Index("similar-prototype set out of range".into()));
    }
    check_protos(protos, f.len())?;
    if set.len() == 1 {
        return Ok(VecLoss { value: 0.0, grad: vec![0.0; f.len()] });
    }
    ce_over(f, protos, set, 0)
}

/// Cross-entropy over the similar-prototype set of `f`.
pub fn loss_fc(f: &[f64], protos: &[Vec<f64>], label: usize, alpha: f64) -> Result<VecLoss> {
    let set = similar_prototypes(f, protos, label, alpha)?;
    loss_fc_with_set(f, protos, &set)
}

fn cos_profile_grad(v: &[f64], protos: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut sims = Vec::with_capacity(protos.len());
    let mut grads = Vec::with_capacity(protos.len());
    for p in protos {
        let (c, g) = cosine_grad_u(v, p)?;
        sims.push(c);
        grads.push(g);
    }
    Ok((sims, grads))
}

/// `sum_i | d(f_i, P) - d(p_{y_i}, P) |` where `d(v, P)` is the vector of
/// cosine similarities of `v` to every stored prototype.
pub fn loss_dc(features: &[Vec<f64>], labels: &[usize], protos: &[Vec<f64>]) -> Result<BatchLoss> {
    if protos.is_empty() {
        return Err(Error::config("distribution consistency needs a nonempty prototype memory"));
    }
    if features.len() != labels.len() {
        return Err(Error::shape("features and labels differ in length"));
    }
    let dim = protos[0].len();
    check_protos(protos, dim)?;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(features.len());
    for (f, &y) in features.iter().zip(labels) {
        if y >= protos.len() {
            return Err(Error::Index(format!("label {y} has no stored prototype")));
        }
        let (sims, sim_grads) = cos_profile_grad(f, protos)?;
        let target: Vec<f64> = protos.iter().map(|p| cosine(&protos[y], p)).collect::<Result<_>>()?;
        let diff = sub(&sims, &target);
        let n = norm(&diff);
        value += n;
        let mut g = vec![0.0; f.len()];
        if n > 0.0 {
            for (d, sg) in diff.iter().zip(&sim_grads) {
                axpy(&mut g, d / n, sg);
            }
        }
        grads.push(g);
    }
    Ok(BatchLoss { value, grads })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLoss {
    pub value: f64,
    pub d_h: Vec<f64>,
    /// Gradient on the first `d_logits.len()` rows of the weight matrix.
    pub d_logits: Vec<f64>,
}

/// Softmax cross-entropy of a linear classifier using its first `classes`
/// rows. The weight gradient is `d_logits ⊗ h`, the bias gradient `d_logits`.
pub fn ce_linear(h: &[f64], weights: &Matrix, bias: &[f64], classes: usize, label: usize) -> Result<LinearLoss> {
    if classes > weights.rows() || classes > bias.len() {
        return Err(Error::shape(format!("{classes} classes exceed classifier capacity {}", weights.rows())));
    }
    if weights.cols() != h.len() {
        return Err(Error::shape("classifier width does not match the feature"));
    }
    if label >= classes {
        return Err(Error::Index(format!("label {label} outside {classes} classes")));
    }
    let mut logits = weights.matvec_rows(h, classes);
    axpy(&mut logits, 1.0, &bias[..classes]);
    let x = softmax_xent(&logits, label)?;
    let d_h = weights.matvec_t(&x.grad);
    Ok(LinearLoss { value: x.value, d_h, d_logits: x.grad })
}

/// `(1/n) sum (1 - old_i . new_i)` on unit features; gradient flows only to
/// the new features.
pub fn loss_fd(old: &[Vec<f64>], new: &[Vec<f64>]) -> Result<BatchLoss> {
    if old.len() != new.len() {
        return Err(Error::shape(format!("{} old features against {} new", old.len(), new.len())));
    }
    if new.is_empty() {
        return Ok(BatchLoss { value: 0.0, grads: Vec::new() });
    }
    let n = new.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(new.len());
    for (o, f) in old.iter().zip(new) {
        if o.len() != f.len() {
            return Err(Error::shape("old and new feature dimensions differ"));
        }
        value += 1.0 - dot(o, f);
        grads.push(o.iter().map(|x| -x / n).collect());
    }
    Ok(BatchLoss { value: value / n, grads })
}

/// Mean `KL(softmax(old/T) || softmax(new/T))` over the columns in
/// `old_cols`; gradients on the full new-logit vectors.
pub fn loss_pd(
    logits_old: &[Vec<f64>],
    logits_new: &[Vec<f64>],
    old_cols: &[usize],
    temperature: f64,
) -> Result<BatchLoss> {
    if logits_old.len() != logits_new.len() {
        return Err(Error::shape("old and new logit batches differ in size"));
    }
    let zero = || logits_new.iter().map(|l| vec![0.0; l.len()]).collect();
    if old_cols.is_empty() || logits_new.is_empty() {
        return Ok(BatchLoss { value: 0.0, grads: zero() });
    }
    let n = logits_new.len() as f64;
    let mut value = 0.0;
    let mut grads: Vec<Vec<f64>> = zero();
    for ((lo, ln), g) in logits_old.iter().zip(logits_new).zip(grads.iter_mut()) {
        if old_cols.iter().any(|&c| c >= lo.len() || c >= ln.len()) {
            return Err(Error::Index("distillation column outside logits".into()));
        }
        let so: Vec<f64> = old_cols.iter().map(|&c| lo[c] / temperature).collect();
        let sn: Vec<f64> = old_cols.iter().map(|&c| ln[c] / temperature).collect();
        let p = softmax_row(&so)?;
        let q = softmax_row(&sn)?;
        let (lse_o, lse_n) = (log_sum_exp(&so), log_sum_exp(&sn));
        for k in 0..old_cols.len() {
            if p[k] > 0.0 {
                value += p[k] * ((so[k] - lse_o) - (sn[k] - lse_n));
            }
            g[old_cols[k]] = (q[k] - p[k]) / (temperature * n);
        }
    }
    Ok(BatchLoss { value: value / n, grads })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MclLoss {
    pub value: f64,
    pub d_anchor: Vec<f64>,
    pub d_pos: Vec<Vec<f64>>,
    pub d_neg: Vec<Vec<f64>>,
}

/// Margin-based contrastive loss for one anchor, written as a loss to
/// minimise: `-sum_p log[exp(a_p s_p / tau) / Z]` with relaxation factors
/// `a_p = m + k s_p` and `a_n = 1 - m + k s_n`.
pub fn mcl(anchor: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>], cfg: &CplConfig) -> Result<MclLoss> {
    cfg.validate()?;
    if positives.is_empty() {
        return Err(Error::config("MCL needs at least one positive"));
    }
    let CplConfig { margin: m, k, tau } = *cfg;
    let sp: Vec<f64> = positives.iter().map(|p| dot(anchor, p)).collect();
    let sn: Vec<f64> = negatives.iter().map(|q| dot(anchor, q)).collect();
    let mut logits: Vec<f64> = sp.iter().map(|s| (m + k * s) * s / tau).collect();
    logits.extend(sn.iter().map(|s| (1.0 - m + k * s) * s / tau));
    let lse = log_sum_exp(&logits);
    let np = sp.len();
    let value = np as f64 * lse - logits[..np].iter().sum::<f64>();
    let soft = softmax_row(&logits)?;

    let mut d_anchor = vec![0.0; anchor.len()];
    let mut d_pos = Vec::with_capacity(np);
    let mut d_neg = Vec::with_capacity(sn.len());
    for (i, (s, p)) in sp.iter().zip(positives).enumerate() {
        let dlogit = np as f64 * soft[i] - 1.0;
        let ds = dlogit * (m + 2.0 * k * s) / tau;
        axpy(&mut d_anchor, ds, p);
        d_pos.push(anchor.iter().map(|a| ds * a).collect());
    }
    for (j, (s, q)) in sn.iter().zip(negatives).enumerate() {
        let dlogit = np as f64 * soft[np + j];
        let ds = dlogit * (1.0 - m + 2.0 * k * s) / tau;
        axpy(&mut d_anchor, ds, q);
        d_neg.push(anchor.iter().map(|a| ds * a).collect());
    }
    Ok(MclLoss { value, d_anchor, d_pos, d_neg })
}
