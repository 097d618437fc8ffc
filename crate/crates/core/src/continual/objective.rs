//! Per-step objectives of each family as pure functions of the parameters,
//! so the composed gradients can be checked against finite differences.

use crate::data::Templated;
use crate::error::{Error, Result};
use crate::losses::{
    ce_linear, ce_proto, combine, loss_cc, loss_dc, loss_fc_with_set, loss_fd, loss_pd, mcl, mi_loss,
    similar_prototypes, ConplConfig, CplConfig, MiLossConfig, Scored, SckdConfig,
};
use crate::model::{backward, forward, normalized, stack_g, stack_logits, EncoderParams, Forward, Upstream};
use crate::numerics::{axpy, normalize_backward};

/// What a base loss hands back: its value, gradients flowing into each
/// forward pass, and gradients on parameters it touches directly.
struct BaseTerms {
    value: f64,
    upstream: Vec<Upstream>,
    direct: EncoderParams,
}

fn backprop(params: &EncoderParams, fwds: &[Forward], terms: BaseTerms) -> Scored<EncoderParams> {
    let mut grads = terms.direct;
    for (fwd, up) in fwds.iter().zip(&terms.upstream) {
        backward(params, fwd, up, &mut grads);
    }
    Scored { value: terms.value, grads }
}

fn mi_term(params: &EncoderParams, fwds: &[Forward], cfg: &MiLossConfig) -> Result<Scored<EncoderParams>> {
    let out = mi_loss(&stack_g(fwds)?, &stack_logits(fwds)?, &params.w_mi, cfg)?;
    let mut direct = params.zeros_like();
    direct.w_mi = out.d_w;
    let upstream = (0..fwds.len())
        .map(|i| Upstream {
            df: None,
            dg: Some(out.d_gphi.row(i).to_vec()),
            dlogits: Some(out.d_glm.row(i).to_vec()),
        })
        .collect();
    Ok(backprop(params, fwds, BaseTerms { value: out.value, upstream, direct }))
}

/// Forward the batch, build `L0`, and add `weight * L_MI` when requested.
fn compose(
    params: &EncoderParams,
    batch: &[Templated],
    use_prompts: bool,
    mi: Option<&MiLossConfig>,
    base: impl FnOnce(&[Forward]) -> Result<BaseTerms>,
) -> Result<Scored<EncoderParams>> {
    if batch.is_empty() {
        return Err(Error::shape("empty mini-batch"));
    }
    let fwds = batch.iter().map(|t| forward(params, t, use_prompts)).collect::<Result<Vec<_>>>()?;
    let l0 = backprop(params, &fwds, base(&fwds)?);
    match mi {
        Some(cfg) if cfg.weight != 0.0 => {
            let lmi = mi_term(params, &fwds, cfg)?;
            combine(l0, Some(&lmi), cfg.weight)
        }
        _ => combine(l0, None, 0.0),
    }
}

/// Frozen targets of the previous-task model for one batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct OldTarget {
    /// Unit-normalized encoder feature.
    pub feature: Vec<f64>,
    /// Classifier logits over the previously seen relations.
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SckdStep<'a> {
    /// Seen relations so far (classifier rows used).
    pub classes: usize,
    /// Number of relations seen before the current task.
    pub old_classes: usize,
    /// One entry per batch item when distilling.
    pub old: Option<&'a [OldTarget]>,
    pub cfg: &'a SckdConfig,
}

/// Linear classification on `g_phi`, plus feature and prediction
/// distillation against the previous model.
pub fn sckd_objective(
    params: &EncoderParams,
    batch: &[Templated],
    labels: &[usize],
    step: &SckdStep<'_>,
    mi: Option<&MiLossConfig>,
) -> Result<Scored<EncoderParams>> {
    check_labels(batch, labels)?;
    compose(params, batch, false, mi, |fwds| {
        let n = fwds.len() as f64;
        let mut direct = params.zeros_like();
        let mut value = 0.0;
        let mut dlogits = Vec::with_capacity(fwds.len());
        for (fwd, &y) in fwds.iter().zip(labels) {
            let l = ce_linear(&fwd.g, &params.cls_w, params.cls_b.as_slice(), step.classes, y)?;
            value += l.value / n;
            dlogits.push(l.d_logits.iter().map(|d| d / n).collect::<Vec<f64>>());
        }
        let mut upstream: Vec<Upstream> = vec![Upstream::default(); fwds.len()];
        if let Some(old) = step.old {
            if old.len() != fwds.len() {
                return Err(Error::shape("distillation targets do not match the batch"));
            }
            let mut units = Vec::with_capacity(fwds.len());
            for fwd in fwds {
                units.push(normalized(&fwd.f)?);
            }
            let new_feats: Vec<Vec<f64>> = units.iter().map(|(u, _)| u.clone()).collect();
            let old_feats: Vec<Vec<f64>> = old.iter().map(|o| o.feature.clone()).collect();
            let fd = loss_fd(&old_feats, &new_feats)?;
            value += step.cfg.w_fd * fd.value;
            for ((up, (u, nrm)), g) in upstream.iter_mut().zip(&units).zip(&fd.grads) {
                up.add_df(step.cfg.w_fd, &normalize_backward(u, *nrm, g));
            }
            if step.old_classes > 0 {
                let cols: Vec<usize> = (0..step.old_classes).collect();
                let new_logits: Vec<Vec<f64>> = fwds
                    .iter()
                    .map(|f| {
                        let mut l = params.cls_w.matvec_rows(&f.g, step.classes);
                        axpy(&mut l, 1.0, &params.cls_b.as_slice()[..step.classes]);
                        l
                    })
                    .collect();
                let old_logits: Vec<Vec<f64>> = old.iter().map(|o| o.logits.clone()).collect();
                let pd = loss_pd(&old_logits, &new_logits, &cols, step.cfg.pd_temperature)?;
                value += step.cfg.w_pd * pd.value;
                for (d, g) in dlogits.iter_mut().zip(&pd.grads) {
                    axpy(d, step.cfg.w_pd, g);
                }
            }
        }
        for ((fwd, d), up) in fwds.iter().zip(&dlogits).zip(upstream.iter_mut()) {
            direct.cls_w.add_outer(1.0, d, &fwd.g);
            axpy(&mut direct.cls_b.as_mut_slice()[..d.len()], 1.0, d);
            up.add_dg(1.0, &params.cls_w.matvec_t(d));
        }
        Ok(BaseTerms { value, upstream, direct })
    })
}

#[derive(Debug, Clone)]
pub struct ConplStep<'a> {
    /// Prototype per class index (constants).
    pub protos: &'a [Vec<f64>],
    /// Which batch items come from memory (these get the compactness term).
    pub from_memory: &'a [bool],
    /// Fixed similar-prototype sets; screened from the current features
    /// when absent.
    pub fc_sets: Option<&'a [Vec<usize>]>,
    pub cfg: &'a ConplConfig,
}

/// Prototype cross-entropy, memory compactness and focal screening.
pub fn conpl_objective(
    params: &EncoderParams,
    batch: &[Templated],
    labels: &[usize],
    step: &ConplStep<'_>,
    mi: Option<&MiLossConfig>,
) -> Result<Scored<EncoderParams>> {
    check_labels(batch, labels)?;
    if step.from_memory.len() != batch.len() {
        return Err(Error::shape("memory flags do not match the batch"));
    }
    compose(params, batch, false, mi, |fwds| {
        let n = fwds.len() as f64;
        let cfg = step.cfg;
        let mut value = 0.0;
        let mut upstream = Vec::with_capacity(fwds.len());
        for (i, (fwd, &y)) in fwds.iter().zip(labels).enumerate() {
            let mut up = Upstream::default();
            let ce = ce_proto(&fwd.g, step.protos, y)?;
            value += cfg.w_ce * ce.value / n;
            up.add_dg(cfg.w_ce / n, &ce.grad);
            let set = match step.fc_sets {
                Some(sets) => sets[i].clone(),
                None => similar_prototypes(&fwd.g, step.protos, y, cfg.alpha)?,
            };
            let fc = loss_fc_with_set(&fwd.g, step.protos, &set)?;
            value += cfg.w_fc * fc.value / n;
            up.add_dg(cfg.w_fc / n, &fc.grad);
            if step.from_memory[i] {
                let cc = loss_cc(std::slice::from_ref(&fwd.g), std::slice::from_ref(&step.protos[y]))?;
                value += cfg.w_cc * cc.value / n;
                up.add_dg(cfg.w_cc / n, &cc.grads[0]);
            }
            upstream.push(up);
        }
        Ok(BaseTerms { value, upstream, direct: params.zeros_like() })
    })
}

/// Memory-enhanced distribution-consistency step.
pub fn conpl_dc_objective(
    params: &EncoderParams,
    batch: &[Templated],
    labels: &[usize],
    protos: &[Vec<f64>],
    cfg: &ConplConfig,
    mi: Option<&MiLossConfig>,
) -> Result<Scored<EncoderParams>> {
    check_labels(batch, labels)?;
    compose(params, batch, false, mi, |fwds| {
        let n = fwds.len() as f64;
        let feats: Vec<Vec<f64>> = fwds.iter().map(|f| f.g.clone()).collect();
        let dc = loss_dc(&feats, labels, protos)?;
        let upstream = dc
            .grads
            .iter()
            .map(|g| {
                let mut up = Upstream::default();
                up.add_dg(cfg.w_dc / n, g);
                up
            })
            .collect();
        Ok(BaseTerms { value: cfg.w_dc * dc.value / n, upstream, direct: params.zeros_like() })
    })
}

#[derive(Debug, Clone)]
pub struct CplStep<'a> {
    /// Detached `(feature, class)` pairs that extend every anchor's
    /// positives and negatives.
    pub bank: &'a [(Vec<f64>, usize)],
    /// Per batch item, a bank entry to leave out (the item's own detached
    /// copy during replay). Empty when nothing is skipped.
    pub skip: &'a [Option<usize>],
    pub cfg: &'a CplConfig,
}

/// Margin-based contrastive loss over the batch (plus bank), averaged over
/// anchors. Anchors with no positive contribute nothing.
pub fn cpl_objective(
    params: &EncoderParams,
    batch: &[Templated],
    labels: &[usize],
    step: &CplStep<'_>,
    mi: Option<&MiLossConfig>,
) -> Result<Scored<EncoderParams>> {
    check_labels(batch, labels)?;
    compose(params, batch, true, mi, |fwds| {
        let n = fwds.len() as f64;
        let mut value = 0.0;
        let mut upstream: Vec<Upstream> = vec![Upstream::default(); fwds.len()];
        for (a, fwd) in fwds.iter().enumerate() {
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            let (mut pos_idx, mut neg_idx) = (Vec::new(), Vec::new());
            for (b, other) in fwds.iter().enumerate() {
                if b == a {
                    continue;
                }
                if labels[b] == labels[a] {
                    pos.push(other.g.clone());
                    pos_idx.push(Some(b));
                } else {
                    neg.push(other.g.clone());
                    neg_idx.push(Some(b));
                }
            }
            let own = step.skip.get(a).copied().flatten();
            for (k, (feat, y)) in step.bank.iter().enumerate() {
                if own == Some(k) {
                    continue;
                }
                if *y == labels[a] {
                    pos.push(feat.clone());
                    pos_idx.push(None);
                } else {
                    neg.push(feat.clone());
                    neg_idx.push(None);
                }
            }
            if pos.is_empty() {
                continue;
            }
            let l = mcl(&fwd.g, &pos, &neg, step.cfg)?;
            value += l.value / n;
            upstream[a].add_dg(1.0 / n, &l.d_anchor);
            for (idx, g) in pos_idx.iter().zip(&l.d_pos).chain(neg_idx.iter().zip(&l.d_neg)) {
                if let Some(b) = idx {
                    upstream[*b].add_dg(1.0 / n, g);
                }
            }
        }
        Ok(BaseTerms { value, upstream, direct: params.zeros_like() })
    })
}

fn check_labels(batch: &[Templated], labels: &[usize]) -> Result<()> {
    if batch.len() != labels.len() {
        return Err(Error::shape(format!("{} inputs with {} labels", batch.len(), labels.len())));
    }
    Ok(())
}
