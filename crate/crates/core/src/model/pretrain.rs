//! Masked-token pretraining of the embeddings, encoder and LM head.

use serde::{Deserialize, Serialize};

use super::forward::{backward, encode, lm_head, Forward, Upstream};
use super::params::{adam_for, adam_update, EncoderParams, FreezeMask};
use crate::data::vocab::{FIRST_CONTENT_ID, MASK};
use crate::data::{Instance, Templated};
use crate::error::{Error, Result};
use crate::losses::softmax_xent;
use crate::numerics::{AdamConfig, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_mask_prob() -> f64 {
    0.15
}

fn default_batch() -> usize {
    16
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 20, lr: 1e-2, mask_prob: 0.15, batch_size: 16 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(Error::config(format!("mask_prob {} outside (0, 1]", self.mask_prob)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("pretraining needs at least one epoch and a positive batch size"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("pretraining learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of masked positions predicted correctly before each update.
    pub accuracy: f64,
    pub examples: usize,
}

/// One masked-token example: the sentence with `position` replaced by
/// `[MASK]`, predicting `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub input: Templated,
    pub target: usize,
}

pub fn mask_example(inst: &Instance, position: usize) -> MaskedExample {
    let mut input = Templated::plain(inst, position);
    let target = input.ids[position] as usize;
    input.ids[position] = MASK;
    MaskedExample { input, target }
}

/// Cross-entropy of the LM head at the masked position, with gradients
/// accumulated into `grads`. Returns (loss, predicted token).
pub fn mlm_loss(params: &EncoderParams, ex: &MaskedExample, grads: &mut EncoderParams) -> Result<(f64, usize)> {
    let enc = encode(params, &ex.input, false)?;
    let logits = lm_head(params, &enc.f);
    let x = softmax_xent(&logits, ex.target)?;
    let predicted = argmax(&logits);
    let fwd = Forward { f: enc.f, g: Vec::new(), z_norm: 1.0, logits, cache: enc.cache };
    let up = Upstream { dlogits: Some(x.grad), ..Upstream::default() };
    backward(params, &fwd, &up, grads);
    Ok((x.value, predicted))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn epoch_examples(corpus: &[Instance], mask_prob: f64, rng: &mut Rng) -> Vec<MaskedExample> {
    let mut out = Vec::new();
    for inst in corpus {
        for (pos, tok) in inst.tokens().iter().enumerate() {
            if *tok >= FIRST_CONTENT_ID && rng.bernoulli(mask_prob) {
                out.push(mask_example(inst, pos));
            }
        }
    }
    rng.shuffle(&mut out);
    out
}

/// Train `params` in place; returns one entry per epoch.
pub fn pretrain_mlm(
    params: &mut EncoderParams,
    corpus: &[Instance],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<EpochStat>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::config("pretraining corpus is empty"));
    }
    let mut rng = Rng::new(seed).fork("pretrain");
    let mask = FreezeMask { classifier_head: true, mi_critic: true, ..FreezeMask::none() };
    let mut adam = adam_for(params, AdamConfig::with_lr(cfg.lr));
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let examples = epoch_examples(corpus, cfg.mask_prob, &mut rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in examples.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            for ex in batch {
                let (loss, pred) = mlm_loss(params, ex, &mut grads)?;
                total += loss;
                correct += usize::from(pred == ex.target);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam_update(&mut adam, params, &grads, &mask)?;
        }
        if !params.is_finite() {
            return Err(Error::Numeric(format!("pretraining diverged in epoch {epoch}")));
        }
        let n = examples.len().max(1) as f64;
        curve.push(EpochStat { epoch, loss: total / n, accuracy: correct as f64 / n, examples: examples.len() });
    }
    Ok(curve)
}
