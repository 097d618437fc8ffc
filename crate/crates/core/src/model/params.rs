use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub feature: usize,
    pub phi: usize,
    #[serde(default = "default_prompts")]
    pub prompts: usize,
    /// Row capacity of the linear relation classifier.
    #[serde(default)]
    pub relations: usize,
}

fn default_prompts() -> usize {
    4
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 7 {
            return Err(Error::config(format!("vocabulary of {} is below the minimum of 7", self.vocab)));
        }
        for (name, v) in [
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("feature", self.feature),
            ("phi", self.phi),
        ] {
            if v < 2 {
                return Err(Error::config(format!("{name} dimension must be at least 2, got {v}")));
            }
        }
        if self.prompts == 0 {
            return Err(Error::config("prompt count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embeddings,
    Encoder,
    ClassifierHead,
    LmHead,
    MiCritic,
}

/// Every trainable tensor of the dual-branch encoder. The same struct doubles
/// as a gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub dims: ModelDims,
    /// `|V| x d_e`
    pub emb: Matrix,
    /// `n_p x d_e` learnable prompt vectors.
    pub prompts: Matrix,
    /// `d_h x 3 d_e`
    pub w1: Matrix,
    pub b1: Matrix,
    /// `d x d_h`
    pub w2: Matrix,
    pub b2: Matrix,
    /// `d_phi x d`
    pub p_phi: Matrix,
    pub b_phi: Matrix,
    /// `|V| x d`
    pub w_lm: Matrix,
    pub b_lm: Matrix,
    /// `d_phi x |V|` bilinear MI critic.
    pub w_mi: Matrix,
    /// `relations x d_phi` linear relation classifier.
    pub cls_w: Matrix,
    pub cls_b: Matrix,
}

pub const TENSOR_COUNT: usize = 13;

impl EncoderParams {
    pub fn zeros(dims: ModelDims) -> Self {
        EncoderParams {
            dims,
            emb: Matrix::zeros(dims.vocab, dims.embed),
            prompts: Matrix::zeros(dims.prompts, dims.embed),
            w1: Matrix::zeros(dims.hidden, 3 * dims.embed),
            b1: Matrix::zeros(dims.hidden, 1),
            w2: Matrix::zeros(dims.feature, dims.hidden),
            b2: Matrix::zeros(dims.feature, 1),
            p_phi: Matrix::zeros(dims.phi, dims.feature),
            b_phi: Matrix::zeros(dims.phi, 1),
            w_lm: Matrix::zeros(dims.vocab, dims.feature),
            b_lm: Matrix::zeros(dims.vocab, 1),
            w_mi: Matrix::zeros(dims.phi, dims.vocab),
            cls_w: Matrix::zeros(dims.relations, dims.phi),
            cls_b: Matrix::zeros(dims.relations, 1),
        }
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)`; biases start at zero.
    pub fn init(dims: ModelDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let mut p = EncoderParams::zeros(dims);
        let mut fill = |m: &mut Matrix, scale: f64| {
            for x in m.as_mut_slice() {
                *x = scale * rng.normal();
            }
        };
        fill(&mut p.emb, 1.0);
        fill(&mut p.prompts, 1.0);
        fill(&mut p.w1, 1.0 / ((3 * dims.embed) as f64).sqrt());
        fill(&mut p.w2, 1.0 / (dims.hidden as f64).sqrt());
        fill(&mut p.p_phi, 1.0 / (dims.feature as f64).sqrt());
        fill(&mut p.w_lm, 1.0 / (dims.feature as f64).sqrt());
        fill(&mut p.w_mi, 0.1 / (dims.vocab as f64).sqrt());
        fill(&mut p.cls_w, 0.1 / (dims.phi as f64).sqrt());
        // Non-zero projection bias keeps the normalised feature away from the origin.
        fill(&mut p.b_phi, 0.1);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams::zeros(self.dims)
    }

    pub fn tensors(&self) -> [(&'static str, ParamGroup, &Matrix); TENSOR_COUNT] {
        use ParamGroup::*;
        [
            ("emb", Embeddings, &self.emb),
            ("prompts", Embeddings, &self.prompts),
            ("w1", Encoder, &self.w1),
            ("b1", Encoder, &self.b1),
            ("w2", Encoder, &self.w2),
            ("b2", Encoder, &self.b2),
            ("p_phi", ClassifierHead, &self.p_phi),
            ("b_phi", ClassifierHead, &self.b_phi),
            ("cls_w", ClassifierHead, &self.cls_w),
            ("cls_b", ClassifierHead, &self.cls_b),
            ("w_lm", LmHead, &self.w_lm),
            ("b_lm", LmHead, &self.b_lm),
            ("w_mi", MiCritic, &self.w_mi),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, ParamGroup, &mut Matrix); TENSOR_COUNT] {
        use ParamGroup::*;
        [
            ("emb", Embeddings, &mut self.emb),
            ("prompts", Embeddings, &mut self.prompts),
            ("w1", Encoder, &mut self.w1),
            ("b1", Encoder, &mut self.b1),
            ("w2", Encoder, &mut self.w2),
            ("b2", Encoder, &mut self.b2),
            ("p_phi", ClassifierHead, &mut self.p_phi),
            ("b_phi", ClassifierHead, &mut self.b_phi),
            ("cls_w", ClassifierHead, &mut self.cls_w),
            ("cls_b", ClassifierHead, &mut self.cls_b),
            ("w_lm", LmHead, &mut self.w_lm),
            ("b_lm", LmHead, &mut self.b_lm),
            ("w_mi", MiCritic, &mut self.w_mi),
        ]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|(_, _, m)| m.shape()).collect()
    }

    pub fn group(&self, group: ParamGroup) -> Vec<&Matrix> {
        self.tensors().into_iter().filter(|(_, g, _)| *g == group).map(|(_, _, m)| m).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, m)| m.is_finite())
    }

    /// Flat view over all tensors in `tensors()` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, _, m)| m.as_slice().iter().copied()).collect()
    }

    /// Mutable access to the scalar at flat index `idx`.
    pub fn flat_mut(&mut self, mut idx: usize) -> &mut f64 {
        for (_, _, m) in self.tensors_mut() {
            if idx < m.len() {
                return &mut m.as_mut_slice()[idx];
            }
            idx -= m.len();
        }
        panic!("flat index out of range");
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &EncoderParams) -> Result<()> {
        for ((_, _, a), (_, _, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, _, m) in self.tensors_mut() {
            m.scale(alpha);
        }
    }

    pub fn clear(&mut self) {
        for (_, _, m) in self.tensors_mut() {
            m.fill(0.0);
        }
    }
}

/// Per-group trainability switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeMask {
    #[serde(default)]
    pub embeddings: bool,
    #[serde(default)]
    pub encoder: bool,
    #[serde(default)]
    pub classifier_head: bool,
    #[serde(default)]
    pub lm_head: bool,
    #[serde(default)]
    pub mi_critic: bool,
}

impl FreezeMask {
    pub fn none() -> Self {
        FreezeMask::default()
    }

    pub fn lm_head_only() -> Self {
        FreezeMask { lm_head: true, ..FreezeMask::default() }
    }

    pub fn is_frozen(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Embeddings => self.embeddings,
            ParamGroup::Encoder => self.encoder,
            ParamGroup::ClassifierHead => self.classifier_head,
            ParamGroup::LmHead => self.lm_head,
            ParamGroup::MiCritic => self.mi_critic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embeddings && self.encoder && self.classifier_head && self.lm_head && self.mi_critic {
            return Err(Error::config("every parameter group is frozen"));
        }
        Ok(())
    }

    /// Trainability flag per tensor, in `EncoderParams::tensors()` order.
    pub fn active_flags(&self, params: &EncoderParams) -> Vec<bool> {
        params.tensors().iter().map(|(_, g, _)| !self.is_frozen(*g)).collect()
    }
}

/// Zero the gradients of every frozen group.
pub fn apply_freeze(mask: &FreezeMask, grads: &mut EncoderParams) -> Result<()> {
    mask.validate()?;
    for (_, g, m) in grads.tensors_mut() {
        if mask.is_frozen(g) {
            m.fill(0.0);
        }
    }
    Ok(())
}

/// Fresh Adam moments for every tensor of `params`.
pub fn adam_for(params: &EncoderParams, config: AdamConfig) -> AdamState {
    AdamState::new(config, params.shapes())
}

/// One Adam update of `params`; tensors of frozen groups are skipped.
pub fn adam_update(
    adam: &mut AdamState,
    params: &mut EncoderParams,
    grads: &EncoderParams,
    mask: &FreezeMask,
) -> Result<()> {
    mask.validate()?;
    let active = mask.active_flags(params);
    let grads: Vec<&Matrix> = grads.tensors().into_iter().map(|(_, _, m)| m).collect();
    let mut tensors: Vec<&mut Matrix> = params.tensors_mut().into_iter().map(|(_, _, m)| m).collect();
    adam.step(&mut tensors, &grads, Some(&active))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn dims() -> ModelDims {
        ModelDims { vocab: 15, embed: 3, hidden: 4, feature: 3, phi: 2, prompts: 2, relations: 3 }
    }

    #[test]
    fn init_is_finite_and_deterministic() {
        let a = EncoderParams::init(dims(), &mut Rng::new(1)).unwrap();
        let b = EncoderParams::init(dims(), &mut Rng::new(1)).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, b);
        assert_eq!(a.flatten().len(), a.parameter_count());
    }

    #[test]
    fn rejects_small_dims() {
        let d = ModelDims { embed: 1, ..dims() };
        assert!(EncoderParams::init(d, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn freeze_zeroes_only_frozen_groups() {
        let mut g = EncoderParams::init(dims(), &mut Rng::new(2)).unwrap();
        let before = g.clone();
        apply_freeze(&FreezeMask::none(), &mut g).unwrap();
        assert_eq!(g, before);
        apply_freeze(&FreezeMask::lm_head_only(), &mut g).unwrap();
        assert!(g.w_lm.as_slice().iter().all(|x| *x == 0.0));
        assert!(g.b_lm.as_slice().iter().all(|x| *x == 0.0));
        assert_eq!(g.emb, before.emb);
        let all = FreezeMask { embeddings: true, encoder: true, classifier_head: true, lm_head: true, mi_critic: true };
        assert!(matches!(apply_freeze(&all, &mut g), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_groups_survive_adam_bit_exactly() {
        let mut rng = Rng::new(5);
        let mut p = EncoderParams::init(dims(), &mut rng).unwrap();
        let before = p.clone();
        let mut adam = adam_for(&p, AdamConfig::with_lr(0.1));
        let mask = FreezeMask { embeddings: true, lm_head: true, ..FreezeMask::none() };
        for _ in 0..5 {
            let mut g = p.zeros_like();
            for x in 0..g.parameter_count() {
                *g.flat_mut(x) = rng.normal();
            }
            adam_update(&mut adam, &mut p, &g, &mask).unwrap();
        }
        assert_eq!(p.emb, before.emb);
        assert_eq!(p.prompts, before.prompts);
        assert_eq!(p.w_lm, before.w_lm);
        assert_eq!(p.b_lm, before.b_lm);
        assert_ne!(p.w1, before.w1);
    }

    #[test]
    fn flat_indexing_walks_tensors_in_order() {
        let mut p = EncoderParams::zeros(dims());
        let n = p.parameter_count();
        *p.flat_mut(n - 1) = 5.0;
        assert_eq!(*p.w_mi.as_slice().last().unwrap(), 5.0);
        *p.flat_mut(0) = 1.0;
        assert_eq!(p.emb[(0, 0)], 1.0);
    }
}
