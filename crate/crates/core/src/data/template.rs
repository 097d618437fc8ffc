//! Prompt templates that turn an [`Instance`] into the sequence the encoder
//! consumes, along with entity spans in the templated coordinates.

use serde::{Deserialize, Serialize};

use super::instance::{Instance, Span};
use super::vocab::{TokenId, AND, BETWEEN, CLS, IS, MASK, RELATION, SEP, THE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMode {
    /// `[CLS] head [MASK] tail [SEP] sentence [SEP]`, pooled at `[MASK]`.
    #[default]
    Mask,
    /// `sentence the relation between head and tail is`, pooled at `is`.
    Autoregressive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templated {
    pub ids: Vec<TokenId>,
    pub head: Span,
    pub tail: Span,
    pub pooled: usize,
    /// Positions holding scaffold tokens, in sequence order. Prompt-tuned
    /// encoders may substitute learnable vectors at these positions.
    pub scaffold: Vec<usize>,
}

impl Templated {
    /// Raw sentence with no scaffold, pooled at `pooled`.
    pub fn plain(inst: &Instance, pooled: usize) -> Templated {
        Templated {
            ids: inst.tokens().to_vec(),
            head: inst.head(),
            tail: inst.tail(),
            pooled,
            scaffold: Vec::new(),
        }
    }
}

pub fn apply(mode: TemplateMode, inst: &Instance) -> Templated {
    match mode {
        TemplateMode::Mask => template_mask(inst),
        TemplateMode::Autoregressive => template_ar(inst),
    }
}

pub fn template_mask(inst: &Instance) -> Templated {
    let h = inst.head_tokens();
    let t = inst.tail_tokens();
    let mut ids = Vec::with_capacity(inst.tokens().len() + h.len() + t.len() + 4);
    let mut scaffold = vec![0];
    ids.push(CLS);
    let head = Span::new(ids.len(), ids.len() + h.len());
    ids.extend_from_slice(h);
    let pooled = ids.len();
    ids.push(MASK);
    let tail = Span::new(ids.len(), ids.len() + t.len());
    ids.extend_from_slice(t);
    scaffold.push(ids.len());
    ids.push(SEP);
    ids.extend_from_slice(inst.tokens());
    scaffold.push(ids.len());
    ids.push(SEP);
    Templated { ids, head, tail, pooled, scaffold }
}

pub fn template_ar(inst: &Instance) -> Templated {
    let h = inst.head_tokens();
    let t = inst.tail_tokens();
    let mut ids = inst.tokens().to_vec();
    let mut scaffold = Vec::with_capacity(5);
    let mut push_scaffold = |ids: &mut Vec<TokenId>, tok| {
        scaffold.push(ids.len());
        ids.push(tok);
    };
    push_scaffold(&mut ids, THE);
    push_scaffold(&mut ids, RELATION);
    push_scaffold(&mut ids, BETWEEN);
    let head = Span::new(ids.len(), ids.len() + h.len());
    ids.extend_from_slice(h);
    push_scaffold(&mut ids, AND);
    let tail = Span::new(ids.len(), ids.len() + t.len());
    ids.extend_from_slice(t);
    push_scaffold(&mut ids, IS);
    let pooled = ids.len() - 1;
    Templated { ids, head, tail, pooled, scaffold }
}
