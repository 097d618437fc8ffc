use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::vocab::TokenId;
use crate::error::{Error, Result};

/// Index into a relation registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl std::fmt::Display for RelationId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// One labelled sentence with its head and tail entity spans.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Instance {
    tokens: Vec<TokenId>,
    head: Span,
    tail: Span,
    relation: RelationId,
}

impl Instance {
    pub fn new(tokens: Vec<TokenId>, head: Span, tail: Span, relation: RelationId) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::config("instance has no tokens"));
        }
        for (name, s) in [("head", head), ("tail", tail)] {
            if s.is_empty() {
                return Err(Error::config(format!("{name} span {s:?} is empty")));
            }
            if s.end > tokens.len() {
                return Err(Error::config(format!(
                    "{name} span {s:?} exceeds sentence length {}",
                    tokens.len()
                )));
            }
        }
        if head.overlaps(&tail) {
            return Err(Error::config(format!("head {head:?} overlaps tail {tail:?}")));
        }
        Ok(Instance { tokens, head, tail, relation })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn head(&self) -> Span {
        self.head
    }

    pub fn tail(&self) -> Span {
        self.tail
    }

    pub fn relation(&self) -> RelationId {
        self.relation
    }

    pub fn head_tokens(&self) -> &[TokenId] {
        &self.tokens[self.head.positions()]
    }

    pub fn tail_tokens(&self) -> &[TokenId] {
        &self.tokens[self.tail.positions()]
    }

    /// Copy with the head and/or tail entity tokens replaced, spans recomputed.
    pub fn with_entities(&self, head: Option<&[TokenId]>, tail: Option<&[TokenId]>) -> Instance {
        let head_tokens = head.unwrap_or(self.head_tokens());
        let tail_tokens = tail.unwrap_or(self.tail_tokens());
        let (first, second, head_first) = if self.head.start < self.tail.start {
            (self.head, self.tail, true)
        } else {
            (self.tail, self.head, false)
        };
        let (first_new, second_new) =
            if head_first { (head_tokens, tail_tokens) } else { (tail_tokens, head_tokens) };

        let mut tokens = Vec::with_capacity(self.tokens.len() + head_tokens.len() + tail_tokens.len());
        tokens.extend_from_slice(&self.tokens[..first.start]);
        let a = Span::new(tokens.len(), tokens.len() + first_new.len());
        tokens.extend_from_slice(first_new);
        tokens.extend_from_slice(&self.tokens[first.end..second.start]);
        let b = Span::new(tokens.len(), tokens.len() + second_new.len());
        tokens.extend_from_slice(second_new);
        tokens.extend_from_slice(&self.tokens[second.end..]);
        let (h, t) = if head_first { (a, b) } else { (b, a) };
        Instance { tokens, head: h, tail: t, relation: self.relation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub relations: Vec<RelationId>,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
}

/// Ordered task sequence plus the global relation name registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub relation_names: Vec<String>,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    /// Relations seen after task `t` (1-based), in arrival order.
    pub fn seen_after(&self, t: usize) -> Vec<RelationId> {
        self.tasks.iter().take(t).flat_map(|task| task.relations.iter().copied()).collect()
    }

    pub fn relation_count(&self) -> usize {
        self.relation_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for task in &self.tasks {
            let rels: BTreeSet<_> = task.relations.iter().copied().collect();
            if rels.len() != task.relations.len() {
                return Err(Error::Protocol(format!("task {} repeats a relation", task.id)));
            }
            for r in &rels {
                if r.0 as usize >= self.relation_names.len() {
                    return Err(Error::Protocol(format!("task {} uses unknown relation {r}", task.id)));
                }
                if !seen.insert(*r) {
                    return Err(Error::Protocol(format!(
                        "relation {r} of task {} already appeared in an earlier task",
                        task.id
                    )));
                }
            }
            for inst in task.train.iter().chain(&task.test) {
                if !rels.contains(&inst.relation()) {
                    return Err(Error::Protocol(format!(
                        "task {} contains an instance labelled {} outside its relation set",
                        task.id,
                        inst.relation()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn group_by_relation(instances: &[Instance]) -> BTreeMap<RelationId, Vec<Instance>> {
    let mut by: BTreeMap<RelationId, Vec<Instance>> = BTreeMap::new();
    for inst in instances {
        by.entry(inst.relation()).or_default().push(inst.clone());
    }
    by
}
