//! Episodic memory: prototypes, typical-sample selection and entity-swap
//! augmentation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{Instance, RelationId, TokenId};
use crate::error::{Error, Result};
use crate::numerics::{cosine, mean_of, norm, squared_distance, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub vector: Vec<f64>,
    /// Task index that last wrote this entry.
    pub task: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeMemory {
    entries: BTreeMap<RelationId, Prototype>,
}

impl PrototypeMemory {
    pub fn new() -> Self {
        PrototypeMemory::default()
    }

    pub fn insert(&mut self, relation: RelationId, vector: Vec<f64>, task: usize) -> Result<()> {
        if !vector.iter().all(|x| x.is_finite()) || norm(&vector) == 0.0 {
            return Err(Error::Degenerate(format!("prototype for {relation} is zero or non-finite")));
        }
        self.entries.insert(relation, Prototype { vector, task });
        Ok(())
    }

    pub fn get(&self, relation: RelationId) -> Option<&Prototype> {
        self.entries.get(&relation)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (RelationId, &Prototype)> {
        self.entries.iter().map(|(r, p)| (*r, p))
    }

    /// Prototype vectors in the order of `relations`.
    pub fn vectors_for(&self, relations: &[RelationId]) -> Result<Vec<Vec<f64>>> {
        relations
            .iter()
            .map(|r| {
                self.get(*r)
                    .map(|p| p.vector.clone())
                    .ok_or_else(|| Error::Protocol(format!("no prototype stored for {r}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMemory {
    entries: BTreeMap<RelationId, Vec<Instance>>,
}

impl SampleMemory {
    pub fn new() -> Self {
        SampleMemory::default()
    }

    pub fn store(&mut self, relation: RelationId, samples: Vec<Instance>) -> Result<()> {
        if let Some(bad) = samples.iter().find(|s| s.relation() != relation) {
            return Err(Error::Protocol(format!("{} sample stored under {relation}", bad.relation())));
        }
        self.entries.insert(relation, samples);
        Ok(())
    }

    pub fn get(&self, relation: RelationId) -> &[Instance] {
        self.entries.get(&relation).map_or(&[], Vec::as_slice)
    }

    pub fn relations(&self) -> Vec<RelationId> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All stored instances, relation-ordered.
    pub fn all(&self) -> Vec<Instance> {
        self.entries.values().flatten().cloned().collect()
    }
}

/// Mean of the given features.
pub fn compute_prototype(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let p = mean_of(features).ok_or_else(|| Error::config("prototype of an empty instance list"))?;
    if norm(&p) == 0.0 {
        return Err(Error::Degenerate("prototype has zero norm".into()));
    }
    Ok(p)
}

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-6;

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = squared_distance(point, center);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn kmeans_pp_init(features: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![features[rng.below(features.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> =
            features.iter().map(|x| squared_distance(x, &centers[nearest(x, &centers)])).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut chosen = d2.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(features.len())
        };
        centers.push(features[pick].clone());
    }
    centers
}

/// k-means centroids and assignments (k-means++ init, Lloyd iterations).
pub fn kmeans(features: &[Vec<f64>], k: usize, rng: &mut Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut centers = kmeans_pp_init(features, k, rng);
    let mut assign = vec![0; features.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        for (a, x) in assign.iter_mut().zip(features) {
            *a = nearest(x, &centers);
        }
        let mut moved: f64 = 0.0;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<Vec<f64>> =
                features.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(x, _)| x.clone()).collect();
            // An empty cluster keeps its previous centroid.
            if let Some(m) = mean_of(&members) {
                moved = moved.max(squared_distance(center, &m).sqrt());
                *center = m;
            }
        }
        if moved < KMEANS_TOL {
            break;
        }
    }
    for (a, x) in assign.iter_mut().zip(features) {
        *a = nearest(x, &centers);
    }
    (centers, assign)
}

/// Indices of `l` typical instances: per k-means cluster, the member
/// nearest its centroid. Returns every index when fewer than `l` exist.
pub fn select_typical(features: &[Vec<f64>], l: usize, rng: &mut Rng) -> Vec<usize> {
    if features.len() <= l {
        return (0..features.len()).collect();
    }
    if l == 0 {
        return Vec::new();
    }
    let (centers, assign) = kmeans(features, l, rng);
    let mut picked = Vec::with_capacity(l);
    for (c, center) in centers.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (i, x) in features.iter().enumerate() {
            if assign[i] != c || picked.contains(&i) {
                continue;
            }
            let d = squared_distance(x, center);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            picked.push(i);
        }
    }
    // Empty clusters leave a gap; fill from the instances nearest any centroid.
    if picked.len() < l {
        let mut rest: Vec<(usize, f64)> = (0..features.len())
            .filter(|i| !picked.contains(i))
            .map(|i| (i, squared_distance(&features[i], &centers[nearest(&features[i], &centers)])))
            .collect();
        rest.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        picked.extend(rest.iter().take(l - picked.len()).map(|(i, _)| *i));
    }
    picked.sort_unstable();
    picked
}

fn entity_repr(emb: &Matrix, tokens: &[TokenId]) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = tokens.iter().map(|t| emb.row(*t as usize).to_vec()).collect();
    mean_of(&rows).unwrap_or_else(|| vec![0.0; emb.cols()])
}

/// Originals plus bidirectional entity swaps for every pair of distinct
/// entities whose embedding cosine exceeds `tau_sim`, deduplicated.
pub fn entity_swap_augment(instances: &[Instance], emb: &Matrix, tau_sim: f64) -> Vec<Instance> {
    let mut entities: Vec<Vec<TokenId>> = Vec::new();
    for inst in instances {
        for e in [inst.head_tokens(), inst.tail_tokens()] {
            if !entities.iter().any(|x| x == e) {
                entities.push(e.to_vec());
            }
        }
    }
    let reprs: Vec<Vec<f64>> = entities.iter().map(|e| entity_repr(emb, e)).collect();

    let mut seen: BTreeSet<(Vec<TokenId>, usize, usize, usize, usize, u32)> = BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |inst: Instance, out: &mut Vec<Instance>| {
        let key = (
            inst.tokens().to_vec(),
            inst.head().start,
            inst.head().end,
            inst.tail().start,
            inst.tail().end,
            inst.relation().0,
        );
        if seen.insert(key) {
            out.push(inst);
        }
    };
    for inst in instances {
        push(inst.clone(), &mut out);
    }
    for a in 0..entities.len() {
        for b in a + 1..entities.len() {
            let sim = match cosine(&reprs[a], &reprs[b]) {
                Ok(s) => s,
                Err(_) => continue,
            };
            if sim <= tau_sim {
                continue;
            }
            for (from, to) in [(&entities[a], &entities[b]), (&entities[b], &entities[a])] {
                for inst in instances {
                    let head = (inst.head_tokens() == from.as_slice()).then_some(to.as_slice());
                    let tail = (inst.tail_tokens() == from.as_slice()).then_some(to.as_slice());
                    if head.is_some() || tail.is_some() {
                        push(inst.with_entities(head, tail), &mut out);
                    }
                }
            }
        }
    }
    out
}

/// Recompute each relation's prototype as the mean current feature of its
/// stored samples.
pub fn refresh_prototypes(
    memory: &SampleMemory,
    task: usize,
    mut featurize: impl FnMut(&Instance) -> Result<Vec<f64>>,
) -> Result<PrototypeMemory> {
    let mut protos = PrototypeMemory::new();
    for r in memory.relations() {
        let feats = memory.get(r).iter().map(&mut featurize).collect::<Result<Vec<_>>>()?;
        protos.insert(r, compute_prototype(&feats)?, task)?;
    }
    Ok(protos)
}
